import random
import threading

import pytest

from deskcaf.distribution import (
    ArtifactStore,
    CacheProxy,
    IntegrityMismatch,
    InvalidManifest,
    Manifest,
    ManifestEntry,
    NotInNamespace,
    OriginUnreachable,
    content_id,
    mount,
)


def make_store(blobs):
    store = ArtifactStore()
    ids = [store.put(b) for b in blobs]
    return store, ids


class TestCache:
    def test_miss_then_hit(self):
        store, (aid,) = make_store([b"payload"])
        cache = CacheProxy(store, capacity_bytes=1024)
        assert cache.get(aid) == (b"payload", "MISS")
        assert cache.get(aid) == (b"payload", "HIT")
        assert cache.stats() == {"hits": 1, "misses": 1, "origin_fetches": 1, "bytes_served": 14}

    def test_absent_artifact(self):
        store = ArtifactStore()
        cache = CacheProxy(store, 1024)
        with pytest.raises(OriginUnreachable):
            cache.get("0" * 64)

    def test_lru_eviction_arithmetic(self):
        store, (a, b) = make_store([b"x" * 60, b"y" * 60])
        cache = CacheProxy(store, capacity_bytes=100)
        cache.get(a)
        cache.get(b)  # evicts a
        assert cache.resident_ids() == [b]
        _, source = cache.get(a)
        assert source == "MISS"
        assert cache.stats()["origin_fetches"] == 3

    def test_recency_refresh_on_hit(self):
        store, (a, b, c) = make_store([b"1" * 40, b"2" * 40, b"3" * 40])
        cache = CacheProxy(store, capacity_bytes=100)
        cache.get(a)
        cache.get(b)
        cache.get(a)  # refresh a; b is now LRU
        cache.get(c)  # evicts b
        assert cache.resident_ids() == [a, c]

    def test_oversized_blob_served_uncached(self):
        store, (aid,) = make_store([b"z" * 200])
        cache = CacheProxy(store, capacity_bytes=100)
        data, source = cache.get(aid)
        assert (len(data), source) == (200, "MISS")
        assert cache.resident_bytes == 0

    def test_poisoned_origin_not_cached(self):
        class EvilOrigin:
            def get(self, aid):
                return b"not the right bytes"

        cache = CacheProxy(EvilOrigin(), 1024)
        target = content_id(b"real")
        with pytest.raises(IntegrityMismatch):
            cache.get(target)
        assert cache.resident_ids() == []
        assert cache.stats()["origin_fetches"] == 1

    def test_single_flight_under_concurrency(self):
        barrier = threading.Barrier(10)

        class SlowOrigin:
            def __init__(self, store):
                self.store = store
                self.calls = 0
                self._lock = threading.Lock()

            def get(self, aid):
                with self._lock:
                    self.calls += 1
                import time

                time.sleep(0.05)
                return self.store.get(aid)

        store, (aid,) = make_store([b"shared blob"])
        origin = SlowOrigin(store)
        cache = CacheProxy(origin, 1024)
        results = []

        def worker():
            barrier.wait()
            results.append(cache.get(aid))

        threads = [threading.Thread(target=worker) for _ in range(10)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert origin.calls == 1
        assert cache.stats()["origin_fetches"] == 1
        assert all(data == b"shared blob" for data, _ in results)
        counters = cache.stats()
        assert counters["hits"] + counters["misses"] == 10

    def test_chained_proxies(self):
        store, (aid,) = make_store([b"deep"])
        site = CacheProxy(store, 1024, name="site")
        worker = CacheProxy(site, 1024, name="worker")
        assert worker.get(aid) == (b"deep", "MISS")
        assert worker.get(aid) == (b"deep", "HIT")
        assert site.stats()["origin_fetches"] == 1


class ReferenceLRU:
    """Plain ordered-list LRU used as the oracle."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.items = []  # (aid, size), oldest first

    def access(self, aid, size):
        for i, (resident, _) in enumerate(self.items):
            if resident == aid:
                self.items.append(self.items.pop(i))
                return "HIT"
        if size <= self.capacity:
            while sum(s for _, s in self.items) + size > self.capacity:
                self.items.pop(0)
            self.items.append((aid, size))
        return "MISS"


def test_lru_trace_oracle_1000_ops():
    rng = random.Random(991)
    blobs = {f"blob-{i}": bytes([i]) * rng.randint(10, 50) for i in range(20)}
    store = ArtifactStore()
    ids = {name: store.put(data) for name, data in blobs.items()}
    sizes = {ids[name]: len(data) for name, data in blobs.items()}

    cache = CacheProxy(store, capacity_bytes=300)
    oracle = ReferenceLRU(300)
    for step in range(1000):
        aid = ids[rng.choice(sorted(ids))]
        _, got = cache.get(aid)
        expected = oracle.access(aid, sizes[aid])
        assert got == expected, f"step {step}: {got} != {expected}"
        assert cache.resident_bytes <= 300
    stats = cache.stats()
    assert stats["hits"] + stats["misses"] == 1000


class TestManifest:
    def test_rejects_duplicate_paths(self):
        with pytest.raises(InvalidManifest):
            Manifest([ManifestEntry("a", "0" * 64, 1, 0o644), ManifestEntry("a", "1" * 64, 1, 0o644)])

    def test_json_roundtrip(self):
        store = ArtifactStore()
        manifest = Manifest.from_tree([("bin/tool", 0o755, b"#!x"), ("data/f", 0o644, b"d")], store)
        again = Manifest.from_json(manifest.to_json())
        assert [(e.path, e.artifact, e.size, e.mode) for e in again.entries] == [
            (e.path, e.artifact, e.size, e.mode) for e in manifest.entries
        ]

    def test_bad_version(self):
        with pytest.raises(InvalidManifest):
            Manifest.from_json('{"version": 2, "entries": []}')


class TestNamespace:
    def build(self, n=1000):
        store = ArtifactStore()
        tree = [(f"sw/f{i:04d}.dat", 0o644, f"content {i}".encode()) for i in range(n)]
        manifest = Manifest.from_tree(tree, store)
        cache = CacheProxy(store, capacity_bytes=10 * 1024 * 1024)
        return mount(manifest, cache), cache

    def test_mount_fetches_nothing(self):
        ns, cache = self.build(1000)
        assert cache.stats()["origin_fetches"] == 0
        assert ns.fetch_count == 0

    def test_open_three_of_1000(self):
        ns, cache = self.build(1000)
        for i in (3, 500, 999):
            assert ns.resolve_open(f"sw/f{i:04d}.dat") == f"content {i}".encode()
        assert cache.stats()["origin_fetches"] == 3
        assert ns.fetch_count == 3

    def test_second_open_memoized(self):
        ns, cache = self.build(10)
        ns.resolve_open("sw/f0001.dat")
        ns.resolve_open("sw/f0001.dat")
        assert cache.stats()["origin_fetches"] == 1

    def test_stat_and_list_fetch_free(self):
        ns, cache = self.build(25)
        info = ns.stat("sw/f0007.dat")
        assert info["size"] == len(b"content 7") and info["mode"] == 0o644
        assert ns.list("sw") == [f"f{i:04d}.dat" for i in range(25)]
        assert ns.list("") == ["sw"]
        assert cache.stats()["origin_fetches"] == 0

    def test_list_of_file_rejected(self):
        ns, _ = self.build(2)
        with pytest.raises(NotInNamespace):
            ns.list("sw/f0000.dat")

    def test_not_in_namespace(self):
        ns, _ = self.build(2)
        with pytest.raises(NotInNamespace):
            ns.resolve_open("nonexistent")

    def test_empty_manifest(self):
        ns = mount(Manifest([]), CacheProxy(ArtifactStore(), 10))
        assert ns.list("/") == []

    def test_corrupt_proxy_detected(self):
        store = ArtifactStore()
        manifest = Manifest.from_tree([("f", 0o644, b"good")], store)

        class LyingProxy:
            def get(self, aid):
                return (b"evil", "HIT")

        ns = mount(manifest, LyingProxy())
        with pytest.raises(IntegrityMismatch):
            ns.resolve_open("f")

    def test_materialize_to_disk(self, tmp_path):
        ns, _ = self.build(3)
        target = ns.materialize_to(tmp_path, "sw/f0002.dat")
        assert target.read_bytes() == b"content 2"
