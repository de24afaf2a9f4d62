"""Software and output movement: artifact store, caching proxies, namespace.

Artifacts are immutable content-addressed blobs (lowercase-hex SHA-256 of
the bytes). The origin store hands them out by id; site proxies cache them
with byte-capacity LRU eviction and coalesce concurrent fetches for the
same absent id into a single origin request. A manifest maps a virtual
file tree onto artifact ids; mounting it fetches nothing, and each path is
fetched at most once, on first open.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass

from .model import DeskcafError

log = logging.getLogger(__name__)


class DistributionError(DeskcafError):
    pass


class OriginUnreachable(DistributionError):
    pass


class IntegrityMismatch(DistributionError):
    pass


class NotInNamespace(DistributionError):
    pass


class InvalidManifest(DistributionError):
    pass


class FetchFailed(DistributionError):
    pass


def content_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ArtifactStore:
    """Origin-side content-addressed blob store."""

    def __init__(self):
        self._blobs = {}
        self._lock = threading.Lock()

    def put(self, data: bytes) -> str:
        aid = content_id(data)
        with self._lock:
            self._blobs[aid] = bytes(data)
        return aid

    def get(self, aid: str) -> bytes:
        with self._lock:
            try:
                return self._blobs[aid]
            except KeyError:
                raise OriginUnreachable(f"artifact {aid} not at origin") from None

    def __contains__(self, aid: str) -> bool:
        with self._lock:
            return aid in self._blobs

    def __len__(self) -> int:
        with self._lock:
            return len(self._blobs)


@dataclass
class CacheCounters:
    hits: int = 0
    misses: int = 0
    origin_fetches: int = 0
    bytes_served: int = 0

    def as_dict(self) -> dict:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "origin_fetches": self.origin_fetches,
            "bytes_served": self.bytes_served,
        }


class CacheProxy:
    """Forward cache in front of an origin (or another proxy).

    ``upstream`` is anything with a ``get(aid) -> bytes``. A request for a
    resident id is a hit and refreshes recency; anything else is a miss.
    Concurrent misses for one id perform exactly one upstream fetch. A blob
    that fails id verification is served to nobody and never cached. Blobs
    larger than the whole cache are served straight through.
    """

    def __init__(self, upstream, capacity_bytes: int, name: str = "proxy"):
        self.upstream = upstream
        self.capacity_bytes = capacity_bytes
        self.name = name
        self.counters = CacheCounters()
        self._resident = OrderedDict()  # aid -> bytes, LRU order (oldest first)
        self._resident_bytes = 0
        self._lock = threading.Lock()
        self._inflight = {}  # aid -> _Flight

    class _Flight:
        def __init__(self):
            self.done = threading.Event()
            self.result = None
            self.error = None

    def get(self, aid: str) -> tuple[bytes, str]:
        """Return (bytes, "HIT" | "MISS")."""
        with self._lock:
            if aid in self._resident:
                data = self._resident[aid]
                self._resident.move_to_end(aid)
                self.counters.hits += 1
                self.counters.bytes_served += len(data)
                return data, "HIT"
            self.counters.misses += 1
            flight = self._inflight.get(aid)
            if flight is None:
                flight = CacheProxy._Flight()
                self._inflight[aid] = flight
                leader = True
            else:
                leader = False

        if leader:
            try:
                data = self._fetch_and_insert(aid)
                flight.result = data
            except DistributionError as exc:
                flight.error = exc
            finally:
                with self._lock:
                    self._inflight.pop(aid, None)
                flight.done.set()
        else:
            flight.done.wait()

        if flight.error is not None:
            raise flight.error
        data = flight.result
        with self._lock:
            self.counters.bytes_served += len(data)
        return data, "MISS"

    def _fetch_and_insert(self, aid: str) -> bytes:
        with self._lock:
            self.counters.origin_fetches += 1
        try:
            fetched = self.upstream.get(aid)
        except DistributionError:
            raise
        except Exception as exc:
            raise OriginUnreachable(f"upstream fetch of {aid} failed: {exc}") from exc
        if isinstance(fetched, tuple):  # chained proxy returns (bytes, source)
            fetched = fetched[0]
        if content_id(fetched) != aid:
            raise IntegrityMismatch(f"upstream bytes for {aid} hash to {content_id(fetched)}")
        with self._lock:
            self._insert_locked(aid, fetched)
        return fetched

    def _insert_locked(self, aid: str, data: bytes):
        if len(data) > self.capacity_bytes:
            log.debug("%s: %s (%d B) exceeds capacity, serving uncached", self.name, aid, len(data))
            return
        while self._resident_bytes + len(data) > self.capacity_bytes:
            evicted_id, evicted = self._resident.popitem(last=False)
            self._resident_bytes -= len(evicted)
            log.debug("%s: evicted %s (%d B)", self.name, evicted_id, len(evicted))
        self._resident[aid] = data
        self._resident_bytes += len(data)

    @property
    def resident_bytes(self) -> int:
        with self._lock:
            return self._resident_bytes

    def resident_ids(self) -> list:
        with self._lock:
            return list(self._resident)

    def stats(self) -> dict:
        with self._lock:
            return self.counters.as_dict()


# ---------------------------------------------------------------------------
# Manifest + namespace


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    artifact: str
    size: int
    mode: int


class Manifest:
    VERSION = 1

    def __init__(self, entries):
        entries = list(entries)
        seen = set()
        for e in entries:
            if not e.path or e.path.startswith("/"):
                raise InvalidManifest(f"invalid manifest path {e.path!r}")
            if e.path in seen:
                raise InvalidManifest(f"duplicate manifest path {e.path!r}")
            if e.size < 0:
                raise InvalidManifest(f"negative size for {e.path!r}")
            seen.add(e.path)
        self.entries = entries

    @classmethod
    def from_tree(cls, tree, store: ArtifactStore) -> "Manifest":
        """Publish (path, mode, bytes) triples to a store and map them."""
        entries = []
        for path, mode, content in tree:
            aid = store.put(content)
            entries.append(ManifestEntry(path, aid, len(content), mode))
        return cls(entries)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.VERSION,
                "entries": [
                    {"path": e.path, "artifact": e.artifact, "size": e.size, "mode": e.mode}
                    for e in self.entries
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidManifest(f"not JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("version") != cls.VERSION:
            raise InvalidManifest(f"unsupported manifest version {doc.get('version') if isinstance(doc, dict) else doc!r}")
        try:
            entries = [
                ManifestEntry(str(e["path"]), str(e["artifact"]), int(e["size"]), int(e["mode"]))
                for e in doc["entries"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidManifest(f"malformed entry: {exc}") from exc
        return cls(entries)


class Namespace:
    """Fetch-on-demand view of a manifest behind a proxy chain.

    ``mount`` is free: stat and list are answered from the manifest alone,
    directories being implicit path prefixes. The artifact behind a path is
    fetched through the proxy on first open only.
    """

    def __init__(self, manifest: Manifest, proxy):
        self.manifest = manifest
        self.proxy = proxy
        self._by_path = {e.path: e for e in manifest.entries}
        self._materialized = {}  # path -> bytes
        self._lock = threading.Lock()
        self._inflight = {}

    def stat(self, path: str) -> dict:
        entry = self._by_path.get(path)
        if entry is not None:
            return {"path": path, "size": entry.size, "mode": entry.mode, "kind": "file"}
        if self._is_dir(path):
            return {"path": path, "kind": "dir"}
        raise NotInNamespace(path)

    def _is_dir(self, path: str) -> bool:
        prefix = "" if path in ("", "/") else path.rstrip("/") + "/"
        return any(p.startswith(prefix) for p in self._by_path)

    def list(self, path: str) -> list:
        if path in self._by_path:
            raise NotInNamespace(f"{path} is a file, not a directory")
        prefix = "" if path in ("", "/") else path.rstrip("/") + "/"
        if prefix and not self._is_dir(path):
            raise NotInNamespace(path)
        children = {p[len(prefix):].split("/", 1)[0] for p in self._by_path if p.startswith(prefix)}
        return sorted(children)

    def resolve_open(self, path: str) -> bytes:
        """Return the file bytes, fetching and memoizing on first open."""
        entry = self._by_path.get(path)
        if entry is None:
            raise NotInNamespace(path)
        with self._lock:
            if path in self._materialized:
                return self._materialized[path]
            flight = self._inflight.get(path)
            if flight is None:
                flight = CacheProxy._Flight()
                self._inflight[path] = flight
                leader = True
            else:
                leader = False
        if leader:
            try:
                flight.result = self._fetch(entry)
            except DistributionError as exc:
                flight.error = exc
            finally:
                with self._lock:
                    self._inflight.pop(path, None)
                flight.done.set()
        else:
            flight.done.wait()
        if flight.error is not None:
            raise flight.error
        return flight.result

    def _fetch(self, entry: ManifestEntry) -> bytes:
        try:
            got = self.proxy.get(entry.artifact)
        except DistributionError:
            raise
        except Exception as exc:
            raise FetchFailed(f"fetching {entry.path}: {exc}") from exc
        data = got[0] if isinstance(got, tuple) else got
        if content_id(data) != entry.artifact or len(data) != entry.size:
            raise IntegrityMismatch(f"{entry.path} does not match its manifest entry")
        with self._lock:
            self._materialized[entry.path] = data
        return data

    @property
    def fetch_count(self) -> int:
        with self._lock:
            return len(self._materialized)

    def materialize_to(self, directory, path: str):
        """Write a fetched file under ``directory`` with its manifest mode."""
        import os
        from pathlib import Path

        data = self.resolve_open(path)
        entry = self._by_path[path]
        target = Path(directory) / path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        os.chmod(target, entry.mode & 0o7777)
        return target


def mount(manifest: Manifest, proxy) -> Namespace:
    """Attach a manifest to a proxy chain; fetches nothing by itself."""
    return Namespace(manifest, proxy)
