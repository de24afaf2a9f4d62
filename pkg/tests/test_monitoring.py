import pytest

from deskcaf.monitoring import Collector, Heartbeat, NoDataYet, UnknownSection


def hb(sid="1.0", sent_at=1000, lines=(), listing=(), cpu=0.0, state="RUNNING"):
    return Heartbeat(
        section_id=sid,
        worker_id="pilot-1",
        state=state,
        cpu_seconds=cpu,
        log_tail=tuple(lines),
        workdir_listing=tuple(listing),
        sent_at=sent_at,
    )


@pytest.fixture
def collector():
    c = Collector()
    c.register("1.0")
    return c


class TestIngest:
    def test_appends_new_lines(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1, lines=[(1, "a"), (2, "b")]))
        collector.ingest_heartbeat(hb(sent_at=2, lines=[(2, "b"), (3, "c"), (4, "d")]))
        assert collector.tail("1.0", 10) == ["a", "b", "c", "d"]

    def test_out_of_order_ignored(self, collector):
        collector.ingest_heartbeat(hb(sent_at=100, lines=[(1, "a")], cpu=5.0))
        collector.ingest_heartbeat(hb(sent_at=50, lines=[(2, "x")], cpu=1.0))
        assert collector.tail("1.0", 10) == ["a"]
        assert collector.snapshot("1.0", 120).get("cpu_seconds") == 5.0

    def test_unknown_section(self, collector):
        with pytest.raises(UnknownSection):
            collector.ingest_heartbeat(hb(sid="9.9"))

    def test_ring_capacity_exactly_100(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1, lines=[(i, f"l{i}") for i in range(1, 101)]))
        collector.ingest_heartbeat(hb(sent_at=2, lines=[(i, f"l{i}") for i in range(101, 151)]))
        lines = collector.tail("1.0", 1000)
        assert len(lines) == 100
        assert lines[0] == "l51" and lines[-1] == "l150"

    def test_accepted_heartbeats_strictly_increase(self, collector):
        collector.ingest_heartbeat(hb(sent_at=10))
        collector.ingest_heartbeat(hb(sent_at=10, lines=[(1, "dup")]))
        assert collector.tail("1.0", 5) == []


class TestTail:
    def test_suffix(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1, lines=[(i, f"l{i}") for i in range(1, 6)]))
        assert collector.tail("1.0", 3) == ["l3", "l4", "l5"]

    def test_zero(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1, lines=[(1, "a")]))
        assert collector.tail("1.0", 0) == []

    def test_before_any_heartbeat(self, collector):
        assert collector.tail("1.0", 5) == []
        assert collector.is_stale("1.0", now=0) is True

    def test_tail_n_is_suffix_of_tail_m(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1, lines=[(i, f"l{i}") for i in range(1, 31)]))
        for n in range(0, 31):
            for m in range(n, 31):
                tn, tm = collector.tail("1.0", n), collector.tail("1.0", m)
                assert tm[len(tm) - len(tn):] == tn


class TestLs:
    def test_sorted_listing(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1, listing=[("section.log", 4), ("out.dat", 10)]))
        assert collector.ls("1.0") == [("out.dat", 10), ("section.log", 4)]

    def test_no_data_yet(self, collector):
        with pytest.raises(NoDataYet):
            collector.ls("1.0")

    def test_retained_after_terminal(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1, listing=[("a", 1)], state="STAGING_OUT"))
        assert collector.ls("1.0") == [("a", 1)]


class TestForwardKill:
    def test_delivered_when_fresh(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1000))
        assert collector.forward_kill("1.0", now=1000 + 30_000) == "DELIVERED"
        assert collector.ingest_heartbeat(hb(sent_at=40_000))["kill"] is True

    def test_undeliverable_when_stale(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1000))
        assert collector.forward_kill("1.0", now=1000 + 91_000) == "UNDELIVERABLE"

    def test_undeliverable_without_any_heartbeat(self, collector):
        assert collector.forward_kill("1.0", now=50) == "UNDELIVERABLE"

    def test_unknown_section(self, collector):
        with pytest.raises(UnknownSection):
            collector.forward_kill("9.9", now=0)

    def test_clear(self, collector):
        collector.ingest_heartbeat(hb(sent_at=1000))
        collector.forward_kill("1.0", now=2000)
        collector.clear_kill("1.0")
        assert collector.ingest_heartbeat(hb(sent_at=3000))["kill"] is False
