"""Worker heartbeats and the portal-side collector.

Workers push heartbeats (state, cpu so far, recent log lines, workdir
listing) every HEARTBEAT_INTERVAL_S; the collector keeps the latest record
and a 100-line ring buffer per section. Commands back to workers (kill)
piggyback on heartbeat acks, so no portal->worker connectivity is assumed.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .model import DeskcafError

HEARTBEAT_INTERVAL_S = 30
STALENESS_INTERVALS = 3
RING_CAPACITY = 100


class UnknownSection(DeskcafError):
    pass


class NoDataYet(DeskcafError):
    pass


@dataclass(frozen=True)
class Heartbeat:
    section_id: str
    worker_id: str
    state: str
    cpu_seconds: float
    log_tail: tuple  # of (line_no, text), oldest first, at most RING_CAPACITY
    workdir_listing: tuple  # of (path, size)
    sent_at: int

    def __post_init__(self):
        if len(self.log_tail) > RING_CAPACITY:
            raise ValueError(f"log_tail of {len(self.log_tail)} exceeds {RING_CAPACITY}")
        nos = [n for n, _ in self.log_tail]
        if nos != sorted(nos):
            raise ValueError("log_tail must be ordered oldest to newest")


@dataclass
class _SectionView:
    latest: Heartbeat = None
    ring: deque = field(default_factory=lambda: deque(maxlen=RING_CAPACITY))
    last_line_no: int = 0
    kill_pending_since: int = None


class Collector:
    """Latest-heartbeat store plus per-section log ring buffers."""

    def __init__(self, staleness_s: float = HEARTBEAT_INTERVAL_S * STALENESS_INTERVALS):
        self.staleness_ms = int(staleness_s * 1000)
        self._views = {}

    def register(self, section_id: str):
        self._views.setdefault(section_id, _SectionView())

    def known(self, section_id: str) -> bool:
        return section_id in self._views

    def _view(self, section_id: str) -> _SectionView:
        try:
            return self._views[section_id]
        except KeyError:
            raise UnknownSection(section_id) from None

    def ingest_heartbeat(self, hb: Heartbeat) -> dict:
        """Store a heartbeat; returns the ack, which carries pending commands.

        New log lines (per-line monotone counter) are appended to the ring;
        heartbeats older than the stored one are ignored outright.
        """
        view = self._view(hb.section_id)
        if view.latest is not None and hb.sent_at <= view.latest.sent_at:
            return self._ack(view)
        view.latest = hb
        for line_no, text in hb.log_tail:
            if line_no > view.last_line_no:
                view.ring.append((line_no, text))
                view.last_line_no = line_no
        return self._ack(view)

    @staticmethod
    def _ack(view: _SectionView) -> dict:
        return {"ok": True, "kill": view.kill_pending_since is not None}

    def tail(self, section_id: str, n: int) -> list:
        if n < 0:
            raise ValueError("n must be >= 0")
        ring = self._view(section_id).ring
        if n == 0:
            return []
        return [text for _, text in list(ring)[-n:]]

    def ls(self, section_id: str) -> list:
        view = self._view(section_id)
        if view.latest is None:
            raise NoDataYet(section_id)
        return sorted(view.latest.workdir_listing)

    def is_stale(self, section_id: str, now: int) -> bool:
        view = self._view(section_id)
        if view.latest is None:
            return True
        return now - view.latest.sent_at > self.staleness_ms

    def forward_kill(self, section_id: str, now: int) -> str:
        """Returns DELIVERED (worker will see it on its next ack) or UNDELIVERABLE."""
        view = self._view(section_id)
        view.kill_pending_since = now
        if view.latest is None or now - view.latest.sent_at > self.staleness_ms:
            return "UNDELIVERABLE"
        return "DELIVERED"

    def kill_pending(self, section_id: str) -> bool:
        return self._views.get(section_id) is not None and self._views[section_id].kill_pending_since is not None

    def clear_kill(self, section_id: str):
        view = self._views.get(section_id)
        if view is not None:
            view.kill_pending_since = None

    def snapshot(self, section_id: str, now: int) -> dict:
        view = self._view(section_id)
        hb = view.latest
        return {
            "section": section_id,
            "stale": self.is_stale(section_id, now),
            "last_heartbeat": hb.sent_at if hb else None,
            "cpu_seconds": hb.cpu_seconds if hb else 0.0,
            "worker": hb.worker_id if hb else None,
            "buffered_lines": len(view.ring),
        }
