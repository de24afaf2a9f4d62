"""Deterministic discrete-event simulation of grid sites.

DIRECT sites take pilots through a gatekeeper (queue latency, drop
probability, preemption); BROKERED sites take whole sections routed by a
rank-based broker and run them on workers directly, no pilots. One World
drives an embedded Portal: events are processed in (time, seq) order on an
integer-millisecond clock, all randomness comes from named streams derived
from the single scenario seed (SHA-256 of ``"<seed>|<stream name>"``, first
8 bytes, feeding the stdlib Mersenne Twister), and the same seed and
configuration yield byte-identical traces.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import random
from collections import deque
from dataclasses import dataclass, field

from . import auth, matchlang, model
from .archive import pack
from .distribution import CacheProxy
from .model import (
    Booted,
    BootFailed,
    ExecExited,
    ExecStarted,
    Pilot,
    PilotState,
    Preempted,
    SectionState,
    SiteAccepted,
    SlotAd,
    SlotMatched,
    StageInDone,
)
from .monitoring import Heartbeat
from .portal import KILL_DEADLINE_S, GlidekeeperConfig, Portal

log = logging.getLogger(__name__)

#: Pilot states that hold a worker at a DIRECT site.
_OCCUPYING = frozenset({PilotState.BOOTING, PilotState.ADVERTISING, PilotState.CLAIMED, PilotState.RETIRING})


class WrongFlavor(model.DeskcafError):
    pass


class NoEligibleSite(model.DeskcafError):
    pass


@dataclass(frozen=True)
class SiteConfig:
    site_id: str
    flavor: str  # DIRECT | BROKERED
    n_workers: int
    attribute_template: dict
    queue_latency_s: tuple = (5.0, 30.0)
    pilot_drop_prob: float = 0.0
    worker_crash_prob: float = 0.0
    preempt_rate_per_hour: float = 0.0
    proxy_url: str = None
    cache_capacity_bytes: int = 64 * 1024 * 1024

    def __post_init__(self):
        if self.flavor not in ("DIRECT", "BROKERED"):
            raise model.InvalidSpec(f"unknown site flavor {self.flavor!r}")
        if self.n_workers < 1:
            raise model.InvalidSpec("n_workers must be >= 1")
        for p in (self.pilot_drop_prob, self.worker_crash_prob):
            if not 0.0 <= p <= 1.0:
                raise model.InvalidSpec(f"probability {p} outside [0, 1]")
        if self.preempt_rate_per_hour < 0:
            raise model.InvalidSpec("preempt_rate_per_hour must be >= 0")
        missing = [a for a in SlotAd.REQUIRED_ATTRS if a not in self.attribute_template]
        if missing:
            raise model.InvalidSpec(f"site template missing {missing}")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 1
    negotiate_interval_s: float = 5.0
    glidekeeper_interval_s: float = 30.0
    heartbeat_interval_s: float = 30.0
    dispatch_latency_s: float = 1.0
    stage_fixed_s: float = 1.0
    boot_s: float = 2.0
    transfer_ns_per_byte: int = 1000
    glidekeeper: GlidekeeperConfig = field(default_factory=GlidekeeperConfig)


@dataclass
class _SiteRuntime:
    config: SiteConfig
    free_workers: int
    pending_pilots: deque = field(default_factory=deque)
    pending_sections: deque = field(default_factory=deque)
    proxy: CacheProxy = None
    worker_counter: int = 0
    total_dispatched: int = 0


@dataclass
class _ExecContext:
    sid: str
    attempt: int
    site_id: str
    executor: str
    duration_ms: int
    planned_lines: int
    planned_bytes: int
    planned_exit: int
    exec_started: int = None

    def lines_at(self, now: int) -> int:
        if self.exec_started is None:
            return 0
        if self.duration_ms <= 0:
            return self.planned_lines
        frac = min(1.0, (now - self.exec_started) / self.duration_ms)
        return int(self.planned_lines * frac)

    def cpu_at(self, now: int) -> float:
        if self.exec_started is None:
            return 0.0
        return (now - self.exec_started) / 1000.0


def build_section_archive(sid: str, attempt: int, lines: int, out_bytes: int):
    """Pack the section working directory: logs plus produced output."""
    text = f"=== section {sid} attempt {attempt} ===\n" + "".join(
        f"{sid} line {i}\n" for i in range(1, lines + 1)
    )
    tree = [("section.log", 0o644, text.encode())]
    if out_bytes > 0:
        tree.append(("out.dat", 0o644, b"D" * out_bytes))
    return pack(tree)


class World:
    """Event engine binding a Portal to simulated sites."""

    def __init__(self, portal: Portal, sites, config: WorldConfig, origin_store=None):
        self.portal = portal
        self.config = config
        self.seed = config.seed
        self.clock = 0
        self._seq = 0
        self._heap = []
        self._streams = {}
        self.trace = []
        self._trace_n = 0
        self.origin_store = origin_store
        self._exec = {}  # sid -> _ExecContext
        self._pilot_section = {}  # pilot_id -> sid while executing

        self.sites = {}
        for cfg in sites:
            proxy = None
            if origin_store is not None:
                proxy = CacheProxy(origin_store, cfg.cache_capacity_bytes, name=f"{cfg.site_id}-proxy")
            self.sites[cfg.site_id] = _SiteRuntime(cfg, cfg.n_workers, proxy=proxy)

        self._neg_armed = False
        self._gk_armed = False
        portal.section_observers.append(self._on_section_transition)
        portal.pilot_observers.append(self._on_pilot_transition)

    # -- infrastructure -----------------------------------------------------

    def rng(self, name: str) -> random.Random:
        stream = self._streams.get(name)
        if stream is None:
            digest = hashlib.sha256(f"{self.seed}|{name}".encode()).digest()
            stream = random.Random(int.from_bytes(digest[:8], "big"))
            self._streams[name] = stream
        return stream

    def schedule(self, delay_ms: int, kind: str, **payload):
        self._seq += 1
        heapq.heappush(self._heap, (self.clock + max(0, int(delay_ms)), self._seq, kind, payload))

    def emit(self, kind: str, **fields):
        self._trace_n += 1
        self.trace.append({"n": self._trace_n, "t": self.clock, "kind": kind, **fields})

    def trace_lines(self) -> list:
        return [json.dumps(rec, sort_keys=True, separators=(",", ":")) for rec in self.trace]

    def is_live(self) -> bool:
        jobs_live = any(
            not self.portal._is_section_terminal(s)
            for record in self.portal.jobs.values()
            for s in record.sections
        )
        pilots_live = any(
            p.state in model.PILOT_LIVE or p.state is PilotState.RETIRING
            for p in self.portal.pilots.values()
        )
        return jobs_live or pilots_live

    def run_until(self, t_end_ms: int):
        """Drain events up to t_end_ms; the clock never decreases."""
        while self._heap and self._heap[0][0] <= t_end_ms:
            t, _, kind, payload = heapq.heappop(self._heap)
            self.clock = t
            getattr(self, f"_h_{kind}")(**payload)
        self.clock = max(self.clock, t_end_ms)
        return self.trace

    def start(self):
        """Arm the periodic policy loops; they disarm once nothing is live."""
        if not self._neg_armed:
            self._neg_armed = True
            self.schedule(int(self.config.negotiate_interval_s * 1000), "negotiate_tick")
        if not self._gk_armed:
            self._gk_armed = True
            self.schedule(int(self.config.glidekeeper_interval_s * 1000), "glidekeeper_tick")

    def _transfer_ms(self, n_bytes: int) -> int:
        return int(self.config.stage_fixed_s * 1000) + (n_bytes * self.config.transfer_ns_per_byte) // 1_000_000

    # -- observers ------------------------------------------------------------

    def _on_section_transition(self, before, after):
        self.emit("section_state", sid=after.sid, frm=before.state.value, to=after.state.value,
                  attempt=after.attempts)
        if before.claimed_pilot and not after.claimed_pilot and not before.claimed_pilot.startswith("pilot-"):
            site_id = before.claimed_pilot.split("/", 1)[0]
            self._release_worker(site_id)

    def _on_pilot_transition(self, before, after):
        self.emit("pilot_state", pilot=after.pilot_id, site=after.site_id,
                  frm=before.state.value, to=after.state.value)
        if before.state in _OCCUPYING and after.state in model.PILOT_TERMINAL:
            self._release_worker(after.site_id)

    def _occupy_worker(self, site_id: str):
        site = self.sites[site_id]
        assert site.free_workers > 0, f"{site_id} has no free worker"
        site.free_workers -= 1

    def _release_worker(self, site_id: str):
        site = self.sites[site_id]
        site.free_workers += 1
        assert site.free_workers <= site.config.n_workers, f"{site_id} over-released"
        if site.config.flavor == "DIRECT" and site.pending_pilots:
            self._start_boot(site, site.pending_pilots.popleft())
        elif site.config.flavor == "BROKERED" and site.pending_sections:
            self.schedule(0, "broker_pump", site_id=site_id)

    # -- submission ------------------------------------------------------------

    def submit_job(self, token, spec, now=None):
        job_id = self.portal.submit_job(token, spec, self.clock if now is None else now)
        self.emit("job_submitted", job=job_id, user=spec.user, sections=spec.n_sections)
        self.start()  # re-arm ticks if the world had gone quiet
        return job_id

    def kill_job(self, token, job_id, selector):
        ack = self.portal.kill(token, job_id, selector, self.clock)
        self.emit("kill_requested", job=job_id,
                  sections=sorted(ack["sections"]), outcomes=[ack["sections"][i] for i in sorted(ack["sections"])])
        for index, outcome in ack["sections"].items():
            if outcome.startswith("FORWARDED"):
                self.schedule(KILL_DEADLINE_S * 1000, "kill_deadline", sid=f"{job_id}.{index}")
        return ack

    # -- negotiator + broker ----------------------------------------------------

    def _h_negotiate_tick(self):
        matches = self.portal.negotiate(self.clock)
        self.emit("negotiate", matches=[[sid, pid] for sid, pid in matches])
        for sid, pilot_id in matches:
            section = self.portal.section_by_sid(sid)
            self.schedule(int(self.config.dispatch_latency_s * 1000), "section_dispatch",
                          sid=sid, executor=f"pilot-{pilot_id}", attempt=section.attempts)
        self._broker_round()
        if self.is_live():
            self.schedule(int(self.config.negotiate_interval_s * 1000), "negotiate_tick")
        else:
            self._neg_armed = False

    def broker_assign(self, section, requirements) -> str:
        """Pick the eligible BROKERED site minimizing queued/(free+1)."""
        candidates = []
        for site in self.sites.values():
            if site.config.flavor != "BROKERED":
                continue
            try:
                if not matchlang.eval_requirements(requirements, site.config.attribute_template):
                    continue
            except matchlang.EvalError as exc:
                log.debug("section %s vs site %s: %s", section.sid, site.config.site_id, exc)
                continue
            rank = len(site.pending_sections) / (site.free_workers + 1)
            candidates.append((rank, site.config.site_id))
        if not candidates:
            raise NoEligibleSite(section.sid)
        candidates.sort()
        return candidates[0][1]

    def _broker_round(self):
        """Offer leftover WAITING sections to brokered sites with spare capacity."""
        for section in self.portal.waiting_sections_in_order(self.clock):
            record = self.portal.jobs[section.job_id]
            user = record.spec.user
            proxy_pair = self.portal.user_proxies.get(user)
            if proxy_pair is None:
                continue
            try:
                auth.verify_proxy(proxy_pair[0], self.clock, self.portal.grid_root_secret)
            except auth.AuthFailed as exc:
                log.warning("broker skipping %s: %s", section.sid, exc)
                continue
            try:
                site_id = self.broker_assign(section, record.requirements)
            except NoEligibleSite:
                continue
            site = self.sites[site_id]
            if len(site.pending_sections) >= site.free_workers:
                continue  # no spare capacity this round; leave it for pilots
            self.portal.update_section(section, SlotMatched(), attempts=section.attempts + 1)
            self.portal._section_site[section.sid] = site_id
            self.portal._assignments[section.sid] = f"{site_id}/queued"
            site.pending_sections.append(section.sid)
            self.emit("broker_assign", sid=section.sid, site=site_id)
        for site in self.sites.values():
            if site.config.flavor == "BROKERED" and site.pending_sections:
                self.schedule(0, "broker_pump", site_id=site.config.site_id)

    def _h_broker_pump(self, site_id):
        site = self.sites[site_id]
        while site.free_workers > 0 and site.pending_sections:
            sid = site.pending_sections.popleft()
            section = self.portal.section_by_sid(sid)
            if section.state is not SectionState.MATCHED:
                continue  # killed or lost while queued
            self._occupy_worker(site_id)
            site.worker_counter += 1
            executor = f"{site_id}/w{site.worker_counter}"
            self.portal._assignments[sid] = executor
            self.schedule(0, "section_dispatch", sid=sid, executor=executor, attempt=section.attempts)

    # -- glidekeeper + gatekeeper -------------------------------------------------

    def _h_glidekeeper_tick(self):
        plan = self.portal.glidekeeper_tick(self.config.glidekeeper, self.clock)
        self.emit("glidekeeper", requests=[[r.site_id, r.count] for r in plan.requests],
                  retire_idle=list(plan.retire_idle), retire_lifetime=list(plan.retire_lifetime),
                  proxy_errors=list(plan.proxy_errors))
        self.portal.apply_retirements(plan)
        for request in plan.requests:
            for _ in range(request.count):
                pilot = self.portal.new_pilot(request.site_id, self.clock)
                self.emit("pilot_requested", pilot=pilot.pilot_id, site=request.site_id)
                proxy, _secret = self.portal.site_proxies[request.site_id]
                self.gatekeeper_submit(self.sites[request.site_id], pilot, proxy)
        if self.is_live():
            self.schedule(int(self.config.glidekeeper_interval_s * 1000), "glidekeeper_tick")
        else:
            self._gk_armed = False

    def gatekeeper_submit(self, site: _SiteRuntime, pilot: Pilot, proxy) -> str:
        """DIRECT-site entry point: QUEUED, DROPPED, or REJECTED."""
        cfg = site.config
        if cfg.flavor != "DIRECT":
            raise WrongFlavor(f"{cfg.site_id} does not take pilots")
        try:
            auth.verify_proxy(proxy, self.clock, self.portal.grid_root_secret)
        except auth.AuthFailed as exc:
            self.portal.update_pilot(pilot, BootFailed())
            self.emit("gatekeeper", pilot=pilot.pilot_id, site=cfg.site_id, result="REJECTED", reason=str(exc))
            return "REJECTED"
        if self.rng("drop").random() < cfg.pilot_drop_prob:
            self.portal.update_pilot(pilot, BootFailed())
            self.emit("gatekeeper", pilot=pilot.pilot_id, site=cfg.site_id, result="DROPPED")
            return "DROPPED"
        self.portal.update_pilot(pilot, SiteAccepted())
        latency_s = self.rng("latency").uniform(*cfg.queue_latency_s)
        self.emit("gatekeeper", pilot=pilot.pilot_id, site=cfg.site_id, result="QUEUED")
        self.schedule(int(latency_s * 1000), "pilot_ready", pilot_id=pilot.pilot_id)
        return "QUEUED"

    def _h_pilot_ready(self, pilot_id):
        pilot = self.portal.pilots[pilot_id]
        if pilot.state is not PilotState.QUEUED_AT_SITE:
            return
        site = self.sites[pilot.site_id]
        if site.free_workers > 0:
            self._start_boot(site, pilot_id)
        else:
            site.pending_pilots.append(pilot_id)

    def _start_boot(self, site: _SiteRuntime, pilot_id):
        pilot = self.portal.pilots[pilot_id]
        if pilot.state is not PilotState.QUEUED_AT_SITE:
            # expired or failed while waiting; hand the slot to the next one
            if site.pending_pilots:
                self._start_boot(site, site.pending_pilots.popleft())
            return
        self._occupy_worker(site.config.site_id)
        self.portal.update_pilot(pilot, SiteAccepted())
        self.schedule(int(self.config.boot_s * 1000), "pilot_booted", pilot_id=pilot_id)

    def _h_pilot_booted(self, pilot_id):
        pilot = self.portal.pilots[pilot_id]
        if pilot.state is not PilotState.BOOTING:
            return
        cfg = self.sites[pilot.site_id].config
        ad = SlotAd(pilot_id=pilot_id, advertised_at=self.clock,
                    attributes={**cfg.attribute_template, "PilotId": pilot_id})
        self.portal.update_pilot(pilot, Booted(), slot_ad=ad, boot_time=self.clock)
        rate = cfg.preempt_rate_per_hour
        if rate > 0:
            delay_ms = self.rng(f"preempt-{pilot_id}").expovariate(rate) * 3_600_000
            self.schedule(int(delay_ms), "pilot_preempt", pilot_id=pilot_id)

    def _h_pilot_preempt(self, pilot_id):
        pilot = self.portal.pilots[pilot_id]
        if pilot.state not in (PilotState.ADVERTISING, PilotState.CLAIMED):
            return
        victim = self._pilot_section.get(pilot_id)
        if victim is None:
            for sid, executor in self.portal._assignments.items():
                if executor == f"pilot-{pilot_id}":
                    victim = sid
                    break
        self.emit("preempt", pilot=pilot_id, site=pilot.site_id, sid=victim)
        self.portal.update_pilot(pilot, Preempted())
        if victim is not None:
            self._pilot_section.pop(pilot_id, None)
            self._exec.pop(victim, None)
            self.portal.on_executor_lost(victim, self.clock)

    # -- section execution ---------------------------------------------------------

    def _h_section_dispatch(self, sid, executor, attempt):
        section = self.portal.section_by_sid(sid)
        if section.state is not SectionState.MATCHED or section.attempts != attempt:
            if not executor.startswith("pilot-"):
                self._release_worker(executor.split("/", 1)[0])
            return
        spec = self.portal.jobs[section.job_id].spec
        site_id = self.portal._section_site[sid]
        profile = spec.sim_profile or model.SimProfile()
        ctx = _ExecContext(
            sid=sid, attempt=attempt, site_id=site_id, executor=executor,
            duration_ms=int(profile.duration_s * 1000), planned_lines=profile.log_lines,
            planned_bytes=profile.output_bytes, planned_exit=profile.exit_code,
        )
        self._exec[sid] = ctx
        if executor.startswith("pilot-"):
            self._pilot_section[int(executor.split("-", 1)[1])] = sid
        self.portal.update_section(section, ExecStarted(), claimed_pilot=executor)

        stage_ms = int(self.config.stage_fixed_s * 1000)
        if spec.user_tarball_id is not None:
            site = self.sites[site_id]
            source = site.proxy if site.proxy is not None else self.origin_store
            if source is not None:
                try:
                    got = source.get(spec.user_tarball_id)
                except Exception as exc:
                    log.warning("stage-in of %s for %s failed: %s", spec.user_tarball_id, sid, exc)
                    self.emit("stage_in_failed", sid=sid, artifact=spec.user_tarball_id)
                    self._exec.pop(sid, None)
                    if executor.startswith("pilot-"):
                        self._pilot_section.pop(int(executor.split("-", 1)[1]), None)
                        pilot = self.portal.pilots[int(executor.split("-", 1)[1])]
                        if pilot.state is PilotState.CLAIMED:
                            self.portal.update_pilot(pilot, Preempted())
                    self.portal.on_executor_lost(sid, self.clock)
                    return
                data = got[0] if isinstance(got, tuple) else got
                stage_ms = self._transfer_ms(len(data))
        self.schedule(stage_ms, "stage_in_done", sid=sid, attempt=attempt)
        self.schedule(int(self.config.heartbeat_interval_s * 1000), "heartbeat", sid=sid, attempt=attempt)

    def _h_stage_in_done(self, sid, attempt):
        section = self.portal.section_by_sid(sid)
        if section.state is not SectionState.TRANSFERRING or section.attempts != attempt:
            return
        ctx = self._exec[sid]
        self.portal.update_section(section, StageInDone(), start_time=self.clock)
        ctx.exec_started = self.clock
        self.schedule(ctx.duration_ms, "exec_exited", sid=sid, attempt=attempt, code=ctx.planned_exit)
        crash_prob = self.sites[ctx.site_id].config.worker_crash_prob
        if crash_prob > 0 and self.rng("crash").random() < crash_prob:
            crash_at = self.rng("crash").uniform(0, max(ctx.duration_ms, 1))
            self.schedule(int(crash_at), "worker_crash", sid=sid, attempt=attempt)

    def _h_exec_exited(self, sid, attempt, code):
        section = self.portal.section_by_sid(sid)
        if section.state is not SectionState.RUNNING or section.attempts != attempt:
            return
        ctx = self._exec[sid]
        self.portal.update_section(section, ExecExited(code))
        out_ms = self._transfer_ms(ctx.planned_bytes + 40 * ctx.planned_lines)
        self.schedule(out_ms, "stage_out_done", sid=sid, attempt=attempt, code=code)

    def _h_stage_out_done(self, sid, attempt, code):
        section = self.portal.section_by_sid(sid)
        if section.state is not SectionState.STAGING_OUT or section.attempts != attempt:
            return
        ctx = self._exec.pop(sid)
        if ctx.executor.startswith("pilot-"):
            self._pilot_section.pop(int(ctx.executor.split("-", 1)[1]), None)
        blob, artifact = build_section_archive(sid, attempt, ctx.planned_lines, ctx.planned_bytes)
        self.portal.output_store.put(blob)
        cpu = ctx.duration_ms / 1000.0
        self.portal.record_section_result(sid, code, cpu, artifact, self.clock)
        self.emit("section_result", sid=sid, exit=code, cpu=cpu, artifact=artifact)

    def _h_worker_crash(self, sid, attempt):
        section = self.portal.section_by_sid(sid)
        if section.state not in model.Section.EXECUTING or section.attempts != attempt:
            return
        ctx = self._exec.pop(sid, None)
        self.emit("worker_crash", sid=sid, site=ctx.site_id if ctx else None)
        if ctx is not None and ctx.executor.startswith("pilot-"):
            pilot_id = int(ctx.executor.split("-", 1)[1])
            self._pilot_section.pop(pilot_id, None)
            pilot = self.portal.pilots[pilot_id]
            if pilot.state in (PilotState.CLAIMED, PilotState.ADVERTISING, PilotState.RETIRING):
                self.portal.update_pilot(pilot, Preempted())
        self.portal.on_executor_lost(sid, self.clock)

    def _h_heartbeat(self, sid, attempt):
        section = self.portal.section_by_sid(sid)
        if section.state not in model.Section.EXECUTING or section.attempts != attempt:
            return
        ctx = self._exec[sid]
        lines_n = ctx.lines_at(self.clock)
        window = [(i, f"{sid} line {i}") for i in range(max(1, lines_n - 99), lines_n + 1)]
        out_bytes = int(ctx.planned_bytes * (lines_n / ctx.planned_lines)) if ctx.planned_lines else 0
        hb = Heartbeat(
            section_id=sid, worker_id=ctx.executor, state=section.state.value,
            cpu_seconds=ctx.cpu_at(self.clock), log_tail=tuple(window),
            workdir_listing=(("out.dat", out_bytes), ("section.log", 40 + 12 * lines_n)),
            sent_at=self.clock,
        )
        ack = self.portal.collector.ingest_heartbeat(hb)
        self.emit("heartbeat", sid=sid, lines=lines_n, kill=ack["kill"])
        if ack["kill"]:
            blob, artifact = build_section_archive(sid, attempt, lines_n, out_bytes)
            self.portal.output_store.put(blob)
            self._exec.pop(sid, None)
            if ctx.executor.startswith("pilot-"):
                self._pilot_section.pop(int(ctx.executor.split("-", 1)[1]), None)
            self.portal.record_kill_result(sid, ctx.cpu_at(self.clock), artifact, self.clock)
            self.emit("kill_ack", sid=sid, cpu=ctx.cpu_at(self.clock))
            return
        self.schedule(int(self.config.heartbeat_interval_s * 1000), "heartbeat", sid=sid, attempt=attempt)

    def _h_kill_deadline(self, sid):
        updated = self.portal.kill_deadline_expired(sid, self.clock)
        if updated is not None:
            ctx = self._exec.pop(sid, None)
            if ctx is not None and ctx.executor.startswith("pilot-"):
                self._pilot_section.pop(int(ctx.executor.split("-", 1)[1]), None)
            self.emit("kill_forced", sid=sid)

    # -- scenario events -------------------------------------------------------------

    def _h_job_submit(self, token, spec):
        self.submit_job(token, spec)

    def _h_kill(self, token, job_id, selector):
        self.kill_job(token, job_id, selector)

    # -- checks ------------------------------------------------------------------------

    def check_capacity(self):
        for site in self.sites.values():
            occupied = site.config.n_workers - site.free_workers
            assert 0 <= occupied <= site.config.n_workers
            if site.config.flavor == "DIRECT":
                holders = sum(
                    1 for p in self.portal.pilots.values()
                    if p.site_id == site.config.site_id and p.state in _OCCUPYING
                )
            else:
                holders = sum(
                    1 for record in self.portal.jobs.values() for s in record.sections
                    if s.claimed_pilot is not None and s.claimed_pilot.startswith(f"{site.config.site_id}/")
                )
            assert holders == occupied, (site.config.site_id, holders, occupied)
