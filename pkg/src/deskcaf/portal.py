"""The head node: submission, matchmaking, provisioning policy, results.

One Portal instance owns the authoritative job/section/pilot tables plus
usage, accounting ledger, notifications, and the output spool. It is a
single logical event processor: in simulation the event loop serializes
all calls; in served mode a lock does. Nothing here blocks on I/O.

All timestamps are integer milliseconds on the caller's clock.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import auth, matchlang, model
from .distribution import ArtifactStore
from .model import (
    ClaimReleased,
    Claimed,
    IdleTimeout,
    JobSpec,
    KillRequested,
    LifetimeExpired,
    Pilot,
    PilotState,
    PilotLost,
    RetryGranted,
    Section,
    SectionState,
    SlotMatched,
    StageOutDone,
    split_job,
)
from .monitoring import Collector

log = logging.getLogger(__name__)

USAGE_HALF_LIFE_MS = 3_600_000
KILL_DEADLINE_S = 120
PROXY_TTL_S = 43_200
PROXY_RENEW_FRACTION = 0.2


class UnknownJob(model.DeskcafError):
    pass


class UnknownSection(model.DeskcafError):
    pass


class NotOwner(auth.AuthFailed):
    pass


class JobNotFinished(model.DeskcafError):
    pass


class DestinationUnreachable(model.DeskcafError):
    pass


class RequirementsParseError(model.DeskcafError):
    def __init__(self, parse_error: matchlang.ParseError):
        self.parse_error = parse_error
        super().__init__(str(parse_error))


@dataclass(frozen=True)
class GlidekeeperConfig:
    overcommit: float = 1.0
    max_submit_per_tick: int = 10
    pilot_idle_timeout_s: int = 600
    pilot_max_lifetime_s: int = 21_600
    max_pilots: dict = field(default_factory=dict)  # site_id -> cap; default n_workers

    def cap_for(self, site) -> int:
        return self.max_pilots.get(site.site_id, site.n_workers)


@dataclass(frozen=True)
class PilotRequest:
    site_id: str
    count: int


@dataclass(frozen=True)
class GlidekeeperPlan:
    requests: tuple
    retire_idle: tuple
    retire_lifetime: tuple
    proxy_errors: tuple


@dataclass(frozen=True)
class AccountingRecord:
    vo: str
    user: str
    site_id: str
    cpu_seconds: float
    wall_end: int


@dataclass(frozen=True)
class JobSummary:
    job_id: int
    user: str
    sections: tuple  # of (index, state name, exit_code, cpu_seconds, start, end)
    output_archive_ids: tuple
    destination: str


@dataclass
class JobRecord:
    job_id: int
    spec: JobSpec
    sections: list
    requirements: matchlang.Expr
    submit_time: int
    summary_emitted: bool = False


class Portal:
    def __init__(self, name: str, realm_key: bytes, identity_map: auth.IdentityMap, sites, now: int = 0):
        self.name = name
        self.realm_key = realm_key
        self.identity_map = identity_map
        self.sites = {s.site_id: s for s in sites}
        self.clock = now

        self.jobs = {}
        self.pilots = {}
        self.ledger = []
        self.notifications = {}
        self.spool = {}  # (job_id, index) -> artifact id
        self.output_store = ArtifactStore()
        self.collector = Collector()
        self.pending_kills = {}  # sid -> requested_at

        self._usage = {}  # principal -> (value, as_of_ms)
        self._next_job_id = 1
        self._next_pilot_id = 1
        self._section_site = {}  # sid -> site_id of current executor
        self._assignments = {}  # sid -> executor string, from match until terminal/retry
        self.section_observers = []  # callables (before, after)
        self.pilot_observers = []

        # Grid trust: a root identity anchored on the realm key, one
        # delegated proxy per site for pilot submission, one per user for
        # brokered dispatch.
        self.grid_root_secret = auth._derive_secret(realm_key, "grid-root")
        self.grid_root = auth.make_root_identity(
            "/DC=org/DC=caf/CN=root", self.grid_root_secret, now + 10 * 365 * 86_400_000, depth_allowed=4
        )
        self.site_proxies = {}  # site_id -> (GridProxy, secret)
        self.user_proxies = {}  # principal -> (GridProxy, secret)
        for site_id in self.sites:
            self._delegate_site_proxy(site_id, now)

    # -- credentials ------------------------------------------------------

    def _delegate_site_proxy(self, site_id: str, now: int):
        subject = f"/DC=org/DC=caf/CN=portal/{self.name}/{site_id}"
        self.site_proxies[site_id] = auth.delegate_proxy(
            self.grid_root, self.grid_root_secret, subject, PROXY_TTL_S, now
        )

    def _ensure_user_proxy(self, principal: str, now: int):
        subject = self.identity_map.map_identity(principal)
        current = self.user_proxies.get(principal)
        if current is not None and not self._near_expiry(current[0], now):
            return current
        pair = auth.delegate_proxy(self.grid_root, self.grid_root_secret, subject, PROXY_TTL_S, now)
        self.user_proxies[principal] = pair
        return pair

    @staticmethod
    def _near_expiry(proxy: auth.GridProxy, now: int) -> bool:
        return proxy.not_after - now < PROXY_RENEW_FRACTION * PROXY_TTL_S * 1000

    def _verify(self, token: auth.UserToken, now: int) -> str:
        return auth.verify_token(token, now, self.realm_key)

    # -- usage ------------------------------------------------------------

    def decayed_usage(self, principal: str, now: int) -> float:
        value, as_of = self._usage.get(principal, (0.0, now))
        if now <= as_of or value == 0.0:
            return value
        return value * math.pow(0.5, (now - as_of) / USAGE_HALF_LIFE_MS)

    def charge_usage(self, principal: str, cpu_seconds: float, now: int):
        self._usage[principal] = (self.decayed_usage(principal, now) + cpu_seconds, now)

    # -- submission -------------------------------------------------------

    def submit_job(self, token: auth.UserToken, spec: JobSpec, now: int) -> int:
        principal = self._verify(token, now)
        if principal != spec.user:
            raise auth.AuthFailed(f"token principal {principal} does not match spec user {spec.user}")
        try:
            requirements = matchlang.parse_requirements(spec.requirements_expr)
        except matchlang.ParseError as exc:
            raise RequirementsParseError(exc) from exc
        self._ensure_user_proxy(principal, now)

        job_id = self._next_job_id
        self._next_job_id += 1
        sections = split_job(job_id, spec, submit_time=now)
        self.jobs[job_id] = JobRecord(job_id, spec, sections, requirements, now)
        for section in sections:
            self.collector.register(section.sid)
        log.info("job %d: %d sections from %s", job_id, spec.n_sections, principal)
        return job_id

    # -- section/pilot bookkeeping ---------------------------------------

    def job(self, job_id: int) -> JobRecord:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(str(job_id)) from None

    def section(self, job_id: int, index: int) -> Section:
        record = self.job(job_id)
        if not 0 <= index < len(record.sections):
            raise UnknownSection(f"{job_id}.{index}")
        return record.sections[index]

    def section_by_sid(self, sid: str) -> Section:
        job_id, _, index = sid.partition(".")
        try:
            return self.section(int(job_id), int(index))
        except ValueError:
            raise UnknownSection(sid) from None

    def update_section(self, section: Section, event, **fields) -> Section:
        updated = model.apply_section_event(section, event, **fields)
        self.jobs[section.job_id].sections[section.index] = updated
        for observe in self.section_observers:
            observe(section, updated)
        if updated.state in model.SECTION_TERMINAL and updated.state is not SectionState.FAILED_INFRA:
            self._section_site.pop(updated.sid, None)
            self._assignments.pop(updated.sid, None)
            self.pending_kills.pop(updated.sid, None)
            self._maybe_emit_summary(updated.job_id)
        return updated

    def executor_of(self, sid: str):
        return self._assignments.get(sid)

    def update_pilot(self, pilot: Pilot, event, **fields) -> Pilot:
        updated = model.apply_pilot_event(pilot, event, **fields)
        self.pilots[pilot.pilot_id] = updated
        for observe in self.pilot_observers:
            observe(pilot, updated)
        return updated

    def new_pilot(self, site_id: str, now: int) -> Pilot:
        proxy, _ = self.site_proxies[site_id]
        pilot = Pilot(
            pilot_id=self._next_pilot_id,
            site_id=site_id,
            state=PilotState.REQUESTED,
            submitted_time=now,
            proxy=proxy.subject,
        )
        self._next_pilot_id += 1
        self.pilots[pilot.pilot_id] = pilot
        return pilot

    def idle_ads(self) -> list:
        ads = [p.slot_ad for p in self.pilots.values() if p.state is PilotState.ADVERTISING]
        return sorted(ads, key=lambda ad: (ad.advertised_at, ad.pilot_id))

    # -- negotiator -------------------------------------------------------

    def waiting_sections_in_order(self, now: int) -> list:
        """All WAITING sections in fair-share dispatch order."""
        by_user = {}
        for record in self.jobs.values():
            for section in record.sections:
                if section.state is SectionState.WAITING:
                    by_user.setdefault(record.spec.user, []).append(section)
        ordered = []
        for user in sorted(by_user, key=lambda u: (self.decayed_usage(u, now), u)):
            ordered.extend(sorted(by_user[user], key=lambda s: (s.submit_time, s.job_id, s.index)))
        return ordered

    def negotiate(self, now: int) -> list:
        """Match WAITING sections to idle slot ads; returns [(sid, pilot_id)].

        Users go in ascending decayed-usage order (ties by principal);
        within a user, sections FIFO. Each section takes the eligible ad
        with the lowest (advertised_at, pilot_id); sections whose
        requirements error against an ad skip it (logged).
        """
        available = self.idle_ads()
        matches = []
        for section in self.waiting_sections_in_order(now):
            requirements = self.jobs[section.job_id].requirements
            chosen = None
            for ad in available:
                try:
                    if matchlang.eval_requirements(requirements, ad.attributes):
                        chosen = ad
                        break
                except matchlang.EvalError as exc:
                    log.debug("section %s vs pilot %d: %s", section.sid, ad.pilot_id, exc)
            if chosen is None:
                continue
            available.remove(chosen)
            pilot = self.pilots[chosen.pilot_id]
            self.update_pilot(pilot, Claimed())
            self.update_section(section, SlotMatched(), attempts=section.attempts + 1)
            self._section_site[section.sid] = pilot.site_id
            self._assignments[section.sid] = f"pilot-{chosen.pilot_id}"
            matches.append((section.sid, chosen.pilot_id))

        for sid, pilot_id in matches:  # post-hoc guard: a match must satisfy requirements
            requirements = self.jobs[self.section_by_sid(sid).job_id].requirements
            ad = self.pilots[pilot_id].slot_ad
            assert matchlang.eval_requirements(requirements, ad.attributes) is True
        return matches

    # -- glidekeeper ------------------------------------------------------

    def glidekeeper_tick(self, cfg: GlidekeeperConfig, now: int) -> GlidekeeperPlan:
        """Provisioning plan: pilot requests per DIRECT site plus retirements.

        Demand counts WAITING sections whose requirements are satisfiable
        by the site's static attribute template. Site proxies are renewed
        when within the renewal window; a site whose proxy fails
        verification gets no pilots this tick.
        """
        waiting = [
            (s, self.jobs[s.job_id].requirements)
            for record in self.jobs.values()
            for s in record.sections
            if s.state is SectionState.WAITING
        ]

        requests = []
        proxy_errors = []
        for site in self.sites.values():
            if site.flavor != "DIRECT":
                continue
            proxy, _ = self.site_proxies[site.site_id]
            if self._near_expiry(proxy, now):
                try:
                    self._delegate_site_proxy(site.site_id, now)
                    proxy, _ = self.site_proxies[site.site_id]
                    log.info("renewed site proxy for %s", site.site_id)
                except auth.AuthFailed as exc:
                    log.warning("proxy renewal for %s failed: %s", site.site_id, exc)
            try:
                auth.verify_proxy(proxy, now, self.grid_root_secret)
            except auth.AuthFailed as exc:
                log.warning("no pilots for %s: %s", site.site_id, exc)
                proxy_errors.append(site.site_id)
                continue

            demand = 0
            for section, requirements in waiting:
                try:
                    if matchlang.eval_requirements(requirements, site.attribute_template):
                        demand += 1
                except matchlang.EvalError as exc:
                    log.debug("section %s vs site %s template: %s", section.sid, site.site_id, exc)
            live = sum(
                1
                for p in self.pilots.values()
                if p.site_id == site.site_id and p.state in model.PILOT_LIVE
            )
            target = min(cfg.cap_for(site), math.ceil(demand * cfg.overcommit))
            count = max(0, min(cfg.max_submit_per_tick, target - live))
            if count > 0:
                requests.append(PilotRequest(site.site_id, count))

        retire_idle = []
        retire_lifetime = []
        for pilot in list(self.pilots.values()):
            if pilot.state in model.PILOT_TERMINAL or pilot.state is PilotState.RETIRING:
                continue
            age = now - pilot.submitted_time
            if age > cfg.pilot_max_lifetime_s * 1000:
                retire_lifetime.append(pilot.pilot_id)
                continue
            if pilot.state is PilotState.ADVERTISING:
                idle_since = pilot.last_claim_end if pilot.last_claim_end is not None else pilot.boot_time
                if idle_since is not None and now - idle_since > cfg.pilot_idle_timeout_s * 1000:
                    retire_idle.append(pilot.pilot_id)

        return GlidekeeperPlan(tuple(requests), tuple(retire_idle), tuple(retire_lifetime), tuple(proxy_errors))

    def apply_retirements(self, plan: GlidekeeperPlan) -> list:
        """Apply the plan's retirements; returns pilot ids that left the pool."""
        released = []
        for pilot_id in plan.retire_idle:
            pilot = self.pilots[pilot_id]
            if pilot.state is PilotState.ADVERTISING:
                pilot = self.update_pilot(pilot, IdleTimeout())
                self.update_pilot(pilot, IdleTimeout())  # no claim to drain
                released.append(pilot_id)
        for pilot_id in plan.retire_lifetime:
            pilot = self.pilots[pilot_id]
            if pilot.state is PilotState.ADVERTISING:
                pilot = self.update_pilot(pilot, LifetimeExpired())
                self.update_pilot(pilot, LifetimeExpired())
                released.append(pilot_id)
            elif pilot.state in (PilotState.CLAIMED, PilotState.QUEUED_AT_SITE):
                updated = self.update_pilot(pilot, LifetimeExpired())
                if updated.state is PilotState.TERMINATED:
                    released.append(pilot_id)
                # CLAIMED pilots drain: they terminate when the claim releases
        return released

    # -- results ----------------------------------------------------------

    def record_section_result(self, sid: str, exit_code: int, cpu_seconds: float, artifact_id: str, now: int):
        """Terminal bookkeeping for a staged-out section (exactly once)."""
        section = self.section_by_sid(sid)
        executor = section.claimed_pilot
        site_id = self._section_site.get(sid, "unknown")
        updated = self.update_section(
            section,
            StageOutDone(exit_code),
            exit_code=exit_code,
            cpu_seconds=cpu_seconds,
            end_time=now,
            claimed_pilot=None,
        )
        spec = self.jobs[section.job_id].spec
        self.ledger.append(AccountingRecord(spec.vo, spec.user, site_id, cpu_seconds, now))
        self.charge_usage(spec.user, cpu_seconds, now)
        if artifact_id is not None:
            self.spool[(section.job_id, section.index)] = artifact_id
        self._release_claim(executor, now)
        return updated

    def record_kill_result(self, sid: str, cpu_seconds: float, artifact_id, now: int):
        """Worker acknowledged a kill: partial output spooled, section KILLED."""
        section = self.section_by_sid(sid)
        executor = section.claimed_pilot
        site_id = self._section_site.get(sid, "unknown")
        spec = self.jobs[section.job_id].spec
        updated = self.update_section(
            section, KillRequested(), cpu_seconds=cpu_seconds, end_time=now, claimed_pilot=None
        )
        if cpu_seconds:
            self.ledger.append(AccountingRecord(spec.vo, spec.user, site_id, cpu_seconds, now))
            self.charge_usage(spec.user, cpu_seconds, now)
        if artifact_id is not None:
            self.spool[(section.job_id, section.index)] = artifact_id
        self.collector.clear_kill(sid)
        self._release_claim(executor, now)
        return updated

    def on_executor_lost(self, sid: str, now: int) -> Section:
        """Pilot/worker vanished under a section; retry if budget remains."""
        section = self.section_by_sid(sid)
        self._assignments.pop(sid, None)
        if sid in self.pending_kills:
            # a requested kill beats the retry budget
            updated = self.update_section(section, KillRequested(), end_time=now, claimed_pilot=None)
            self.collector.clear_kill(sid)
            return updated
        updated = self.update_section(section, PilotLost(), claimed_pilot=None, end_time=None, start_time=None)
        if updated.attempts <= model.MAX_RETRIES:
            updated = self.update_section(updated, RetryGranted())
            self._section_site.pop(sid, None)
            log.info("section %s re-queued (attempt %d used)", sid, section.attempts)
        else:
            self._section_site.pop(sid, None)
            self._maybe_emit_summary(updated.job_id)
            log.warning("section %s exhausted its %d retries", sid, model.MAX_RETRIES)
        return updated

    def _release_claim(self, executor, now: int):
        if executor is None or not executor.startswith("pilot-"):
            return
        pilot = self.pilots.get(int(executor.split("-", 1)[1]))
        if pilot is None:
            return
        if pilot.state is PilotState.CLAIMED:
            ad = replace(pilot.slot_ad, advertised_at=now)
            self.update_pilot(pilot, ClaimReleased(), last_claim_end=now, slot_ad=ad)
        elif pilot.state is PilotState.RETIRING:
            self.update_pilot(pilot, ClaimReleased(), last_claim_end=now)

    def _maybe_emit_summary(self, job_id: int):
        record = self.jobs[job_id]
        if record.summary_emitted:
            return
        if not all(self._is_section_terminal(s) for s in record.sections):
            return
        record.summary_emitted = True
        summary = JobSummary(
            job_id=job_id,
            user=record.spec.user,
            sections=tuple(
                (s.index, s.state.value, s.exit_code, s.cpu_seconds, s.start_time, s.end_time)
                for s in record.sections
            ),
            output_archive_ids=tuple(
                self.spool[(job_id, s.index)] for s in record.sections if (job_id, s.index) in self.spool
            ),
            destination=record.spec.output_destination,
        )
        self.notifications.setdefault(record.spec.user, []).append(summary)
        log.info("job %d finished; summary queued for %s", job_id, record.spec.user)

    @staticmethod
    def _is_section_terminal(section: Section) -> bool:
        if section.state is SectionState.FAILED_INFRA:
            return section.attempts > model.MAX_RETRIES
        return section.state in model.SECTION_TERMINAL

    def job_is_terminal(self, job_id: int) -> bool:
        return all(self._is_section_terminal(s) for s in self.job(job_id).sections)

    # -- kill ---------------------------------------------------------------

    def kill(self, token: auth.UserToken, job_id: int, selector, now: int) -> dict:
        """Kill all or selected sections. Queued work dies now; running work
        gets a forwarded kill and is force-killed at the deadline."""
        principal = self._verify(token, now)
        record = self.job(job_id)
        if record.spec.user != principal:
            raise NotOwner(f"{principal} does not own job {job_id}")
        if selector == "ALL":
            indices = range(len(record.sections))
        else:
            indices = list(selector)
            for i in indices:
                if not 0 <= i < len(record.sections):
                    raise UnknownSection(f"{job_id}.{i}")

        outcome = {}
        for i in indices:
            section = record.sections[i]
            if section.state in (SectionState.WAITING, SectionState.MATCHED):
                executor = self._assignments.get(section.sid)
                self.update_section(section, KillRequested(), end_time=now)
                if executor is not None:
                    self._release_claim(executor, now)
                outcome[i] = "KILLED"
            elif section.state in Section.EXECUTING:
                delivery = self.collector.forward_kill(section.sid, now)
                self.pending_kills[section.sid] = now
                outcome[i] = f"FORWARDED_{delivery}"
            else:
                outcome[i] = "ALREADY_TERMINAL"
        return {"job_id": job_id, "sections": outcome, "deadline_s": KILL_DEADLINE_S}

    def kill_deadline_expired(self, sid: str, now: int):
        """Force-kill a section whose worker never acknowledged."""
        if sid not in self.pending_kills:
            return None
        section = self.section_by_sid(sid)
        if section.state not in Section.EXECUTING:
            return None
        executor = section.claimed_pilot
        updated = self.update_section(section, KillRequested(), end_time=now, claimed_pilot=None)
        self.collector.clear_kill(sid)
        self._release_claim(executor, now)
        log.warning("section %s force-killed at deadline", sid)
        return updated

    # -- output delivery ----------------------------------------------------

    def deliver_output(self, token: auth.UserToken, job_id: int, destination: str, now: int, base_dir=None) -> dict:
        """Copy every spooled archive for a finished job to the destination.

        The copy channel is authenticated by the verified token. Re-delivery
        overwrites. Returns {"archives": n, "bytes": total}.
        """
        from .archive import wrap_gzip

        principal = self._verify(token, now)
        record = self.job(job_id)
        if record.spec.user != principal:
            raise NotOwner(f"{principal} does not own job {job_id}")
        if not self.job_is_terminal(job_id):
            raise JobNotFinished(f"job {job_id} still has live sections")

        if destination.startswith("file:"):
            target = destination[len("file:") :]
        elif "://" in destination or destination.startswith(("null:", "mailto:")):
            raise DestinationUnreachable(f"unsupported destination {destination!r}")
        else:
            target = destination
        target_dir = Path(base_dir) / target if base_dir is not None and not Path(target).is_absolute() else Path(target)
        try:
            target_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DestinationUnreachable(f"{destination!r}: {exc}") from exc

        total = 0
        count = 0
        for (jid, index), artifact in sorted(self.spool.items()):
            if jid != job_id:
                continue
            wrapped = wrap_gzip(self.output_store.get(artifact))
            out_path = target_dir / f"job{jid}_section{index}.caf1.gz"
            try:
                out_path.write_bytes(wrapped)
            except OSError as exc:
                raise DestinationUnreachable(f"{out_path}: {exc}") from exc
            total += len(wrapped)
            count += 1
        return {"archives": count, "bytes": total}

    # -- accounting ---------------------------------------------------------

    def accounting_report(self, from_ms=None, to_ms=None) -> list:
        """Per-VO cpu totals and one-decimal shares (largest remainder).

        Shares sum to exactly 100.0 for a non-empty window; VOs are sorted
        by descending share, ties by name.
        """
        totals = {}
        for rec in self.ledger:
            if from_ms is not None and rec.wall_end < from_ms:
                continue
            if to_ms is not None and rec.wall_end >= to_ms:
                continue
            totals[rec.vo] = totals.get(rec.vo, 0.0) + rec.cpu_seconds
        return largest_remainder_shares(totals)

    # -- invariants (exercised by tests and the simulator) -------------------

    def check_invariants(self):
        for record in self.jobs.values():
            assert len(record.sections) == record.spec.n_sections
            for i, section in enumerate(record.sections):
                assert section.index == i
        claims = {}
        for record in self.jobs.values():
            for section in record.sections:
                if section.claimed_pilot and section.claimed_pilot.startswith("pilot-"):
                    claims.setdefault(section.claimed_pilot, []).append(section.sid)
        for executor, sids in claims.items():
            assert len(sids) == 1, f"{executor} claimed by {sids}"
        advertising = {p.pilot_id for p in self.pilots.values() if p.state is PilotState.ADVERTISING}
        assert {ad.pilot_id for ad in self.idle_ads()} == advertising
        ledger_total = sum(r.cpu_seconds for r in self.ledger)
        terminal_total = sum(
            s.cpu_seconds
            for record in self.jobs.values()
            for s in record.sections
            if s.state in model.SECTION_TERMINAL
        )
        assert abs(ledger_total - terminal_total) < 1e-6, (ledger_total, terminal_total)


def largest_remainder_shares(totals: dict) -> list:
    """[(vo, cpu_seconds, share_percent)] with one-decimal largest-remainder rounding."""
    if not totals:
        return []
    grand = sum(totals.values())
    if grand <= 0:
        return []
    tenths = {}
    remainders = {}
    for vo, cpu in totals.items():
        raw = cpu * 1000.0 / grand
        tenths[vo] = int(raw)
        remainders[vo] = raw - int(raw)
    leftover = 1000 - sum(tenths.values())
    for vo in sorted(totals, key=lambda v: (-remainders[v], v))[:leftover]:
        tenths[vo] += 1
    rows = [(vo, totals[vo], tenths[vo] / 10.0) for vo in totals]
    rows.sort(key=lambda r: (-r[2], r[0]))
    return rows
