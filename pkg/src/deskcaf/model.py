"""Domain types and the section/pilot lifecycle state machines.

Everything here is an immutable value; the two transition functions are
pure, so any number of concurrent callers may share them. All timestamps
are integer simulation milliseconds (wall milliseconds in LOCAL mode).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Union

MAX_RETRIES = 2

AttrValue = Union[int, str, bool]


class DeskcafError(Exception):
    pass


class InvalidSpec(DeskcafError):
    pass


class IllegalTransition(DeskcafError):
    def __init__(self, state, event):
        self.state = state
        self.event = event
        super().__init__(f"no transition from {state.name} on {event!r}")


class ExecBackend(Enum):
    SIMULATED = "SIMULATED"
    LOCAL = "LOCAL"


class SectionState(Enum):
    WAITING = "WAITING"
    MATCHED = "MATCHED"
    TRANSFERRING = "TRANSFERRING"
    RUNNING = "RUNNING"
    STAGING_OUT = "STAGING_OUT"
    COMPLETED = "COMPLETED"
    FAILED_USER = "FAILED_USER"
    FAILED_INFRA = "FAILED_INFRA"
    KILLED = "KILLED"


#: Terminal section states. FAILED_INFRA is terminal except for the single
#: RetryGranted escape, which the table below encodes.
SECTION_TERMINAL = frozenset(
    {SectionState.COMPLETED, SectionState.FAILED_USER, SectionState.FAILED_INFRA, SectionState.KILLED}
)


class PilotState(Enum):
    REQUESTED = "REQUESTED"
    QUEUED_AT_SITE = "QUEUED_AT_SITE"
    BOOTING = "BOOTING"
    ADVERTISING = "ADVERTISING"
    CLAIMED = "CLAIMED"
    RETIRING = "RETIRING"
    TERMINATED = "TERMINATED"
    PREEMPTED = "PREEMPTED"
    FAILED = "FAILED"


PILOT_TERMINAL = frozenset({PilotState.TERMINATED, PilotState.PREEMPTED, PilotState.FAILED})

#: Pilot states that count against a site's provisioning target.
PILOT_LIVE = frozenset(
    {
        PilotState.REQUESTED,
        PilotState.QUEUED_AT_SITE,
        PilotState.BOOTING,
        PilotState.ADVERTISING,
        PilotState.CLAIMED,
    }
)


# ---------------------------------------------------------------------------
# Section events


@dataclass(frozen=True)
class SlotMatched:
    """Negotiator (or broker) assigned an executor to the section."""


@dataclass(frozen=True)
class ExecStarted:
    """Worker wrapper started; input staging begins."""


@dataclass(frozen=True)
class StageInDone:
    """Input staged; user payload launched."""


@dataclass(frozen=True)
class ExecExited:
    """User payload exited with ``code``; output staging begins."""

    code: int


@dataclass(frozen=True)
class StageOutDone:
    """Output archive delivered; ``code`` is the recorded exit code."""

    code: int


@dataclass(frozen=True)
class PilotLost:
    """Executor vanished (preemption, crash, drop) while responsible for the section."""


@dataclass(frozen=True)
class KillRequested:
    """User kill reached the section (immediately, on worker ack, or at the deadline)."""


@dataclass(frozen=True)
class RetryGranted:
    """Portal re-queues an infrastructure failure."""


SectionEvent = Union[
    SlotMatched, ExecStarted, StageInDone, ExecExited, StageOutDone, PilotLost, KillRequested, RetryGranted
]


# ---------------------------------------------------------------------------
# Pilot events


@dataclass(frozen=True)
class SiteAccepted:
    """Site advanced the pilot: gatekeeper accepted it, or a worker picked it up."""


@dataclass(frozen=True)
class Booted:
    pass


@dataclass(frozen=True)
class Claimed:
    pass


@dataclass(frozen=True)
class ClaimReleased:
    pass


@dataclass(frozen=True)
class IdleTimeout:
    pass


@dataclass(frozen=True)
class LifetimeExpired:
    pass


@dataclass(frozen=True)
class Preempted:
    pass


@dataclass(frozen=True)
class BootFailed:
    pass


PilotEvent = Union[
    SiteAccepted, Booted, Claimed, ClaimReleased, IdleTimeout, LifetimeExpired, Preempted, BootFailed
]


# ---------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class SimProfile:
    duration_s: float = 60.0
    log_lines: int = 10
    output_bytes: int = 1024
    exit_code: int = 0

    def __post_init__(self):
        if self.duration_s < 0 or self.log_lines < 0 or self.output_bytes < 0:
            raise InvalidSpec("sim_profile fields must be non-negative")


@dataclass(frozen=True)
class JobSpec:
    user: str
    vo: str
    n_sections: int
    command: str
    requirements_expr: str
    output_destination: str
    exec_backend: ExecBackend = ExecBackend.SIMULATED
    input_manifest_id: Optional[str] = None
    user_tarball_id: Optional[str] = None
    sim_profile: Optional[SimProfile] = None

    def __post_init__(self):
        if self.n_sections < 1:
            raise InvalidSpec(f"n_sections must be >= 1, got {self.n_sections}")
        if (
            self.exec_backend is not ExecBackend.SIMULATED
            and self.input_manifest_id is None
            and self.user_tarball_id is None
        ):
            raise InvalidSpec("LOCAL jobs need an input manifest or a user tarball")
        if self.input_manifest_id is not None and self.user_tarball_id is not None:
            raise InvalidSpec("manifest and tarball delivery are mutually exclusive")


@dataclass(frozen=True)
class Section:
    job_id: int
    index: int
    state: SectionState = SectionState.WAITING
    attempts: int = 0
    claimed_pilot: Optional[str] = None
    cpu_seconds: float = 0.0
    submit_time: Optional[int] = None
    start_time: Optional[int] = None
    end_time: Optional[int] = None
    exit_code: Optional[int] = None

    EXECUTING = frozenset({SectionState.TRANSFERRING, SectionState.RUNNING, SectionState.STAGING_OUT})

    def __post_init__(self):
        if self.attempts > MAX_RETRIES + 1:
            raise InvalidSpec(f"attempts {self.attempts} exceeds {MAX_RETRIES + 1}")
        if self.start_time is not None and self.end_time is not None and self.start_time > self.end_time:
            raise InvalidSpec("start_time after end_time")
        if (self.claimed_pilot is not None) != (self.state in Section.EXECUTING):
            raise InvalidSpec(f"claimed_pilot must be set iff executing, state={self.state.name}")

    @property
    def sid(self) -> str:
        return f"{self.job_id}.{self.index}"


@dataclass(frozen=True)
class SlotAd:
    pilot_id: int
    attributes: dict
    advertised_at: int

    REQUIRED_ATTRS = ("Site", "Memory", "Arch", "GridFlavor")

    def __post_init__(self):
        missing = [a for a in SlotAd.REQUIRED_ATTRS if a not in self.attributes]
        if missing:
            raise InvalidSpec(f"slot ad missing attributes: {missing}")


@dataclass(frozen=True)
class Pilot:
    pilot_id: int
    site_id: str
    state: PilotState = PilotState.REQUESTED
    slot_ad: Optional[SlotAd] = None
    submitted_time: Optional[int] = None
    boot_time: Optional[int] = None
    last_claim_end: Optional[int] = None
    proxy: Optional[str] = None

    ADVERTISED = frozenset({PilotState.ADVERTISING, PilotState.CLAIMED, PilotState.RETIRING})

    def __post_init__(self):
        if (self.slot_ad is not None) != (self.state in Pilot.ADVERTISED):
            raise InvalidSpec(f"slot_ad must be set iff advertised, state={self.state.name}")


# ---------------------------------------------------------------------------
# Transition tables
#
# Keys are (state, event type); values are the successor, or a function of
# the event for the exit-code branch. Anything not listed is illegal.

_SECTION_TABLE = {
    (SectionState.WAITING, SlotMatched): SectionState.MATCHED,
    (SectionState.WAITING, KillRequested): SectionState.KILLED,
    (SectionState.MATCHED, ExecStarted): SectionState.TRANSFERRING,
    (SectionState.MATCHED, PilotLost): SectionState.FAILED_INFRA,
    (SectionState.MATCHED, KillRequested): SectionState.KILLED,
    (SectionState.TRANSFERRING, StageInDone): SectionState.RUNNING,
    (SectionState.TRANSFERRING, PilotLost): SectionState.FAILED_INFRA,
    (SectionState.TRANSFERRING, KillRequested): SectionState.KILLED,
    (SectionState.RUNNING, ExecExited): SectionState.STAGING_OUT,
    (SectionState.RUNNING, PilotLost): SectionState.FAILED_INFRA,
    (SectionState.RUNNING, KillRequested): SectionState.KILLED,
    (SectionState.STAGING_OUT, StageOutDone): lambda ev: (
        SectionState.COMPLETED if ev.code == 0 else SectionState.FAILED_USER
    ),
    (SectionState.STAGING_OUT, PilotLost): SectionState.FAILED_INFRA,
    (SectionState.STAGING_OUT, KillRequested): SectionState.KILLED,
    (SectionState.FAILED_INFRA, RetryGranted): SectionState.WAITING,
}

_PILOT_TABLE = {
    (PilotState.REQUESTED, SiteAccepted): PilotState.QUEUED_AT_SITE,
    (PilotState.REQUESTED, BootFailed): PilotState.FAILED,
    (PilotState.QUEUED_AT_SITE, SiteAccepted): PilotState.BOOTING,
    (PilotState.QUEUED_AT_SITE, BootFailed): PilotState.FAILED,
    (PilotState.QUEUED_AT_SITE, LifetimeExpired): PilotState.TERMINATED,
    (PilotState.QUEUED_AT_SITE, Preempted): PilotState.PREEMPTED,
    (PilotState.BOOTING, Booted): PilotState.ADVERTISING,
    (PilotState.BOOTING, BootFailed): PilotState.FAILED,
    (PilotState.BOOTING, Preempted): PilotState.PREEMPTED,
    (PilotState.ADVERTISING, Claimed): PilotState.CLAIMED,
    (PilotState.ADVERTISING, IdleTimeout): PilotState.RETIRING,
    (PilotState.ADVERTISING, LifetimeExpired): PilotState.RETIRING,
    (PilotState.ADVERTISING, Preempted): PilotState.PREEMPTED,
    (PilotState.CLAIMED, ClaimReleased): PilotState.ADVERTISING,
    (PilotState.CLAIMED, LifetimeExpired): PilotState.RETIRING,
    (PilotState.CLAIMED, Preempted): PilotState.PREEMPTED,
    (PilotState.RETIRING, ClaimReleased): PilotState.TERMINATED,
    (PilotState.RETIRING, IdleTimeout): PilotState.TERMINATED,
    (PilotState.RETIRING, LifetimeExpired): PilotState.TERMINATED,
    (PilotState.RETIRING, Preempted): PilotState.PREEMPTED,
}


def section_next_state(current: SectionState, event: SectionEvent) -> SectionState:
    """Return the unique successor for (state, event), or raise IllegalTransition."""
    successor = _SECTION_TABLE.get((current, type(event)))
    if successor is None:
        raise IllegalTransition(current, event)
    if callable(successor):
        return successor(event)
    return successor


def pilot_next_state(current: PilotState, event: PilotEvent) -> PilotState:
    """Return the unique successor for (state, event), or raise IllegalTransition."""
    successor = _PILOT_TABLE.get((current, type(event)))
    if successor is None:
        raise IllegalTransition(current, event)
    return successor


def split_job(job_id: int, spec: JobSpec, submit_time: int = 0) -> list[Section]:
    """Expand a spec into its n_sections WAITING sections (indices 0..n-1)."""
    if spec.n_sections < 1:
        raise InvalidSpec(f"n_sections must be >= 1, got {spec.n_sections}")
    return [
        Section(job_id=job_id, index=i, state=SectionState.WAITING, attempts=0, submit_time=submit_time)
        for i in range(spec.n_sections)
    ]


def spec_to_dict(spec: JobSpec) -> dict:
    doc = {
        "user": spec.user,
        "vo": spec.vo,
        "n_sections": spec.n_sections,
        "command": spec.command,
        "requirements": spec.requirements_expr,
        "output_destination": spec.output_destination,
        "exec_backend": spec.exec_backend.value,
    }
    if spec.input_manifest_id is not None:
        doc["input_manifest_id"] = spec.input_manifest_id
    if spec.user_tarball_id is not None:
        doc["user_tarball_id"] = spec.user_tarball_id
    if spec.sim_profile is not None:
        doc["sim_profile"] = {
            "duration_s": spec.sim_profile.duration_s,
            "log_lines": spec.sim_profile.log_lines,
            "output_bytes": spec.sim_profile.output_bytes,
            "exit_code": spec.sim_profile.exit_code,
        }
    return doc


def spec_from_dict(doc: dict) -> JobSpec:
    try:
        profile = None
        if doc.get("sim_profile") is not None:
            p = doc["sim_profile"]
            profile = SimProfile(
                duration_s=float(p.get("duration_s", 60.0)),
                log_lines=int(p.get("log_lines", 10)),
                output_bytes=int(p.get("output_bytes", 1024)),
                exit_code=int(p.get("exit_code", 0)),
            )
        return JobSpec(
            user=str(doc["user"]),
            vo=str(doc["vo"]),
            n_sections=int(doc["n_sections"]),
            command=str(doc.get("command", "")),
            requirements_expr=str(doc.get("requirements", "true")),
            output_destination=str(doc.get("output_destination", "file:outputs")),
            exec_backend=ExecBackend(doc.get("exec_backend", "SIMULATED")),
            input_manifest_id=doc.get("input_manifest_id"),
            user_tarball_id=doc.get("user_tarball_id"),
            sim_profile=profile,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidSpec(f"bad job spec: {exc}") from exc


def apply_section_event(section: Section, event: SectionEvent, **updates) -> Section:
    """Transition a section record, applying field updates in the same step."""
    return replace(section, state=section_next_state(section.state, event), **updates)


def apply_pilot_event(pilot: Pilot, event: PilotEvent, **updates) -> Pilot:
    new_state = pilot_next_state(pilot.state, event)
    if new_state not in Pilot.ADVERTISED:
        updates.setdefault("slot_ad", None)
    return replace(pilot, state=new_state, **updates)
