"""LOCAL backend: run sections as real subprocesses on the portal host.

A LocalExecutor registers a handful of pseudo-pilots for site "local" so
the ordinary negotiator matches sections onto them, then runs each claimed
section synchronously in a sandbox directory: stage the job's tarball or
manifest in, run the command with CAF_SECTION set and stdout/stderr
captured into section.log, pack the working directory as the output
archive. Timestamps here are wall milliseconds.
"""

from __future__ import annotations

import contextlib
import logging
import os
import subprocess
import time
from pathlib import Path

from . import model
from .archive import pack, unpack
from .distribution import Manifest, Namespace
from .model import Booted, SectionState, SiteAccepted, SlotAd, StageInDone, ExecStarted, ExecExited
from .monitoring import Heartbeat
from .portal import Portal

log = logging.getLogger(__name__)

DEFAULT_WALL_LIMIT_S = 600


class WallLimitExceeded(model.DeskcafError):
    pass


def now_ms() -> int:
    return int(time.time() * 1000)


def worker_execute(command: str, workdir, section_index: int, wall_limit_s: float = DEFAULT_WALL_LIMIT_S):
    """Run a section command; returns (exit_code, cpu_seconds, archive_bytes, artifact_id).

    The command runs under the shell in ``workdir`` with CAF_SECTION set;
    stdout and stderr land in section.log, which is packed into the output
    archive along with whatever else the command left behind.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log_path = workdir / "section.log"
    env = dict(os.environ, CAF_SECTION=str(section_index))
    started = time.monotonic()
    try:
        with open(log_path, "ab") as sink:
            proc = subprocess.run(
                command, shell=True, cwd=workdir, env=env,
                stdout=sink, stderr=subprocess.STDOUT, timeout=wall_limit_s,
            )
        exit_code = proc.returncode
    except subprocess.TimeoutExpired:
        raise WallLimitExceeded(f"section {section_index} exceeded {wall_limit_s}s") from None
    cpu_seconds = time.monotonic() - started

    tree = []
    for path in sorted(workdir.rglob("*")):
        if path.is_file():
            tree.append((path.relative_to(workdir).as_posix(), path.stat().st_mode & 0o7777, path.read_bytes()))
    blob, artifact = pack(tree)
    return exit_code, cpu_seconds, blob, artifact


class LocalExecutor:
    """Drives LOCAL jobs through the portal's ordinary match/record cycle.

    Portal mutations happen under ``lock`` (when given) so a served portal
    can run this off its API threads; the subprocess itself runs unlocked.
    A kill landing mid-subprocess takes effect at the section boundary or
    the kill deadline, whichever comes first.
    """

    SITE_ID = "local"

    def __init__(self, portal: Portal, n_slots: int, sandbox_root, input_source=None,
                 wall_limit_s: float = DEFAULT_WALL_LIMIT_S, attributes=None, lock=None):
        self.portal = portal
        self.sandbox_root = Path(sandbox_root)
        self.input_source = input_source
        self.wall_limit_s = wall_limit_s
        self.lock = lock
        with self._held():
            portal._delegate_site_proxy(self.SITE_ID, now_ms())
            template = {"Site": self.SITE_ID, "Memory": 4096, "Arch": os.uname().machine, "GridFlavor": "LOCAL"}
            if attributes:
                template.update(attributes)
            for _ in range(n_slots):
                pilot = portal.new_pilot(self.SITE_ID, now_ms())
                pilot = portal.update_pilot(pilot, SiteAccepted())
                pilot = portal.update_pilot(pilot, SiteAccepted())
                ad = SlotAd(pilot_id=pilot.pilot_id, advertised_at=now_ms(),
                            attributes={**template, "PilotId": pilot.pilot_id})
                portal.update_pilot(pilot, Booted(), slot_ad=ad, boot_time=now_ms())

    def _held(self):
        return self.lock if self.lock is not None else contextlib.nullcontext()

    def run_pending(self) -> int:
        """Match and synchronously execute WAITING LOCAL sections; returns count run."""
        executed = 0
        while True:
            with self._held():
                matches = [
                    (sid, pid) for sid, pid in self.portal.negotiate(now_ms())
                    if self.portal.pilots[pid].site_id == self.SITE_ID
                ]
            if not matches:
                return executed
            for sid, pilot_id in matches:
                self._run_section(sid, pilot_id)
                executed += 1

    def _run_section(self, sid: str, pilot_id: int):
        portal = self.portal
        executor = f"pilot-{pilot_id}"
        with self._held():
            section = portal.section_by_sid(sid)
            if section.state is not SectionState.MATCHED:
                portal._release_claim(executor, now_ms())
                return
            spec = portal.jobs[section.job_id].spec
            section = portal.update_section(section, ExecStarted(), claimed_pilot=executor)
        workdir = self.sandbox_root / f"job{section.job_id}" / f"section{section.index}"
        workdir.mkdir(parents=True, exist_ok=True)

        try:
            self._stage_in(spec, workdir)
        except model.DeskcafError as exc:
            log.warning("stage-in for %s failed: %s", sid, exc)
            with self._held():
                portal.on_executor_lost(sid, now_ms())
                portal._release_claim(executor, now_ms())
            return
        with self._held():
            if portal.section_by_sid(sid).state is not SectionState.TRANSFERRING:
                return
            portal.update_section(portal.section_by_sid(sid), StageInDone(), start_time=now_ms())
            killed = sid in portal.pending_kills
            if killed:
                blob, artifact = pack([("section.log", 0o644, b"killed before start\n")])
                portal.output_store.put(blob)
                portal.record_kill_result(sid, 0.0, artifact, now_ms())
        if killed:
            return

        try:
            exit_code, cpu, blob, artifact = worker_execute(
                spec.command, workdir, section.index, self.wall_limit_s
            )
        except WallLimitExceeded:
            with self._held(), contextlib.suppress(model.IllegalTransition):
                blob, artifact = pack([("section.log", 0o644, b"wall limit exceeded\n")])
                portal.output_store.put(blob)
                portal.update_section(portal.section_by_sid(sid), ExecExited(124))
                portal.record_section_result(sid, 124, self.wall_limit_s, artifact, now_ms())
            return
        with self._held(), contextlib.suppress(model.IllegalTransition):
            # IllegalTransition here means a force-kill won while we were running
            portal.output_store.put(blob)
            self._heartbeat_tail(sid, executor, workdir, cpu)
            portal.update_section(portal.section_by_sid(sid), ExecExited(exit_code))
            portal.record_section_result(sid, exit_code, cpu, artifact, now_ms())

    def _stage_in(self, spec, workdir: Path):
        if spec.user_tarball_id is not None and self.input_source is not None:
            got = self.input_source.get(spec.user_tarball_id)
            data = got[0] if isinstance(got, tuple) else got
            for path, mode, content in unpack(data):
                target = workdir / path
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(content)
                os.chmod(target, mode & 0o7777)
        elif spec.input_manifest_id is not None and self.input_source is not None:
            got = self.input_source.get(spec.input_manifest_id)
            data = got[0] if isinstance(got, tuple) else got
            namespace = Namespace(Manifest.from_json(data.decode("utf-8")), self.input_source)
            for entry in namespace.manifest.entries:
                namespace.materialize_to(workdir, entry.path)

    def _heartbeat_tail(self, sid: str, executor: str, workdir: Path, cpu: float):
        log_path = workdir / "section.log"
        lines = log_path.read_text(errors="replace").splitlines() if log_path.exists() else []
        tail = tuple((i + 1, text) for i, text in enumerate(lines[-100:], start=max(0, len(lines) - 100)))
        listing = tuple(
            (p.relative_to(workdir).as_posix(), p.stat().st_size)
            for p in sorted(workdir.rglob("*")) if p.is_file()
        )
        hb = Heartbeat(section_id=sid, worker_id=executor, state="RUNNING",
                       cpu_seconds=cpu, log_tail=tail, workdir_listing=listing, sent_at=now_ms())
        self.portal.collector.ingest_heartbeat(hb)
