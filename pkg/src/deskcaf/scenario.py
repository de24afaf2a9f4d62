"""Scenario files: build a world from JSON, run it, write the outputs.

A scenario is fully offline and deterministic: sites, jobs with submit
times, optional kills, a seed, and an end time. The runner writes
trace.jsonl (one event per line, stable field order), summary.json, and
accounting.json into the output directory, then delivers finished jobs'
output archives to their destinations resolved against that directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

from . import auth, model
from .fabric import SiteConfig, World, WorldConfig
from .model import ExecBackend, spec_from_dict
from .portal import GlidekeeperConfig, Portal

log = logging.getLogger(__name__)

TOKEN_TTL_S = 10 * 365 * 86_400


def realm_key_for_seed(seed: int) -> bytes:
    return hashlib.sha256(f"deskcaf-realm|{seed}".encode()).digest()


def load_scenario(doc: dict, seed_override=None, t_end_override=None):
    """Build (world, t_end_ms, job plans) from a parsed scenario document."""
    seed = int(doc.get("seed", 1)) if seed_override is None else int(seed_override)
    t_end_s = float(doc.get("t_end_s", 7200)) if t_end_override is None else float(t_end_override)

    sites = []
    for entry in doc.get("sites", []):
        sites.append(
            SiteConfig(
                site_id=str(entry["site_id"]),
                flavor=str(entry.get("flavor", "DIRECT")),
                n_workers=int(entry.get("n_workers", 4)),
                attribute_template=dict(entry.get("attributes", {})),
                queue_latency_s=tuple(entry.get("queue_latency_s", (5.0, 30.0))),
                pilot_drop_prob=float(entry.get("pilot_drop_prob", 0.0)),
                worker_crash_prob=float(entry.get("worker_crash_prob", 0.0)),
                preempt_rate_per_hour=float(entry.get("preempt_rate_per_hour", 0.0)),
                proxy_url=entry.get("proxy_url"),
                cache_capacity_bytes=int(entry.get("cache_capacity_bytes", 64 * 1024 * 1024)),
            )
        )
    if not sites:
        raise model.InvalidSpec("scenario has no sites")

    specs = []
    for entry in doc.get("jobs", []):
        spec = spec_from_dict(entry["spec"])
        if spec.exec_backend is not ExecBackend.SIMULATED:
            raise model.InvalidSpec("offline scenarios take SIMULATED jobs only")
        specs.append((float(entry.get("submit_time_s", 0.0)), spec))

    identity_map = dict(doc.get("identity_map", {}))
    for _, spec in specs:
        identity_map.setdefault(spec.user, f"/DC=org/DC=caf/CN={spec.user}")

    gk = doc.get("glidekeeper", {})
    glidekeeper = GlidekeeperConfig(
        overcommit=float(gk.get("overcommit", 1.0)),
        max_submit_per_tick=int(gk.get("max_submit_per_tick", 10)),
        pilot_idle_timeout_s=int(gk.get("pilot_idle_timeout_s", 600)),
        pilot_max_lifetime_s=int(gk.get("pilot_max_lifetime_s", 21_600)),
        max_pilots=dict(gk.get("max_pilots", {})),
    )
    world_cfg = WorldConfig(
        seed=seed,
        negotiate_interval_s=float(doc.get("negotiate_interval_s", 5.0)),
        glidekeeper_interval_s=float(doc.get("glidekeeper_interval_s", 30.0)),
        heartbeat_interval_s=float(doc.get("heartbeat_interval_s", 30.0)),
        glidekeeper=glidekeeper,
    )

    realm_key = realm_key_for_seed(seed)
    portal = Portal(
        name=str(doc.get("portal_name", "portal")),
        realm_key=realm_key,
        identity_map=auth.IdentityMap(identity_map),
        sites=sites,
        now=0,
    )
    world = World(portal, sites, world_cfg)

    tokens = {}
    for submit_s, spec in specs:
        token = tokens.get(spec.user)
        if token is None:
            token = auth.issue_token(spec.user, TOKEN_TTL_S, realm_key, now=0)
            tokens[spec.user] = token
        world.schedule(int(submit_s * 1000), "job_submit", token=token, spec=spec)
    # job ids are handed out in submit-event order: (submit time, list position)
    submit_order = sorted(range(len(specs)), key=lambda i: (specs[i][0], i))
    owner_of_job = {jid: specs[idx][1].user for jid, idx in enumerate(submit_order, start=1)}
    for entry in doc.get("kills", []):
        job_id = int(entry["job_id"])
        owner = owner_of_job.get(job_id)
        if owner is None:
            raise model.InvalidSpec(f"kill refers to unknown job {job_id}")
        selector = entry.get("sections", "ALL")
        if selector != "ALL":
            selector = [int(i) for i in selector]
        world.schedule(int(float(entry["at_s"]) * 1000), "kill", token=tokens[owner], job_id=job_id, selector=selector)

    world.start()
    return world, int(t_end_s * 1000), tokens


def run_scenario(path, out_dir, seed=None, until_s=None) -> dict:
    """Run a scenario file to completion and write outputs under out_dir."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    world, t_end_ms, tokens = load_scenario(doc, seed_override=seed, t_end_override=until_s)
    world.run_until(t_end_ms)
    world.check_capacity()
    world.portal.check_invariants()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.jsonl").write_text("\n".join(world.trace_lines()) + "\n", encoding="utf-8")

    portal = world.portal
    receipts = {}
    for job_id, record in portal.jobs.items():
        if portal.job_is_terminal(job_id) and record.spec.output_destination:
            try:
                receipts[str(job_id)] = portal.deliver_output(
                    tokens[record.spec.user], job_id, record.spec.output_destination, world.clock, base_dir=out
                )
            except model.DeskcafError as exc:
                receipts[str(job_id)] = {"error": str(exc)}

    summary = summarize(world, receipts)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    report = portal.accounting_report()
    (out / "accounting.json").write_text(
        json.dumps(
            {"report": [{"vo": vo, "cpu_seconds": cpu, "share": share} for vo, cpu, share in report]},
            indent=2,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    return summary


def summarize(world: World, receipts=None) -> dict:
    portal = world.portal
    jobs = {}
    for job_id, record in portal.jobs.items():
        jobs[str(job_id)] = {
            "user": record.spec.user,
            "vo": record.spec.vo,
            "sections": [
                {
                    "index": s.index,
                    "state": s.state.value,
                    "attempts": s.attempts,
                    "exit_code": s.exit_code,
                    "cpu_seconds": s.cpu_seconds,
                }
                for s in record.sections
            ],
            "terminal": portal.job_is_terminal(job_id),
            "summary_emitted": record.summary_emitted,
        }
    return {
        "clock_ms": world.clock,
        "jobs": jobs,
        "pilots": {
            str(p.pilot_id): {"site": p.site_id, "state": p.state.value} for p in portal.pilots.values()
        },
        "notifications": {
            user: len(items) for user, items in portal.notifications.items()
        },
        "cache": {
            site_id: runtime.proxy.stats() if runtime.proxy else None
            for site_id, runtime in world.sites.items()
        },
        "receipts": receipts or {},
        "trace_events": len(world.trace),
    }
