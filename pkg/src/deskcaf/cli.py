"""caf: command-line client and operator tools.

User commands talk to a running portal over HTTP (portal URL from
CAF_PORTAL, falling back to --portal; token path from CAF_TOKEN, falling
back to --token-file). Operator commands run scenarios offline, serve a
portal, and mint tokens. Exit codes: 0 success, 1 user error, 2
portal/transport error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import requests

from . import auth, model
from .scenario import realm_key_for_seed, run_scenario

EXIT_OK = 0
EXIT_USER = 1
EXIT_PORTAL = 2

DEFAULT_PORTAL = "http://127.0.0.1:8420"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USER):
        super().__init__(message)
        self.code = code


def portal_url(args) -> str:
    return os.environ.get("CAF_PORTAL") or args.portal or DEFAULT_PORTAL


def load_token(args) -> str:
    path = os.environ.get("CAF_TOKEN") or args.token_file
    if not path:
        raise CliError("no token: set CAF_TOKEN or pass --token-file")
    try:
        return Path(path).read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise CliError(f"cannot read token: {exc}") from exc


def api(args, method: str, path: str, body=None, params=None) -> dict:
    url = portal_url(args).rstrip("/") + path
    try:
        if method == "GET":
            resp = requests.get(url, params=params, timeout=30)
        else:
            resp = requests.post(url, json=body, timeout=30)
    except requests.RequestException as exc:
        raise CliError(f"portal unreachable: {exc}", EXIT_PORTAL) from exc
    try:
        doc = resp.json()
    except ValueError as exc:
        raise CliError(f"portal returned non-JSON ({resp.status_code})", EXIT_PORTAL) from exc
    if resp.status_code >= 500:
        raise CliError(f"portal error {resp.status_code}: {doc}", EXIT_PORTAL)
    if resp.status_code >= 400:
        err = doc.get("error", {})
        raise CliError(f"{err.get('type', resp.status_code)}: {err.get('message', '')}")
    return doc


def render_table(rows, columns):
    if not rows:
        print("(empty)")
        return
    widths = [max(len(str(c)), max(len(str(r.get(c, ""))) for r in rows)) for c in columns]
    print("  ".join(str(c).ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(str(r.get(c, "")).ljust(w) for c, w in zip(columns, widths)))


def emit(args, doc, human):
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        human(doc)


# -- user commands -------------------------------------------------------------


def cmd_submit(args):
    try:
        doc = json.loads(Path(args.file).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read spec: {exc}") from exc
    spec = model.spec_from_dict(doc)  # validate before shipping
    body = {"spec": model.spec_to_dict(spec), "token": load_token(args)}
    result = api(args, "POST", "/api/v1/jobs", body)
    emit(args, result, lambda d: print(f"job {d['job_id']} submitted ({spec.n_sections} sections)"))
    return EXIT_OK


def cmd_status(args):
    doc = api(args, "GET", f"/api/v1/jobs/{args.job}")

    def human(d):
        states = " ".join(f"{k}={v}" for k, v in sorted(d["states"].items()))
        print(f"job {d['job_id']} user={d['user']} vo={d['vo']} terminal={d['terminal']} [{states}]")
        render_table(d["sections"], ["index", "state", "attempts", "exit_code", "cpu_seconds", "site", "stale"])

    emit(args, doc, human)
    return EXIT_OK


def cmd_tail(args):
    doc = api(args, "GET", f"/api/v1/sections/{args.job}.{args.section}/tail", params={"lines": args.lines})

    def human(d):
        if d["stale"]:
            print("(stale: no recent heartbeat)", file=sys.stderr)
        for line in d["lines"]:
            print(line)

    emit(args, doc, human)
    return EXIT_OK


def cmd_ls(args):
    doc = api(args, "GET", f"/api/v1/sections/{args.job}.{args.section}/ls")
    emit(args, doc, lambda d: render_table(
        [{"path": p, "bytes": s} for p, s in d["entries"]], ["path", "bytes"]))
    return EXIT_OK


def cmd_kill(args):
    selector = "ALL"
    if args.sections:
        try:
            selector = [int(i) for i in args.sections.split(",") if i != ""]
        except ValueError as exc:
            raise CliError(f"bad --sections: {exc}") from exc
    body = {"selector": selector, "token": load_token(args)}
    doc = api(args, "POST", f"/api/v1/jobs/{args.job}/kill", body)

    def human(d):
        for index in sorted(d["sections"], key=int):
            print(f"section {index}: {d['sections'][index]}")

    emit(args, doc, human)
    return EXIT_OK


def cmd_fetch(args):
    body = {"destination": args.dest, "token": load_token(args)}
    doc = api(args, "POST", f"/api/v1/jobs/{args.job}/deliver", body)
    emit(args, doc, lambda d: print(f"delivered {d['archives']} archives, {d['bytes']} bytes"))
    return EXIT_OK


# -- operator commands -----------------------------------------------------------


def cmd_sim_run(args):
    out = Path(args.out)
    try:
        summary = run_scenario(args.scenario, out, seed=args.seed, until_s=args.until)
    except (OSError, ValueError, model.DeskcafError) as exc:
        raise CliError(f"scenario failed: {exc}") from exc
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        for job_id, job in sorted(summary["jobs"].items(), key=lambda kv: int(kv[0])):
            states = {}
            for s in job["sections"]:
                states[s["state"]] = states.get(s["state"], 0) + 1
            state_text = " ".join(f"{k}={v}" for k, v in sorted(states.items()))
            print(f"job {job_id} user={job['user']} terminal={job['terminal']} [{state_text}]")
        print(f"clock={summary['clock_ms']} ms, {summary['trace_events']} trace events -> {out}")
    return EXIT_OK


def cmd_sim_report(args):
    path = Path(args.out) / "accounting.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CliError(f"no accounting at {path}: {exc}") from exc
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        render_table(doc["report"], ["vo", "cpu_seconds", "share"])
    return EXIT_OK


def cmd_serve(args):
    try:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config: {exc}") from exc
    service, host, port = build_service(config)
    address = service.start(host=host, port=port)
    print(f"portal {config.get('name', 'portal')} on http://{address[0]}:{address[1]}")
    try:
        import threading

        threading.Event().wait()
    except KeyboardInterrupt:
        service.stop()
    return EXIT_OK


def build_service(config: dict):
    from .distribution import ArtifactStore
    from .fabric import SiteConfig, World, WorldConfig
    from .httpapi import PortalService
    from .localexec import LocalExecutor
    from .portal import GlidekeeperConfig, Portal

    seed = int(config.get("seed", 1))
    if config.get("realm_key_file"):
        realm_key = Path(config["realm_key_file"]).read_bytes()
    else:
        realm_key = realm_key_for_seed(seed)

    sites = [
        SiteConfig(
            site_id=str(s["site_id"]),
            flavor=str(s.get("flavor", "DIRECT")),
            n_workers=int(s.get("n_workers", 4)),
            attribute_template=dict(s.get("attributes", {})),
            queue_latency_s=tuple(s.get("queue_latency_s", (5.0, 30.0))),
            pilot_drop_prob=float(s.get("pilot_drop_prob", 0.0)),
            worker_crash_prob=float(s.get("worker_crash_prob", 0.0)),
            preempt_rate_per_hour=float(s.get("preempt_rate_per_hour", 0.0)),
        )
        for s in config.get("sites", [])
    ]
    identity = dict(config.get("identity_map", {}))
    portal = Portal(
        name=str(config.get("name", "portal")),
        realm_key=realm_key,
        identity_map=auth.IdentityMap(identity),
        sites=sites,
        now=0,
    )
    origin = ArtifactStore()
    world = None
    if sites:
        gk = config.get("glidekeeper", {})
        world_cfg = WorldConfig(
            seed=seed,
            glidekeeper=GlidekeeperConfig(
                overcommit=float(gk.get("overcommit", 1.0)),
                max_submit_per_tick=int(gk.get("max_submit_per_tick", 10)),
                pilot_idle_timeout_s=int(gk.get("pilot_idle_timeout_s", 600)),
                pilot_max_lifetime_s=int(gk.get("pilot_max_lifetime_s", 21_600)),
                max_pilots=dict(gk.get("max_pilots", {})),
            ),
        )
        world = World(portal, sites, world_cfg, origin_store=origin)
        world.start()
    service = PortalService(
        portal,
        world=world,
        artifact_source=portal.output_store,
        static_dir=config.get("static_dir"),
        time_scale=float(config.get("time_scale", 1.0)),
    )
    if int(config.get("local_slots", 0)) > 0:
        service.local_executor = LocalExecutor(
            portal,
            n_slots=int(config["local_slots"]),
            sandbox_root=config.get("sandbox_root", "caf_sandbox"),
            input_source=origin,
            lock=service.lock,
        )
    return service, str(config.get("host", "127.0.0.1")), int(config.get("port", 8420))


def cmd_token_issue(args):
    if args.realm_key_file:
        realm_key = Path(args.realm_key_file).read_bytes()
    else:
        realm_key = realm_key_for_seed(args.seed)
    issued_at = args.issued_at
    if issued_at is None:
        if args.portal or os.environ.get("CAF_PORTAL"):
            issued_at = api(args, "GET", "/api/v1/clock")["now_ms"]
        else:
            issued_at = 0
    token = auth.issue_token(args.principal, args.ttl, realm_key, now=int(issued_at))
    text = auth.serialize_token(token)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"token for {args.principal} written to {args.out}")
    else:
        print(text)
    return EXIT_OK


# -- argument wiring -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caf", description=__doc__)
    parser.add_argument("--portal", help=f"portal URL (default {DEFAULT_PORTAL}; env CAF_PORTAL wins)")
    parser.add_argument("--token-file", help="path to a serialized token (env CAF_TOKEN wins)")
    parser.add_argument("--json", action="store_true", help="emit the raw API body")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", help="submit a job spec")
    p.add_argument("-f", "--file", required=True)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("status", help="job + section table")
    p.add_argument("job", type=int)
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("tail", help="recent log lines of a section")
    p.add_argument("job", type=int)
    p.add_argument("section", type=int)
    p.add_argument("-n", "--lines", type=int, default=20)
    p.set_defaults(func=cmd_tail)

    p = sub.add_parser("ls", help="remote working directory listing")
    p.add_argument("job", type=int)
    p.add_argument("section", type=int)
    p.set_defaults(func=cmd_ls)

    p = sub.add_parser("kill", help="kill a job or selected sections")
    p.add_argument("job", type=int)
    p.add_argument("--sections", help="comma-separated section indices (default: all)")
    p.set_defaults(func=cmd_kill)

    p = sub.add_parser("fetch", help="deliver output archives")
    p.add_argument("job", type=int)
    p.add_argument("--dest", required=True)
    p.set_defaults(func=cmd_fetch)

    sim = sub.add_parser("sim", help="offline scenario tools")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)
    p = sim_sub.add_parser("run", help="run a scenario deterministically")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--until", type=float, help="end time in sim seconds")
    p.add_argument("--out", default="caf_sim_out")
    p.set_defaults(func=cmd_sim_run)
    p = sim_sub.add_parser("report", help="accounting report of the last run")
    p.add_argument("--out", default="caf_sim_out")
    p.set_defaults(func=cmd_sim_report)

    p = sub.add_parser("serve", help="run a live portal")
    p.add_argument("-c", "--config", required=True)
    p.set_defaults(func=cmd_serve)

    token = sub.add_parser("token", help="credential tools")
    token_sub = token.add_subparsers(dest="token_command", required=True)
    p = token_sub.add_parser("issue")
    p.add_argument("--principal", required=True)
    p.add_argument("--ttl", type=float, default=86_400.0, help="lifetime in seconds")
    p.add_argument("--issued-at", type=int, help="clock anchor in ms (default: portal clock or 0)")
    p.add_argument("--seed", type=int, default=1, help="derive the realm key from this seed")
    p.add_argument("--realm-key-file")
    p.add_argument("--out", help="write the token here instead of stdout")
    p.set_defaults(func=cmd_token_issue)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"caf: {exc}", file=sys.stderr)
        return exc.code
    except model.DeskcafError as exc:
        print(f"caf: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
