"""HTTP+JSON facade: the portal API, artifact origin/proxy endpoints.

Reads are served concurrently from snapshots taken under the service lock;
every mutation goes through that same lock, which is the served-mode
equivalent of the simulator's serialized event queue. In served mode a
driver thread advances the embedded world in (optionally scaled) real
time and pumps the LOCAL executor.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from . import auth, model
from .distribution import DistributionError, OriginUnreachable
from .monitoring import Heartbeat, NoDataYet, UnknownSection as MonUnknownSection
from .portal import (
    KILL_DEADLINE_S,
    DestinationUnreachable,
    JobNotFinished,
    NotOwner,
    RequirementsParseError,
    UnknownJob,
    UnknownSection,
)

log = logging.getLogger(__name__)

_STATUS = [
    ((NotOwner,), 403),
    ((auth.AuthFailed,), 401),
    ((UnknownJob, UnknownSection, MonUnknownSection, NoDataYet, OriginUnreachable), 404),
    ((JobNotFinished, model.IllegalTransition), 409),
    ((DestinationUnreachable,), 502),
    ((RequirementsParseError, model.InvalidSpec, ValueError, KeyError), 400),
]


def _status_for(exc) -> int:
    for types, code in _STATUS:
        if isinstance(exc, types):
            return code
    return 500


class PortalService:
    """Shared state behind the HTTP handler: portal, optional world, locks."""

    def __init__(self, portal, world=None, local_executor=None, artifact_source=None,
                 cache=None, static_dir=None, time_scale: float = 1.0):
        self.portal = portal
        self.world = world
        self.local_executor = local_executor
        self.artifact_source = artifact_source
        self.cache = cache
        self.static_dir = Path(static_dir) if static_dir else None
        self.time_scale = time_scale
        self.lock = threading.RLock()
        self._driver = None
        self._stop = threading.Event()
        self._httpd = None
        self._epoch_wall = time.monotonic()

    # -- clock ---------------------------------------------------------------

    def clock(self) -> int:
        if self.world is not None:
            return self.world.clock
        return int(time.time() * 1000)

    # -- lifecycle -------------------------------------------------------------

    def start(self, host: str = "127.0.0.1", port: int = 0):
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        threading.Thread(target=self._httpd.serve_forever, daemon=True).start()
        if self.world is not None or self.local_executor is not None:
            self._driver = threading.Thread(target=self._drive, daemon=True)
            self._driver.start()
        return self._httpd.server_address

    def stop(self):
        self._stop.set()
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()

    def _drive(self, poll_s: float = 0.05):
        while not self._stop.is_set():
            if self.world is not None:
                with self.lock:
                    elapsed = time.monotonic() - self._epoch_wall
                    target = int(elapsed * 1000 * self.time_scale)
                    if target > self.world.clock:
                        self.world.run_until(target)
            if self.local_executor is not None:
                self.local_executor.run_pending()
                with self.lock:
                    now = self.clock()
                    for sid, asked in list(self.portal.pending_kills.items()):
                        if now - asked >= KILL_DEADLINE_S * 1000:
                            self.portal.kill_deadline_expired(sid, now)
            self._stop.wait(poll_s)

    # -- mutations ----------------------------------------------------------------

    def submit(self, token, spec) -> int:
        with self.lock:
            if spec.exec_backend is model.ExecBackend.SIMULATED and self.world is not None:
                return self.world.submit_job(token, spec)
            return self.portal.submit_job(token, spec, self.clock())

    def kill(self, token, job_id, selector) -> dict:
        with self.lock:
            if self.world is not None:
                return self.world.kill_job(token, job_id, selector)
            return self.portal.kill(token, job_id, selector, self.clock())

    def deliver(self, token, job_id, destination) -> dict:
        with self.lock:
            return self.portal.deliver_output(token, job_id, destination, self.clock())

    def heartbeat(self, doc: dict) -> dict:
        hb = Heartbeat(
            section_id=str(doc["section_id"]),
            worker_id=str(doc.get("worker_id", "?")),
            state=str(doc.get("state", "RUNNING")),
            cpu_seconds=float(doc.get("cpu_seconds", 0.0)),
            log_tail=tuple((int(n), str(t)) for n, t in doc.get("log_tail", [])),
            workdir_listing=tuple((str(p), int(s)) for p, s in doc.get("workdir_listing", [])),
            sent_at=int(doc.get("sent_at", self.clock())),
        )
        with self.lock:
            return self.portal.collector.ingest_heartbeat(hb)

    # -- views -----------------------------------------------------------------------

    def view_job(self, job_id: int) -> dict:
        with self.lock:
            record = self.portal.job(job_id)
            now = self.clock()
            sections = []
            for s in record.sections:
                stale = True
                if self.portal.collector.known(s.sid):
                    stale = self.portal.collector.is_stale(s.sid, now)
                sections.append(
                    {
                        "index": s.index,
                        "state": s.state.value,
                        "attempts": s.attempts,
                        "exit_code": s.exit_code,
                        "cpu_seconds": s.cpu_seconds,
                        "start_time": s.start_time,
                        "end_time": s.end_time,
                        "executor": s.claimed_pilot,
                        "site": self.portal._section_site.get(s.sid),
                        "stale": stale,
                    }
                )
            states = {}
            for s in record.sections:
                states[s.state.value] = states.get(s.state.value, 0) + 1
            return {
                "job_id": job_id,
                "user": record.spec.user,
                "vo": record.spec.vo,
                "n_sections": record.spec.n_sections,
                "submit_time": record.submit_time,
                "terminal": self.portal.job_is_terminal(job_id),
                "states": states,
                "sections": sections,
            }

    def view_jobs(self) -> list:
        with self.lock:
            out = []
            for job_id, record in self.portal.jobs.items():
                states = {}
                for s in record.sections:
                    states[s.state.value] = states.get(s.state.value, 0) + 1
                out.append(
                    {
                        "job_id": job_id,
                        "user": record.spec.user,
                        "vo": record.spec.vo,
                        "n_sections": record.spec.n_sections,
                        "states": states,
                        "terminal": self.portal.job_is_terminal(job_id),
                    }
                )
            return out

    def view_pilots(self, site=None) -> list:
        with self.lock:
            rows = []
            for p in self.portal.pilots.values():
                if site and p.site_id != site:
                    continue
                rows.append(
                    {
                        "pilot_id": p.pilot_id,
                        "site": p.site_id,
                        "state": p.state.value,
                        "submitted_time": p.submitted_time,
                        "boot_time": p.boot_time,
                    }
                )
            return rows

    def view_accounting(self, from_ms=None, to_ms=None) -> dict:
        with self.lock:
            report = self.portal.accounting_report(from_ms, to_ms)
        return {"report": [{"vo": vo, "cpu_seconds": cpu, "share": share} for vo, cpu, share in report]}

    def view_notifications(self, token_text: str) -> dict:
        token = auth.deserialize_token(token_text)
        with self.lock:
            principal = auth.verify_token(token, self.clock(), self.portal.realm_key)
            items = self.portal.notifications.get(principal, [])
            return {
                "principal": principal,
                "summaries": [
                    {
                        "job_id": s.job_id,
                        "sections": [list(row) for row in s.sections],
                        "output_archive_ids": list(s.output_archive_ids),
                        "destination": s.destination,
                    }
                    for s in items
                ],
            }

    def view_tail(self, sid: str, n: int) -> dict:
        with self.lock:
            if not self.portal.collector.known(sid):
                raise UnknownSection(sid)
            lines = self.portal.collector.tail(sid, n)
            stale = self.portal.collector.is_stale(sid, self.clock())
        return {"section": sid, "lines": lines, "stale": stale}

    def view_ls(self, sid: str) -> dict:
        with self.lock:
            if not self.portal.collector.known(sid):
                raise UnknownSection(sid)
            listing = self.portal.collector.ls(sid)
        return {"section": sid, "entries": [[p, s] for p, s in listing]}


def _make_handler(service: PortalService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

        # -- plumbing --------------------------------------------------------

        def _send(self, code: int, body: bytes, content_type: str = "application/json"):
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _json(self, code: int, obj):
            self._send(code, json.dumps(obj).encode())

        def _error(self, exc):
            code = _status_for(exc)
            if code == 500:
                log.exception("internal error")
            self._json(code, {"error": {"type": type(exc).__name__, "message": str(exc)}})

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length", "0"))
            if length == 0:
                return {}
            return json.loads(self.rfile.read(length).decode("utf-8"))

        @staticmethod
        def _token(doc: dict) -> auth.UserToken:
            text = doc.get("token")
            if not text:
                raise auth.AuthFailed("missing token")
            return auth.deserialize_token(str(text))

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        # -- routes -----------------------------------------------------------

        def do_GET(self):
            url = urlparse(self.path)
            q = parse_qs(url.query)
            try:
                if url.path == "/api/v1/jobs":
                    return self._json(200, service.view_jobs())
                m = re.fullmatch(r"/api/v1/jobs/(\d+)", url.path)
                if m:
                    return self._json(200, service.view_job(int(m.group(1))))
                if url.path == "/api/v1/pilots":
                    return self._json(200, service.view_pilots(q.get("site", [None])[0]))
                if url.path == "/api/v1/accounting":
                    from_ms = int(q["from"][0]) if "from" in q else None
                    to_ms = int(q["to"][0]) if "to" in q else None
                    return self._json(200, service.view_accounting(from_ms, to_ms))
                if url.path == "/api/v1/notifications":
                    token = q.get("token", [""])[0]
                    return self._json(200, service.view_notifications(token))
                m = re.fullmatch(r"/api/v1/sections/([\d.]+)/tail", url.path)
                if m:
                    n = int(q.get("lines", ["100"])[0])
                    return self._json(200, service.view_tail(m.group(1), n))
                m = re.fullmatch(r"/api/v1/sections/([\d.]+)/ls", url.path)
                if m:
                    return self._json(200, service.view_ls(m.group(1)))
                if url.path == "/api/v1/clock":
                    return self._json(200, {"now_ms": service.clock()})
                m = re.fullmatch(r"/artifacts/([0-9a-f]{64})", url.path)
                if m:
                    return self._artifact(m.group(1))
                if url.path == "/cache/stats":
                    source = service.cache or service.artifact_source
                    stats = source.stats() if hasattr(source, "stats") else {}
                    return self._json(200, stats)
                if service.static_dir is not None:
                    return self._static(url.path)
                self._json(404, {"error": {"type": "NotFound", "message": url.path}})
            except Exception as exc:  # noqa: BLE001 - boundary
                self._error(exc)

        def _artifact(self, aid: str):
            source = service.artifact_source
            if source is None:
                return self._json(404, {"error": {"type": "NotFound", "message": "no artifact source"}})
            try:
                got = source.get(aid)
            except DistributionError as exc:
                return self._json(404, {"error": {"type": type(exc).__name__, "message": str(exc)}})
            data = got[0] if isinstance(got, tuple) else got
            self._send(200, data, content_type="application/octet-stream")

        def _static(self, path: str):
            name = path.lstrip("/") or "index.html"
            target = (service.static_dir / name).resolve()
            if not str(target).startswith(str(service.static_dir.resolve())) or not target.is_file():
                return self._json(404, {"error": {"type": "NotFound", "message": path}})
            kind = {
                ".html": "text/html",
                ".js": "text/javascript",
                ".css": "text/css",
                ".map": "application/json",
            }.get(target.suffix, "application/octet-stream")
            self._send(200, target.read_bytes(), content_type=kind)

        def do_POST(self):
            url = urlparse(self.path)
            try:
                doc = self._body()
                if url.path == "/api/v1/jobs":
                    token = self._token(doc)
                    spec = model.spec_from_dict(doc.get("spec", {}))
                    job_id = service.submit(token, spec)
                    return self._json(201, {"job_id": job_id})
                m = re.fullmatch(r"/api/v1/jobs/(\d+)/kill", url.path)
                if m:
                    token = self._token(doc)
                    selector = doc.get("selector", "ALL")
                    if selector != "ALL":
                        selector = [int(i) for i in selector]
                    ack = service.kill(token, int(m.group(1)), selector)
                    ack["sections"] = {str(k): v for k, v in ack["sections"].items()}
                    return self._json(200, ack)
                m = re.fullmatch(r"/api/v1/jobs/(\d+)/deliver", url.path)
                if m:
                    token = self._token(doc)
                    receipt = service.deliver(token, int(m.group(1)), str(doc.get("destination", "")))
                    return self._json(200, receipt)
                if url.path == "/internal/v1/heartbeat":
                    return self._json(200, service.heartbeat(doc))
                self._json(404, {"error": {"type": "NotFound", "message": url.path}})
            except Exception as exc:  # noqa: BLE001 - boundary
                self._error(exc)

    return Handler


class ArtifactHTTPSource:
    """Client-side adapter: lets a CacheProxy chain over HTTP hops."""

    def __init__(self, base_url: str, timeout_s: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s

    def get(self, aid: str) -> bytes:
        import urllib.error
        import urllib.request

        try:
            with urllib.request.urlopen(f"{self.base_url}/artifacts/{aid}", timeout=self.timeout_s) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            raise OriginUnreachable(f"origin returned {exc.code} for {aid}") from exc
        except urllib.error.URLError as exc:
            raise OriginUnreachable(f"origin unreachable: {exc.reason}") from exc
