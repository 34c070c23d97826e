"""Infected-tag service: uploads, cursor-paginated publication, checks.

State is the fold of an append-only JSONL journal. Each accepted upload is
written and fsynced before the response is produced, so a restart replays
to exactly the state any client has observed. Check requests are evaluated
in memory and never written anywhere.
"""
from __future__ import annotations

import json
import logging
import math
import os
import threading
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional

from .errors import BraceletError, DuplicateUploadError
from .matching import (
    DEFAULT_EXPOSURE_THRESHOLD_S,
    CaseGroup,
    InfectedIndex,
    match_contacts,
)
from .protocol import tag_from_hex

log = logging.getLogger(__name__)

MAX_BUNDLE_TAGS = 2048


class ServiceError(BraceletError):
    status = 500

    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        if status is not None:
            self.status = status


class BadRequest(ServiceError):
    status = 400


class Conflict(ServiceError):
    status = 409


class PayloadTooLarge(ServiceError):
    status = 413


class JournalError(BraceletError):
    pass


@dataclass(frozen=True)
class _Contact:
    tag: bytes
    exposure_s: float


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _load_request(request) -> dict:
    if isinstance(request, (bytes, bytearray)):
        try:
            request = request.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadRequest(f"body is not UTF-8: {exc}") from None
    if isinstance(request, str):
        try:
            request = json.loads(request)
        except json.JSONDecodeError as exc:
            raise BadRequest(f"malformed JSON: {exc}") from None
    if not isinstance(request, dict):
        raise BadRequest("request body must be a JSON object")
    return request


def _parse_tag(value) -> bytes:
    try:
        return tag_from_hex(value)
    except ValueError as exc:
        raise BadRequest(str(exc)) from None


def _parse_number(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) \
            or not math.isfinite(value):
        raise BadRequest(f"{name} must be a finite number")
    return float(value)


class CloudService:
    def __init__(self, journal_path=None,
                 threshold_s: float = DEFAULT_EXPOSURE_THRESHOLD_S,
                 id_factory: Optional[Callable[[], bytes]] = None):
        self.threshold_s = threshold_s
        self.journal_path = Path(journal_path) if journal_path else None
        self.index = InfectedIndex(id_factory=id_factory)
        self._write_lock = threading.Lock()
        if self.journal_path is not None:
            self._replay()

    # -- persistence --------------------------------------------------------

    def _replay(self) -> None:
        path = self.journal_path
        if not path.exists():
            return
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise JournalError(f"cannot read journal {path}: {exc}") from exc
        lines = raw.split(b"\n")
        # A final fragment without newline is an upload that crashed mid-write
        # and was never acknowledged; drop it.
        torn = lines.pop()
        if torn:
            log.warning("discarding torn journal tail (%d bytes)", len(torn))
            with open(path, "r+b") as fh:
                fh.truncate(len(raw) - len(torn))
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                self.index.add(CaseGroup.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError, BraceletError) as exc:
                raise JournalError(f"{path}:{lineno}: bad journal entry: {exc}") \
                    from exc

    def _append_journal(self, group: CaseGroup) -> None:
        if self.journal_path is None:
            return
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            fh.write(_dumps(group.to_dict()) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # -- endpoints ----------------------------------------------------------

    def handle_upload(self, request) -> dict:
        body = _load_request(request)
        tags = body.get("tags")
        if not isinstance(tags, list) or not tags:
            raise BadRequest("'tags' must be a non-empty list")
        if len(tags) > MAX_BUNDLE_TAGS:
            raise PayloadTooLarge(
                f"bundle has {len(tags)} tags, limit is {MAX_BUNDLE_TAGS}")
        parsed = [_parse_tag(t) for t in tags]
        with self._write_lock:
            try:
                existing = self.index.existing_group(parsed)
            except DuplicateUploadError as exc:
                raise Conflict(str(exc)) from None
            if existing is not None:
                group = existing
            else:
                group = self.index.allocate(tuple(dict.fromkeys(parsed)))
                self._append_journal(group)
                self.index.add(group)
        return {"group_id": group.group_id.hex(), "cursor": group.cursor}

    def handle_fetch(self, cursor) -> dict:
        if isinstance(cursor, str):
            try:
                cursor = int(cursor)
            except ValueError:
                raise BadRequest(f"cursor must be an integer: {cursor!r}") from None
        if isinstance(cursor, bool) or not isinstance(cursor, int) or cursor < 0:
            raise BadRequest("cursor must be a non-negative integer")
        groups = self.index.groups
        current = len(groups)
        if cursor > current:
            raise BadRequest(f"cursor {cursor} is ahead of current {current}")
        return {"groups": [g.to_dict() for g in groups[cursor:current]],
                "new_cursor": current}

    def handle_check(self, request) -> dict:
        body = _load_request(request)
        contacts = body.get("contacts")
        if not isinstance(contacts, list):
            raise BadRequest("'contacts' must be a list")
        parsed = []
        for item in contacts:
            if not isinstance(item, dict):
                raise BadRequest("each contact must be an object")
            exposure = _parse_number(item.get("exposure_s"), "exposure_s")
            if exposure < 0:
                raise BadRequest("exposure_s must be non-negative")
            parsed.append(_Contact(_parse_tag(item.get("tag")), exposure))
        threshold = body.get("threshold_s", self.threshold_s)
        threshold = _parse_number(threshold, "threshold_s")
        return match_contacts(self.index, parsed, threshold).to_dict()

    # Serialized forms, byte-stable across restarts.

    def fetch_body(self, cursor) -> bytes:
        return _dumps(self.handle_fetch(cursor)).encode()


# -- HTTP binding -------------------------------------------------------------

def make_handler(service: CloudService):
    class Handler(BaseHTTPRequestHandler):
        server_version = "bracelet-cloud/1"

        def log_message(self, format, *args):
            # Request lines are not logged: check traffic must leave no trace.
            pass

        def _send(self, status: int, payload: dict) -> None:
            body = _dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _dispatch(self, fn, *args) -> None:
            try:
                self._send(200, fn(*args))
            except ServiceError as exc:
                self._send(exc.status, {"error": str(exc)})

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length)

        def do_GET(self):
            url = urllib.parse.urlsplit(self.path)
            if url.path != "/v1/infected":
                return self._send(404, {"error": "not found"})
            query = urllib.parse.parse_qs(url.query)
            self._dispatch(service.handle_fetch, query.get("cursor", ["0"])[0])

        def do_POST(self):
            path = urllib.parse.urlsplit(self.path).path
            if path == "/v1/cases":
                self._dispatch(service.handle_upload, self._body())
            elif path == "/v1/check":
                self._dispatch(service.handle_check, self._body())
            else:
                self._send(404, {"error": "not found"})

    return Handler


def make_server(service: CloudService, host: str = "127.0.0.1",
                port: int = 8080) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), make_handler(service))
    server.daemon_threads = True
    return server


class CloudClient:
    """Minimal JSON client for the three endpoints."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        if "://" not in base_url:
            base_url = "http://" + base_url
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, method: str, path: str, payload=None) -> dict:
        data = None if payload is None else _dumps(payload).encode()
        req = urllib.request.Request(self.base_url + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                message = json.loads(exc.read()).get("error", exc.reason)
            except ValueError:
                message = exc.reason
            raise ServiceError(message, status=exc.code) from None

    def upload(self, bundle: dict) -> dict:
        return self._request("POST", "/v1/cases", bundle)

    def fetch(self, cursor: int = 0) -> dict:
        return self._request("GET", f"/v1/infected?cursor={int(cursor)}")

    def check(self, request: dict) -> dict:
        return self._request("POST", "/v1/check", request)
