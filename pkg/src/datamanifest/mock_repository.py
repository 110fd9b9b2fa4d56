"""
In-memory HTTP service speaking both repository protocols, for hermetic
tests and local experiments.

Zenodo-style surface::

    POST   /api/deposit/depositions                 create -> {id, links.bucket}
    GET    /api/deposit/depositions/<id>            deposition
    PUT    /api/deposit/depositions/<id>            {"metadata": {...}}
    DELETE /api/deposit/depositions/<id>
    GET    /api/deposit/depositions/<id>/files      [{filename, filesize, checksum, links.download}]
    PUT    /api/files/<bucket>/<key>                raw bytes -> {key, size, checksum: "md5:..", links.self}
    GET    /api/files/<bucket>/<key>                raw bytes

FigShare-style surface::

    POST   /v2/account/articles                     {title} -> {entity_id, location}
    GET    /v2/account/articles/<id>
    PUT    /v2/account/articles/<id>                {title, description, authors}
    GET    /v2/account/articles/<id>/files          [{id, name, size, computed_md5, download_url, status}]
    POST   /v2/account/articles/<id>/files          {name, size, md5} -> {location}
    GET    /v2/account/articles/<id>/files/<fid>    file info incl. upload_url
    POST   /v2/account/articles/<id>/files/<fid>    complete upload
    DELETE /v2/account/articles/<id>/files/<fid>
    PUT    /upload/<token>                          raw bytes
    GET    /ndownloader/files/<fid>                 raw bytes

Every endpoint above needs ``Authorization: Bearer <token>`` with a valid
token (else 401). ``GET /static/<name>`` serves unauthenticated files.

Control endpoints (no auth) live under ``/_mock/``::

    GET  /_mock/stats            {peak_inflight, inflight, counts}
    POST /_mock/reset            zero the statistics
    POST /_mock/faults           set the FaultPlan (JSON)
    POST /_mock/tokens           {"valid": [...]} and/or {"revoke": [...]}
    POST /_mock/latency          {"seconds": float}
    PUT  /_mock/static/<name>    register a static file
    DELETE /_mock/deposits/<id>  drop a deposition/article
"""

import argparse
import hashlib
import itertools
import json
import re
import threading
import time
import uuid
from collections import Counter
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, Optional, Set
from urllib.parse import quote, unquote, urlsplit

from datamanifest.errors import BindFailure

DEFAULT_TOKEN = "test-token"


@dataclass
class StoredFile:
    name: str
    data: bytes
    md5: str
    file_id: int
    status: str = "available"
    supplied_md5: Optional[str] = None
    upload_token: Optional[str] = None

    @property
    def size(self):
        return len(self.data)


@dataclass
class MockDeposit:
    id: int
    title: str
    protocol: str
    bucket_token: Optional[str] = None
    files: Dict[str, StoredFile] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


@dataclass
class FaultPlan:
    """Faults injected into upcoming requests; each is used up as it fires.

    ``fail_next_upload`` uploads are answered with ``fail_upload_status``;
    the first download of each name in ``corrupt_downloads_for`` has one
    byte flipped; the next ``respond_count`` API requests of any kind are
    answered with ``respond_status``.
    """

    fail_next_upload: int = 0
    fail_upload_status: int = 500
    corrupt_downloads_for: Set[str] = field(default_factory=set)
    respond_status: Optional[int] = None
    respond_count: int = 1

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        if "corrupt_downloads_for" in data:
            data["corrupt_downloads_for"] = set(data["corrupt_downloads_for"])
        return cls(**data)


def _md5(data):
    return hashlib.md5(data).hexdigest()


def corrupt(data):
    if not data:
        return b"\x00"
    i = len(data) // 2
    return data[:i] + bytes([data[i] ^ 0xFF]) + data[i + 1:]


class MockRepository:
    """Shared state behind the HTTP handler. All access goes through one
    lock; request latency is simulated outside it."""

    def __init__(self, tokens=(DEFAULT_TOKEN,), latency=0.0, faults=None):
        self.lock = threading.Lock()
        self.tokens = set(tokens)
        self.latency = latency
        self.faults = faults or FaultPlan()
        self.deposits: Dict[int, MockDeposit] = {}
        self.static: Dict[str, bytes] = {}
        self._ids = itertools.count(8271457)
        self._file_ids = itertools.count(1000)
        self.reset_stats()

    def reset_stats(self):
        with self.lock:
            self.inflight = 0
            self.peak_inflight = 0
            self.counts = Counter()

    def stats(self):
        with self.lock:
            return {"peak_inflight": self.peak_inflight, "inflight": self.inflight,
                    "counts": dict(self.counts)}

    def add_static(self, name, data):
        with self.lock:
            self.static[name] = bytes(data)

    def set_faults(self, plan):
        with self.lock:
            self.faults = plan

    def enter(self, kind):
        with self.lock:
            self.inflight += 1
            self.peak_inflight = max(self.peak_inflight, self.inflight)
            self.counts[kind] += 1

    def leave(self):
        with self.lock:
            self.inflight -= 1

    def forced_status(self, kind):
        """Status code a fault imposes on this request, if any."""
        with self.lock:
            f = self.faults
            if f.respond_status is not None and f.respond_count > 0:
                f.respond_count -= 1
                status = f.respond_status
                if f.respond_count == 0:
                    f.respond_status = None
                return status
            if kind == "upload" and f.fail_next_upload > 0:
                f.fail_next_upload -= 1
                return f.fail_upload_status
        return None

    def maybe_corrupt(self, name, data):
        with self.lock:
            if name in self.faults.corrupt_downloads_for:
                self.faults.corrupt_downloads_for.discard(name)
                return corrupt(data)
        return data

    def new_deposit(self, protocol, title):
        with self.lock:
            dep = MockDeposit(id=next(self._ids), title=title, protocol=protocol,
                              bucket_token=str(uuid.uuid4()) if protocol == "zenodo" else None)
            self.deposits[dep.id] = dep
            return dep

    def new_file_id(self):
        with self.lock:
            return next(self._file_ids)


class _Reply(Exception):
    def __init__(self, status, body=None, raw=None):
        self.status = status
        self.body = body
        self.raw = raw


def _error(status, message):
    return _Reply(status, {"status": status, "message": message})


class _Handler(BaseHTTPRequestHandler):
    server_version = "MockRepository/1.0"
    repo: MockRepository = None

    def log_message(self, format, *args):
        pass

    # -- plumbing --

    @property
    def base(self):
        return f"http://{self.headers.get('Host')}"

    def _body(self):
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _json(self):
        body = self._body()
        try:
            return json.loads(body) if body else {}
        except ValueError:
            raise _error(400, "invalid JSON body") from None

    def _send(self, reply):
        if reply.raw is not None:
            payload, ctype = reply.raw, "application/octet-stream"
        elif reply.body is None:
            payload, ctype = b"", None
        else:
            payload, ctype = json.dumps(reply.body).encode(), "application/json"
        self.send_response(reply.status)
        if ctype:
            self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        if payload and self.command != "HEAD":
            self.wfile.write(payload)

    def _authorize(self):
        header = self.headers.get("Authorization", "")
        scheme, _, token = header.partition(" ")
        if scheme.lower() != "bearer" or token not in self.repo.tokens:
            raise _error(401, "invalid or missing access token")

    def _dispatch(self):
        path = unquote(urlsplit(self.path).path)
        for method, pattern, kind, handler in ROUTES:
            if method != self.command:
                continue
            m = re.fullmatch(pattern, path)
            if m is None:
                continue
            if kind == "control":
                raise handler(self, *m.groups())
            self.repo.enter(kind)
            try:
                if kind != "static":
                    self._authorize()
                status = self.repo.forced_status(kind)
                if status is not None:
                    self._body()
                    raise _error(status, "injected fault")
                if self.repo.latency and kind in ("upload", "download", "static"):
                    time.sleep(self.repo.latency)
                raise handler(self, *m.groups())
            finally:
                self.repo.leave()
        raise _error(404, f"no route for {self.command} {path}")

    def _handle(self):
        try:
            self._dispatch()
        except _Reply as reply:
            self._send(reply)

    do_GET = do_POST = do_PUT = do_DELETE = _handle

    # -- lookups --

    def _deposit(self, dep_id, protocol):
        dep = self.repo.deposits.get(int(dep_id))
        if dep is None or dep.protocol != protocol:
            raise _error(404, f"{protocol} deposit {dep_id} not found")
        return dep

    def _bucket(self, token):
        for dep in list(self.repo.deposits.values()):
            if dep.bucket_token == token:
                return dep
        raise _error(404, "bucket not found")

    def _figshare_file(self, fid):
        fid = int(fid)
        for dep in list(self.repo.deposits.values()):
            for f in list(dep.files.values()):
                if f.file_id == fid:
                    return dep, f
        raise _error(404, f"file {fid} not found")

    # -- zenodo --

    def _zenodo_json(self, dep):
        return {"id": dep.id, "title": dep.title, "metadata": dep.metadata,
                "links": {"self": f"{self.base}/api/deposit/depositions/{dep.id}",
                          "bucket": f"{self.base}/api/files/{dep.bucket_token}"}}

    def _zenodo_file_json(self, dep, f):
        return {"id": str(f.file_id), "filename": f.name, "filesize": f.size, "checksum": f.md5,
                "links": {"download": f"{self.base}/api/files/{dep.bucket_token}/{quote(f.name)}"}}

    def zenodo_create(self):
        body = self._json()
        title = (body.get("metadata") or {}).get("title", "")
        dep = self.repo.new_deposit("zenodo", title)
        return _Reply(201, self._zenodo_json(dep))

    def zenodo_get(self, dep_id):
        return _Reply(200, self._zenodo_json(self._deposit(dep_id, "zenodo")))

    def zenodo_update(self, dep_id):
        dep = self._deposit(dep_id, "zenodo")
        meta = self._json().get("metadata")
        if not isinstance(meta, dict):
            raise _error(400, "metadata object required")
        with self.repo.lock:
            dep.metadata = meta
            dep.title = meta.get("title", dep.title)
        return _Reply(200, self._zenodo_json(dep))

    def zenodo_delete(self, dep_id):
        dep = self._deposit(dep_id, "zenodo")
        with self.repo.lock:
            self.repo.deposits.pop(dep.id, None)
        return _Reply(204)

    def zenodo_files(self, dep_id):
        dep = self._deposit(dep_id, "zenodo")
        with self.repo.lock:
            files = sorted(dep.files.values(), key=lambda f: f.name)
        return _Reply(200, [self._zenodo_file_json(dep, f) for f in files])

    def zenodo_put(self, bucket, key):
        dep = self._bucket(bucket)
        data = self._body()
        f = StoredFile(name=key, data=data, md5=_md5(data), file_id=self.repo.new_file_id())
        with self.repo.lock:
            dep.files[key] = f
        return _Reply(201, {"key": key, "size": f.size, "checksum": f"md5:{f.md5}",
                            "links": {"self": f"{self.base}/api/files/{bucket}/{quote(key)}"}})

    def zenodo_download(self, bucket, key):
        dep = self._bucket(bucket)
        f = dep.files.get(key)
        if f is None:
            raise _error(404, f"{key} not found")
        return _Reply(200, raw=self.repo.maybe_corrupt(key, f.data))

    # -- figshare --

    def _article_json(self, dep):
        return {"id": dep.id, "title": dep.title, **dep.metadata,
                "files": [self._fs_file_json(f) for f in dep.files.values()]}

    def _fs_file_json(self, f):
        return {"id": f.file_id, "name": f.name, "size": f.size, "status": f.status,
                "computed_md5": f.md5 if f.status == "available" else "",
                "supplied_md5": f.supplied_md5 or "",
                "download_url": f"{self.base}/ndownloader/files/{f.file_id}",
                "upload_url": f"{self.base}/upload/{f.upload_token}"}

    def fs_create(self):
        body = self._json()
        dep = self.repo.new_deposit("figshare", body.get("title", ""))
        return _Reply(201, {"entity_id": dep.id, "location": f"{self.base}/v2/account/articles/{dep.id}"})

    def fs_get(self, dep_id):
        return _Reply(200, self._article_json(self._deposit(dep_id, "figshare")))

    def fs_update(self, dep_id):
        dep = self._deposit(dep_id, "figshare")
        body = self._json()
        with self.repo.lock:
            dep.title = body.pop("title", dep.title)
            dep.metadata.update({k: v for k, v in body.items() if k in ("description", "authors")})
        return _Reply(200, {"location": f"{self.base}/v2/account/articles/{dep.id}"})

    def fs_files(self, dep_id):
        dep = self._deposit(dep_id, "figshare")
        with self.repo.lock:
            files = sorted(dep.files.values(), key=lambda f: f.name)
        return _Reply(200, [self._fs_file_json(f) for f in files])

    def fs_initiate(self, dep_id):
        dep = self._deposit(dep_id, "figshare")
        body = self._json()
        name = body.get("name", "")
        if not name or "/" in name:
            raise _error(400, "file name must be non-empty and must not contain '/'")
        if name in dep.files:
            raise _error(409, f"{name} already exists in article {dep.id}")
        f = StoredFile(name=name, data=b"", md5="", file_id=self.repo.new_file_id(),
                       status="created", supplied_md5=body.get("md5"), upload_token=str(uuid.uuid4()))
        with self.repo.lock:
            dep.files[name] = f
        return _Reply(201, {"location": f"{self.base}/v2/account/articles/{dep.id}/files/{f.file_id}"})

    def fs_file_info(self, dep_id, fid):
        self._deposit(dep_id, "figshare")
        return _Reply(200, self._fs_file_json(self._figshare_file(fid)[1]))

    def fs_complete(self, dep_id, fid):
        self._deposit(dep_id, "figshare")
        _, f = self._figshare_file(fid)
        self._body()
        actual = _md5(f.data)
        if f.supplied_md5 and f.supplied_md5 != actual:
            raise _error(422, f"uploaded data md5 {actual} does not match declared {f.supplied_md5}")
        with self.repo.lock:
            f.md5 = actual
            f.status = "available"
        return _Reply(202, {"location": f"{self.base}/v2/account/articles/{dep_id}/files/{f.file_id}"})

    def fs_delete_file(self, dep_id, fid):
        dep = self._deposit(dep_id, "figshare")
        _, f = self._figshare_file(fid)
        with self.repo.lock:
            dep.files.pop(f.name, None)
        return _Reply(204)

    def fs_upload(self, token):
        data = self._body()
        for dep in list(self.repo.deposits.values()):
            for f in list(dep.files.values()):
                if f.upload_token == token:
                    with self.repo.lock:
                        f.data = data
                        f.status = "uploaded"
                    return _Reply(200, {})
        raise _error(404, "upload not found")

    def fs_download(self, fid):
        _, f = self._figshare_file(fid)
        if f.status != "available":
            raise _error(404, "file not available")
        return _Reply(200, raw=self.repo.maybe_corrupt(f.name, f.data))

    # -- static + control --

    def static_get(self, name):
        data = self.repo.static.get(name)
        if data is None:
            raise _error(404, f"{name} not found")
        return _Reply(200, raw=self.repo.maybe_corrupt(name, data))

    def ctl_stats(self):
        return _Reply(200, self.repo.stats())

    def ctl_reset(self):
        self._body()
        self.repo.reset_stats()
        return _Reply(200, self.repo.stats())

    def ctl_faults(self):
        try:
            plan = FaultPlan.from_json(self._json())
        except TypeError as e:
            raise _error(400, str(e)) from None
        self.repo.set_faults(plan)
        return _Reply(200, {})

    def ctl_tokens(self):
        body = self._json()
        with self.repo.lock:
            if "valid" in body:
                self.repo.tokens = set(body["valid"])
            self.repo.tokens -= set(body.get("revoke", ()))
        return _Reply(200, {})

    def ctl_latency(self):
        self.repo.latency = float(self._json().get("seconds", 0.0))
        return _Reply(200, {})

    def ctl_static(self, name):
        self.repo.add_static(name, self._body())
        return _Reply(201, {"url": f"{self.base}/static/{name}"})

    def ctl_drop(self, dep_id):
        with self.repo.lock:
            found = self.repo.deposits.pop(int(dep_id), None)
        return _Reply(204 if found else 404)


_ID = r"(\d+)"
ROUTES = [
    ("POST", r"/api/deposit/depositions", "create", _Handler.zenodo_create),
    ("GET", rf"/api/deposit/depositions/{_ID}", "get", _Handler.zenodo_get),
    ("PUT", rf"/api/deposit/depositions/{_ID}", "metadata", _Handler.zenodo_update),
    ("DELETE", rf"/api/deposit/depositions/{_ID}", "delete", _Handler.zenodo_delete),
    ("GET", rf"/api/deposit/depositions/{_ID}/files", "list", _Handler.zenodo_files),
    ("PUT", r"/api/files/([^/]+)/(.+)", "upload", _Handler.zenodo_put),
    ("GET", r"/api/files/([^/]+)/(.+)", "download", _Handler.zenodo_download),
    ("POST", r"/v2/account/articles", "create", _Handler.fs_create),
    ("GET", rf"/v2/account/articles/{_ID}", "get", _Handler.fs_get),
    ("PUT", rf"/v2/account/articles/{_ID}", "metadata", _Handler.fs_update),
    ("GET", rf"/v2/account/articles/{_ID}/files", "list", _Handler.fs_files),
    ("POST", rf"/v2/account/articles/{_ID}/files", "initiate", _Handler.fs_initiate),
    ("GET", rf"/v2/account/articles/{_ID}/files/{_ID}", "get", _Handler.fs_file_info),
    ("POST", rf"/v2/account/articles/{_ID}/files/{_ID}", "complete", _Handler.fs_complete),
    ("DELETE", rf"/v2/account/articles/{_ID}/files/{_ID}", "delete", _Handler.fs_delete_file),
    ("PUT", r"/upload/([0-9a-f-]+)", "upload", _Handler.fs_upload),
    ("GET", rf"/ndownloader/files/{_ID}", "download", _Handler.fs_download),
    ("GET", r"/static/(.+)", "static", _Handler.static_get),
    ("GET", r"/_mock/stats", "control", _Handler.ctl_stats),
    ("POST", r"/_mock/reset", "control", _Handler.ctl_reset),
    ("POST", r"/_mock/faults", "control", _Handler.ctl_faults),
    ("POST", r"/_mock/tokens", "control", _Handler.ctl_tokens),
    ("POST", r"/_mock/latency", "control", _Handler.ctl_latency),
    ("PUT", r"/_mock/static/(.+)", "control", _Handler.ctl_static),
    ("DELETE", rf"/_mock/deposits/{_ID}", "control", _Handler.ctl_drop),
]


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 256


class MockServer:
    """A running mock service. Use as a context manager or call stop()."""

    def __init__(self, httpd, repo):
        self.httpd = httpd
        self.repo = repo
        host, port = httpd.server_address[:2]
        self.url = f"http://{host}:{port}"
        self._thread = threading.Thread(target=httpd.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="mock-repository", daemon=True)
        self._thread.start()

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(address=("127.0.0.1", 0), faults=None, tokens=(DEFAULT_TOKEN,), latency=0.0):
    """Start the mock in a background thread and return its handle."""
    repo = MockRepository(tokens=tokens, latency=latency, faults=faults)
    handler = type("Handler", (_Handler,), {"repo": repo})
    try:
        httpd = _Server(tuple(address), handler)
    except OSError as e:
        raise BindFailure(f"cannot bind {address[0]}:{address[1]}: {e}") from None
    return MockServer(httpd, repo)


def main(argv=None):
    parser = argparse.ArgumentParser(description="Run the mock data repository service.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    parser.add_argument("--token", action="append", help="accepted access token (repeatable)")
    parser.add_argument("--latency", type=float, default=0.0, help="seconds added to each transfer")
    args = parser.parse_args(argv)
    server = serve((args.host, args.port), tokens=args.token or (DEFAULT_TOKEN,), latency=args.latency)
    print(f"mock repository listening on {server.url}", flush=True)
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.stop()


if __name__ == "__main__":
    main()
