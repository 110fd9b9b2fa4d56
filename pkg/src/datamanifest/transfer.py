"""
Push, pull, URL get and bulk download.

Transfers for distinct files run on a bounded thread pool; every
downloaded file is checked against its expected MD5 before it is moved to
its final path. Manifest updates happen afterwards, on the calling thread.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import List, Optional, Tuple
from urllib.parse import unquote, urlparse

import requests

from datamanifest.errors import (
    AlreadyRegistered,
    DestinationExists,
    DownloadFailure,
    FilenameUnderivable,
    IntegrityMismatch,
    IoFailure,
    MalformedRow,
    NoLinkedRemote,
    PushBlockedByModifiedFile,
    SdfError,
)
from datamanifest.integrity import LocalState, RemoteState, classify_local, classify_remote
from datamanifest.manifest import (
    project_relpath,
    register_file,
    remote_for_path,
    remote_name,
    to_local,
)
from datamanifest.remotes import (
    clean_partials,
    request_with_retry,
    service_for_link,
    stream_to_file,
)

log = logging.getLogger(__name__)

DEFAULT_CONCURRENCY = 8
JOBS_ENV = "SDF_JOBS"


def default_concurrency():
    try:
        return max(1, int(os.environ[JOBS_ENV]))
    except (KeyError, ValueError):
        return DEFAULT_CONCURRENCY


class Direction(str, Enum):
    UPLOAD = "upload"
    DOWNLOAD = "download"
    SKIP = "skip"


# skip reasons
ALREADY_CURRENT = "already-current"
UNTRACKED = "untracked"
NO_REMOTE_SCOPE = "no-remote-scope"
MISSING_LOCAL = "missing-local"
LOCALLY_MODIFIED = "locally-modified"
ALREADY_REGISTERED = "already-registered"


@dataclass(frozen=True)
class TransferAction:
    path: str
    direction: Direction
    reason: Optional[str] = None
    scope: Optional[str] = None
    link: object = None
    remote_name: Optional[str] = None
    md5: Optional[str] = None


@dataclass
class TransferPlan:
    actions: List[TransferAction]
    concurrency_limit: int = DEFAULT_CONCURRENCY
    root: Optional[Path] = None

    @property
    def uploads(self):
        return [a for a in self.actions if a.direction is Direction.UPLOAD]

    @property
    def downloads(self):
        return [a for a in self.actions if a.direction is Direction.DOWNLOAD]

    @property
    def skips(self):
        return [a for a in self.actions if a.direction is Direction.SKIP]


@dataclass
class TransferOutcome:
    succeeded: List[str] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)
    failed: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self):
        return not self.failed

    def sort(self):
        self.succeeded.sort()
        self.skipped.sort()
        self.failed.sort()
        return self


def _run_bounded(fn, items, limit):
    """Apply ``fn`` to ``items`` with at most ``limit`` calls in flight.
    Returns ``[(item, error_or_None)]`` in input order."""
    def guarded(item):
        try:
            fn(item)
        except SdfError as e:
            return item, str(e)
        except OSError as e:
            return item, f"{e.__class__.__name__}: {e}"
        return item, None

    if not items:
        return []
    with ThreadPoolExecutor(max_workers=max(1, limit)) as pool:
        return list(pool.map(guarded, items))


def _skip(path, reason):
    return TransferAction(path, Direction.SKIP, reason)


def fetch_listings(manifest, clients):
    """Remote file listing for every linked scope, keyed by scope."""
    return {scope: service_for_link(link, clients).list_files(link)
            for scope, link in sorted(manifest.remotes.items())}


# -- push ----------------------------------------------------------------

def plan_push(manifest, project_root, listings, concurrency_limit=None):
    """Decide what to upload.

    Tracked files under a linked scope are uploaded unless the remote
    already holds the registered digest. Files whose local content differs
    from the manifest block the whole push.
    """
    if not manifest.remotes:
        raise NoLinkedRemote("no remote linked; run 'sdf link' first")
    actions, blocked = [], []
    for path, entry in sorted(manifest.files.items()):
        if not entry.tracked:
            actions.append(_skip(path, UNTRACKED))
            continue
        found = remote_for_path(manifest, path)
        if found is None:
            log.warning("%s is tracked but not under any linked remote directory; skipping", path)
            actions.append(_skip(path, NO_REMOTE_SCOPE))
            continue
        scope, link = found
        name = remote_name(path, scope)
        remote = classify_remote(entry, listings.get(scope), name=name)
        if remote is RemoteState.REMOTE_CURRENT:
            actions.append(_skip(path, ALREADY_CURRENT))
            continue
        local = classify_local(entry, project_root)
        if local is LocalState.MODIFIED:
            blocked.append(path)
        elif local is LocalState.MISSING_LOCAL:
            log.warning("%s is tracked but missing locally; cannot upload", path)
            actions.append(_skip(path, MISSING_LOCAL))
        else:
            actions.append(TransferAction(path, Direction.UPLOAD, scope=scope, link=link,
                                          remote_name=name, md5=entry.md5))
    if blocked:
        raise PushBlockedByModifiedFile(blocked)
    return TransferPlan(actions, concurrency_limit or default_concurrency(), Path(project_root))


def execute_push(plan, clients):
    """Upload every UPLOAD action, then confirm the remote digest matches
    the registered one."""
    def upload(action):
        service = service_for_link(action.link, clients)
        record = service.upload_file(action.link, to_local(plan.root, action.path), action.remote_name)
        if record.md5 != action.md5:
            raise IntegrityMismatch(f"{action.path} (remote copy)", action.md5, record.md5)

    outcome = TransferOutcome(skipped=[(a.path, a.reason) for a in plan.skips])
    for action, err in _run_bounded(upload, plan.uploads, plan.concurrency_limit):
        if err is None:
            outcome.succeeded.append(action.path)
        else:
            outcome.failed.append((action.path, err))
    return outcome.sort()


def push(manifest, project_root, clients, concurrency_limit=None, propagate_metadata=True, user=None):
    if propagate_metadata:
        for link in manifest.remotes.values():
            service_for_link(link, clients).set_metadata(link, manifest.metadata, user)
    plan = plan_push(manifest, project_root, fetch_listings(manifest, clients), concurrency_limit)
    return execute_push(plan, clients)


# -- pull ----------------------------------------------------------------

def plan_pull(manifest, project_root, overwrite=False, concurrency_limit=None):
    """Decide what to download. Only tracked files under linked scopes are
    considered; locally modified files are kept unless ``overwrite``."""
    actions = []
    for path, entry in sorted(manifest.files.items()):
        if not entry.tracked:
            actions.append(_skip(path, UNTRACKED))
            continue
        found = remote_for_path(manifest, path)
        if found is None:
            actions.append(_skip(path, NO_REMOTE_SCOPE))
            continue
        scope, link = found
        local = classify_local(entry, project_root)
        if local is LocalState.CURRENT:
            actions.append(_skip(path, ALREADY_CURRENT))
        elif local is LocalState.MODIFIED and not overwrite:
            log.warning("%s differs from the manifest; not overwriting (use --overwrite)", path)
            actions.append(_skip(path, LOCALLY_MODIFIED))
        else:
            actions.append(TransferAction(path, Direction.DOWNLOAD, scope=scope, link=link,
                                          remote_name=remote_name(path, scope), md5=entry.md5))
    return TransferPlan(actions, concurrency_limit or default_concurrency(), Path(project_root))


def execute_pull(plan, listings, clients):
    """Download every DOWNLOAD action using the records in ``listings``
    (scope -> remote records). A file reaches its final path only if its
    digest matches both the remote record and the manifest."""
    by_name = {scope: {r.name: r for r in records} for scope, records in listings.items()}

    def download(action):
        record = by_name.get(action.scope, {}).get(action.remote_name)
        if record is None:
            raise DownloadFailure(f"not present on remote as {action.remote_name!r}")
        dest = to_local(plan.root, action.path)
        clean_partials(dest)
        service_for_link(action.link, clients).download_file(action.link, record, dest,
                                                            expected_md5=action.md5)

    outcome = TransferOutcome(skipped=[(a.path, a.reason) for a in plan.skips])
    for action, err in _run_bounded(download, plan.downloads, plan.concurrency_limit):
        if err is None:
            outcome.succeeded.append(action.path)
        else:
            outcome.failed.append((action.path, err))
    return outcome.sort()


def pull_all(manifest, project_root, clients, overwrite=False, concurrency_limit=None):
    """Download every tracked file that is missing locally (or modified,
    with ``overwrite``) to its registered path, verifying each against the
    manifest digest."""
    if not manifest.remotes:
        raise NoLinkedRemote("no remote linked; nothing to pull from")
    plan = plan_pull(manifest, project_root, overwrite, concurrency_limit)
    listings = {}
    for scope in sorted({a.scope for a in plan.downloads}):
        link = manifest.remotes[scope]
        listings[scope] = service_for_link(link, clients).list_files(link)
    return execute_pull(plan, listings, clients)


# -- URL downloads -------------------------------------------------------

def filename_from_url(url):
    parsed = urlparse(url)
    if parsed.scheme not in ("http", "https") or not parsed.netloc:
        raise DownloadFailure(f"{url}: not an absolute http(s) URL")
    name = unquote(PurePosixPath(parsed.path).name) if not parsed.path.endswith("/") else ""
    if not name or name in (".", ".."):
        raise FilenameUnderivable(f"{url}: cannot derive a file name from the URL path")
    return name


def _download_url(url, dest, session=None):
    session = session or requests.Session()
    resp = request_with_retry(session, "GET", url, stream=True)
    if not resp.ok:
        resp.close()
        raise DownloadFailure(f"GET {url} failed (HTTP {resp.status_code})")
    length = resp.headers.get("Content-Length")
    clean_partials(dest)
    return stream_to_file(resp, dest, expected_size=int(length) if length else None)


def url_destination(url, project_root, cwd=None):
    """Project-relative path a URL downloads to: its final path segment,
    placed in ``cwd``."""
    rel_dir = project_relpath(project_root, cwd or os.getcwd())
    name = filename_from_url(url)
    return name if rel_dir == "." else f"{rel_dir}/{name}"


def get_url(url, manifest, project_root, cwd=None, session=None):
    """Download ``url`` into ``cwd`` (inside the project) under its final
    path segment and register the file, untracked."""
    path = url_destination(url, project_root, cwd)
    if path in manifest.files:
        raise AlreadyRegistered(f"{path} is already registered")
    dest = to_local(project_root, path)
    if dest.exists():
        raise DestinationExists(f"{path} already exists but is not registered; use 'sdf add'")
    md5, size = _download_url(url, dest, session)
    return register_file(manifest, path, md5, size, root=project_root)


def read_url_table(table_path, url_column, has_header):
    """URLs from one column (1-based) of a tab-separated file, as
    ``[(row_number, url)]``. Blank lines are ignored."""
    if url_column < 1:
        raise ValueError("url_column is 1-based")
    try:
        with open(table_path, encoding="utf-8", newline="") as f:
            lines = f.read().split("\n")
    except OSError as e:
        raise IoFailure(f"cannot read {table_path}: {e}") from None
    rows = []
    for number, line in enumerate(lines, start=1):
        line = line.removesuffix("\r")
        if number == 1 and has_header:
            continue
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < url_column:
            raise MalformedRow(number, f"has {len(fields)} field(s), URL column is {url_column}")
        rows.append((number, fields[url_column - 1].strip()))
    return rows


def bulk_download(table_path, url_column, has_header, manifest, project_root, cwd=None,
                  concurrency_limit=None, session_factory=requests.Session):
    """Download and register every URL in a TSV column. Returns the updated
    manifest and an outcome keyed by destination path (or row, for rows
    whose destination cannot be derived)."""
    rows = read_url_table(table_path, url_column, has_header)
    outcome = TransferOutcome()
    jobs, claimed = [], set()
    for number, url in rows:
        try:
            path = url_destination(url, project_root, cwd)
        except SdfError as e:
            outcome.failed.append((f"row {number}", str(e)))
            continue
        if path in manifest.files:
            outcome.skipped.append((path, ALREADY_REGISTERED))
            continue
        if path in claimed:
            outcome.skipped.append((path, f"duplicate of an earlier row (row {number})"))
            continue
        claimed.add(path)
        if to_local(project_root, path).exists():
            outcome.failed.append((path, f"row {number}: {path} already exists but is not registered"))
            continue
        jobs.append((number, url, path))

    results = {}

    def fetch(job):
        _, url, path = job
        results[path] = _download_url(url, to_local(project_root, path), session_factory())

    for (number, url, path), err in _run_bounded(fetch, jobs, concurrency_limit or default_concurrency()):
        if err is None:
            md5, size = results[path]
            manifest = register_file(manifest, path, md5, size)
            outcome.succeeded.append(path)
        else:
            outcome.failed.append((path, f"row {number}: {err}"))
    return manifest, outcome.sort()
