"""
Digests and change detection: which registered files differ from the
manifest, and which differ from what a remote holds.
"""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import List, Optional

from datamanifest.errors import IoFailure
from datamanifest.manifest import (
    MANIFEST_NAME,
    ROOT_SCOPE,
    remote_for_path,
    remote_name,
    to_local,
)

BLOCK_SIZE = 1 << 20
DEFAULT_JOBS = 8


class LocalState(str, Enum):
    CURRENT = "current"
    MODIFIED = "modified"
    MISSING_LOCAL = "missing-local"


class RemoteState(str, Enum):
    REMOTE_CURRENT = "remote-current"
    REMOTE_DIFFERENT = "remote-different"
    NOT_ON_REMOTE = "not-on-remote"
    NO_REMOTE = "no-remote"


@dataclass(frozen=True)
class StatusEntry:
    path: str
    tracked: bool
    local: Optional[LocalState]
    remote: RemoteState
    error: Optional[str] = None


@dataclass
class StatusReport:
    entries: List[StatusEntry] = field(default_factory=list)
    untracked_on_disk: List[str] = field(default_factory=list)

    def by_path(self):
        return {e.path: e for e in self.entries}

    def to_dict(self):
        return {
            "entries": [
                {**asdict(e), "local": e.local.value if e.local else None, "remote": e.remote.value}
                for e in self.entries
            ],
            "untracked_on_disk": list(self.untracked_on_disk),
        }


def md5_stream(chunks):
    h = hashlib.md5()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def compute_digest(path, blocksize=BLOCK_SIZE):
    """MD5 of a file's bytes as lowercase hex, read in ``blocksize`` chunks."""
    try:
        with open(path, "rb") as f:
            return md5_stream(iter(lambda: f.read(blocksize), b""))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from None


def classify_local(entry, project_root, check_digest=True):
    """Compare the file on disk with its manifest entry.

    A size mismatch is reported as MODIFIED without reading the file. With
    ``check_digest=False`` only sizes are compared.
    """
    local = to_local(project_root, entry.path)
    try:
        # follows symlinks; a broken link looks absent
        st = os.stat(local)
    except FileNotFoundError:
        return LocalState.MISSING_LOCAL
    except OSError as e:
        raise IoFailure(f"cannot stat {local}: {e}") from None
    if st.st_size != entry.size:
        return LocalState.MODIFIED
    if check_digest and compute_digest(local) != entry.md5:
        return LocalState.MODIFIED
    return LocalState.CURRENT


def classify_remote(entry, listing, name=None):
    """Compare a manifest entry with a remote listing of records carrying
    ``name`` and ``md5``. ``name`` defaults to the entry's basename; a
    ``listing`` of None means no remote applies."""
    if listing is None:
        return RemoteState.NO_REMOTE
    if name is None:
        name = entry.path.rsplit("/", 1)[-1]
    for record in listing:
        if record.name == name:
            if record.md5 == entry.md5:
                return RemoteState.REMOTE_CURRENT
            return RemoteState.REMOTE_DIFFERENT
    return RemoteState.NOT_ON_REMOTE


def _remote_state(manifest, entry, listings):
    if listings is None:
        return RemoteState.NO_REMOTE
    found = remote_for_path(manifest, entry.path)
    if found is None or found[0] not in listings:
        return RemoteState.NO_REMOTE
    scope = found[0]
    return classify_remote(entry, listings[scope], name=remote_name(entry.path, scope))


def _status_entry(manifest, entry, root, listings):
    remote = _remote_state(manifest, entry, listings)
    try:
        local = classify_local(entry, root)
    except IoFailure as e:
        return StatusEntry(entry.path, entry.tracked, None, remote, error=str(e))
    return StatusEntry(entry.path, entry.tracked, local, remote)


def untracked_files(manifest, root):
    """Files on disk that are not registered, looked for only in the
    immediate contents of directories holding a registered file or serving
    as a remote scope. Hidden files and the manifest itself are ignored."""
    dirs = {p.rsplit("/", 1)[0] if "/" in p else ROOT_SCOPE for p in manifest.files}
    dirs.update(manifest.remotes)
    found = set()
    for d in dirs:
        try:
            names = os.listdir(to_local(root, d))
        except OSError:
            continue
        for name in names:
            if name.startswith(".") or name == MANIFEST_NAME:
                continue
            rel = name if d == ROOT_SCOPE else f"{d}/{name}"
            if rel not in manifest.files and os.path.isfile(to_local(root, rel)):
                found.add(rel)
    return sorted(found)


def project_status(manifest, project_root, listings=None, jobs=DEFAULT_JOBS):
    """Classify every registered file.

    ``listings`` maps remote scope directories to lists of remote file
    records; scopes missing from it (or ``listings=None``) yield NO_REMOTE.
    Hashing runs on up to ``jobs`` threads; entries come back sorted by path.
    Per-file read errors are recorded on the entry instead of raised.
    """
    entries = sorted(manifest.files.values(), key=lambda e: e.path)
    if not entries:
        return StatusReport([], untracked_files(manifest, project_root))
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda e: _status_entry(manifest, e, project_root, listings), entries))
    return StatusReport(results, untracked_files(manifest, project_root))
