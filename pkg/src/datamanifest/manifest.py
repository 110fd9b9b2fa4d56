"""
The data manifest: a YAML document at the project root registering data
files (size + MD5), the remote repositories that hold them, and project
metadata.

Manifest values are immutable; every mutating operation returns a new
:class:`DataManifest`.
"""

import os
import re
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import ClassVar, Mapping, Optional, Union
from urllib.parse import urlparse

import yaml

from datamanifest.errors import (
    AlreadyRegistered,
    DirectoryNotFound,
    FileNotFound,
    InvariantViolation,
    IoFailure,
    ManifestAlreadyExists,
    ManifestNotFound,
    NotRegistered,
    ParseError,
    PathOutsideProject,
    ScopeConflict,
    UnknownRemoteTag,
)

MANIFEST_NAME = "data_manifest.yml"
ROOT_SCOPE = "."

MD5_RE = re.compile(r"^[0-9a-f]{32}$")

_TOP_LEVEL_KEYS = ("files", "remotes", "metadata")
_ENTRY_KEYS = ("tracked", "md5", "size")
_METADATA_KEYS = ("title", "description")


@dataclass(frozen=True)
class DataFileEntry:
    path: str
    md5: str
    size: int
    tracked: bool = False


@dataclass(frozen=True)
class ZenodoRemote:
    name: str
    deposition_id: int
    bucket_url: str

    tag: ClassVar[str] = "!ZenodoAPI"
    service: ClassVar[str] = "zenodo"
    fields: ClassVar[tuple] = ("name", "deposition_id", "bucket_url")


@dataclass(frozen=True)
class FigShareRemote:
    name: str
    article_id: int

    tag: ClassVar[str] = "!FigShareAPI"
    service: ClassVar[str] = "figshare"
    fields: ClassVar[tuple] = ("name", "article_id")


RemoteLink = Union[ZenodoRemote, FigShareRemote]

REMOTE_TYPES = {cls.tag: cls for cls in (ZenodoRemote, FigShareRemote)}


@dataclass(frozen=True)
class ProjectMetadata:
    title: Optional[str] = None
    description: Optional[str] = None


@dataclass(frozen=True)
class DataManifest:
    files: Mapping[str, DataFileEntry] = field(default_factory=dict)
    remotes: Mapping[str, RemoteLink] = field(default_factory=dict)
    metadata: ProjectMetadata = field(default_factory=ProjectMetadata)

    def __post_init__(self):
        object.__setattr__(self, "files", MappingProxyType(dict(self.files)))
        object.__setattr__(self, "remotes", MappingProxyType(dict(self.remotes)))

    __hash__ = None


# -- paths ---------------------------------------------------------------

def normalize_path(path):
    """Canonical project-relative form: forward slashes, no ``./`` or empty
    segments. Raises PathOutsideProject for absolute paths or ``..``."""
    p = str(path).replace(os.sep, "/")
    if p.startswith("/") or re.match(r"^[A-Za-z]:/", p):
        raise PathOutsideProject(f"{path}: absolute paths are not project-relative")
    parts = [seg for seg in p.split("/") if seg not in ("", ".")]
    if ".." in parts:
        raise PathOutsideProject(f"{path}: path escapes the project")
    if not parts:
        raise PathOutsideProject(f"{path!r}: empty path")
    return "/".join(parts)


def normalize_scope(scope):
    """Like :func:`normalize_path`, but the project root itself is a valid
    scope, spelled ``.``."""
    p = str(scope).replace(os.sep, "/")
    if not p.startswith("/") and all(seg in ("", ".") for seg in p.split("/")):
        return ROOT_SCOPE
    return normalize_path(scope)


def project_relpath(root, path, base=None):
    """Project-relative path of ``path`` (absolute, or relative to ``base``,
    default the current directory). Symlinks are not resolved."""
    root = os.path.abspath(root)
    full = os.path.abspath(os.path.join(base or os.getcwd(), path))
    rel = os.path.relpath(full, root)
    if rel == ".":
        return ROOT_SCOPE
    if rel == ".." or rel.startswith(".." + os.sep) or os.path.isabs(rel):
        raise PathOutsideProject(f"{path}: outside project root {root}")
    return normalize_path(rel)


def to_local(root, path):
    """Filesystem location of a manifest path."""
    if path == ROOT_SCOPE:
        return Path(root)
    return Path(root).joinpath(*path.split("/"))


def is_under(path, scope):
    return scope == ROOT_SCOPE or path == scope or path.startswith(scope + "/")


def scopes_overlap(a, b):
    return is_under(a, b) or is_under(b, a)


def remote_for_path(manifest, path):
    """``(scope_dir, link)`` governing ``path``, or None."""
    for scope, link in manifest.remotes.items():
        if is_under(path, scope) and path != scope:
            return scope, link
    return None


def remote_name(path, scope):
    """Name of a tracked file inside its remote deposit: its path relative
    to the remote's scope directory."""
    if scope == ROOT_SCOPE:
        return path
    return path[len(scope) + 1:]


# -- validation ----------------------------------------------------------

def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _canonical(path):
    try:
        return isinstance(path, str) and normalize_path(path) == path
    except PathOutsideProject:
        return False


def validate_entry(entry):
    if not _canonical(entry.path):
        raise InvariantViolation(f"files: {entry.path!r} is not a canonical relative path")
    if not isinstance(entry.md5, str) or not MD5_RE.match(entry.md5):
        raise InvariantViolation(f"files[{entry.path}].md5: {entry.md5!r} is not 32 lowercase hex digits")
    if not _is_int(entry.size) or entry.size < 0:
        raise InvariantViolation(f"files[{entry.path}].size: {entry.size!r} is not a non-negative integer")
    if not isinstance(entry.tracked, bool):
        raise InvariantViolation(f"files[{entry.path}].tracked: {entry.tracked!r} is not a boolean")


def validate_remote(scope, link):
    where = f"remotes[{scope}]"
    if not isinstance(link, tuple(REMOTE_TYPES.values())):
        raise InvariantViolation(f"{where}: not a remote link")
    if not isinstance(link.name, str) or not link.name:
        raise InvariantViolation(f"{where}.name: must be a non-empty string")
    if isinstance(link, ZenodoRemote):
        if not _is_int(link.deposition_id) or link.deposition_id <= 0:
            raise InvariantViolation(f"{where}.deposition_id: must be a positive integer")
        url = urlparse(link.bucket_url) if isinstance(link.bucket_url, str) else None
        if url is None or not url.scheme or not url.netloc:
            raise InvariantViolation(f"{where}.bucket_url: {link.bucket_url!r} is not an absolute URL")
    else:
        if not _is_int(link.article_id) or link.article_id <= 0:
            raise InvariantViolation(f"{where}.article_id: must be a positive integer")


def validate(manifest):
    """Check every type invariant; raise InvariantViolation on the first
    failure. Returns the manifest for chaining."""
    for path, entry in manifest.files.items():
        if path != entry.path:
            raise InvariantViolation(f"files: key {path!r} does not match entry path {entry.path!r}")
        validate_entry(entry)
    scopes = list(manifest.remotes)
    for scope in scopes:
        if scope != ROOT_SCOPE and not _canonical(scope):
            raise InvariantViolation(f"remotes: {scope!r} is not a canonical relative path")
        validate_remote(scope, manifest.remotes[scope])
    for i, a in enumerate(scopes):
        for b in scopes[i + 1:]:
            if scopes_overlap(a, b):
                raise InvariantViolation(f"remotes: scopes {a!r} and {b!r} are nested")
    for key in _METADATA_KEYS:
        value = getattr(manifest.metadata, key)
        if value is not None and not isinstance(value, str):
            raise InvariantViolation(f"metadata.{key}: must be a string")
    return manifest


# -- YAML ----------------------------------------------------------------

class _TaggedMapping:
    def __init__(self, tag, value, line):
        self.tag = tag
        self.value = value
        self.line = line


class _Loader(yaml.SafeLoader):
    def construct_mapping(self, node, deep=False):
        seen = set()
        for key_node, _ in node.value:
            key = self.construct_object(key_node, deep=deep)
            try:
                duplicate = key in seen
            except TypeError:
                continue
            if duplicate:
                raise InvariantViolation(f"duplicate key {key!r}", line=key_node.start_mark.line + 1)
            seen.add(key)
        return super().construct_mapping(node, deep=deep)


def _construct_remote(loader, node):
    if not isinstance(node, yaml.MappingNode):
        raise ParseError(f"{node.tag} must tag a mapping", line=node.start_mark.line + 1)
    return _TaggedMapping(node.tag, loader.construct_mapping(node, deep=True), node.start_mark.line + 1)


def _reject_tag(loader, suffix, node):
    raise UnknownRemoteTag(f"unknown remote tag {node.tag!r}", line=node.start_mark.line + 1)


for _tag in REMOTE_TYPES:
    _Loader.add_constructor(_tag, _construct_remote)
_Loader.add_multi_constructor("!", _reject_tag)


class _Dumper(yaml.SafeDumper):
    pass


_UNICODE_BREAKS = frozenset("\x85\u2028\u2029")


def _represent_str(dumper, value):
    # PyYAML writes these raw in quoted scalars, where they fold to spaces on load
    style = '"' if _UNICODE_BREAKS.intersection(value) else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", value, style=style)


_Dumper.add_representer(str, _represent_str)


def _represent_remote(dumper, link):
    return dumper.represent_mapping(link.tag, {f: getattr(link, f) for f in link.fields})


for _cls in REMOTE_TYPES.values():
    _Dumper.add_representer(_cls, _represent_remote)


def _section(doc, key):
    value = doc.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ParseError(f"{key}: expected a mapping, got {type(value).__name__}")
    return value


def _check_keys(where, mapping, allowed):
    unknown = [k for k in mapping if k not in allowed]
    if unknown:
        raise ParseError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}")


def parse_manifest(text):
    """Parse manifest YAML into a validated :class:`DataManifest`."""
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark else None
        raise ParseError(str(e.problem or e), line=line) from None
    except yaml.YAMLError as e:
        raise ParseError(str(e)) from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ParseError("manifest must be a YAML mapping")
    _check_keys("manifest", doc, _TOP_LEVEL_KEYS)

    files = {}
    for path, spec in _section(doc, "files").items():
        if not isinstance(path, str):
            raise InvariantViolation(f"files: key {path!r} is not a path string")
        if not isinstance(spec, dict):
            raise ParseError(f"files[{path}]: expected a mapping")
        _check_keys(f"files[{path}]", spec, _ENTRY_KEYS)
        missing = [k for k in ("md5", "size") if k not in spec]
        if missing:
            raise ParseError(f"files[{path}]: missing {', '.join(missing)}")
        entry = DataFileEntry(path=path, md5=spec["md5"], size=spec["size"],
                              tracked=spec.get("tracked", False))
        validate_entry(entry)
        files[path] = entry

    remotes = {}
    for scope, tagged in _section(doc, "remotes").items():
        if not isinstance(tagged, _TaggedMapping):
            raise UnknownRemoteTag(f"remotes[{scope}]: missing remote tag (one of {', '.join(REMOTE_TYPES)})")
        cls = REMOTE_TYPES[tagged.tag]
        _check_keys(f"remotes[{scope}]", tagged.value, cls.fields)
        missing = [k for k in cls.fields if k not in tagged.value]
        if missing:
            raise ParseError(f"remotes[{scope}]: missing {', '.join(missing)}", line=tagged.line)
        remotes[str(scope)] = cls(**tagged.value)

    meta = _section(doc, "metadata")
    _check_keys("metadata", meta, _METADATA_KEYS)
    manifest = DataManifest(files, remotes, ProjectMetadata(**meta))
    return validate(manifest)


def serialize_manifest(manifest):
    """Deterministic YAML text: file and remote keys sorted, entry fields in
    a fixed order, remote variants carrying their local tag."""
    doc = {
        "files": {
            path: {"tracked": e.tracked, "md5": e.md5, "size": e.size}
            for path, e in sorted(manifest.files.items())
        },
        "remotes": dict(sorted(manifest.remotes.items())),
        "metadata": {
            k: getattr(manifest.metadata, k)
            for k in _METADATA_KEYS
            if getattr(manifest.metadata, k) is not None
        },
    }
    return yaml.dump(doc, Dumper=_Dumper, sort_keys=False, default_flow_style=False,
                     allow_unicode=True, width=4096)


# -- files on disk -------------------------------------------------------

def manifest_path(root):
    return Path(root) / MANIFEST_NAME


def find_project_root(start=None):
    """Nearest ancestor of ``start`` (default: cwd) holding a manifest."""
    here = Path(os.path.abspath(start or os.getcwd()))
    for d in (here, *here.parents):
        if (d / MANIFEST_NAME).is_file():
            return d
    raise ManifestNotFound(f"no {MANIFEST_NAME} found in {here} or any parent directory (run 'sdf init')")


def load_manifest(root):
    path = manifest_path(root)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestNotFound(f"{path} does not exist") from None
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from None
    return parse_manifest(text)


def save_manifest(manifest, root):
    """Atomically (re)write the manifest file."""
    validate(manifest)
    path = manifest_path(root)
    text = serialize_manifest(manifest)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{MANIFEST_NAME}.", dir=path.parent)
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from None


def init_manifest(root):
    path = manifest_path(root)
    if path.exists():
        raise ManifestAlreadyExists(f"{path} already exists")
    manifest = DataManifest()
    try:
        with open(path, "x", encoding="utf-8", newline="\n") as f:
            f.write(serialize_manifest(manifest))
    except FileExistsError:
        raise ManifestAlreadyExists(f"{path} already exists") from None
    except OSError as e:
        raise IoFailure(f"cannot create {path}: {e}") from None
    return manifest


# -- mutations -----------------------------------------------------------

def _with_files(manifest, files):
    return replace(manifest, files=files)


def _checked_path(path, root):
    if root is None:
        return normalize_path(path)
    rel = project_relpath(root, path, base=root)
    if rel == ROOT_SCOPE:
        raise PathOutsideProject(f"{path}: the project root is not a file")
    if not to_local(root, rel).is_file():
        raise FileNotFound(f"{path}: no such file")
    return rel


def register_file(manifest, path, md5, size, root=None):
    """New untracked entry for ``path``. With ``root`` given the file must
    exist under it; ``path`` is then taken relative to ``root``."""
    rel = _checked_path(path, root)
    if rel in manifest.files:
        raise AlreadyRegistered(f"{rel} is already registered")
    entry = DataFileEntry(rel, md5, size, tracked=False)
    validate_entry(entry)
    return _with_files(manifest, {**manifest.files, rel: entry})


def update_file(manifest, path, md5, size):
    """Re-register the digest and size of an existing entry."""
    rel = normalize_path(path)
    if rel not in manifest.files:
        raise NotRegistered(f"{rel} is not registered")
    entry = replace(manifest.files[rel], md5=md5, size=size)
    validate_entry(entry)
    return _with_files(manifest, {**manifest.files, rel: entry})


def set_tracked(manifest, path, tracked):
    rel = normalize_path(path)
    if rel not in manifest.files:
        raise NotRegistered(f"{rel} is not registered")
    entry = manifest.files[rel]
    if entry.tracked == tracked:
        return manifest
    return _with_files(manifest, {**manifest.files, rel: replace(entry, tracked=bool(tracked))})


def check_scope(manifest, scope_dir, root=None):
    """Validate a prospective remote scope; return its canonical form."""
    scope = normalize_scope(scope_dir)
    if root is not None and not to_local(root, scope).is_dir():
        raise DirectoryNotFound(f"{scope_dir}: no such directory")
    for existing in manifest.remotes:
        if scopes_overlap(scope, existing):
            raise ScopeConflict(f"{scope} overlaps already linked remote scope {existing}")
    return scope


def link_remote(manifest, scope_dir, link, root=None):
    scope = check_scope(manifest, scope_dir, root)
    validate_remote(scope, link)
    return replace(manifest, remotes={**manifest.remotes, scope: link})


def set_metadata(manifest, **fields):
    unknown = set(fields) - set(_METADATA_KEYS)
    if unknown:
        raise ValueError(f"unknown metadata fields: {sorted(unknown)}")
    return replace(manifest, metadata=replace(manifest.metadata, **fields))
