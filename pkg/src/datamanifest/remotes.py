"""
Clients for remote data repositories, and per-user token/identity storage.

Two adapters implement :class:`RemoteService`: :class:`ZenodoService`
(deposition + file bucket) and :class:`FigShareService` (article +
initiate/upload/complete). New services register with
:func:`register_service`; the rest of the package selects adapters by
name only.
"""

import hashlib
import logging
import os
import stat
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import quote

import requests
import yaml

from datamanifest.errors import (
    AuthFailure,
    DepositNotFound,
    IntegrityMismatch,
    IoFailure,
    PermissionSetFailure,
    RemoteError,
    UnknownService,
)
from datamanifest.integrity import BLOCK_SIZE, compute_digest
from datamanifest.manifest import FigShareRemote, ZenodoRemote

log = logging.getLogger(__name__)

HOME_ENV = "SDF_HOME"
AUTH_FILE = ".sdf_authkeys.yml"
CONFIG_FILE = ".sdf_config.yml"

RETRIES = 3
BACKOFF = 0.25
TIMEOUT = (10, 300)
PART_SUFFIX = ".sdf-part"


@dataclass(frozen=True)
class RemoteFileRecord:
    name: str
    md5: str
    size: int
    download_ref: str


# -- per-user files ------------------------------------------------------

def home_dir():
    return Path(os.environ.get(HOME_ENV) or Path.home())


def _read_yaml_map(path):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        return {}
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from None
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise IoFailure(f"{path}: expected a YAML mapping")
    return data


def _write_private(path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            os.fchmod(fd, 0o600)
        except OSError as e:
            os.close(fd)
            os.unlink(tmp)
            raise PermissionSetFailure(f"cannot restrict permissions on {path}: {e}") from None
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            yaml.safe_dump(data, f, sort_keys=True, default_flow_style=False)
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from None


class AuthStore:
    """Service tokens kept in an owner-only YAML file in the home directory."""

    def __init__(self, path=None):
        self.path = Path(path) if path else home_dir() / AUTH_FILE

    def _load(self):
        if self.path.exists():
            mode = stat.S_IMODE(self.path.stat().st_mode)
            if mode & 0o077:
                log.warning("%s is accessible by other users (mode %o); run 'chmod 600 %s'",
                            self.path, mode, self.path)
        return {str(k): str(v) for k, v in _read_yaml_map(self.path).items()}

    def get(self, service):
        return self._load().get(service)

    def set(self, service, token):
        tokens = self._load()
        tokens[service] = token
        _write_private(self.path, tokens)

    def all_tokens(self):
        return list(self._load().values())


def store_token(service, token, store=None):
    (store or AuthStore()).set(service, token)


def load_token(service, store=None):
    return (store or AuthStore()).get(service)


@dataclass
class UserConfig:
    name: str = None
    email: str = None
    affiliation: str = None

    @classmethod
    def load(cls, path=None):
        data = _read_yaml_map(Path(path) if path else home_dir() / CONFIG_FILE)
        return cls(**{k: data.get(k) for k in ("name", "email", "affiliation")})

    def save(self, path=None):
        data = {k: v for k, v in vars(self).items() if v is not None}
        _write_private(Path(path) if path else home_dir() / CONFIG_FILE, data)


# -- HTTP ----------------------------------------------------------------

def request_with_retry(session, method, url, *, retries=RETRIES, backoff=BACKOFF,
                       rewind=None, **kwargs):
    """Issue a request, retrying connection errors and 5xx responses with
    exponential backoff. 4xx responses are returned without retry.
    ``rewind`` is called before each retry to reset a streamed body."""
    kwargs.setdefault("timeout", TIMEOUT)
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
            if rewind:
                rewind()
        try:
            resp = session.request(method, url, **kwargs)
        except (requests.ConnectionError, requests.Timeout) as e:
            if attempt == retries:
                raise RemoteError(f"{method} {url} failed: {e.__class__.__name__}") from None
            log.debug("%s %s: %s, retrying", method, url, e.__class__.__name__)
            continue
        if resp.status_code >= 500 and attempt < retries:
            log.debug("%s %s: HTTP %d, retrying", method, url, resp.status_code)
            resp.close()
            continue
        return resp


def _check(resp, what, not_found=RemoteError):
    if resp.ok:
        return resp
    body = resp.text
    if resp.status_code in (401, 403):
        raise AuthFailure(f"{what}: authentication rejected", resp.status_code, body)
    if resp.status_code == 404:
        raise not_found(f"{what}: not found", resp.status_code, body)
    raise RemoteError(f"{what} failed", resp.status_code, body)


def _part_path(dest):
    dest = Path(dest)
    fd, tmp = tempfile.mkstemp(prefix=f".{dest.name}.", suffix=PART_SUFFIX, dir=dest.parent)
    os.close(fd)
    return Path(tmp)


def clean_partials(dest):
    """Remove leftover temporary files from interrupted downloads of ``dest``."""
    dest = Path(dest)
    if dest.parent.is_dir():
        for p in dest.parent.glob(f".{dest.name}.*{PART_SUFFIX}"):
            p.unlink(missing_ok=True)


def stream_to_file(resp, dest, expected_md5=(), expected_size=None):
    """Write a streamed response to ``dest`` via a temporary sibling,
    checking the MD5 against every value in ``expected_md5``. Only a
    verified file is renamed into place. Returns ``(md5, size)``."""
    dest = Path(dest)
    try:
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = _part_path(dest)
    except OSError as e:
        raise IoFailure(f"cannot create {dest}: {e}") from None
    h = hashlib.md5()
    size = 0
    try:
        try:
            with open(tmp, "wb") as f:
                for chunk in resp.iter_content(BLOCK_SIZE):
                    h.update(chunk)
                    size += len(chunk)
                    f.write(chunk)
        except requests.RequestException as e:
            raise RemoteError(f"download of {dest.name} interrupted: {e.__class__.__name__}") from None
        except OSError as e:
            raise IoFailure(f"cannot write {dest}: {e}") from None
        digest = h.hexdigest()
        for md5 in expected_md5:
            if md5 is not None and digest != md5:
                raise IntegrityMismatch(str(dest), md5, digest)
        if expected_size is not None and size != expected_size:
            raise RemoteError(f"{dest.name}: expected {expected_size} bytes, received {size}")
        os.replace(tmp, dest)
    finally:
        resp.close()
        tmp.unlink(missing_ok=True)
    return digest, size


# -- services ------------------------------------------------------------

class RemoteService:
    """A data repository reachable over REST.

    Subclasses set ``name``, ``link_type`` and ``default_base_url`` and
    implement the five operations below. Instances hold only configuration
    and are safe to share between threads.
    """

    name = None
    link_type = None
    default_base_url = None

    def __init__(self, token, base_url=None, retries=RETRIES, backoff=BACKOFF):
        self._token = token
        env = os.environ.get(f"SDF_{self.name.upper()}_URL")
        self.base_url = (base_url or env or self.default_base_url).rstrip("/")
        self.retries = retries
        self.backoff = backoff
        self._local = threading.local()

    def __repr__(self):
        return f"{type(self).__name__}(base_url={self.base_url!r})"

    @property
    def session(self):
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
            s.headers["Authorization"] = f"Bearer {self._token}"
        return s

    def _request(self, method, url, **kwargs):
        return request_with_retry(self.session, method, url, retries=self.retries,
                                  backoff=self.backoff, **kwargs)

    def create_deposit(self, name, metadata=None, user=None):
        raise NotImplementedError

    def set_metadata(self, link, metadata=None, user=None):
        raise NotImplementedError

    def list_files(self, link):
        raise NotImplementedError

    def upload_file(self, link, local_path, remote_name):
        raise NotImplementedError

    def download_file(self, link, record, destination, expected_md5=None):
        """Download ``record`` to ``destination``; the file appears only if
        its digest equals ``record.md5`` (and ``expected_md5``, if given)."""
        what = f"download {record.name}"
        resp = _check(self._request("GET", record.download_ref, stream=True), what)
        stream_to_file(resp, destination, (record.md5, expected_md5), record.size)


def _creators(user):
    if user is None or not user.name:
        return None
    creator = {"name": user.name}
    if user.affiliation:
        creator["affiliation"] = user.affiliation
    return [creator]


class ZenodoService(RemoteService):
    """Zenodo-style deposition API.

    * ``POST {base}/api/deposit/depositions`` creates a deposition and
      returns ``id`` and ``links.bucket``.
    * ``PUT {base}/api/deposit/depositions/{id}`` sets ``metadata``.
    * ``GET {base}/api/deposit/depositions/{id}/files`` lists files with
      ``filename``, ``filesize`` and hex ``checksum``.
    * ``PUT {bucket_url}/{name}`` uploads raw bytes (name percent-encoded).
    """

    name = "zenodo"
    link_type = ZenodoRemote
    default_base_url = "https://zenodo.org"

    def _deposition_url(self, deposition_id=None):
        url = f"{self.base_url}/api/deposit/depositions"
        return url if deposition_id is None else f"{url}/{deposition_id}"

    def _metadata(self, title, metadata, user):
        out = {"title": title, "upload_type": "dataset"}
        if metadata is not None and metadata.description:
            out["description"] = metadata.description
        creators = _creators(user)
        if creators:
            out["creators"] = creators
        return out

    def create_deposit(self, name, metadata=None, user=None):
        resp = _check(self._request("POST", self._deposition_url(), json={}), "create deposition")
        body = resp.json()
        link = ZenodoRemote(name=name, deposition_id=int(body["id"]), bucket_url=body["links"]["bucket"])
        self._put_metadata(link, (metadata and metadata.title) or name, metadata, user)
        return link

    def _put_metadata(self, link, title, metadata, user):
        try:
            _check(self._request("PUT", self._deposition_url(link.deposition_id),
                                 json={"metadata": self._metadata(title, metadata, user)}),
                   "update deposition metadata")
        except RemoteError as e:
            log.warning("deposition %s created but metadata update failed: %s", link.deposition_id, e)
            return False
        return True

    def set_metadata(self, link, metadata=None, user=None):
        return self._put_metadata(link, (metadata and metadata.title) or link.name, metadata, user)

    def list_files(self, link):
        resp = _check(self._request("GET", self._deposition_url(link.deposition_id) + "/files"),
                      f"list deposition {link.deposition_id}", not_found=DepositNotFound)
        return [
            RemoteFileRecord(name=f["filename"], md5=f["checksum"].removeprefix("md5:"),
                             size=int(f["filesize"]), download_ref=f["links"]["download"])
            for f in resp.json()
        ]

    def upload_file(self, link, local_path, remote_name):
        url = f"{link.bucket_url.rstrip('/')}/{quote(remote_name, safe='/')}"
        try:
            f = open(local_path, "rb")
        except OSError as e:
            raise IoFailure(f"cannot read {local_path}: {e}") from None
        with f:
            resp = self._request("PUT", url, data=f, rewind=lambda: f.seek(0),
                                 headers={"Content-Type": "application/octet-stream"})
        body = _check(resp, f"upload {remote_name}", not_found=DepositNotFound).json()
        return RemoteFileRecord(name=body["key"], md5=body["checksum"].removeprefix("md5:"),
                                size=int(body["size"]), download_ref=body["links"]["self"])


def figshare_escape(name):
    """FigShare file names cannot contain ``/``; escape reversibly."""
    return name.replace("%", "%25").replace("/", "%2F")


def figshare_unescape(name):
    return name.replace("%2F", "/").replace("%25", "%")


class FigShareService(RemoteService):
    """FigShare-style article API.

    * ``POST {base}/v2/account/articles`` creates an article, returning
      ``entity_id``; ``PUT`` on the article updates title/description/authors.
    * Uploads: ``POST .../articles/{id}/files`` with name/size/md5, ``GET``
      the returned location for ``upload_url``, ``PUT`` the bytes there,
      then ``POST .../files/{file_id}`` to complete.
    * ``GET .../articles/{id}/files`` lists ``name``, ``size``,
      ``computed_md5``, ``download_url`` and ``status``.
    """

    name = "figshare"
    link_type = FigShareRemote
    default_base_url = "https://api.figshare.com"

    def _article_url(self, article_id=None):
        url = f"{self.base_url}/v2/account/articles"
        return url if article_id is None else f"{url}/{article_id}"

    def _metadata(self, title, metadata, user):
        out = {"title": title}
        if metadata is not None and metadata.description:
            out["description"] = metadata.description
        if user is not None and user.name:
            out["authors"] = [{"name": user.name}]
        return out

    def create_deposit(self, name, metadata=None, user=None):
        resp = _check(self._request("POST", self._article_url(), json={"title": name}), "create article")
        link = FigShareRemote(name=name, article_id=int(resp.json()["entity_id"]))
        self.set_metadata(link, metadata, user)
        return link

    def set_metadata(self, link, metadata=None, user=None):
        title = (metadata and metadata.title) or link.name
        try:
            _check(self._request("PUT", self._article_url(link.article_id),
                                 json=self._metadata(title, metadata, user)),
                   "update article metadata")
        except RemoteError as e:
            log.warning("article %s: metadata update failed: %s", link.article_id, e)
            return False
        return True

    def _raw_files(self, link):
        resp = _check(self._request("GET", self._article_url(link.article_id) + "/files"),
                      f"list article {link.article_id}", not_found=DepositNotFound)
        return resp.json()

    def list_files(self, link):
        return [
            RemoteFileRecord(name=figshare_unescape(f["name"]), md5=f["computed_md5"],
                             size=int(f["size"]), download_ref=f["download_url"])
            for f in self._raw_files(link)
            if f.get("status") == "available"
        ]

    def upload_file(self, link, local_path, remote_name):
        stored = figshare_escape(remote_name)
        what = f"upload {remote_name}"
        md5 = compute_digest(local_path)
        size = os.path.getsize(local_path)
        files_url = self._article_url(link.article_id) + "/files"
        for f in self._raw_files(link):
            if f["name"] == stored:
                _check(self._request("DELETE", f"{files_url}/{f['id']}"), f"replace {remote_name}")
        resp = _check(self._request("POST", files_url, json={"name": stored, "size": size, "md5": md5}),
                      what, not_found=DepositNotFound)
        location = resp.json()["location"]
        info = _check(self._request("GET", location), what).json()
        with open(local_path, "rb") as fh:
            _check(self._request("PUT", info["upload_url"], data=fh, rewind=lambda: fh.seek(0),
                                 headers={"Content-Type": "application/octet-stream"}), what)
        _check(self._request("POST", location), what)
        info = _check(self._request("GET", location), what).json()
        return RemoteFileRecord(name=figshare_unescape(info["name"]), md5=info["computed_md5"],
                                size=int(info["size"]), download_ref=info["download_url"])


SERVICES = {}


def register_service(cls):
    SERVICES[cls.name] = cls
    return cls


register_service(ZenodoService)
register_service(FigShareService)


def service_class(name):
    try:
        return SERVICES[name.lower()]
    except KeyError:
        raise UnknownService(f"unknown service {name!r} (known: {', '.join(sorted(SERVICES))})") from None


def token_for(service, store=None):
    """Token for ``service``: ``SDF_<SERVICE>_TOKEN`` if set, else the
    AuthStore entry."""
    return os.environ.get(f"SDF_{service.upper()}_TOKEN") or load_token(service, store)


def make_service(name, token=None, base_url=None, store=None, **kwargs):
    cls = service_class(name)
    token = token or token_for(cls.name, store)
    if not token:
        raise AuthFailure(f"no token stored for {cls.name}; run 'sdf link {cls.name} <token> ...'")
    return cls(token, base_url=base_url, **kwargs)


def service_for_link(link, clients):
    """Pick the client for a manifest remote link from a mapping of service
    name to :class:`RemoteService`."""
    try:
        return clients[link.service]
    except KeyError:
        raise UnknownService(f"no client configured for service {link.service!r}") from None
