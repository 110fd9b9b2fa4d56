import io
import itertools
from pathlib import Path

import pytest
import requests

from datamanifest import cli
from datamanifest.integrity import LocalState, RemoteState
from datamanifest.manifest import DataFileEntry, DataManifest, FigShareRemote
from datamanifest.mock_repository import DEFAULT_TOKEN, serve
from datamanifest.remotes import RemoteFileRecord

from oracles import md5_reference

SAMPLE_MANIFEST = """\
files:
  data/supplement/figure_1.tsv:
    tracked: true
    md5: 87c1148fa71abf01daceb82d8fbfee53
    size: 993
remotes:
  data/raw: !ZenodoAPI
    name: ancient_dna_analysis
    deposition_id: 8271457
    bucket_url: https://zenodo.org/api/files/558014a8-8e04-4a7e-b1c9-7c82bcbe8fa9
metadata:
  title: An analysis of new Ancient DNA Samples
  description: This project contains the code and data to reproduce Joan et al. (2023).
"""


@pytest.fixture
def sample_manifest():
    return SAMPLE_MANIFEST


@pytest.fixture
def mock():
    server = serve()
    yield server
    server.stop()


@pytest.fixture
def home(tmp_path, monkeypatch):
    h = tmp_path / "home"
    h.mkdir()
    monkeypatch.setenv("SDF_HOME", str(h))
    for var in ("SDF_ZENODO_TOKEN", "SDF_FIGSHARE_TOKEN", "SDF_JOBS",
                "SDF_ZENODO_URL", "SDF_FIGSHARE_URL"):
        monkeypatch.delenv(var, raising=False)
    return h


@pytest.fixture
def env(home, mock, monkeypatch):
    """Isolated home directory with both services pointed at the mock."""
    monkeypatch.setenv("SDF_ZENODO_URL", mock.url)
    monkeypatch.setenv("SDF_FIGSHARE_URL", mock.url)
    return mock


@pytest.fixture
def project(tmp_path):
    root = tmp_path / "project"
    root.mkdir()
    return root


def write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)
    return path


class Result:
    def __init__(self, code, out, err):
        self.code, self.out, self.err = code, out, err

    def __repr__(self):
        return f"Result(code={self.code}, out={self.out!r}, err={self.err!r})"


@pytest.fixture
def sdf(monkeypatch):
    """Run the CLI in-process from a given directory."""
    def run(*argv, cwd):
        monkeypatch.chdir(cwd)
        out, err = io.StringIO(), io.StringIO()
        code = cli.run([str(a) for a in argv], stdout=out, stderr=err)
        return Result(code, out.getvalue(), err.getvalue())
    return run


def control(mock, method, path, **kwargs):
    resp = requests.request(method, f"{mock.url}/_mock/{path}", **kwargs)
    resp.raise_for_status()
    return resp.json() if resp.content else None


TOKEN = DEFAULT_TOKEN


def rec(name, md5, size=1):
    return RemoteFileRecord(name, md5, size, f"http://x/{name}")


def truth_table_fixture(root):
    """One registered file per (LocalState, RemoteState) pair. Files under
    ``with_remote/`` belong to a linked scope whose listing is supplied;
    files under ``no_remote/`` are outside any scope."""
    files, expected, listing = {}, {}, []
    for i, (local, remote) in enumerate(itertools.product(LocalState, RemoteState)):
        scope_dir = "no_remote" if remote is RemoteState.NO_REMOTE else "with_remote"
        (root / scope_dir).mkdir(exist_ok=True)
        path = f"{scope_dir}/f{i:02d}.bin"
        data = f"file {i}".encode() * 20
        entry = DataFileEntry(path, md5_reference(data), len(data), tracked=i % 2 == 0)
        if local is not LocalState.MISSING_LOCAL:
            write(root / path, data if local is LocalState.CURRENT else data[:-1] + b"!")
        name = path.split("/", 1)[1]
        if remote is RemoteState.REMOTE_CURRENT:
            listing.append(rec(name, entry.md5))
        elif remote is RemoteState.REMOTE_DIFFERENT:
            listing.append(rec(name, md5_reference(b"other")))
        files[path] = entry
        expected[path] = (local, remote)
    manifest = DataManifest(files, {"with_remote": FigShareRemote("t", 1)})
    return manifest, {"with_remote": listing}, expected
