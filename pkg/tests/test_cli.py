import json
import os
import shutil
import subprocess
import sys

import pytest

from datamanifest import remotes
from datamanifest.cli import EXIT_ERROR, EXIT_OK, EXIT_USAGE, render_outcome, render_status
from datamanifest.integrity import StatusReport, project_status
from datamanifest.manifest import MANIFEST_NAME, load_manifest
from datamanifest.transfer import TransferOutcome

from conftest import TOKEN, control, truth_table_fixture, write
from oracles import md5_file_oracle


@pytest.fixture
def proj(project, sdf, env):
    assert sdf("init", cwd=project).code == EXIT_OK
    return project


def test_init_twice(project, sdf, home):
    assert sdf("init", cwd=project).code == EXIT_OK
    assert (project / MANIFEST_NAME).read_text() == "files: {}\nremotes: {}\nmetadata: {}\n"
    r = sdf("init", cwd=project)
    assert r.code == EXIT_ERROR and "already exists" in r.err


def test_add_track_workflow(proj, sdf):
    f = write(proj / "data/a.tsv", "x\ty\n")
    r = sdf("add", "a.tsv", cwd=proj / "data")
    assert r.code == EXIT_OK and "added\tdata/a.tsv" in r.out
    e = load_manifest(proj).files["data/a.tsv"]
    assert (e.md5, e.size, e.tracked) == (md5_file_oracle(f), 4, False)

    assert sdf("track", "data/a.tsv", cwd=proj).code == EXIT_OK
    assert load_manifest(proj).files["data/a.tsv"].tracked is True
    assert sdf("untrack", "data/a.tsv", cwd=proj).code == EXIT_OK
    assert load_manifest(proj).files["data/a.tsv"].tracked is False


def test_add_errors(proj, sdf):
    write(proj / "a", "1")
    assert sdf("add", "a", cwd=proj).code == EXIT_OK
    r = sdf("add", "a", "missing", cwd=proj)
    assert r.code == EXIT_ERROR
    assert "already registered" in r.err and "missing" in r.err
    write(proj / "a", "22")
    r = sdf("add", "--update", "a", cwd=proj)
    assert r.code == EXIT_OK and load_manifest(proj).files["a"].size == 2
    assert sdf("track", "nope", cwd=proj).code == EXIT_ERROR


def test_outside_project(tmp_path, sdf, home):
    r = sdf("status", cwd=tmp_path)
    assert r.code == EXIT_ERROR and MANIFEST_NAME in r.err


def test_usage_errors(proj, sdf):
    assert sdf(cwd=proj).code == EXIT_USAGE
    assert sdf("frobnicate", cwd=proj).code == EXIT_USAGE
    r = sdf("bulk", "t.tsv", cwd=proj)
    assert r.code == EXIT_USAGE and "--column" in r.err


def test_link_keeps_token_secret(proj, sdf, home, env):
    secret = "tok-" + os.urandom(8).hex()
    control(env, "POST", "tokens", json={"valid": [secret]})
    (proj / "data/raw").mkdir(parents=True)
    r = sdf("-v", "link", "zenodo", secret, "--name", "x", "--dir", "data/raw", cwd=proj)
    assert r.code == EXIT_OK, r
    assert secret not in r.out + r.err
    assert secret not in (proj / MANIFEST_NAME).read_text()
    assert secret in (home / remotes.AUTH_FILE).read_text()


def test_failed_link_does_not_store_token(proj, sdf, home):
    secret = "bad-" + os.urandom(8).hex()
    r = sdf("link", "zenodo", secret, "--name", "x", cwd=proj)
    assert r.code == EXIT_ERROR and secret not in r.out + r.err
    assert not (home / remotes.AUTH_FILE).exists()
    assert load_manifest(proj).remotes == {}


def test_link_and_push_pull(proj, sdf, home, env):
    write(proj / "data/raw/x.bin", os.urandom(500))
    r = sdf("link", "zenodo", TOKEN, "--name", "proj", cwd=proj / "data/raw")
    assert r.code == EXIT_OK, r
    link = load_manifest(proj).remotes["data/raw"]
    assert link.name == "proj" and link.deposition_id > 0
    assert TOKEN not in (proj / MANIFEST_NAME).read_text()
    assert TOKEN not in r.out + r.err
    assert remotes.load_token("zenodo") == TOKEN

    sdf("add", "data/raw/x.bin", cwd=proj)
    sdf("track", "data/raw/x.bin", cwd=proj)
    r = sdf("push", cwd=proj)
    assert r.code == EXIT_OK and "uploaded\tdata/raw/x.bin" in r.out
    assert "# 1 uploaded, 0 skipped, 0 failed" in r.out

    r = sdf("status", "--remotes", cwd=proj)
    assert "remote-current" in r.out and "current" in r.out

    (proj / "data/raw/x.bin").unlink()
    r = sdf("pull", cwd=proj)
    assert r.code == EXIT_OK and "downloaded\tdata/raw/x.bin" in r.out


def test_link_conflicting_scope(proj, sdf):
    (proj / "data/raw").mkdir(parents=True)
    assert sdf("link", "figshare", TOKEN, "--name", "a", "--dir", "data", cwd=proj).code == EXIT_OK
    r = sdf("link", "figshare", TOKEN, "--name", "b", "--dir", "data/raw", cwd=proj)
    assert r.code == EXIT_ERROR
    assert list(load_manifest(proj).remotes) == ["data"]


def test_link_requires_token(proj, sdf):
    r = sdf("link", "zenodo", "--name", "x", cwd=proj)
    assert r.code == EXIT_ERROR and "SDF_ZENODO_TOKEN" in r.err


def test_link_unknown_service(proj, sdf):
    assert sdf("link", "dryad", TOKEN, "--name", "x", cwd=proj).code == EXIT_ERROR


def test_pull_warns_on_modified(proj, sdf):
    f = write(proj / "d/a", "orig")
    sdf("link", "zenodo", TOKEN, "--name", "p", "--dir", "d", cwd=proj)
    sdf("add", "d/a", cwd=proj)
    sdf("track", "d/a", cwd=proj)
    sdf("push", cwd=proj)
    f.write_text("edited")
    r = sdf("pull", cwd=proj)
    assert r.code == EXIT_OK and "WARNING" in r.err and "--overwrite" in r.err
    assert f.read_text() == "edited"
    assert sdf("pull", "--overwrite", cwd=proj).code == EXIT_OK
    assert f.read_text() == "orig"


def test_push_blocked_exit_code(proj, sdf):
    f = write(proj / "d/a", "orig")
    sdf("link", "zenodo", TOKEN, "--name", "p", "--dir", "d", cwd=proj)
    sdf("add", "d/a", cwd=proj)
    sdf("track", "d/a", cwd=proj)
    f.write_text("changed")
    r = sdf("push", cwd=proj)
    assert r.code == EXIT_ERROR and "d/a" in r.err and "sdf add --update" in r.err


def test_get_and_bulk(proj, sdf, env):
    url = control(env, "PUT", "static/one.txt", data=b"one")["url"]
    r = sdf("get", url, cwd=proj)
    assert r.code == EXIT_OK and (proj / "one.txt").read_text() == "one"
    assert sdf("get", url, cwd=proj).code == EXIT_ERROR

    urls = [control(env, "PUT", f"static/b/{i}.txt", data=str(i).encode())["url"] for i in range(3)]
    table = write(proj / "t.tsv", "id\turl\n" + "".join(f"{i}\t{u}\n" for i, u in enumerate(urls)))
    (proj / "dl").mkdir()
    r = sdf("bulk", table, "--column", "2", "--header", cwd=proj / "dl")
    assert r.code == EXIT_OK, r
    assert sorted(load_manifest(proj).files) == ["dl/0.txt", "dl/1.txt", "dl/2.txt", "one.txt"]


def test_status_json_and_subdir(proj, sdf):
    write(proj / "d/a", "a")
    sdf("add", "d/a", cwd=proj)
    write(proj / "d/new", "n")
    r = sdf("status", "--json", cwd=proj / "d")
    assert r.code == EXIT_OK
    data = json.loads(r.out)
    assert data["entries"][0]["path"] == "d/a"
    assert data["entries"][0]["local"] == "current"
    assert data["untracked_on_disk"] == ["d/new"]


def test_metadata(proj, sdf, home):
    r = sdf("metadata", "--title", "T", "--user-name", "Joan", cwd=proj)
    assert r.code == EXIT_OK and "title\tT" in r.out and "user.name\tJoan" in r.out
    assert load_manifest(proj).metadata.title == "T"
    assert remotes.UserConfig.load().name == "Joan"


def test_render_status_empty():
    assert render_status(StatusReport([], [])) == "path  tracked  local  remote\n"


def test_render_status_truth_table(tmp_path):
    manifest, listings, expected = truth_table_fixture(tmp_path)
    text = render_status(project_status(manifest, tmp_path, listings))
    lines = text.splitlines()
    assert len(lines) == 13
    for line, (path, (local, remote)) in zip(lines[1:], sorted(expected.items())):
        cols = line.split()
        assert cols[0] == path and cols[2:] == [local.value, remote.value]


def test_render_outcome():
    out = TransferOutcome(["a"], [("b", "untracked")], [("c", "boom")])
    assert render_outcome(out, "uploaded") == (
        "uploaded\ta\nskipped\tb\tuntracked\nfailed\tc\tboom\n# 1 uploaded, 1 skipped, 1 failed\n")


@pytest.mark.skipif(shutil.which("sdf") is None, reason="console script not installed")
def test_console_script(tmp_path, home):
    env = dict(os.environ)
    r = subprocess.run(["sdf", "init"], cwd=tmp_path, env=env, capture_output=True, text=True)
    assert r.returncode == 0
    r = subprocess.run(["sdf", "nope"], cwd=tmp_path, env=env, capture_output=True, text=True)
    assert r.returncode == 2


def test_module_entry(tmp_path, home):
    r = subprocess.run([sys.executable, "-m", "datamanifest.cli", "status"], cwd=tmp_path,
                       capture_output=True, text=True, env=dict(os.environ))
    assert r.returncode == 1
