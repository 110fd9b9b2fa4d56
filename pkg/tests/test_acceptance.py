"""
End-to-end acceptance checks. Each prints one ``CRITERION n ... PASS|FAIL``
line to the terminal (run with ``pytest tests/test_acceptance.py -v``).
"""

import contextlib
import itertools
import math
import os
import random
import shutil
import time

import pytest

from datamanifest.integrity import LocalState, RemoteState, compute_digest, project_status
from datamanifest.manifest import (
    MANIFEST_NAME,
    DataFileEntry,
    DataManifest,
    ZenodoRemote,
    load_manifest,
    parse_manifest,
    serialize_manifest,
)
from datamanifest.remotes import AUTH_FILE

from conftest import TOKEN, control, truth_table_fixture, write
from oracles import RFC1321_VECTORS, md5_file_oracle, md5_reference

MiB = 1 << 20


@pytest.fixture
def criterion(pytestconfig):
    """Context manager that reports one PASS/FAIL line for a criterion."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    @contextlib.contextmanager
    def report(number, label):
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            with capman.global_and_fixture_disabled():
                print(f"\nCRITERION {number} {label}: {status}", flush=True)
    return report


def counts(mock):
    return control(mock, "GET", "stats")["counts"]


def setup_synced_project(sdf, root, n, size, rng):
    """init, add, track, link and push ``n`` files of ``size`` bytes under data/."""
    assert sdf("init", cwd=root).code == 0
    paths = []
    for i in range(n):
        rel = f"data/{'ab'[i % 2]}/sample_{i:03d}.bin"
        write(root / rel, rng.randbytes(size))
        paths.append(rel)
    assert sdf("add", *paths, cwd=root).code == 0
    assert sdf("track", *paths, cwd=root).code == 0
    r = sdf("link", "zenodo", TOKEN, "--name", "acceptance", "--dir", "data", cwd=root)
    assert r.code == 0, r
    r = sdf("push", cwd=root)
    assert r.code == 0, r
    return paths


def clone_manifest(src, dest):
    dest.mkdir()
    shutil.copy(src / MANIFEST_NAME, dest / MANIFEST_NAME)
    return dest


def test_criterion_1_sample_manifest_fidelity(criterion, sample_manifest):
    with criterion(1, "sample manifest parse and round-trip"):
        m = parse_manifest(sample_manifest)
        e = m.files["data/supplement/figure_1.tsv"]
        assert (e.md5, e.size, e.tracked) == ("87c1148fa71abf01daceb82d8fbfee53", 993, True)
        link = m.remotes["data/raw"]
        assert isinstance(link, ZenodoRemote) and link.tag == "!ZenodoAPI"
        assert link.name == "ancient_dna_analysis" and link.deposition_id == 8271457
        assert link.bucket_url == "https://zenodo.org/api/files/558014a8-8e04-4a7e-b1c9-7c82bcbe8fa9"
        assert m.metadata.title == "An analysis of new Ancient DNA Samples"
        assert m.metadata.description == (
            "This project contains the code and data to reproduce Joan et al. (2023).")
        text = serialize_manifest(m)
        assert "!ZenodoAPI" in text
        assert parse_manifest(text) == m
        assert text == sample_manifest


def test_criterion_2_digest_correctness(criterion, tmp_path):
    with criterion(2, "MD5 against RFC 1321 vectors and 20 random files up to 64 MiB"):
        for data in (b"", b"abc", b"message digest"):
            f = write(tmp_path / "vec", data)
            assert compute_digest(f) == RFC1321_VECTORS[data] == md5_reference(data)
        rng = random.Random(20231016)
        # log-uniform sizes spanning 0 B .. 64 MiB, both ends included
        sizes = [0, 64 * MiB] + [int(2 ** rng.uniform(0, math.log2(64 * MiB))) for _ in range(18)]
        for i, size in enumerate(sizes):
            f = write(tmp_path / f"rand_{i:02d}", rng.randbytes(size))
            assert compute_digest(f) == md5_file_oracle(f), (i, size)
            f.unlink()
        assert max(sizes) == 64 * MiB and len(sizes) == 20


def test_criterion_3_silent_modification(criterion, tmp_path):
    with criterion(3, "modification detection and 12-state truth table"):
        rng = random.Random(3)
        files = {}
        for name in "abc":
            data = rng.randbytes(4096)
            write(tmp_path / f"d/{name}.bin", data)
            files[f"d/{name}.bin"] = md5_reference(data), len(data)
        m = DataManifest({p: DataFileEntry(p, md5, size, True) for p, (md5, size) in files.items()})
        before = {e.path: e.local for e in project_status(m, tmp_path).entries}
        assert set(before.values()) == {LocalState.CURRENT}
        target = tmp_path / "d/a.bin"
        data = bytearray(target.read_bytes())
        data[rng.randrange(len(data))] ^= 0x01
        target.write_bytes(bytes(data))
        (tmp_path / "d/b.bin").unlink()
        after = {e.path: e.local for e in project_status(m, tmp_path).entries}
        assert after == {"d/a.bin": LocalState.MODIFIED, "d/b.bin": LocalState.MISSING_LOCAL,
                         "d/c.bin": LocalState.CURRENT}

        table_root = tmp_path / "table"
        table_root.mkdir()
        manifest, listings, expected = truth_table_fixture(table_root)
        got = {e.path: (e.local, e.remote) for e in project_status(manifest, table_root, listings).entries}
        assert got == expected
        assert sorted(got.values()) == sorted(itertools.product(LocalState, RemoteState))


def test_criterion_4_clone_reunification(criterion, tmp_path, sdf, env):
    with criterion(4, "clone restores 50 x 100 KiB files byte-identical in < 10 s"):
        rng = random.Random(4)
        src = tmp_path / "src"
        src.mkdir()
        start = time.perf_counter()
        paths = setup_synced_project(sdf, src, 50, 100 * 1024, rng)
        clone = clone_manifest(src, tmp_path / "clone")
        r = sdf("pull", cwd=clone)
        elapsed = time.perf_counter() - start
        assert r.code == 0, r
        for p in paths:
            assert (clone / p).read_bytes() == (src / p).read_bytes(), p
        assert elapsed < 10.0, f"{elapsed:.2f}s"


def test_criterion_5_idempotence(criterion, tmp_path, sdf, env):
    with criterion(5, "second push uploads 0, second pull downloads 0"):
        src = tmp_path / "src"
        src.mkdir()
        setup_synced_project(sdf, src, 6, 2048, random.Random(5))
        control(env, "POST", "reset")
        r = sdf("push", cwd=src)
        assert r.code == 0 and counts(env).get("upload", 0) == 0

        clone = clone_manifest(src, tmp_path / "clone")
        assert sdf("pull", cwd=clone).code == 0
        assert counts(env)["download"] == 6
        control(env, "POST", "reset")
        r = sdf("pull", cwd=clone)
        assert r.code == 0 and counts(env).get("download", 0) == 0
        assert "# 0 downloaded" in r.out


def test_criterion_6_integrity_enforcement(criterion, tmp_path, sdf, env):
    with criterion(6, "corrupted download fails alone and never lands"):
        src = tmp_path / "src"
        src.mkdir()
        paths = setup_synced_project(sdf, src, 8, 4096, random.Random(6))
        victim = paths[3]
        control(env, "POST", "faults", json={"corrupt_downloads_for": [victim.split("/", 1)[1]]})
        clone = clone_manifest(src, tmp_path / "clone")
        r = sdf("pull", cwd=clone)
        assert r.code != 0
        failed = [line.split("\t")[1] for line in r.out.splitlines() if line.startswith("failed\t")]
        assert failed == [victim]
        assert not (clone / victim).exists()
        assert not [p for p in (clone / victim).parent.iterdir() if p.name.startswith(".")]
        for p in paths:
            if p != victim:
                assert (clone / p).read_bytes() == (src / p).read_bytes()


def test_criterion_7_bounded_concurrency(criterion, tmp_path, sdf, env):
    with criterion(7, "bulk of 100 URLs with limit 8 stays within 8 in flight"):
        rng = random.Random(7)
        payloads = {}
        for i in range(100):
            payloads[f"file_{i:03d}.dat"] = rng.randbytes(rng.randint(1, 8192))
        urls = [control(env, "PUT", f"static/bulk/{n}", data=d)["url"] for n, d in payloads.items()]
        root = tmp_path / "proj"
        root.mkdir()
        assert sdf("init", cwd=root).code == 0
        table = write(root / "urls.tsv",
                      "sample\turl\n" + "".join(f"s{i}\t{u}\n" for i, u in enumerate(urls)))
        control(env, "POST", "latency", json={"seconds": 0.02})
        control(env, "POST", "reset")
        r = sdf("bulk", table, "--column", "2", "--header", "-j", "8", cwd=root)
        stats = control(env, "GET", "stats")
        assert r.code == 0, r
        assert stats["counts"]["static"] == 100
        assert 1 < stats["peak_inflight"] <= 8, stats
        files = load_manifest(root).files
        assert len(files) == 100
        for name in payloads:
            e = files[name]
            assert e.md5 == md5_file_oracle(root / name) == md5_reference(payloads[name])
            assert e.size == len(payloads[name]) and e.tracked is False


def test_criterion_8_secrets_hygiene(criterion, tmp_path, sdf, env, home):
    with criterion(8, "token only in the auth dotfile"):
        secret = "T-" + os.urandom(16).hex()
        control(env, "POST", "tokens", json={"valid": [secret, TOKEN]})
        root = tmp_path / "proj"
        write(root / "data/x.bin", b"x")
        assert sdf("init", cwd=root).code == 0
        captured = []
        for argv in (("-v", "link", "zenodo", secret, "--name", "p", "--dir", "data"),
                     ("add", "data/x.bin"), ("track", "data/x.bin"), ("-v", "push"),
                     ("-v", "status", "--remotes")):
            r = sdf(*argv, cwd=root)
            assert r.code == 0, r
            captured += [r.out, r.err]
        assert all(secret not in c for c in captured)
        assert secret not in (root / MANIFEST_NAME).read_text()
        assert secret in (home / AUTH_FILE).read_text()
        holders = [p for p in tmp_path.rglob("*") if p.is_file() and secret.encode() in p.read_bytes()]
        assert holders == [home / AUTH_FILE]


def test_criterion_9_local_edit_safety(criterion, tmp_path, sdf, env):
    with criterion(9, "pull keeps local edits unless --overwrite"):
        root = tmp_path / "proj"
        root.mkdir()
        paths = setup_synced_project(sdf, root, 3, 1024, random.Random(9))
        target = root / paths[0]
        target.write_bytes(b"local analysis edit")
        r = sdf("pull", cwd=root)
        assert r.code == 0
        assert "WARNING" in r.err and paths[0] in r.err
        assert target.read_bytes() == b"local analysis edit"
        r = sdf("pull", "--overwrite", cwd=root)
        assert r.code == 0, r
        assert md5_file_oracle(target) == load_manifest(root).files[paths[0]].md5
