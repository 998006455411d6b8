import json

import pytest

from crfgan.cli import dispatch
from crfgan.volume import list_volumes, meta_path_for


def test_usage_errors(capsys):
    assert dispatch(["phantom", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert dispatch([]) == 1
    assert dispatch(["eval", "--real-dir", "a", "--fake-dir", "b", "--metric", "nope"]) == 1


def test_runtime_error(tmp_path, capsys):
    assert dispatch(["eval", "--real-dir", str(tmp_path), "--fake-dir", str(tmp_path)]) == 2
    assert "no volumes" in capsys.readouterr().err
    assert dispatch(["generate", "--checkpoint", str(tmp_path / "none"), "--out-dir", str(tmp_path)]) == 2


def test_phantom_pairs(tmp_path):
    out = tmp_path / "d"
    assert dispatch(["phantom", "--count", "10", "--size", "64", "--seed", "7", "--out-dir", str(out)]) == 0
    vols = list_volumes(out)
    assert len(vols) == 10 and all(meta_path_for(p).exists() for p in vols)
    assert len(list(out.iterdir())) == 20


def test_phantom_deterministic(tmp_path):
    for d in ("a", "b"):
        dispatch(["phantom", "--count", "2", "--size", "16", "--seed", "3", "--out-dir", str(tmp_path / d)])
    for pa, pb in zip(list_volumes(tmp_path / "a"), list_volumes(tmp_path / "b")):
        assert pa.read_bytes() == pb.read_bytes()


def test_eval_identical_dirs(tmp_path, capsys):
    d = str(tmp_path / "d")
    dispatch(["phantom", "--count", "4", "--size", "32", "--seed", "0", "--out-dir", d])
    capsys.readouterr()
    assert dispatch(["eval", "--real-dir", d, "--fake-dir", d]) == 0
    report = {r["metric"]: r for r in json.loads(capsys.readouterr().out)}
    assert report["fid"]["value"] <= 1e-6
    assert report["mmd"]["value"] <= 1e-9
    assert report["fid"]["n_real"] == 4


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    from conftest import TINY

    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    dispatch(["phantom", "--count", "3", "--size", "32", "--out-dir", str(root / "data")])
    code = dispatch(["train", "--config", str(cfg), "--data-dir", str(root / "data"),
                     "--out-dir", str(root / "run"), "--iterations", "2"])
    assert code == 0
    return root


def test_train_outputs(trained):
    assert (trained / "run" / "ckpt_0000002.bin").exists()
    assert len((trained / "run" / "metrics.csv").read_text().splitlines()) == 3


def test_generate_stitched(trained, capsys):
    out = trained / "gen"
    code = dispatch(["generate", "--checkpoint", str(trained / "run" / "ckpt_0000002.bin"),
                     "--count", "2", "--seed", "1", "--out-dir", str(out), "--stitched"])
    assert code == 0
    printed = capsys.readouterr().out
    assert f"consistency report: {out / 'consistency.json'}" in printed
    reports = json.loads((out / "consistency.json").read_text())
    assert len(reports) == 2 and all(r["interior_max_diff"] <= 1e-5 for r in reports)
    assert len(list_volumes(out)) == 4


def test_generate_deterministic(trained):
    ck = str(trained / "run" / "ckpt_0000002.bin")
    for d in ("g1", "g2"):
        dispatch(["generate", "--checkpoint", ck, "--seed", "5", "--out-dir", str(trained / d)])
    assert (trained / "g1" / "gen_00000.raw").read_bytes() == (trained / "g2" / "gen_00000.raw").read_bytes()


def test_reconstruct(trained, capsys):
    inp = list_volumes(trained / "data")[0]
    out = trained / "rec.raw"
    assert dispatch(["reconstruct", "--checkpoint", str(trained / "run" / "ckpt_0000002"),
                     "--input", str(inp), "--out", str(out)]) == 0
    assert out.exists() and "l1" in capsys.readouterr().out


def test_bench_params(tmp_path, capsys):
    assert dispatch(["bench", "--what", "params", "--csv", str(tmp_path / "p.csv")]) == 0
    assert "reduction_pct" in capsys.readouterr().out
    assert (tmp_path / "p.csv").exists()
    assert dispatch(["bench", "--what", "memory"]) == 0
