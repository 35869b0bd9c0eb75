import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from dsdf import BackboneConfig, init_model, load_checkpoint, load_dataset, make_synthetic, save_checkpoint
from dsdf.cli import main, parse_config_file
from dsdf.data import load_csv, load_idx, read_idx, split_dataset, write_idx
from dsdf.errors import (
    CorruptManifestError,
    FormatVersionError,
    ParseError,
    TruncatedBlobError,
    UsageError,
    ValidationError,
)
from dsdf.tree import TreeTopology


def test_idx_header(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (10, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "x.idx", imgs)
    write_idx(tmp_path / "y.idx", np.arange(10, dtype=np.uint8))
    raw = (tmp_path / "x.idx").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">3I", raw[4:16]) == (10, 28, 28)
    assert (tmp_path / "y.idx").read_bytes()[:4] == b"\x00\x00\x08\x01"
    ds = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert len(ds) == 10 and ds.input_shape == (1, 28, 28)
    np.testing.assert_allclose(ds.samples[3, 0], imgs[3] / 255.0)


def test_idx_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x02ab")
    with pytest.raises(ParseError) as info:
        read_idx(tmp_path / "bad")
    assert info.value.position == "byte 0"
    (tmp_path / "short").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x05ab")
    with pytest.raises(ParseError):
        read_idx(tmp_path / "short")


def test_csv_rows(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("label,a,b\n2,0.1,0.5\n0,1,2\n")
    ds = load_csv(f, 3)
    assert ds.labels.tolist() == [2, 0]
    assert ds.input_shape == (2,)
    np.testing.assert_array_equal(ds.samples[0], [0.1, 0.5])


def test_csv_errors(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("2,0.1,0.5\n1,x,0.2\n")
    with pytest.raises(ParseError) as info:
        load_csv(f, 3)
    assert info.value.position == "line 2"
    f.write_text("5,0.1,0.5\n")
    with pytest.raises(ValidationError):
        load_csv(f, 3)


def test_synthetic_determinism_and_structure(tmp_path):
    spec = {"blobs": 4, "superclasses": [[0, 1], [2, 3]], "dim": 6, "n_per_class": 30,
            "separation": 4.0, "seed": 11}
    a, b = make_synthetic(spec), make_synthetic(dict(spec))
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.labels, b.labels)
    (tmp_path / "s.json").write_text(json.dumps(spec))
    c = load_dataset(tmp_path / "s.json")
    np.testing.assert_array_equal(a.samples, c.samples)
    means = np.stack([a.samples[a.labels == k].mean(axis=0) for k in range(4)])
    within = np.linalg.norm(means[0] - means[1])
    between = np.linalg.norm(means[:2].mean(axis=0) - means[2:].mean(axis=0))
    assert between > within
    with pytest.raises(ValidationError):
        make_synthetic({"blobs": 3, "superclasses": [[0], [1]]})
    with pytest.raises(ValidationError):
        make_synthetic({"colour": "red"})


def test_split_is_stratified():
    ds = make_synthetic({"blobs": 4, "dim": 5, "n_per_class": 40})
    tr, te = split_dataset(ds, 0.25, 0)
    assert np.bincount(te.labels).tolist() == [10] * 4
    assert len(tr) + len(te) == len(ds)


def model_and_topologies(arch="mlp"):
    if arch == "mlp":
        cfg = BackboneConfig(input_shape=(5,), hidden_dims=[6, 4], feature_dim=4, num_classes=3, seed=2)
    else:
        cfg = BackboneConfig(input_shape=(1, 4, 4), arch="tiny_conv", hidden_dims=[2], feature_dim=3,
                             num_classes=3, seed=2)
    p = init_model(cfg, T=2, d=3)
    p.leaf_dists[...] = np.random.default_rng(0).dirichlet(np.ones(3), size=(2, 4))
    return p, [TreeTopology(3, [2, 0, 1]), TreeTopology(3, [1, 2, 0])]


@pytest.mark.parametrize("arch", ["mlp", "tiny_conv"])
def test_checkpoint_round_trip(tmp_path, arch):
    p, topos = model_and_topologies(arch)
    save_checkpoint(p, topos, {"gamma": 10.0, "note": "x"}, tmp_path)
    q, back, cfg = load_checkpoint(tmp_path)
    assert q.equals(p)
    assert back == topos
    assert cfg["note"] == "x"
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["format_version"] == 1 and m["T"] == 2 and m["d"] == 3 and m["gamma"] == 10.0
    assert m["phi"] == [[2, 0, 1], [1, 2, 0]]


def test_checkpoint_without_hierarchy(tmp_path):
    p, _ = model_and_topologies()
    save_checkpoint(p, None, {}, tmp_path)
    assert load_checkpoint(tmp_path)[1] is None


def test_checkpoint_errors(tmp_path):
    p, topos = model_and_topologies()
    save_checkpoint(p, topos, {}, tmp_path)
    manifest = tmp_path / "manifest.json"
    m = json.loads(manifest.read_text())
    manifest.write_text(json.dumps({**m, "format_version": 2}))
    with pytest.raises(FormatVersionError):
        load_checkpoint(tmp_path)
    manifest.write_text(json.dumps(m))
    blob = tmp_path / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(TruncatedBlobError):
        load_checkpoint(tmp_path)
    manifest.write_text("{not json")
    with pytest.raises(CorruptManifestError):
        load_checkpoint(tmp_path)


def test_config_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nhidden_dims = [8, 4]\nepochs=3\nsimilarity = constant\n")
    assert parse_config_file(f) == {"hidden_dims": [8, 4], "epochs": 3, "similarity": "constant"}
    f.write_text("bogus = 1\n")
    with pytest.raises(UsageError):
        parse_config_file(f)


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if code == 0 else None)


@pytest.fixture
def spec_file(tmp_path):
    f = tmp_path / "spec.json"
    f.write_text(json.dumps({"blobs": 4, "dim": 8, "n_per_class": 40, "seed": 1}))
    return f


def test_cli_pipeline(tmp_path, capsys, spec_file):
    m = tmp_path / "model"
    code, s = cli(capsys, "pretrain", "--model", m, "--data", spec_file, "--hidden-dims", "[8]",
                  "--feature-dim", "6", "--trees", "2", "--depth", "3", "--pretrain-epochs", "5", "--seed", "3")
    assert code == 0 and s["command"] == "pretrain" and s["seed"] == 3
    assert 0 <= s["metrics"]["train_accuracy"] <= 1
    code, s = cli(capsys, "build-hierarchy", "--model", m)
    assert code == 0 and len(s["metrics"]["phi"]) == 2
    diag = json.loads((m / "hierarchy_diagnostics.json").read_text())
    assert len(diag["nodes"]) == 6
    code, s = cli(capsys, "train", "--model", m, "--epochs", "2")
    assert code == 0 and s["metrics"]["epochs"] == 2
    assert (m / "metrics.csv").read_text().splitlines()[0] == "epoch,phase,nll,accuracy,learning_rate"
    code, s = cli(capsys, "eval", "--model", m)
    assert code == 0 and s["metrics"]["n"] == 32 and s["metrics"]["top5"] == 1.0
    code, s = cli(capsys, "explain", "--model", m, "--category", "1")
    assert code == 0
    path = json.loads((m / "explain_category_1.json").read_text())
    assert set(path) >= {"tree", "nodes", "per_node_prob", "end_node", "terminal_leaf"}
    assert path["nodes"][0] == 0
    code, s = cli(capsys, "explain", "--model", m, "--sample", "0")
    assert code == 0 and (m / "explain_sample_0.json").exists()
    code, s = cli(capsys, "profile-root", "--model", m, "--window", "2")
    assert code == 0 and len(s["metrics"]["points"]) == 4
    for fmt in ("dot", "json"):
        code, s = cli(capsys, "export", "--model", m, "--format", fmt)
        assert code == 0 and (m / f"hierarchy.{fmt}").exists()
    doc = json.loads((m / "hierarchy.json").read_text())
    assert "beta" in doc["trees"][0]["nodes"][0]
    assert main(["cam", "--model", str(m), "--sample", "0"]) == 1
    assert "convolutional" in capsys.readouterr().err


def test_cli_is_deterministic(tmp_path, capsys, spec_file):
    outs = []
    for name in ("a", "b"):
        m = tmp_path / name
        cli(capsys, "pretrain", "--model", m, "--data", spec_file, "--pretrain-epochs", "2", "--trees", "1",
            "--depth", "2", "--seed", "4")
        cli(capsys, "build-hierarchy", "--model", m)
        cli(capsys, "train", "--model", m, "--epochs", "1")
        outs.append(load_checkpoint(m)[0])
    assert outs[0].equals(outs[1])


def test_cli_uniform_model_is_chance(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"blobs": 10, "superclasses": [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]],
                                "dim": 12, "n_per_class": 20}))
    m = tmp_path / "m"
    cli(capsys, "pretrain", "--model", m, "--data", spec, "--pretrain-epochs", "0", "--trees", "2", "--depth", "3")
    cli(capsys, "build-hierarchy", "--model", m)
    code, s = cli(capsys, "eval", "--model", m)
    assert code == 0
    assert s["metrics"]["top1"] == pytest.approx(0.1)
    assert s["metrics"]["nll"] == pytest.approx(np.log(10))


def test_cli_tiny_conv_cam(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"blobs": 4, "dim": 16, "n_per_class": 10, "image_size": [4, 4]}))
    m = tmp_path / "m"
    code, _ = cli(capsys, "pretrain", "--model", m, "--data", spec, "--arch", "tiny_conv", "--hidden-dims", "[3]",
                  "--feature-dim", "4", "--pretrain-epochs", "1", "--trees", "2", "--depth", "3")
    assert code == 0
    cli(capsys, "build-hierarchy", "--model", m)
    code, s = cli(capsys, "cam", "--model", m, "--sample", "1", "--out", tmp_path / "art")
    assert code == 0 and s["metrics"]["max"] >= 0
    pgm = (tmp_path / "art" / "cam_sample_1.pgm").read_text().splitlines()
    assert pgm[:3] == ["P2", "4 4", "255"]
    assert len((tmp_path / "art" / "cam_sample_1.csv").read_text().splitlines()) == 4


def test_cli_exit_codes(tmp_path, capsys, spec_file):
    assert main(["frobnicate"]) == 2
    assert main(["eval"]) == 2
    assert main(["export", "--model", str(tmp_path), "--format", "yaml"]) == 2
    # no checkpoint yet
    assert main(["build-hierarchy", "--model", str(tmp_path / "none")]) == 2
    m = tmp_path / "m"
    cli(capsys, "pretrain", "--model", m, "--data", spec_file, "--pretrain-epochs", "0", "--depth", "2")
    assert main(["train", "--model", str(m)]) == 2
    cli(capsys, "build-hierarchy", "--model", m)
    assert main(["explain", "--model", str(m), "--category", "9"]) == 2
    (m / "manifest.json").write_text("{broken")
    assert main(["eval", "--model", str(m)]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dsdf", "bogus"], capture_output=True, text=True)
    assert r.returncode == 2
