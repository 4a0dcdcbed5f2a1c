import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from dgfa.cli import main
from dgfa.fileio import read_cloud, read_dgg, write_checkpoint, write_cloud
from dgfa.graphgen import build_hierarchy
from dgfa.model import ModelConfig, init_params

SMALL_SPEC = {"n_points": 256}
TINY_MODEL = {"num_classes": 5, "encoder_widths": [6, 6, 6, 6], "dgfa_rates": [1, 2], "dgfa_width": 4,
              "dgfa_out_width": 6, "dgfa_k": 2, "dgfa_step": 2, "decoder_widths": [6, 6, 6]}


def run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args])
    return result


@pytest.fixture
def scenes(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SMALL_SPEC))
    out = tmp_path / "scenes"
    assert run("gen-data", "--spec", spec, "--count", 3, "--seed", 1, "--out", out).exit_code == 0
    return out


@pytest.fixture
def graphs(tmp_path, scenes):
    out = tmp_path / "graphs"
    r = run("build-graphs", "--in", scenes, "--k", 4, "--rates", "1,2", "--step", 2, "--dilation-k", 2, "--out", out)
    assert r.exit_code == 0, r.output
    return out


def write_config(path, **kw):
    doc = {"model": TINY_MODEL, "epochs": 2, "k": 4, "seed": 0}
    doc.update(kw)
    path.write_text(json.dumps(doc))
    return path


class TestGenData:
    def test_zero_count(self, tmp_path):
        assert run("gen-data", "--count", 0, "--out", tmp_path / "o").exit_code == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["scenes"] == []

    def test_byte_identical(self, tmp_path, scenes):
        spec = tmp_path / "spec.json"
        assert run("gen-data", "--spec", spec, "--count", 3, "--seed", 1, "--out", tmp_path / "again").exit_code == 0
        for f in sorted(scenes.iterdir()):
            assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()

    def test_files_reparse(self, scenes):
        manifest = json.loads((scenes / "manifest.json").read_text())
        assert len(manifest["scenes"]) == 3
        for entry in manifest["scenes"]:
            c = read_cloud(scenes / entry["file"])
            assert len(c.coords) == entry["n_points"] == 256
            assert np.bincount(c.labels, minlength=5).tolist() == list(entry["class_counts"].values())

    def test_invalid_spec(self, tmp_path):
        spec = tmp_path / "bad.json"
        spec.write_text(json.dumps({"n_points": 100, "colour": "red"}))
        assert run("gen-data", "--spec", spec, "--count", 1, "--out", tmp_path / "o").exit_code == 2


class TestBuildGraphs:
    def test_defaults_on_4096(self, tmp_path, rng):
        write_cloud(tmp_path / "c.xyz", rng.random((4096, 3)))
        r = run("build-graphs", "--in", tmp_path / "c.xyz", "--out", tmp_path / "c.dgg")
        assert r.exit_code == 0, r.output
        assert "levels 4096/1024/256/128" in r.output
        assert "r=1:8 r=2:10 r=4:14 r=8:22" in r.output
        assert read_dgg(tmp_path / "c.dgg").hierarchy.level_sizes == [4096, 1024, 256, 128]

    def test_single_rate(self, tmp_path, rng):
        write_cloud(tmp_path / "c.xyz", rng.random((512, 3)))
        r = run("build-graphs", "--in", tmp_path / "c.xyz", "--k", 8, "--rates", "1", "--out", tmp_path / "c.dgg")
        assert "K_s per rate: r=1:8" in r.output

    def test_round_trip_equals_memory(self, tmp_path, rng):
        xyz = rng.random((600, 3))
        write_cloud(tmp_path / "c.xyz", xyz)
        r = run("build-graphs", "--in", tmp_path / "c.xyz", "--k", 8, "--rates", "1,2", "--out", tmp_path / "c.dgg")
        assert r.exit_code == 0, r.output
        h = build_hierarchy(read_cloud(tmp_path / "c.xyz").coords, (4, 4, 2), 8, 0)
        assert read_dgg(tmp_path / "c.dgg").hierarchy == h

    def test_cloud_too_small(self, tmp_path, rng):
        write_cloud(tmp_path / "c.xyz", rng.random((100, 3)))
        r = run("build-graphs", "--in", tmp_path / "c.xyz", "--k", 2, "--out", tmp_path / "c.dgg")
        assert r.exit_code == 2
        assert "too small" in r.output

    def test_bad_flag(self, tmp_path):
        assert run("build-graphs", "--bogus").exit_code == 2

    def test_help_lists_flags(self):
        out = run("build-graphs", "--help").output
        for flag in ("--in", "--ratios", "--k", "--rates", "--step", "--out"):
            assert flag in out


class TestTrainEval:
    def test_train_then_eval_consistent(self, tmp_path, graphs):
        cfg = write_config(tmp_path / "run.json")
        ckpt = tmp_path / "m.ckpt"
        r = run("train", "--config", cfg, "--graphs", graphs, "--out", ckpt)
        assert r.exit_code == 0, r.output
        rows = list(csv.DictReader(open(str(ckpt) + ".history.csv")))
        assert [int(x["epoch"]) for x in rows] == [0, 1]
        final = json.loads(open(str(ckpt) + ".history.json").read())["final"]
        r = run("eval", "--ckpt", ckpt, "--graphs", graphs, "--report", tmp_path / "rep.json")
        assert r.exit_code == 0, r.output
        report = json.loads((tmp_path / "rep.json").read_text())
        assert report["mIoU"] == final["mIoU"] and report["OA"] == final["OA"]
        per_class = list(csv.DictReader(open(tmp_path / "rep.csv")))
        assert [p["class"] for p in per_class] == ["floor", "ceiling", "wall", "board", "clutter"]

    def test_lr_zero_flat_history(self, tmp_path, graphs):
        cfg = write_config(tmp_path / "run.json", lr=0.0, epochs=3)
        ckpt = tmp_path / "m.ckpt"
        assert run("train", "--config", cfg, "--graphs", graphs, "--out", ckpt).exit_code == 0
        losses = {row["loss"] for row in csv.DictReader(open(str(ckpt) + ".history.csv"))}
        assert len(losses) == 1

    def test_unknown_config_key(self, tmp_path, graphs):
        cfg = write_config(tmp_path / "run.json", learning_rate=0.1)
        r = run("train", "--config", cfg, "--graphs", graphs, "--out", tmp_path / "m.ckpt")
        assert r.exit_code == 2
        assert "learning_rate" in r.output

    def test_config_graph_mismatch(self, tmp_path, graphs):
        model = dict(TINY_MODEL, dgfa_rates=[1, 4])
        cfg = write_config(tmp_path / "run.json", model=model)
        assert run("train", "--config", cfg, "--graphs", graphs, "--out", tmp_path / "m.ckpt").exit_code == 2

    def test_numeric_failure_exit_code(self, tmp_path, graphs):
        cfg = write_config(tmp_path / "run.json", lr=1e300, epochs=3)
        r = run("train", "--config", cfg, "--graphs", graphs, "--out", tmp_path / "m.ckpt")
        assert r.exit_code == 3, r.output

    def test_perfect_oracle_checkpoint(self, tmp_path, rng):
        # colour channel r carries the label; every other weight is zero
        xyz = rng.random((128, 3))
        labels = rng.integers(0, 2, 128)
        rgb = np.c_[labels * 255.0, np.zeros((128, 2))]
        write_cloud(tmp_path / "c.xyz", xyz, labels, rgb)
        r = run("build-graphs", "--in", tmp_path / "c.xyz", "--k", 3, "--rates", "1", "--step", 1,
                "--dilation-k", 1, "--classes", 2, "--out", tmp_path / "g.dgg")
        assert r.exit_code == 0, r.output
        cfg = ModelConfig(num_classes=2, input_channels=6, encoder_widths=(2, 2, 2, 2), dgfa_rates=(1,),
                          dgfa_width=2, dgfa_out_width=2, dgfa_k=1, dgfa_step=1, decoder_widths=(2, 2, 2))
        params = {k: np.zeros_like(v) for k, v in init_params(cfg).to_dict().items()}
        params["stem.w"][3, 0] = 1.0
        params["dec0.w"][0, 0] = 1.0
        params["head0.w"][0, 1] = 10.0
        params["head0.b"][1] = -5.0
        write_checkpoint(tmp_path / "oracle.ckpt", params, cfg.to_dict())
        r = run("eval", "--ckpt", tmp_path / "oracle.ckpt", "--graphs", tmp_path / "g.dgg",
                "--report", tmp_path / "rep.json")
        assert r.exit_code == 0, r.output
        assert json.loads((tmp_path / "rep.json").read_text())["mIoU"] == 1.0


class TestBenchKnn:
    def test_small_agreement(self):
        r = run("bench-knn", "--n", 512, "--k", 8, "--step", 2, "--rate", 2, "--repeat", 2, "--queries", 64)
        assert r.exit_code == 0, r.output
        assert "agree on 512 centres" in r.output
        assert "median" in r.output and "p95" in r.output

    def test_rate_one(self):
        r = run("bench-knn", "--n", 300, "--k", 4, "--rate", 1, "--repeat", 1, "--backend", "brute")
        assert r.exit_code == 0 and "K_s=4" in r.output

    def test_too_small(self):
        assert run("bench-knn", "--n", 10, "--k", 16).exit_code == 2


class TestExport:
    @pytest.fixture
    def zero_ckpt(self, tmp_path):
        cfg = ModelConfig.from_dict(TINY_MODEL)
        params = {k: np.zeros_like(v) for k, v in init_params(cfg).to_dict().items()}
        write_checkpoint(tmp_path / "zero.ckpt", params, cfg.to_dict())
        return tmp_path / "zero.ckpt"

    def test_zero_model_rows(self, tmp_path, graphs, zero_ckpt):
        dgg = sorted(graphs.glob("*.dgg"))[0]
        r = run("export-features", "--ckpt", zero_ckpt, "--graphs", dgg, "--out", tmp_path / "f.csv")
        assert r.exit_code == 0, r.output
        rows = list(csv.DictReader(open(tmp_path / "f.csv")))
        assert len(rows) == 256
        assert list(rows[0])[:4] == ["x", "y", "z", "label"] and list(rows[0])[-1] == "channel_mean"
        assert all(float(row[f"c{i}"]) == 0.0 for row in rows for i in range(6))

    def test_channel_mean_column(self, tmp_path, graphs):
        cfg = ModelConfig.from_dict(TINY_MODEL)
        write_checkpoint(tmp_path / "m.ckpt", init_params(cfg, 3).to_dict(), cfg.to_dict())
        dgg = sorted(graphs.glob("*.dgg"))[0]
        assert run("export-features", "--ckpt", tmp_path / "m.ckpt", "--graphs", dgg,
                   "--out", tmp_path / "f.csv").exit_code == 0
        for row in csv.DictReader(open(tmp_path / "f.csv")):
            chans = [float(row[f"c{i}"]) for i in range(6)]
            assert abs(float(row["channel_mean"]) - np.mean(chans)) <= 1e-12

    def test_unknown_layer(self, tmp_path, graphs, zero_ckpt):
        dgg = sorted(graphs.glob("*.dgg"))[0]
        r = run("export-features", "--ckpt", zero_ckpt, "--graphs", dgg, "--layer", "nope", "--out", tmp_path / "f")
        assert r.exit_code == 2 and "unknown layer" in r.output
