"""Command-line entry point: ``dgfa <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure,
4 search backends disagree (bench-knn).
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import time
from pathlib import Path

import click
import jsonschema
import numpy as np

from dgfa import fileio
from dgfa.graphgen import build_dilated_graphs, build_hierarchy, label_pyramid
from dgfa.model import ModelConfig, forward, init_params
from dgfa.scenes import CLASS_NAMES, SceneSpec, gen_scenes, scene_features
from dgfa.spatial import DilationSpec, PointSet, SearchError, build_index, expansion_count, fetch_count, sparse_knn_graph
from dgfa.train import Sample, TrainConfig, TrainingError, evaluate_samples, train

EXIT_INVALID = 2
EXIT_NUMERIC = 3
EXIT_MISMATCH = 4

CLOUD_SUFFIXES = (".xyz", ".txt", ".ply")

_MODEL_PROPS = {
    "num_classes": {"type": "integer", "minimum": 2},
    "input_channels": {"type": "integer", "minimum": 1},
    "encoder_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
    "dgfa_rates": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
    "dgfa_width": {"type": "integer", "minimum": 1},
    "dgfa_out_width": {"type": "integer", "minimum": 1},
    "dgfa_k": {"type": "integer", "minimum": 1},
    "dgfa_step": {"type": "integer", "minimum": 1},
    "dgfa_mode": {"enum": ["dense", "plain", "off"]},
    "decoder_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {"type": "object", "additionalProperties": False, "properties": _MODEL_PROPS},
        "epochs": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "minimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"const": 1},
        "seed": {"type": "integer", "minimum": 0},
        "lambdas": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "reduction": {"enum": ["mean", "sum"]},
        "ratios": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "k": {"type": "integer", "minimum": 1},
        "fps_start": {"type": "integer", "minimum": 0},
        "scenes": {"type": "object"},
        "scene_count": {"type": "integer", "minimum": 0},
    },
}


def fail(msg: str, code: int = EXIT_INVALID):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _int_list(text: str) -> tuple:
    try:
        values = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise click.BadParameter("empty list")
    return values


def load_run_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
        return TrainConfig.from_dict(doc)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError, ValueError, TypeError) as exc:
        detail = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        fail(f"invalid run config {path}: {detail}")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Dilated graph feature aggregation for point-cloud segmentation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command("gen-data")
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="SceneSpec JSON (defaults if omitted).")
@click.option("--count", type=click.IntRange(min=0), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def gen_data(spec_path, count, seed, out_dir):
    """Write synthetic wall/board rooms as labelled ASCII clouds plus a manifest."""
    try:
        spec = SceneSpec.from_dict(json.loads(Path(spec_path).read_text())) if spec_path else SceneSpec()
    except (OSError, ValueError, TypeError) as exc:
        fail(f"invalid scene spec: {exc}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        fail(f"cannot create {out}: {exc}")
    scenes = gen_scenes(spec, count, seed)
    entries = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:04d}.xyz"
        fileio.write_cloud(out / name, s.coords, s.labels)
        entries.append({"file": name, "n_points": int(len(s.coords)),
                        "class_counts": dict(zip(spec.class_names, map(int, s.class_counts)))})
    manifest = {"spec": spec.to_dict(), "seed": seed, "count": count, "classes": list(spec.class_names),
                "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    click.echo(f"wrote {count} scenes to {out}")


def _cloud_inputs(path: Path):
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in CLOUD_SUFFIXES)
        if not files:
            fail(f"no cloud files in {path}")
        return files
    if not path.exists():
        fail(f"{path} does not exist")
    return [path]


def cloud_features(cloud: fileio.Cloud) -> np.ndarray:
    feats = scene_features(cloud.coords)
    if cloud.colors is not None:
        feats = np.c_[feats, cloud.colors / 255.0]
    return feats


@main.command("build-graphs")
@click.option("--in", "in_path", type=click.Path(), required=True, help="Cloud file or directory of clouds.")
@click.option("--ratios", default="4,4,2", show_default=True)
@click.option("--k", type=click.IntRange(min=1), default=16, show_default=True, help="Level/mapping graph K.")
@click.option("--rates", default="1,2,4,8", show_default=True)
@click.option("--step", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--dilation-k", type=click.IntRange(min=1), default=8, show_default=True, help="Target neighbours K of DGConv.")
@click.option("--start", type=click.IntRange(min=0), default=0, show_default=True, help="FPS start index.")
@click.option("--classes", type=click.IntRange(min=2), default=len(CLASS_NAMES), show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True, help="DGG1 file, or directory for many inputs.")
def build_graphs(in_path, ratios, k, rates, step, dilation_k, start, classes, out_path):
    """Precompute the hierarchy and dilated graphs of clouds into DGG1 files."""
    ratios, rates = _int_list(ratios), _int_list(rates)
    inputs = _cloud_inputs(Path(in_path))
    out = Path(out_path)
    many = Path(in_path).is_dir()
    if many:
        out.mkdir(parents=True, exist_ok=True)
    ks = [expansion_count(DilationSpec(dilation_k, step, r)) for r in rates]
    for src in inputs:
        try:
            cloud = fileio.read_cloud(src)
            h = build_hierarchy(cloud.coords, ratios, k, start)
            graphs = build_dilated_graphs(h.level_points(h.n_levels), DilationSpec(dilation_k, step), rates)
            labels = label_pyramid(cloud.labels, h, classes) if cloud.labels is not None else None
        except (fileio.FormatError, SearchError, ValueError) as exc:
            fail(f"{src}: {exc}")
        dst = out / (src.stem + ".dgg") if many else out
        fileio.write_dgg(dst, fileio.GraphFile(h, graphs, labels, cloud_features(cloud), classes))
        click.echo(f"{src.name}: levels {'/'.join(map(str, h.level_sizes))} -> {dst}")
    click.echo("K_s per rate: " + " ".join(f"r={r}:{v}" for r, v in zip(rates, ks)))


def _load_graph_dir(path) -> list:
    path = Path(path)
    files = sorted(path.glob("*.dgg")) if path.is_dir() else [path]
    if not files:
        fail(f"no .dgg files under {path}")
    out = []
    for f in files:
        try:
            out.append((f, fileio.read_dgg(f)))
        except (OSError, fileio.FormatError) as exc:
            fail(str(exc))
    return out


def _samples(graph_files, model: ModelConfig, need_labels: bool):
    samples = []
    for f, gf in graph_files:
        h = gf.hierarchy
        if h.n_levels != model.n_levels:
            fail(f"{f}: {h.n_levels} levels but the model expects {model.n_levels}")
        graphs = None
        if model.dgfa_mode != "off":
            g = gf.dilated
            if g is None or (g.k_target, g.step) != (model.dgfa_k, model.dgfa_step) or \
                    not set(model.dgfa_rates) <= set(g.rates):
                fail(f"{f}: dilated graphs do not cover K={model.dgfa_k}, step={model.dgfa_step}, "
                     f"rates={list(model.dgfa_rates)}")
            graphs = g
        if gf.features is None or gf.features.shape[1] != model.input_channels:
            fail(f"{f}: stored features do not have {model.input_channels} channels")
        if need_labels and gf.labels is None:
            fail(f"{f}: no labels stored")
        if gf.labels is not None and gf.labels[0].max() >= model.num_classes:
            fail(f"{f}: labels exceed the model's {model.num_classes} classes")
        labels = gf.labels[0] if gf.labels is not None else None
        samples.append(Sample(h.points.coords, gf.features, labels, h, graphs, gf.labels))
    return samples


def _write_history(path: Path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "OA", "mAcc", "mIoU"], lineterminator="\n")
        w.writeheader()
        w.writerows(history)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--graphs", "graph_dir", type=click.Path(), required=True)
@click.option("--out", "ckpt_path", type=click.Path(dir_okay=False), required=True)
def train_cmd(config_path, graph_dir, ckpt_path):
    """Train on DGG1 files; writes a checkpoint and <ckpt>.history.csv/json."""
    cfg = load_run_config(config_path)
    samples = _samples(_load_graph_dir(graph_dir), cfg.model, need_labels=True)
    try:
        params, history = train(cfg, samples)
    except (TrainingError, FloatingPointError) as exc:
        fail(str(exc), EXIT_NUMERIC)
    fileio.write_checkpoint(ckpt_path, params.to_dict(), cfg.model.to_dict())
    final = evaluate_samples(samples, cfg, params)
    _write_history(Path(str(ckpt_path) + ".history.csv"), history)
    Path(str(ckpt_path) + ".history.json").write_text(json.dumps(
        {"history": history, "final": {"OA": final.oa, "mAcc": final.macc, "mIoU": final.miou}}, indent=2) + "\n")
    click.echo(f"trained {cfg.epochs} epochs; final loss {history[-1]['loss'] if history else float('nan'):.6f}; "
               f"train mIoU {final.miou:.4f}")


def _load_model(ckpt_path):
    try:
        values, cfg_dict = fileio.read_checkpoint(ckpt_path)
        model = ModelConfig.from_dict(cfg_dict)
        params = init_params(model, 0)
        params.load_dict(values)
    except (OSError, fileio.FormatError, ValueError, KeyError) as exc:
        fail(f"cannot load checkpoint {ckpt_path}: {exc}")
    return model, params


@main.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(dir_okay=False), required=True)
@click.option("--graphs", "graph_dir", type=click.Path(), required=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), required=True,
              help="Metrics JSON path; the per-class CSV is written next to it.")
def eval_cmd(ckpt_path, graph_dir, report_path):
    """Score a checkpoint on labelled DGG1 files."""
    model, params = _load_model(ckpt_path)
    samples = _samples(_load_graph_dir(graph_dir), model, need_labels=True)
    cfg = TrainConfig(model=model, lambdas=(1.0,) * (model.n_levels + 1), ratios=samples[0].hierarchy.ratios)
    try:
        m = evaluate_samples(samples, cfg, params)
    except FloatingPointError as exc:
        fail(str(exc), EXIT_NUMERIC)
    names = list(CLASS_NAMES) if model.num_classes == len(CLASS_NAMES) else [str(c) for c in range(model.num_classes)]
    report = Path(report_path)
    json_path, csv_path = report.with_suffix(".json"), report.with_suffix(".csv")
    json_path.write_text(json.dumps(m.to_dict(names), indent=2) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "IoU", "gt_points", "pred_points"])
        for c, name in enumerate(names):
            iou = "" if np.isnan(m.iou[c]) else repr(float(m.iou[c]))
            w.writerow([name, iou, int(m.confusion[c].sum()), int(m.confusion[:, c].sum())])
    click.echo(f"OA {m.oa:.4f}  mAcc {m.macc:.4f}  mIoU {m.miou:.4f}")


@main.command("bench-knn")
@click.option("--n", type=click.IntRange(min=2), default=100000, show_default=True)
@click.option("--k", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--step", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--rate", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--backend", type=click.Choice(["kdtree", "brute"]), default="kdtree", show_default=True)
@click.option("--repeat", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--queries", type=click.IntRange(min=1), default=1024, show_default=True,
              help="Centres timed per repetition.")
@click.option("--check", type=click.IntRange(min=0), default=512, show_default=True,
              help="Centres cross-checked between backends (0 skips).")
@click.option("--seed", type=int, default=0, show_default=True)
def bench_knn(n, k, step, rate, backend, repeat, queries, check, seed):
    """Time Sparse-KNN search and cross-check the KD-tree against brute force."""
    rng = np.random.default_rng(seed)
    points = PointSet(rng.random((n, 3)))
    spec = DilationSpec(k, step, rate)
    if fetch_count(spec) > n - 1:
        fail(f"n={n} too small for K_s={expansion_count(spec)}")
    t0 = time.perf_counter()
    index = build_index(points, backend)
    build_s = time.perf_counter() - t0
    centres = rng.choice(n, size=min(queries, n), replace=False)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        sparse_knn_graph(index, spec, centres)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    click.echo(f"backend {backend}: n={n} K={k} step={step} rate={rate} K_s={expansion_count(spec)}")
    click.echo(f"build {build_s * 1e3:.2f} ms; {len(centres)} queries: median {np.median(times) * 1e3:.2f} ms, "
               f"p95 {np.percentile(times, 95) * 1e3:.2f} ms")
    if check:
        sub = rng.choice(n, size=min(check, n), replace=False)
        a = sparse_knn_graph(build_index(points, "kdtree"), spec, sub)
        b = sparse_knn_graph(build_index(points, "brute"), spec, sub)
        if not (np.array_equal(a.neighbors, b.neighbors) and np.array_equal(a.distances, b.distances)):
            bad = int(np.sum(np.any(a.neighbors != b.neighbors, axis=1)))
            fail(f"correctness failure: backends disagree on {bad} of {len(sub)} centres", EXIT_MISMATCH)
        click.echo(f"check: kdtree and brute agree on {len(sub)} centres")


LAYERS = ("last-upsample", "bottleneck", "encoder0", "encoder1", "encoder2", "encoder3")


@main.command("export-features")
@click.option("--ckpt", "ckpt_path", type=click.Path(dir_okay=False), required=True)
@click.option("--graphs", "dgg_path", type=click.Path(dir_okay=False), required=True)
@click.option("--layer", default="last-upsample", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def export_features(ckpt_path, dgg_path, layer, out_path):
    """Write one CSV row per full-resolution point: x, y, z, label, channels, channel_mean."""
    model, params = _load_model(ckpt_path)
    (f, gf), = _load_graph_dir(dgg_path)
    sample = _samples([(f, gf)], model, need_labels=False)[0]
    out = forward(sample.features, sample.hierarchy, sample.graphs, model, params)
    if layer not in out.features:
        fail(f"unknown layer {layer!r}; choose from {sorted(out.features)}")
    feats = out.features[layer].data
    if feats.shape[0] != sample.hierarchy.points.n:
        fail(f"layer {layer!r} is not at full resolution ({feats.shape[0]} rows)")
    labels = gf.labels[0] if gf.labels is not None else np.full(len(feats), -1)
    xyz = sample.hierarchy.points.coords
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "label"] + [f"c{i}" for i in range(feats.shape[1])] + ["channel_mean"])
        for i in range(len(feats)):
            w.writerow([repr(float(v)) for v in xyz[i]] + [int(labels[i])]
                       + [repr(float(v)) for v in feats[i]] + [repr(float(feats[i].mean()))])
    click.echo(f"wrote {len(feats)} rows x {feats.shape[1]} channels to {out_path}")


if __name__ == "__main__":
    main()
