"""Adam, the training loop and the ablation harness."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from dgfa import autodiff as ad
from dgfa.autodiff import ParamStore
from dgfa.graphgen import build_dilated_graphs, build_hierarchy, label_pyramid
from dgfa.metrics import Metrics, evaluate
from dgfa.model import ModelConfig, forward, init_params, maloss, predict_labels
from dgfa.scenes import SceneSpec, scene_features
from dgfa.spatial import DilationSpec

log = logging.getLogger(__name__)

LAMBDA_PRESETS = {
    "uniform": (1.0, 1.0, 1.0, 1.0),
    "s3dis": (1.0, 1.5, 2.0, 2.5),
    "shapenetpart": (1.0, 0.5, 0.5),
    "toronto3d": (1.0, 0.1, 0.1, 0.1),
}


class TrainingError(RuntimeError):
    pass


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int | None = None) -> ParamStore:
    """One bias-corrected Adam update of every parameter in ``store``."""
    if t is None:
        t = store.step + 1
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    grads = store.grads()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    for name, p in store:
        g = grads[name]
        slot = store.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        slot["m"] = beta1 * slot["m"] + (1 - beta1) * g
        slot["v"] = beta2 * slot["v"] + (1 - beta2) * g * g
        m_hat = slot["m"] / (1 - beta1 ** t)
        v_hat = slot["v"] / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.step = t
    return store


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    lambdas: tuple = (1.0, 1.0, 1.0, 1.0)
    reduction: str = "mean"
    ratios: tuple = (4, 4, 2)
    k: int = 16
    fps_start: int = 0
    scenes: SceneSpec = field(default_factory=SceneSpec)
    scene_count: int = 32

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.ratios = tuple(int(r) for r in self.ratios)
        self.validate()

    @property
    def rates(self) -> tuple:
        return self.model.dgfa_rates

    def validate(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size != 1:
            raise ValueError("batch_size must be 1: graphs are per-scene structures")
        if len(self.lambdas) != len(self.ratios) + 1:
            raise ValueError(f"need {len(self.ratios) + 1} loss weights, got {len(self.lambdas)}")
        if len(self.ratios) != self.model.n_levels:
            raise ValueError("ratios and model encoder levels disagree")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        d["scenes"] = self.scenes.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "scenes" in d:
            d["scenes"] = SceneSpec.from_dict(d["scenes"])
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        """Copy with changes; ``model.<field>`` and ``rates`` keys reach into the model config."""
        top, sub = {}, {}
        for key, value in changes.items():
            if key == "rates":
                sub["dgfa_rates"] = tuple(value)
            elif key.startswith("model."):
                sub[key[6:]] = value
            else:
                top[key] = value
        model = dataclasses.replace(self.model, **sub) if sub else copy.deepcopy(self.model)
        return dataclasses.replace(self, model=model, **top)


@dataclass
class Sample:
    """A cloud with everything precomputed for training and evaluation."""

    coords: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    hierarchy: object
    graphs: object
    pyramid: list


def prepare_sample(coords, labels, cfg: TrainConfig, features=None, hierarchy=None, graphs=None) -> Sample:
    coords = np.asarray(coords, dtype=np.float64)
    h = hierarchy or build_hierarchy(coords, cfg.ratios, cfg.k, cfg.fps_start)
    mc = cfg.model
    if graphs is None and mc.dgfa_mode != "off":
        graphs = build_dilated_graphs(h.level_points(h.n_levels), DilationSpec(mc.dgfa_k, mc.dgfa_step), mc.dgfa_rates)
    feats = scene_features(coords) if features is None else np.asarray(features, dtype=np.float64)
    pyramid = label_pyramid(labels, h, mc.num_classes) if labels is not None else None
    return Sample(coords, feats, None if labels is None else np.asarray(labels), h, graphs, pyramid)


def evaluate_samples(samples, cfg: TrainConfig, params: ParamStore) -> Metrics:
    preds, gts = [], []
    for s in samples:
        out = forward(s.features, s.hierarchy, s.graphs, cfg.model, params)
        preds.append(predict_labels(out.logits[0]))
        gts.append(s.labels)
    return evaluate(np.concatenate(preds), np.concatenate(gts), cfg.model.num_classes)


def train(cfg: TrainConfig, samples, params: ParamStore | None = None):
    """Train on prepared samples, one scene per step in a seeded shuffled order.

    Returns ``(params, history)``; each history row holds the epoch's mean
    loss and the metrics of the predictions made during that epoch.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no training scenes")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(cfg.model, int(rng.integers(2 ** 31)))
    shuffle_rng = np.random.default_rng(rng.integers(2 ** 31))
    history = []
    for epoch in range(cfg.epochs):
        losses, preds, gts = [], [], []
        for step, i in enumerate(shuffle_rng.permutation(len(samples))):
            s = samples[i]
            params.zero_grad()
            # overflow is caught below as a non-finite value, so silence numpy's warning
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    out = forward(s.features, s.hierarchy, s.graphs, cfg.model, params)
                    loss = maloss(out, s.pyramid, cfg.lambdas, cfg.reduction)
                except FloatingPointError as exc:
                    raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
                ad.backward(loss)
            try:
                adam_step(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            losses.append(value)
            preds.append(predict_labels(out.logits[0]))
            gts.append(s.labels)
        m = evaluate(np.concatenate(preds), np.concatenate(gts), cfg.model.num_classes)
        # fsum makes the epoch mean independent of the shuffled order
        row = {"epoch": epoch, "loss": math.fsum(losses) / len(losses), "OA": m.oa, "mAcc": m.macc, "mIoU": m.miou}
        history.append(row)
        log.info("epoch %d loss %.4f OA %.3f mIoU %.3f", epoch, row["loss"], m.oa, m.miou)
    params.zero_grad()
    return params, history


# ------------------------------------------------------------------ ablation

ABLATION_ARMS = {
    "baseline": {"lambdas": (1.0, 0.0, 0.0, 0.0), "model.dgfa_mode": "off"},
    "maloss": {"model.dgfa_mode": "off"},
    "maloss+dgfa_plain": {"model.dgfa_mode": "plain"},
    "maloss+dgfa_dense": {"model.dgfa_mode": "dense"},
    "rates_1": {"rates": (1,)},
    "rates_1_2": {"rates": (1, 2)},
    "rates_2_4": {"rates": (2, 4)},
    "rates_1_4": {"rates": (1, 4)},
    "rates_1_2_4_8": {"rates": (1, 2, 4, 8)},
}


@dataclass
class AblationResult:
    rows: list
    class_names: tuple

    def summary(self) -> dict:
        out = {}
        keys = ["mIoU", "OA", "mAcc"] + [f"IoU_{c}" for c in self.class_names]
        for arm in dict.fromkeys(r["arm"] for r in self.rows):
            rows = [r for r in self.rows if r["arm"] == arm]
            out[arm] = {}
            for k in keys:
                vals = np.array([r[k] for r in rows], dtype=float)
                vals = vals[~np.isnan(vals)]
                out[arm][k] = (
                    {"median": float(np.median(vals)), "min": float(vals.min()), "max": float(vals.max())}
                    if len(vals) else {"median": None, "min": None, "max": None}
                )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["arm", "seed", "mIoU", "OA", "mAcc"] + [f"IoU_{c}" for c in self.class_names]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({c: r[c] for c in cols})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "summary": self.summary()}, indent=2, allow_nan=True)


def ablation_run(base_cfg: TrainConfig, arms: dict, seeds, train_clouds, test_clouds,
                 class_names=None) -> AblationResult:
    """Train every arm for every seed and score it on ``test_clouds``.

    ``arms`` maps an arm id to config changes accepted by
    :meth:`TrainConfig.replace`. Clouds are ``(coords, labels)`` pairs; the
    hierarchies are shared between arms, dilated graphs are rebuilt only when
    the rate set differs.
    """
    c = base_cfg.model.num_classes
    class_names = tuple(class_names or [str(i) for i in range(c)])
    base_h = {}

    def samples_for(cfg, clouds, tag):
        out = []
        for j, (xyz, lab) in enumerate(clouds):
            key = (tag, j)
            if key not in base_h:
                base_h[key] = build_hierarchy(xyz, cfg.ratios, cfg.k, cfg.fps_start)
            out.append(prepare_sample(xyz, lab, cfg, hierarchy=base_h[key], graphs=graph_cache(cfg, tag, j)))
        return out

    graph_store = {}

    def graph_cache(cfg, tag, j):
        m = cfg.model
        if m.dgfa_mode == "off":
            return None
        key = (tag, j, m.dgfa_k, m.dgfa_step, m.dgfa_rates)
        if key not in graph_store:
            h = base_h[(tag, j)]
            graph_store[key] = build_dilated_graphs(
                h.level_points(h.n_levels), DilationSpec(m.dgfa_k, m.dgfa_step), m.dgfa_rates)
        return graph_store[key]

    rows = []
    for arm, delta in arms.items():
        try:
            cfg_arm = base_cfg.replace(**delta)
            train_s = samples_for(cfg_arm, train_clouds, "train")
            test_s = samples_for(cfg_arm, test_clouds, "test")
        except Exception as exc:
            raise TrainingError(f"arm {arm!r} could not be set up: {exc}") from exc
        for seed in seeds:
            cfg = cfg_arm.replace(seed=int(seed))
            try:
                params, _ = train(cfg, train_s)
            except Exception as exc:
                raise TrainingError(f"arm {arm!r} seed {seed} failed: {exc}") from exc
            m = evaluate_samples(test_s, cfg, params)
            row = {"arm": arm, "seed": int(seed), "mIoU": m.miou, "OA": m.oa, "mAcc": m.macc}
            for name, v in zip(class_names, m.iou):
                row[f"IoU_{name}"] = float(v)
            rows.append(row)
            log.info("arm %s seed %s mIoU %.3f", arm, seed, m.miou)
    return AblationResult(rows, class_names)
