"""DGFA-Net: attention encoder, dilated graph feature aggregation at the
bottleneck, a shared upsampling chain with per-resolution heads, and the
multi-resolution aggregation loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from dgfa import autodiff as ad
from dgfa.autodiff import ParamStore, Tensor
from dgfa.graphgen import DilatedGraphSet, Hierarchy
from dgfa.spatial import NeighborGraph, PointSet, build_index

DGFA_MODES = ("dense", "plain", "off")


@dataclass
class ModelConfig:
    """Channel widths and DGFA settings.

    ``encoder_widths`` lists the stem width followed by one width per
    downsampling level; ``decoder_widths`` runs from the level just above the
    bottleneck down to the full-resolution level.
    """

    num_classes: int = 5
    input_channels: int = 3
    encoder_widths: tuple = (32, 64, 128, 256)
    dgfa_rates: tuple = (1, 2, 4, 8)
    dgfa_width: int = 64
    dgfa_out_width: int = 128
    dgfa_k: int = 8
    dgfa_step: int = 4
    dgfa_mode: str = "dense"
    decoder_widths: tuple = (128, 64, 32)

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.dgfa_rates = tuple(int(r) for r in self.dgfa_rates)
        self.validate()

    def validate(self):
        if len(self.encoder_widths) < 2:
            raise ValueError("encoder_widths needs a stem width plus at least one level")
        if len(self.decoder_widths) != self.n_levels:
            raise ValueError(
                f"decoder_widths needs {self.n_levels} entries, got {len(self.decoder_widths)}"
            )
        widths = (
            self.encoder_widths
            + self.decoder_widths
            + (self.dgfa_width, self.dgfa_out_width, self.input_channels, self.num_classes)
        )
        if min(widths) < 1:
            raise ValueError("all widths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.dgfa_rates or any(b <= a for a, b in zip(self.dgfa_rates, self.dgfa_rates[1:])):
            raise ValueError(f"dgfa_rates must be strictly increasing, got {self.dgfa_rates}")
        if self.dgfa_mode not in DGFA_MODES:
            raise ValueError(f"dgfa_mode must be one of {DGFA_MODES}")

    @property
    def n_levels(self) -> int:
        return len(self.encoder_widths) - 1

    def dgconv_input_widths(self) -> list[int]:
        """Input width of each DGConv in the cascade."""
        c0, c = self.encoder_widths[-1], self.dgfa_width
        if self.dgfa_mode == "dense":
            return [c0 + m * c for m in range(len(self.dgfa_rates))]
        return [c0] + [c] * (len(self.dgfa_rates) - 1)

    def fusion_input_width(self) -> int:
        return self.encoder_widths[-1] + len(self.dgfa_rates) * self.dgfa_width

    def bottleneck_width(self) -> int:
        return self.dgfa_out_width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper_scale(cls, num_classes: int = 13, input_channels: int = 6) -> "ModelConfig":
        """Bottleneck 1024 -> 512 through DGFA as in the published network."""
        return cls(
            num_classes=num_classes,
            input_channels=input_channels,
            encoder_widths=(64, 256, 512, 1024),
            dgfa_width=256,
            dgfa_out_width=512,
            decoder_widths=(512, 256, 128),
        )


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform weights and zero biases, registered in a fixed order."""
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def dense(name, fan_in, fan_out):
        store.add(f"{name}.w", _glorot(rng, fan_in, fan_out))
        store.add(f"{name}.b", np.zeros(fan_out))

    enc = cfg.encoder_widths
    dense("stem", cfg.input_channels, enc[0])
    for lvl in range(1, cfg.n_levels + 1):
        dense(f"enc{lvl}.att", 3 + enc[lvl - 1], enc[lvl])
        dense(f"enc{lvl}.val", enc[lvl - 1], enc[lvl])
    if cfg.dgfa_mode == "off":
        dense("bottleneck", enc[-1], cfg.dgfa_out_width)
    else:
        for m, c_in in enumerate(cfg.dgconv_input_widths()):
            dense(f"dgfa.conv{m}", 2 * c_in, cfg.dgfa_width)
        dense("dgfa.fuse", cfg.fusion_input_width(), cfg.dgfa_out_width)
    up = cfg.dgfa_out_width
    for j, lvl in enumerate(range(cfg.n_levels - 1, -1, -1)):
        dense(f"dec{lvl}", enc[lvl] + up, cfg.decoder_widths[j])
        up = cfg.decoder_widths[j]
    head_in = [cfg.decoder_widths[cfg.n_levels - 1 - lvl] for lvl in range(cfg.n_levels)]
    head_in.append(cfg.dgfa_out_width)
    for lvl, c in enumerate(head_in):
        dense(f"head{lvl}", c, cfg.num_classes)
    return store


# ------------------------------------------------------------------ blocks


def _self_index(n: int, k: int) -> np.ndarray:
    return np.repeat(np.arange(n)[:, None], k, axis=1)


def dgconv(features: Tensor, graph: NeighborGraph, w: Tensor, b: Tensor) -> Tensor:
    """max over neighbours j of  [x_i ; x_j - x_i] @ w + b."""
    n = features.shape[0]
    if len(graph) != n:
        raise ad.ShapeError(f"dgconv: {n} feature rows but graph has {len(graph)} centres")
    if w.shape[0] != 2 * features.shape[1]:
        raise ad.ShapeError(f"dgconv: weight expects {w.shape[0] // 2} input channels, got {features.shape[1]}")
    xi = ad.neighbor_gather(features, _self_index(n, graph.k))
    xj = ad.neighbor_gather(features, graph.neighbors)
    edge = ad.concat([xi, ad.sub(xj, xi)], axis=-1)
    return ad.reduce_max(ad.linear(edge, w, b), axis=1)


def dgfa(features: Tensor, graphs: DilatedGraphSet, params: ParamStore, cfg: ModelConfig,
         dense: bool | None = None) -> Tensor:
    """Cascade of DGConvs with increasing rates, fused by a perceptron.

    Dense mode feeds each DGConv the concatenation of the input and all
    earlier outputs; plain mode feeds only the previous output. Both fuse the
    concatenation of the input and every DGConv output.
    """
    if dense is None:
        dense = cfg.dgfa_mode == "dense"
    maps = [features]
    for m, rate in enumerate(cfg.dgfa_rates):
        if rate not in graphs.graphs:
            raise KeyError(f"no dilated graph for rate {rate}")
        inp = ad.concat(maps, axis=-1) if dense and len(maps) > 1 else maps[-1]
        maps.append(dgconv(inp, graphs[rate], params[f"dgfa.conv{m}.w"], params[f"dgfa.conv{m}.b"]))
    return ad.relu(ad.linear(ad.concat(maps, axis=-1), params["dgfa.fuse.w"], params["dgfa.fuse.b"]))


def attention_conv(features: Tensor, coords: np.ndarray, graph: NeighborGraph,
                   att_w: Tensor, att_b: Tensor, val_w: Tensor, val_b: Tensor) -> Tensor:
    """Channel-wise neighbour attention.

    alpha_ij = softmax_j([p_j - p_i ; x_j - x_i] @ att_w + att_b) and
    out_i = sum_j alpha_ij * (x_j @ val_w + val_b), followed by a relu.
    """
    n = features.shape[0]
    if len(graph) != n or len(coords) != n:
        raise ad.ShapeError("attention_conv: features, coords and graph disagree on point count")
    nbr = graph.neighbors
    xi = ad.neighbor_gather(features, _self_index(n, graph.k))
    xj = ad.neighbor_gather(features, nbr)
    dp = Tensor(coords[nbr] - coords[:, None, :])
    score = ad.linear(ad.concat([dp, ad.sub(xj, xi)], axis=-1), att_w, att_b)
    alpha = ad.softmax(score, axis=1)
    values = ad.neighbor_gather(ad.linear(features, val_w, val_b), nbr)
    return ad.relu(ad.reduce_sum(ad.mul(alpha, values), axis=1))


def max_pool(features: Tensor, mapping: NeighborGraph) -> Tensor:
    return ad.reduce_max(ad.neighbor_gather(features, mapping.neighbors), axis=1)


def encoder_block(features: Tensor, coords: np.ndarray, level_graph: NeighborGraph,
                  mapping: NeighborGraph, params: ParamStore, level: int) -> Tensor:
    """Attention convolution on level l-1, then max-pooling onto level l."""
    p = f"enc{level}"
    conv = attention_conv(features, coords, level_graph, params[f"{p}.att.w"], params[f"{p}.att.b"],
                          params[f"{p}.val.w"], params[f"{p}.val.b"])
    return max_pool(conv, mapping)


# ------------------------------------------------------------ upsampling


def interpolation_weights(coarse_coords: np.ndarray, fine_coords: np.ndarray, k: int = 3):
    """Normalised 1/d^2 weights over the k nearest coarse points.

    A fine point closer than 1e-12 to a coarse point copies it exactly.
    """
    coarse = PointSet(coarse_coords)
    if coarse.n < 1:
        raise ValueError("no coarse points to interpolate from")
    k = min(k, coarse.n)
    idx, dist = build_index(coarse).query(np.asarray(fine_coords, dtype=np.float64), k)
    hit = dist[:, 0] < 1e-12
    d2 = dist * dist
    d2[hit] = 1.0
    w = 1.0 / d2
    w[hit] = 0.0
    w[hit, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return w, idx


def propagate(coarse_feats: Tensor, coarse_points, fine_points, cache=None) -> Tensor:
    """Inverse-distance-weighted upsampling from the 3 nearest coarse points."""
    coarse_points = coarse_points.coords if isinstance(coarse_points, PointSet) else coarse_points
    fine_points = fine_points.coords if isinstance(fine_points, PointSet) else fine_points
    if coarse_feats.shape[0] != len(coarse_points):
        raise ad.ShapeError("propagate: coarse features and points disagree")
    w, idx = cache if cache is not None else interpolation_weights(coarse_points, fine_points)
    return ad.idw_interpolate(coarse_feats, w, idx)


def hierarchy_interpolation(h: Hierarchy) -> list:
    """IDW tables per level, ``tables[l]`` upsamples level l+1 onto level l (memoised on ``h``)."""
    if "idw" not in h._interp:
        h._interp["idw"] = [
            interpolation_weights(h.points.coords[h.levels[l + 1]], h.points.coords[h.levels[l]])
            for l in range(h.n_levels)
        ]
    return h._interp["idw"]


# ------------------------------------------------------------------ network


@dataclass
class PyramidOutput:
    """Raw logits per resolution, ``logits[0]`` is full resolution."""

    logits: list
    features: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.logits)


def forward(cloud_features, h: Hierarchy, graphs: DilatedGraphSet | None, cfg: ModelConfig,
            params: ParamStore) -> PyramidOutput:
    x = cloud_features if isinstance(cloud_features, Tensor) else Tensor(cloud_features)
    if x.shape != (h.points.n, cfg.input_channels):
        raise ad.ShapeError(f"features {x.shape} but expected ({h.points.n}, {cfg.input_channels})")
    if h.n_levels != cfg.n_levels:
        raise ad.ShapeError(f"hierarchy has {h.n_levels} levels, config expects {cfg.n_levels}")
    coords = [h.points.coords[ix] for ix in h.levels]
    top = cfg.n_levels

    enc = [ad.relu(ad.linear(x, params["stem.w"], params["stem.b"]))]
    for lvl in range(1, top + 1):
        enc.append(encoder_block(enc[-1], coords[lvl - 1], h.sub_graphs[lvl - 1],
                                 h.mapping_graphs[lvl], params, lvl))

    if cfg.dgfa_mode == "off":
        bottleneck = ad.relu(ad.linear(enc[top], params["bottleneck.w"], params["bottleneck.b"]))
    else:
        if graphs is None:
            raise ValueError("DGFA needs a dilated graph set")
        if len(next(iter(graphs.graphs.values()))) != h.level_sizes[top]:
            raise ad.ShapeError("dilated graphs were not built on the bottleneck level")
        bottleneck = dgfa(enc[top], graphs, params, cfg)

    tables = hierarchy_interpolation(h)
    dec = {top: bottleneck}
    for lvl in range(top - 1, -1, -1):
        up = propagate(dec[lvl + 1], coords[lvl + 1], coords[lvl], cache=tables[lvl])
        fused = ad.concat([enc[lvl], up], axis=-1)
        dec[lvl] = ad.relu(ad.linear(fused, params[f"dec{lvl}.w"], params[f"dec{lvl}.b"]))

    logits = [ad.linear(dec[lvl], params[f"head{lvl}.w"], params[f"head{lvl}.b"]) for lvl in range(top + 1)]
    feats = {"last-upsample": dec[0], "bottleneck": bottleneck}
    for lvl in range(top + 1):
        feats[f"encoder{lvl}"] = enc[lvl]
    return PyramidOutput(logits, feats)


def maloss(out: PyramidOutput, labels, weights, reduction: str = "mean") -> Tensor:
    """sum_i weights[i] * CE(logits_i, labels_i); levels with weight 0 are skipped."""
    if len(weights) != len(out.logits) or len(labels) != len(out.logits):
        raise ValueError(
            f"need one weight and one label array per level ({len(out.logits)}), "
            f"got {len(weights)} weights and {len(labels)} label arrays"
        )
    total = None
    for lam, logits, lab in zip(weights, out.logits, labels):
        if lam == 0:
            continue
        term = ad.scale(ad.softmax_cross_entropy(logits, lab, reduction), float(lam))
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.scale(ad.softmax_cross_entropy(out.logits[0], labels[0], reduction), 0.0)
    return total


def predict_labels(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def predict(cloud_features, h, graphs, cfg, params) -> np.ndarray:
    """Per-point classes from the full-resolution head only."""
    return predict_labels(forward(cloud_features, h, graphs, cfg, params).logits[0])
