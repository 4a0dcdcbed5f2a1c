"""File formats: ASCII/PLY point clouds, DGG1 graph files and parameter checkpoints.

DGG1 layout (all integers little-endian)::

    magic      b"DGG1"
    version    u16 (= 1)
    header     n u32, levels L u16, level sizes (L+1) x u32, k u16, fps start u32,
               ratios L x u16, dilation K u16, step u16, rate count R u16,
               rates R x u16, flags u16 (bit0 labels, bit1 features),
               feature channels u16, class count u16
    sections   each: tag 4 bytes, payload length u64, payload
      PNTS     level-0 coordinates, n x 3 f64
      FEAT     optional features, n x c f64
      LIDX     per level l >= 1: FPS selection inside level l-1, u32
      GRPH     per level l: rows u32, k u32, neighbours u32, distances f32
      MAPG     per level l >= 1: same layout as GRPH, indices into level l-1
      DILG     per rate: same layout as GRPH (bottleneck level)
      LABL     optional label pyramid: per level u16 array

Checkpoints (``DGCK``)::

    magic b"DGCK", version u16, config length u32, UTF-8 JSON model config,
    parameter count u32, then per parameter: name length u16, UTF-8 name,
    ndim u8, dims ndim x u32; followed by every parameter's values as f64 in
    table order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dgfa.graphgen import DilatedGraphSet, Hierarchy
from dgfa.spatial import DilationSpec, NeighborGraph, PointSet, selected_ranks

DGG_MAGIC = b"DGG1"
DGG_VERSION = 1
CKPT_MAGIC = b"DGCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------- clouds


@dataclass
class Cloud:
    coords: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None


def read_cloud(path) -> Cloud:
    path = Path(path)
    with open(path, "r", encoding="ascii") as fh:
        first = fh.readline()
    if first.strip() == "ply":
        return _read_ply(path)
    return _read_xyz(path)


def _read_xyz(path: Path) -> Cloud:
    rows = []
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if width is None:
                width = len(parts)
                if width not in (3, 4, 6, 7):
                    raise FormatError(f"{path}:{lineno}: expected 3, 4, 6 or 7 columns, got {width}")
            elif len(parts) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no points")
    data = np.array(rows)
    return _split_columns(data, width, path)


def _split_columns(data, width, path):
    coords = data[:, :3]
    if not np.all(np.isfinite(coords)):
        raise FormatError(f"{path}: non-finite coordinates")
    colors = data[:, 3:6] if width >= 6 else None
    labels = None
    if width in (4, 7):
        lab = data[:, -1]
        if np.any(lab != np.round(lab)) or np.any(lab < 0):
            raise FormatError(f"{path}: labels must be non-negative integers")
        labels = lab.astype(np.int64)
    return Cloud(coords, colors, labels)


def _read_ply(path: Path) -> Cloud:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing ply magic")
    props, count, body_start = [], None, None
    in_vertex = False
    for i, line in enumerate(lines[1:], 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if count is None or body_start is None:
        raise FormatError(f"{path}: incomplete PLY header")
    if props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: first vertex properties must be x y z")
    body = [ln.split() for ln in lines[body_start:body_start + count]]
    if len(body) != count or any(len(r) != len(props) for r in body):
        raise FormatError(f"{path}: vertex rows do not match header")
    data = np.array(body, dtype=np.float64)
    cols = {name: data[:, j] for j, name in enumerate(props)}
    coords = data[:, :3]
    colors = np.c_[cols["red"], cols["green"], cols["blue"]] if "red" in cols else None
    labels = cols["label"].astype(np.int64) if "label" in cols else None
    if not np.all(np.isfinite(coords)):
        raise FormatError(f"{path}: non-finite coordinates")
    return Cloud(coords, colors, labels)


def write_cloud(path, coords, labels=None, colors=None):
    """Plain ASCII rows ``x y z [r g b] [label]`` with round-trippable floats."""
    coords = np.asarray(coords, dtype=np.float64)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("# x y z" + (" r g b" if colors is not None else "") + (" label" if labels is not None else "") + "\n")
        for i in range(len(coords)):
            parts = [repr(float(v)) for v in coords[i]]
            if colors is not None:
                parts += [repr(float(v)) for v in colors[i]]
            if labels is not None:
                parts.append(str(int(labels[i])))
            fh.write(" ".join(parts) + "\n")


# ------------------------------------------------------------------- DGG1


@dataclass
class GraphFile:
    hierarchy: Hierarchy
    dilated: DilatedGraphSet | None = None
    labels: list | None = None
    features: np.ndarray | None = None
    num_classes: int = 0

    def __eq__(self, other):
        if not isinstance(other, GraphFile):
            return NotImplemented
        same_opt = lambda a, b: (a is None and b is None) or (a is not None and b is not None)
        return (
            self.hierarchy == other.hierarchy
            and same_opt(self.dilated, other.dilated)
            and (self.dilated is None or self.dilated == other.dilated)
            and same_opt(self.labels, other.labels)
            and (self.labels is None or all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels)))
            and same_opt(self.features, other.features)
            and (self.features is None or np.array_equal(self.features, other.features))
            and self.num_classes == other.num_classes
        )


def _u16(x, what):
    if not 0 <= x < 2 ** 16:
        raise FormatError(f"{what}={x} does not fit in u16")
    return int(x)


def _section(buf, tag: bytes, payload: bytes):
    buf.write(tag)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def _graph_payload(g: NeighborGraph) -> bytes:
    m, k = g.neighbors.shape
    if not np.array_equal(g.centers, np.arange(m)):
        raise FormatError("graphs must be stored with centres 0..m-1")
    return (struct.pack("<II", m, k) + g.neighbors.astype("<u4").tobytes()
            + g.distances.astype("<f4").tobytes())


def write_dgg(path, gf: GraphFile):
    h = gf.hierarchy
    L = h.n_levels
    d = gf.dilated
    buf = io.BytesIO()
    buf.write(DGG_MAGIC)
    buf.write(struct.pack("<H", DGG_VERSION))
    head = [struct.pack("<IH", h.points.n, _u16(L, "levels"))]
    head.append(struct.pack(f"<{L + 1}I", *h.level_sizes))
    head.append(struct.pack("<HI", _u16(h.k, "k"), h.start))
    head.append(struct.pack(f"<{L}H", *[_u16(r, "ratio") for r in h.ratios]))
    rates = tuple(d.rates) if d is not None else ()
    head.append(struct.pack("<HHH", _u16(d.k_target if d else 0, "K"), _u16(d.step if d else 0, "step"), len(rates)))
    head.append(struct.pack(f"<{len(rates)}H", *[_u16(r, "rate") for r in rates]))
    flags = (1 if gf.labels is not None else 0) | (2 if gf.features is not None else 0)
    nfeat = gf.features.shape[1] if gf.features is not None else 0
    head.append(struct.pack("<HHH", flags, _u16(nfeat, "feature channels"), _u16(gf.num_classes, "classes")))
    buf.write(b"".join(head))

    _section(buf, b"PNTS", h.points.coords.astype("<f8").tobytes())
    if gf.features is not None:
        _section(buf, b"FEAT", np.asarray(gf.features, dtype="<f8").tobytes())
    for l in range(1, L + 1):
        _section(buf, b"LIDX", h.fps_indices[l].astype("<u4").tobytes())
    for l in range(L + 1):
        _section(buf, b"GRPH", _graph_payload(h.sub_graphs[l]))
    for l in range(1, L + 1):
        _section(buf, b"MAPG", _graph_payload(h.mapping_graphs[l]))
    for r in rates:
        _section(buf, b"DILG", _graph_payload(d.graphs[r]))
    if gf.labels is not None:
        for lab in gf.labels:
            _section(buf, b"LABL", np.asarray(lab).astype("<u2").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.name}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def section(self, tag: bytes, label: str, expected_len: int | None = None) -> bytes:
        got = self.take(4, f"section {label} tag")
        if got != tag:
            raise FormatError(f"{self.name}: section {label}: expected tag {tag!r}, found {got!r}")
        (length,) = self.unpack("<Q", f"section {label} length")
        if expected_len is not None and length != expected_len:
            raise FormatError(
                f"{self.name}: section {label}: length {length} does not match header (expected {expected_len})")
        return self.take(length, f"section {label} payload")


def _parse_graph(payload: bytes, label: str, rows: int, index_range: int, name: str) -> NeighborGraph:
    if len(payload) < 8:
        raise FormatError(f"{name}: section {label}: too short")
    m, k = struct.unpack("<II", payload[:8])
    if m != rows:
        raise FormatError(f"{name}: section {label}: {m} rows but header level has {rows}")
    if len(payload) != 8 + 8 * m * k:
        raise FormatError(f"{name}: section {label}: length {len(payload)} inconsistent with {m}x{k} graph")
    nbr = np.frombuffer(payload, dtype="<u4", count=m * k, offset=8).reshape(m, k).astype(np.int64)
    dist = np.frombuffer(payload, dtype="<f4", count=m * k, offset=8 + 4 * m * k).reshape(m, k).astype(np.float64)
    if nbr.size and nbr.max() >= index_range:
        raise FormatError(f"{name}: section {label}: neighbour index {nbr.max()} outside [0, {index_range})")
    return NeighborGraph(np.arange(m), nbr, dist)


def read_dgg(path) -> GraphFile:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4, "magic") != DGG_MAGIC:
        raise FormatError(f"{path}: section magic: not a DGG1 file")
    (version,) = r.unpack("<H", "version")
    if version != DGG_VERSION:
        raise FormatError(f"{path}: section header: unsupported version {version}")
    n, L = r.unpack("<IH", "header")
    sizes = list(r.unpack(f"<{L + 1}I", "header level sizes"))
    k, start = r.unpack("<HI", "header k")
    ratios = r.unpack(f"<{L}H", "header ratios")
    K, step, n_rates = r.unpack("<HHH", "header dilation")
    rates = r.unpack(f"<{n_rates}H", "header rates")
    flags, nfeat, num_classes = r.unpack("<HHH", "header flags")
    if sizes[0] != n:
        raise FormatError(f"{path}: section header: level 0 size {sizes[0]} != n {n}")

    coords = np.frombuffer(r.section(b"PNTS", "PNTS", 24 * n), dtype="<f8").reshape(n, 3).astype(np.float64)
    features = None
    if flags & 2:
        features = np.frombuffer(r.section(b"FEAT", "FEAT", 8 * n * nfeat), dtype="<f8").reshape(n, nfeat).astype(np.float64)
    fps = [np.arange(n, dtype=np.int64)]
    levels = [np.arange(n, dtype=np.int64)]
    for l in range(1, L + 1):
        sel = np.frombuffer(r.section(b"LIDX", f"LIDX[{l}]", 4 * sizes[l]), dtype="<u4").astype(np.int64)
        if sel.size and sel.max() >= sizes[l - 1]:
            raise FormatError(f"{path}: section LIDX[{l}]: index outside parent level of {sizes[l - 1]}")
        fps.append(sel)
        levels.append(levels[-1][sel])
    sub = [_parse_graph(r.section(b"GRPH", f"GRPH[{l}]"), f"GRPH[{l}]", sizes[l], sizes[l], str(path))
           for l in range(L + 1)]
    mapping = [None] + [
        _parse_graph(r.section(b"MAPG", f"MAPG[{l}]"), f"MAPG[{l}]", sizes[l], sizes[l - 1], str(path))
        for l in range(1, L + 1)
    ]
    dilated = None
    if n_rates:
        graphs = {}
        for rate in rates:
            g = _parse_graph(r.section(b"DILG", f"DILG[rate={rate}]"), f"DILG[rate={rate}]",
                             sizes[L], sizes[L], str(path))
            ranks = selected_ranks(DilationSpec(K, step, rate))
            g.ranks = np.broadcast_to(ranks, g.neighbors.shape).copy()
            graphs[rate] = g
        dilated = DilatedGraphSet(K, step, tuple(rates), graphs)
    labels = None
    if flags & 1:
        labels = [np.frombuffer(r.section(b"LABL", f"LABL[{l}]", 2 * sizes[l]), dtype="<u2").astype(np.int64)
                  for l in range(L + 1)]
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after last section")
    h = Hierarchy(PointSet(coords), tuple(ratios), k, start, levels, fps, sub, mapping)
    return GraphFile(h, dilated, labels, features, num_classes)


# ------------------------------------------------------------ checkpoints


def write_checkpoint(path, params: dict, model_config: dict):
    cfg = json.dumps(model_config, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        enc = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in params.values():
        buf.write(np.asarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Returns ``(params, model_config_dict)``."""
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: not a DGCK checkpoint")
    version, cfg_len = r.unpack("<HI", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = json.loads(r.take(cfg_len, "config").decode("utf-8"))
    (count,) = r.unpack("<I", "parameter count")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        table.append((name, shape))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * size, f"values of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes")
    return params, cfg
