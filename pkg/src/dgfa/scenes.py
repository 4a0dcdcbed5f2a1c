"""Synthetic indoor rooms where boards hang flush against walls.

A board is a thin patch a couple of centimetres in front of a wall, so near
any board point the local geometry is almost indistinguishable from the wall
behind it. Telling them apart needs context reaching the board's border.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("floor", "ceiling", "wall", "board", "clutter")
FLOOR, CEILING, WALL, BOARD, CLUTTER = range(5)


@dataclass
class SceneSpec:
    extent_min: tuple = (3.0, 3.0, 2.6)
    extent_max: tuple = (5.0, 5.0, 3.0)
    n_points: int = 4096
    proportions: tuple = (0.2, 0.15, 0.35, 0.15, 0.15)
    board_offset: float = 0.02
    board_width: tuple = (1.2, 2.0)
    board_height: tuple = (0.9, 1.3)
    boards_per_scene: tuple = (1, 2)
    clutter_boxes: tuple = (1, 3)
    noise: float = 0.003
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        self.validate()

    def validate(self):
        lo, hi = np.asarray(self.extent_min, float), np.asarray(self.extent_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo <= 0) or np.any(hi < lo):
            raise ValueError("room extents must be positive 3-vectors with extent_min <= extent_max")
        if self.n_points < len(CLASS_NAMES):
            raise ValueError("n_points too small to hold every class")
        props = np.asarray(self.proportions, float)
        if props.shape != (len(CLASS_NAMES),) or np.any(props <= 0) or not np.isclose(props.sum(), 1.0):
            raise ValueError("proportions must be 5 positive values summing to 1")
        if self.board_width[1] > lo[:2].min() - 0.4 or self.board_height[1] > lo[2] - 0.4:
            raise ValueError("boards do not fit on the smallest wall")
        if self.noise < 0 or self.board_offset <= 0:
            raise ValueError("noise must be >= 0 and board_offset > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SceneSpec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class Board:
    wall: int  # 0: x=0, 1: x=W, 2: y=0, 3: y=D
    u_range: tuple  # along the wall
    z_range: tuple

    def plane(self, extent, offset):
        """(axis, coordinate) of the plane the board lies on."""
        w, d, _ = extent
        return {0: (0, offset), 1: (0, w - offset), 2: (1, offset), 3: (1, d - offset)}[self.wall]


@dataclass
class Scene:
    coords: np.ndarray
    labels: np.ndarray
    extent: np.ndarray
    boards: list = field(default_factory=list)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(CLASS_NAMES))


def _wall_length(wall, extent):
    return extent[1] if wall in (0, 1) else extent[0]


def _wall_point(wall, u, z, extent, inset=0.0):
    w, d, _ = extent
    n = len(u)
    out = np.empty((n, 3))
    if wall == 0:
        out[:, 0], out[:, 1] = inset, u
    elif wall == 1:
        out[:, 0], out[:, 1] = w - inset, u
    elif wall == 2:
        out[:, 0], out[:, 1] = u, inset
    else:
        out[:, 0], out[:, 1] = u, d - inset
    out[:, 2] = z
    return out


def _allocate(n, proportions):
    raw = np.asarray(proportions) * n
    counts = np.floor(raw).astype(int)
    counts[np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]] += 1
    return counts


def _sample_walls(rng, count, extent, boards):
    lengths = np.array([_wall_length(i, extent) for i in range(4)])
    h = extent[2]
    pts = []
    need = count
    while need > 0:
        batch = max(need * 2, 64)
        wall = rng.choice(4, size=batch, p=lengths / lengths.sum())
        u = rng.uniform(0, lengths[wall])
        z = rng.uniform(0, h, size=batch)
        # the wall behind a board is hidden
        keep = np.ones(batch, dtype=bool)
        for b in boards:
            keep &= ~((wall == b.wall) & (u >= b.u_range[0]) & (u <= b.u_range[1])
                      & (z >= b.z_range[0]) & (z <= b.z_range[1]))
        for i in np.flatnonzero(keep)[:need]:
            pts.append(_wall_point(wall[i], u[i:i + 1], z[i:i + 1], extent)[0])
        need = count - len(pts)
    return np.array(pts)


def _sample_boxes(rng, count, extent, n_boxes):
    w, d, _ = extent
    boxes = []
    for _ in range(n_boxes):
        size = rng.uniform([0.4, 0.4, 0.4], [1.2, 1.0, 0.9])
        lo = rng.uniform([0.5, 0.5], [w - 0.5 - size[0], d - 0.5 - size[1]])
        boxes.append((np.array([lo[0], lo[1], 0.0]), size))
    # area-weighted sampling over the top and four sides of each box
    faces = []
    for origin, (sx, sy, sz) in boxes:
        faces += [(origin, 2, sz, (0, 1), (sx, sy)),
                  (origin, 0, 0.0, (1, 2), (sy, sz)), (origin, 0, sx, (1, 2), (sy, sz)),
                  (origin, 1, 0.0, (0, 2), (sx, sz)), (origin, 1, sy, (0, 2), (sx, sz))]
    areas = np.array([f[4][0] * f[4][1] for f in faces])
    pick = rng.choice(len(faces), size=count, p=areas / areas.sum())
    out = np.empty((count, 3))
    for i, fi in enumerate(pick):
        origin, axis, fixed, (a1, a2), (s1, s2) = faces[fi]
        p = origin.copy()
        p[axis] += fixed
        p[a1] += rng.uniform(0, s1)
        p[a2] += rng.uniform(0, s2)
        out[i] = p
    return out


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    extent = rng.uniform(spec.extent_min, spec.extent_max)
    w, d, h = extent
    counts = _allocate(spec.n_points, spec.proportions)

    n_boards = int(rng.integers(spec.boards_per_scene[0], spec.boards_per_scene[1] + 1))
    walls = rng.choice(4, size=n_boards, replace=n_boards > 4)
    boards = []
    for wall in walls:
        length = _wall_length(wall, extent)
        bw = rng.uniform(*spec.board_width)
        bh = rng.uniform(*spec.board_height)
        u0 = rng.uniform(0.2, length - 0.2 - bw)
        z0 = rng.uniform(max(0.2, 1.4 - bh / 2 - 0.3), min(h - 0.2 - bh, 1.4 - bh / 2 + 0.3))
        boards.append(Board(int(wall), (u0, u0 + bw), (z0, z0 + bh)))

    parts, labels = [], []
    floor = np.c_[rng.uniform(0, w, counts[FLOOR]), rng.uniform(0, d, counts[FLOOR]), np.zeros(counts[FLOOR])]
    ceiling = np.c_[rng.uniform(0, w, counts[CEILING]), rng.uniform(0, d, counts[CEILING]), np.full(counts[CEILING], h)]
    parts += [floor, ceiling, _sample_walls(rng, counts[WALL], extent, boards)]

    areas = np.array([(b.u_range[1] - b.u_range[0]) * (b.z_range[1] - b.z_range[0]) for b in boards])
    per_board = _allocate(counts[BOARD], areas / areas.sum())
    board_pts = []
    for b, m in zip(boards, per_board):
        u = rng.uniform(*b.u_range, size=m)
        z = rng.uniform(*b.z_range, size=m)
        board_pts.append(_wall_point(b.wall, u, z, extent, inset=spec.board_offset))
    parts.append(np.concatenate(board_pts))
    n_boxes = int(rng.integers(spec.clutter_boxes[0], spec.clutter_boxes[1] + 1))
    parts.append(_sample_boxes(rng, counts[CLUTTER], extent, n_boxes))
    for cls, part in enumerate(parts):
        labels.append(np.full(len(part), cls, dtype=np.int64))

    coords = np.concatenate(parts)
    labels = np.concatenate(labels)
    if spec.noise > 0:
        coords = coords + rng.normal(0.0, spec.noise, size=coords.shape)
    order = rng.permutation(len(coords))
    return Scene(coords[order], labels[order], extent, boards)


def gen_scenes(spec: SceneSpec, count: int, seed: int) -> list[Scene]:
    """``count`` independent rooms; identical output for identical (spec, seed)."""
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    return [generate_scene(spec, rng) for _ in range(count)]


def scene_features(coords: np.ndarray) -> np.ndarray:
    """Network input: xy centred on the cloud's bounding box, z measured from the lowest point."""
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    centre = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2]])
    return coords - centre
