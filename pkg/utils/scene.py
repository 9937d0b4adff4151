import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np
from loguru import logger

from utils.errors import ConfigError
from utils.pointcloud import NO_LABEL, PointCloud

# Mean RGB of every class the generator knows.
PALETTE: dict[str, tuple[int, int, int]] = {
    "ground": (125, 112, 92),
    "street": (62, 62, 68),
    "building": (205, 190, 172),
    "tree": (44, 122, 46),
    "trunk": (96, 66, 42),
    "low_vegetation": (118, 172, 64),
}
DEFAULT_CLASSES = tuple(PALETTE)

STREET_WIDTH = 6.0
BUILDING_SIZE = (6.0, 12.0)
BUILDING_HEIGHT = (5.0, 14.0)
TRUNK_RADIUS = (0.15, 0.3)
TRUNK_HEIGHT = (2.0, 4.0)
CROWN_RADIUS = (1.5, 3.0)
PATCH_RADIUS = (1.5, 3.0)
Z_RANGE = (-1.0, 30.0)
PLACEMENT_ATTEMPTS = 100

# Random stream keys, mixed with the scene seed.
_LAYOUT, _GROUND, _BUILDING, _TREE, _PATCH, _PARTIAL = range(6)

Rect = tuple[float, float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    extent_x: float = 50.0
    extent_y: float = 50.0
    density: float = 40.0
    seed: int = 0
    classes: tuple[str, ...] = DEFAULT_CLASSES
    buildings: int = 4
    trees: int = 10
    vegetation_patches: int = 8
    streets: int = 2
    ground_noise: float = 0.02
    color_jitter: float = 12.0
    wall_density_factor: float = 0.25
    partial_annotation: bool = False

    def validate(self) -> None:
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise ConfigError(f"a scene needs at least 2 distinct classes, got {self.classes}")
        unknown = set(self.classes) - set(PALETTE)
        if unknown:
            raise ConfigError(f"unknown scene classes {sorted(unknown)}; known: {list(PALETTE)}")
        if "ground" not in self.classes:
            raise ConfigError("every scene needs the ground class")
        if min(self.extent_x, self.extent_y) < 10.0:
            raise ConfigError(f"scene extent must be at least 10 m per axis, got ({self.extent_x}, {self.extent_y})")
        if not self.density > 0:
            raise ConfigError(f"density must be > 0, got {self.density}")
        if min(self.buildings, self.trees, self.vegetation_patches, self.streets) < 0:
            raise ConfigError("primitive counts must be >= 0")
        if self.ground_noise < 0 or self.color_jitter < 0 or not self.wall_density_factor > 0:
            raise ConfigError("noise and jitter must be >= 0 and the wall density factor > 0")
        required = {
            "street": self.streets,
            "building": self.buildings,
            "tree": self.trees,
            "trunk": self.trees,
            "low_vegetation": self.vegetation_patches,
        }
        for name in self.classes:
            if required.get(name, 1) < 1:
                raise ConfigError(f"class {name!r} is configured but its primitive count is 0")

    def class_id(self, name: str) -> int:
        return self.classes.index(name)


@dataclass(eq=False)
class _Part:
    positions: np.ndarray
    labels: np.ndarray
    colors: np.ndarray


def _rng(spec: SceneSpec, *keys: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *keys])


def _colors(rng: np.random.Generator, labels: np.ndarray, spec: SceneSpec) -> np.ndarray:
    means = np.array([PALETTE[name] for name in spec.classes], dtype=np.float64)
    jitter = rng.normal(0.0, spec.color_jitter, size=(len(labels), 3))
    return np.clip(np.rint(means[labels] + jitter), 0, 255).astype(np.uint8)


def _overlaps(a: Rect, b: Rect, gap: float = 0.0) -> bool:
    return a[0] - gap < b[2] and b[0] - gap < a[2] and a[1] - gap < b[3] and b[1] - gap < a[3]


def _street_rects(spec: SceneSpec, rng: np.random.Generator) -> list[Rect]:
    """Alternating x- and y-aligned strips crossing the whole scene."""
    rects = []
    for i in range(spec.streets):
        if i % 2 == 0:
            c = rng.uniform(STREET_WIDTH, spec.extent_y - STREET_WIDTH)
            rects.append((0.0, c - STREET_WIDTH / 2, spec.extent_x, c + STREET_WIDTH / 2))
        else:
            c = rng.uniform(STREET_WIDTH, spec.extent_x - STREET_WIDTH)
            rects.append((c - STREET_WIDTH / 2, 0.0, c + STREET_WIDTH / 2, spec.extent_y))
    return rects


def _building_rects(spec: SceneSpec, rng: np.random.Generator, streets: list[Rect]) -> list[tuple[Rect, float]]:
    placed: list[tuple[Rect, float]] = []
    for _ in range(spec.buildings):
        for attempt in range(PLACEMENT_ATTEMPTS):
            w, d = rng.uniform(*BUILDING_SIZE, size=2)
            w, d = min(w, spec.extent_x - 4.0), min(d, spec.extent_y - 4.0)
            x0 = rng.uniform(2.0, spec.extent_x - w - 2.0)
            y0 = rng.uniform(2.0, spec.extent_y - d - 2.0)
            rect = (x0, y0, x0 + w, y0 + d)
            # streets are only avoided during the first half of the attempts
            on_street = attempt < PLACEMENT_ATTEMPTS // 2 and any(_overlaps(rect, s) for s in streets)
            if on_street or any(_overlaps(rect, r, 2.0) for r, _ in placed):
                continue
            placed.append((rect, float(rng.uniform(*BUILDING_HEIGHT))))
            break
        else:
            logger.warning(f"generate_scene: no free spot for building {len(placed) + 1}, skipping it")
    return placed


def _free_spot(
    spec: SceneSpec, rng: np.random.Generator, radius: float, blocked: list[Rect]
) -> tuple[float, float]:
    """A disc center keeping `radius` clear of the scene border and of blocked rectangles."""
    margin = radius + 0.5
    for _ in range(PLACEMENT_ATTEMPTS):
        x = rng.uniform(margin, spec.extent_x - margin)
        y = rng.uniform(margin, spec.extent_y - margin)
        if not any(_overlaps((x, y, x, y), r, radius) for r in blocked):
            return x, y
    return x, y


def _ground(spec: SceneSpec, streets: list[Rect], buildings: list[tuple[Rect, float]]) -> _Part:
    rng = _rng(spec, _GROUND)
    n = max(1, round(spec.density * spec.extent_x * spec.extent_y))
    xy = rng.uniform((0.0, 0.0), (spec.extent_x, spec.extent_y), size=(n, 2))
    z = rng.normal(0.0, spec.ground_noise, size=n)

    def inside(rect: Rect) -> np.ndarray:
        return (xy[:, 0] >= rect[0]) & (xy[:, 0] < rect[2]) & (xy[:, 1] >= rect[1]) & (xy[:, 1] < rect[3])

    keep = np.ones(n, dtype=bool)
    for rect, _ in buildings:
        keep &= ~inside(rect)
    labels = np.full(n, spec.class_id("ground"), dtype=np.int64)
    if "street" in spec.classes:
        for rect in streets:
            labels[inside(rect)] = spec.class_id("street")
    positions = np.column_stack([xy, z])[keep]
    labels = labels[keep]
    return _Part(positions, labels, _colors(rng, labels, spec))


def _building(spec: SceneSpec, index: int, rect: Rect, height: float) -> _Part:
    rng = _rng(spec, _BUILDING, index)
    x0, y0, x1, y1 = rect
    w, d = x1 - x0, y1 - y0
    n_roof = max(1, round(spec.density * w * d))
    roof = np.column_stack(
        [rng.uniform(x0, x1, n_roof), rng.uniform(y0, y1, n_roof), height + rng.normal(0.0, 0.01, n_roof)]
    )
    perimeter = 2.0 * (w + d)
    n_wall = max(1, round(spec.density * spec.wall_density_factor * perimeter * height))
    t = rng.uniform(0.0, perimeter, n_wall)
    wall_xy = np.where(
        (t < w)[:, None],
        np.column_stack([x0 + t, np.full(n_wall, y0)]),
        np.where(
            (t < w + d)[:, None],
            np.column_stack([np.full(n_wall, x1), y0 + t - w]),
            np.where(
                (t < 2 * w + d)[:, None],
                np.column_stack([x1 - (t - w - d), np.full(n_wall, y1)]),
                np.column_stack([np.full(n_wall, x0), y1 - (t - 2 * w - d)]),
            ),
        ),
    )
    walls = np.column_stack([wall_xy, rng.uniform(0.0, height, n_wall)])
    positions = np.vstack([roof, walls])
    labels = np.full(len(positions), spec.class_id("building"), dtype=np.int64)
    return _Part(positions, labels, _colors(rng, labels, spec))


def _tree(spec: SceneSpec, index: int, center: tuple[float, float], crown: float) -> list[_Part]:
    rng = _rng(spec, _TREE, index)
    cx, cy = center
    radius, height = rng.uniform(*TRUNK_RADIUS), rng.uniform(*TRUNK_HEIGHT)
    crown_z = rng.uniform(*CROWN_RADIUS)
    parts = []

    n_trunk = max(1, round(spec.density * 2.0 * math.pi * radius * height))
    angle = rng.uniform(0.0, 2.0 * math.pi, n_trunk)
    trunk = np.column_stack(
        [cx + radius * np.cos(angle), cy + radius * np.sin(angle), rng.uniform(0.0, height, n_trunk)]
    )
    n_crown = max(1, round(spec.density * 2.0 * math.pi * crown * crown))
    direction = rng.normal(size=(n_crown, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    shell = rng.uniform(0.7, 1.0, size=(n_crown, 1))
    crown_pts = np.array([cx, cy, height + 0.8 * crown_z]) + direction * shell * np.array([crown, crown, crown_z])

    for name, positions in (("trunk", trunk), ("tree", crown_pts)):
        if name in spec.classes:
            labels = np.full(len(positions), spec.class_id(name), dtype=np.int64)
            parts.append(_Part(positions, labels, _colors(rng, labels, spec)))
    return parts


def _patch(spec: SceneSpec, index: int, center: tuple[float, float], radius: float) -> _Part:
    rng = _rng(spec, _PATCH, index)
    n = max(1, round(spec.density * 0.8 * math.pi * radius * radius))
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    angle = rng.uniform(0.0, 2.0 * math.pi, n)
    z = np.minimum(np.abs(rng.normal(0.0, 0.25, n)) + 0.05, 1.0)
    positions = np.column_stack([center[0] + r * np.cos(angle), center[1] + r * np.sin(angle), z])
    labels = np.full(n, spec.class_id("low_vegetation"), dtype=np.int64)
    return _Part(positions, labels, _colors(rng, labels, spec))


def generate_scene(spec: SceneSpec) -> PointCloud:
    """
    Synthetic urban scene: ground with streets, box buildings, trees (trunk and
    crown) and low vegetation patches, labeled by generating primitive.

    Deterministic under spec.seed; every primitive draws from its own stream.
    """
    spec.validate()
    layout = _rng(spec, _LAYOUT)
    streets = _street_rects(spec, layout) if "street" in spec.classes else []
    buildings = _building_rects(spec, layout, streets) if "building" in spec.classes else []
    blocked = [rect for rect, _ in buildings]

    parts = [_ground(spec, streets, buildings)]
    parts += [_building(spec, i, rect, height) for i, (rect, height) in enumerate(buildings)]
    if "tree" in spec.classes or "trunk" in spec.classes:
        for i in range(spec.trees):
            crown = float(layout.uniform(*CROWN_RADIUS))
            center = _free_spot(spec, layout, crown, blocked + streets)
            blocked.append((center[0] - crown, center[1] - crown, center[0] + crown, center[1] + crown))
            parts += _tree(spec, i, center, crown)
    if "low_vegetation" in spec.classes:
        for i in range(spec.vegetation_patches):
            radius = float(layout.uniform(*PATCH_RADIUS))
            parts.append(_patch(spec, i, _free_spot(spec, layout, radius, blocked), radius))

    positions = np.vstack([p.positions for p in parts])
    positions[:, 0] = np.clip(positions[:, 0], 0.0, spec.extent_x)
    positions[:, 1] = np.clip(positions[:, 1], 0.0, spec.extent_y)
    positions[:, 2] = np.clip(positions[:, 2], *Z_RANGE)
    labels = np.concatenate([p.labels for p in parts])
    colors = np.vstack([p.colors for p in parts])

    missing = [name for c, name in enumerate(spec.classes) if not np.any(labels == c)]
    if missing:
        raise ConfigError(f"scene spec leaves classes {missing} without points")

    if spec.partial_annotation:
        rng = _rng(spec, _PARTIAL)
        axis = int(rng.integers(2))
        middle = (spec.extent_x, spec.extent_y)[axis] / 2.0
        hidden = positions[:, axis] < middle if rng.integers(2) == 0 else positions[:, axis] >= middle
        labels = np.where(hidden, NO_LABEL, labels)

    logger.debug(f"generate_scene: seed={spec.seed} produced {len(positions)} points, {len(spec.classes)} classes")
    return PointCloud(positions=positions, colors=colors, gt_labels=labels, class_count=len(spec.classes))


def scene_pair(spec: SceneSpec, eval_seed_offset: int = 1) -> tuple[PointCloud, PointCloud]:
    """Training and evaluation scenes from the same spec, seeds differing by `eval_seed_offset`."""
    return generate_scene(spec), generate_scene(dataclasses.replace(spec, seed=spec.seed + eval_seed_offset))


def _coerce(current: Any, raw: str, key: str) -> Any:
    text = raw.strip()
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(part.strip() for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ConfigError(f"invalid value {raw!r} for scene key {key!r}") from e
    return text


def parse_scene_spec(lines: Iterable[str], base: SceneSpec = SceneSpec()) -> SceneSpec:
    """Apply `key=value` lines (blank lines and # comments skipped) on top of `base`."""
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(SceneSpec)}
    values = {}
    for number, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, raw = text.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"scene spec line {number}: expected key=value, got {line.strip()!r}")
        if key not in defaults:
            raise ConfigError(f"scene spec line {number}: unknown key {key!r}")
        values[key] = _coerce(defaults[key], raw, key)
    spec = dataclasses.replace(base, **values)
    spec.validate()
    return spec


def load_scene_spec(path: str) -> SceneSpec:
    with open(path, encoding="utf-8") as f:
        return parse_scene_spec(f.read().splitlines())


if __name__ == "__main__":
    demo = generate_scene(SceneSpec(extent_x=20.0, extent_y=20.0, density=10.0, buildings=1, trees=2))
    counts = np.bincount(demo.gt_labels, minlength=demo.class_count)
    print(f"{demo.n} points, class counts {dict(zip(DEFAULT_CLASSES, counts.tolist()))}")
