import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from loguru import logger
from plyfile import PlyData

from utils.errors import CloudFormatError, RegionError

ALPC_MAGIC = "alpc"
ALPC_VERSION = 1
NO_LABEL = -1
ROW_FIELDS = 7


@dataclass(frozen=True)
class AABB:
    min: np.ndarray
    max: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


@dataclass(eq=False)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    gt_labels: np.ndarray
    class_count: int
    known_mask: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors).reshape(-1, 3)
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64).reshape(-1)
        if self.known_mask is None:
            self.known_mask = np.zeros(len(self.gt_labels), dtype=bool)
        self.known_mask = np.asarray(self.known_mask, dtype=bool).reshape(-1)
        self.validate()
        self.colors = self.colors.astype(np.uint8)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def has_gt(self) -> np.ndarray:
        return self.gt_labels != NO_LABEL

    def validate(self) -> None:
        n = len(self.positions)
        if n < 1:
            raise CloudFormatError("a point cloud needs at least one point")
        if not (len(self.colors) == len(self.gt_labels) == len(self.known_mask) == n):
            raise CloudFormatError("positions, colors, labels and mask must have identical length")
        if self.class_count < 2:
            raise CloudFormatError(f"class_count must be >= 2, got {self.class_count}")
        if not np.all(np.isfinite(self.positions)):
            raise CloudFormatError("positions contain non-finite coordinates")
        if np.any(self.colors < 0) or np.any(self.colors > 255):
            raise CloudFormatError("colors must lie in [0, 255]")
        if np.any(self.gt_labels < NO_LABEL) or np.any(self.gt_labels >= self.class_count):
            raise CloudFormatError(f"labels must be -1 or in [0, {self.class_count})")
        if np.any(self.known_mask & ~self.has_gt):
            raise CloudFormatError("known_mask marks points without ground truth")

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.known_mask & self.has_gt)

    def copy(self) -> "PointCloud":
        return PointCloud(
            positions=self.positions.copy(),
            colors=self.colors.copy(),
            gt_labels=self.gt_labels.copy(),
            class_count=self.class_count,
            known_mask=self.known_mask.copy(),
        )

    def same_fields(self, other: "PointCloud") -> bool:
        """Field-wise equality of the persisted fields (the label mask is runtime state)."""
        return (
            self.class_count == other.class_count
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.colors, other.colors)
            and np.array_equal(self.gt_labels, other.gt_labels)
        )


def bounding_box(cloud: PointCloud, indices) -> AABB:
    """
    Axis-aligned box holding the selected points.

    Args:
        cloud: Source point cloud
        indices: Non-empty list of point indices

    Returns:
        AABB with the exact component-wise extrema of the selected positions
    """
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise RegionError("bounding_box needs at least one point index")
    selected = cloud.positions[idx]
    return AABB(min=selected.min(axis=0), max=selected.max(axis=0))


def _parse_int(token: str, line: int, what: str) -> int:
    try:
        return int(token, 10)
    except ValueError as e:
        raise CloudFormatError(f"invalid {what} {token!r}", line) from e


def _parse_header(header: str) -> tuple[int, int]:
    parts = header.split(" ")
    if len(parts) != 4 or parts[0] != ALPC_MAGIC:
        raise CloudFormatError(f"malformed header {header!r}, expected 'alpc 1 <n> <C>'", 1)
    if _parse_int(parts[1], 1, "version") != ALPC_VERSION:
        raise CloudFormatError(f"unsupported ALPC version {parts[1]}", 1)
    n = _parse_int(parts[2], 1, "point count")
    class_count = _parse_int(parts[3], 1, "class count")
    if n < 1:
        raise CloudFormatError(f"point count must be >= 1, got {n}", 1)
    if class_count < 2:
        raise CloudFormatError(f"class count must be >= 2, got {class_count}", 1)
    return n, class_count


def load_cloud(path: str) -> PointCloud:
    """
    Read an ALPC v1 text file.

    Args:
        path: Path to the file

    Returns:
        PointCloud with an all-false known_mask
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CloudFormatError("empty file", 1)

    n, class_count = _parse_header(lines[0])
    rows = lines[1:]
    if len(rows) < n:
        raise CloudFormatError(f"header declares {n} points but row {len(rows) + 1} is missing", len(rows) + 2)
    if len(rows) > n:
        raise CloudFormatError(f"header declares {n} points but more rows follow", n + 2)

    positions = np.empty((n, 3), dtype=np.float64)
    colors = np.empty((n, 3), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        line = i + 2
        fields = row.split(" ")
        if len(fields) != ROW_FIELDS:
            raise CloudFormatError(f"expected {ROW_FIELDS} fields, found {len(fields)}", line)
        try:
            xyz = [float(v) for v in fields[:3]]
        except ValueError as e:
            raise CloudFormatError(f"invalid coordinate in {row!r}", line) from e
        if not np.all(np.isfinite(xyz)):
            raise CloudFormatError(f"non-finite coordinate in {row!r}", line)
        rgb = [_parse_int(v, line, "color") for v in fields[3:6]]
        if any(c < 0 or c > 255 for c in rgb):
            raise CloudFormatError(f"color out of [0, 255] in {row!r}", line)
        label = _parse_int(fields[6], line, "label")
        if label < NO_LABEL or label >= class_count:
            raise CloudFormatError(f"label {label} out of range for {class_count} classes", line)
        positions[i] = xyz
        colors[i] = rgb
        labels[i] = label

    logger.debug(f"Loaded {n} points ({class_count} classes) from {path}")
    return PointCloud(positions=positions, colors=colors, gt_labels=labels, class_count=class_count)


def save_cloud(cloud: PointCloud, path: str) -> None:
    """Write a cloud as ALPC v1; reals use the shortest round-trip decimal form."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    rows = [f"{ALPC_MAGIC} {ALPC_VERSION} {cloud.n} {cloud.class_count}"]
    for xyz, rgb, label in zip(cloud.positions.tolist(), cloud.colors.tolist(), cloud.gt_labels.tolist()):
        rows.append(" ".join([repr(v) for v in xyz] + [str(c) for c in rgb] + [str(label)]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(rows) + "\n")
    logger.debug(f"Saved {cloud.n} points to {path}")


def load_ply(path: str, class_count: Optional[int] = None) -> PointCloud:
    """
    Read a PLY file with vertex properties x, y, z, red, green, blue, label.

    Args:
        path: Path to the PLY file
        class_count: Number of classes; inferred as max(label) + 1 when omitted

    Returns:
        PointCloud built from the vertex element
    """
    try:
        ply = PlyData.read(path)
        vertex = ply["vertex"].data
        positions = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]], axis=1).astype(np.int64)
        labels = np.asarray(vertex["label"], dtype=np.int64)
    except (KeyError, ValueError) as e:
        raise CloudFormatError(f"{path}: PLY needs vertex properties x,y,z,red,green,blue,label ({e})") from e
    if class_count is None:
        class_count = max(2, int(labels.max()) + 1)
    return PointCloud(positions=positions, colors=colors, gt_labels=labels, class_count=class_count)


def read_cloud(path: str) -> PointCloud:
    """Dispatch on file extension: `.ply` goes through plyfile, everything else is ALPC."""
    if path.lower().endswith(".ply"):
        return load_ply(path)
    return load_cloud(path)


if __name__ == "__main__":
    demo = PointCloud(
        positions=[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [0.1, -0.2, 0.3]],
        colors=[[255, 0, 0], [0, 255, 0], [0, 0, 255]],
        gt_labels=[0, 1, -1],
        class_count=2,
    )
    save_cloud(demo, "demo_cloud.alpc")
    loaded = load_cloud("demo_cloud.alpc")
    print(f"Round-trip equal: {demo.same_fields(loaded)}")
    print(f"Bounding box: {bounding_box(loaded, [0, 1])}")
    os.remove("demo_cloud.alpc")
