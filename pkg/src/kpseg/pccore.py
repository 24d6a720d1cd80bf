"""Point cloud data model, file formats, grid subsampling and neighbor search."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

CLASS_NAMES = ("natural", "bridge", "road", "car", "pole", "guardrail")
NUM_CLASSES = len(CLASS_NAMES)
IGNORE_LABEL = 255

FORMATS = ("ply_ascii", "kpc_binary", "xyz_text")
_KPC_MAGIC = b"KPC1"


class CloudFormatError(ValueError):
    """Malformed cloud file. Carries the line number or byte offset when known."""

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset


class CloudDataError(ValueError):
    pass


def _valid_labels(labels: np.ndarray) -> bool:
    return bool(np.all((labels < NUM_CLASSES) | (labels == IGNORE_LABEL)))


@dataclass(eq=False)
class LabeledCloud:
    """N points in meters with optional intensity in [0, 1] and optional class ids.

    Labels use 0..5 for the six classes and 255 for unlabeled points.
    """

    coords: np.ndarray
    intensity: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = len(self.coords)
        if not np.all(np.isfinite(self.coords)):
            raise CloudDataError("non-finite coordinate")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(self.intensity) != n:
                raise CloudDataError(f"intensity has {len(self.intensity)} entries, expected {n}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise CloudDataError("label outside 0..255")
            self.labels = labels.astype(np.uint8).reshape(-1)
            if len(self.labels) != n:
                raise CloudDataError(f"labels has {len(self.labels)} entries, expected {n}")
            if not _valid_labels(self.labels):
                raise CloudDataError("label values must be in 0..5 or 255")

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, LabeledCloud):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))

        return (
            same(self.coords, other.coords)
            and same(self.intensity, other.intensity)
            and same(self.labels, other.labels)
        )

    def subset(self, index) -> "LabeledCloud":
        return LabeledCloud(
            self.coords[index],
            None if self.intensity is None else self.intensity[index],
            None if self.labels is None else self.labels[index],
        )

    def with_coords(self, coords) -> "LabeledCloud":
        return LabeledCloud(coords, self.intensity, self.labels)

    def class_histogram(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(NUM_CLASSES, dtype=np.int64)
        lab = self.labels[self.labels != IGNORE_LABEL]
        return np.bincount(lab, minlength=NUM_CLASSES)[:NUM_CLASSES]


def concatenate(clouds) -> LabeledCloud:
    clouds = list(clouds)
    if not clouds:
        return LabeledCloud(np.zeros((0, 3)))
    coords = np.concatenate([c.coords for c in clouds])
    intensity = labels = None
    if all(c.intensity is not None for c in clouds):
        intensity = np.concatenate([c.intensity for c in clouds])
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    return LabeledCloud(coords, intensity, labels)


# ----------------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------------


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply_ascii"
    if suffix in (".kpc", ".bin"):
        return "kpc_binary"
    if suffix in (".xyz", ".txt"):
        return "xyz_text"
    raise ValueError(f"cannot infer cloud format from suffix {suffix!r}")


def load_cloud(path, format: Optional[str] = None) -> LabeledCloud:
    path = Path(path)
    fmt = format or infer_format(path)
    if fmt == "kpc_binary":
        return _read_kpc(path)
    if fmt == "ply_ascii":
        return _read_ply(path)
    if fmt == "xyz_text":
        return _read_xyz(path)
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def save_cloud(cloud: LabeledCloud, path, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = format or infer_format(path)
    if fmt == "kpc_binary":
        data = _encode_kpc(cloud)
        try:
            path.write_bytes(data)
        except OSError as exc:
            raise OSError(f"{path}: {exc.strerror or exc}") from exc
        return
    if fmt == "ply_ascii":
        text = _encode_ply(cloud)
    elif fmt == "xyz_text":
        text = _encode_xyz(cloud)
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def _kpc_dtype(flags: int) -> np.dtype:
    fields = [("xyz", "<f4", (3,))]
    if flags & 1:
        fields.append(("intensity", "<f4"))
    if flags & 2:
        fields.append(("label", "u1"))
    return np.dtype(fields)


def _encode_kpc(cloud: LabeledCloud) -> bytes:
    flags = (1 if cloud.intensity is not None else 0) | (2 if cloud.labels is not None else 0)
    rec = np.zeros(len(cloud), dtype=_kpc_dtype(flags))
    rec["xyz"] = cloud.coords
    if flags & 1:
        rec["intensity"] = cloud.intensity
    if flags & 2:
        rec["label"] = cloud.labels
    return _KPC_MAGIC + struct.pack("<BQ", flags, len(cloud)) + rec.tobytes()


def _read_kpc(path: Path) -> LabeledCloud:
    raw = path.read_bytes()
    if raw[:4] != _KPC_MAGIC:
        raise CloudFormatError("bad magic, expected KPC1", path, offset=0)
    if len(raw) < 13:
        raise CloudFormatError("truncated header", path, offset=len(raw))
    flags, n = struct.unpack_from("<BQ", raw, 4)
    if flags & ~3:
        raise CloudFormatError(f"unknown flag bits {flags:#x}", path, offset=4)
    dtype = _kpc_dtype(flags)
    expected = 13 + n * dtype.itemsize
    if len(raw) != expected:
        raise CloudFormatError(
            f"payload size {len(raw) - 13} does not match {n} records", path, offset=min(len(raw), expected)
        )
    rec = np.frombuffer(raw, dtype=dtype, offset=13, count=n)
    coords = rec["xyz"].astype(np.float64)
    if not np.all(np.isfinite(coords)):
        bad = int(np.flatnonzero(~np.isfinite(coords).all(axis=1))[0])
        raise CloudDataError(f"{path}: non-finite coordinate in record {bad}")
    intensity = rec["intensity"].astype(np.float64) if flags & 1 else None
    labels = rec["label"].copy() if flags & 2 else None
    return LabeledCloud(coords, intensity, labels)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _rows(cloud: LabeledCloud):
    for i in range(len(cloud)):
        parts = [_fmt(c) for c in cloud.coords[i]]
        if cloud.intensity is not None:
            parts.append(_fmt(cloud.intensity[i]))
        if cloud.labels is not None:
            parts.append(str(int(cloud.labels[i])))
        yield " ".join(parts)


def _encode_xyz(cloud: LabeledCloud) -> str:
    cols = "x y z" + (" intensity" if cloud.intensity is not None else "") + (
        " label" if cloud.labels is not None else ""
    )
    lines = [f"# {cols}"]
    lines.extend(_rows(cloud))
    return "\n".join(lines) + "\n"


def _encode_ply(cloud: LabeledCloud) -> str:
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += ["property float x", "property float y", "property float z"]
    if cloud.intensity is not None:
        header.append("property float scalar_intensity")
    if cloud.labels is not None:
        header.append("property uchar label")
    header.append("end_header")
    return "\n".join(header + list(_rows(cloud))) + "\n"


def _parse_row(tokens, ncols, path, lineno):
    if len(tokens) != ncols:
        raise CloudFormatError(f"expected {ncols} values, got {len(tokens)}", path, line=lineno)
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise CloudFormatError(str(exc), path, line=lineno) from None


def _build(values, has_intensity, has_labels, path, first_line):
    arr = np.asarray(values, dtype=np.float64).reshape(-1, 3 + has_intensity + has_labels)
    coords = arr[:, :3]
    finite = np.isfinite(coords).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise CloudDataError(f"{path}:line {first_line[bad]}: non-finite coordinate")
    intensity = arr[:, 3] if has_intensity else None
    labels = None
    if has_labels:
        lab = arr[:, -1]
        ok = (lab == np.round(lab)) & (lab >= 0) & (lab <= 255)
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise CloudFormatError(f"invalid label {lab[bad]!r}", path, line=first_line[bad])
        labels = lab.astype(np.uint8)
    return LabeledCloud(coords, intensity, labels)


def _read_xyz(path: Path) -> LabeledCloud:
    values, lines = [], []
    ncols = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tokens = body.split()
            if ncols is None:
                ncols = len(tokens)
                if ncols not in (3, 4, 5):
                    raise CloudFormatError(f"expected 3 to 5 columns, got {ncols}", path, line=lineno)
            values.append(_parse_row(tokens, ncols, path, lineno))
            lines.append(lineno)
    if ncols is None:
        return LabeledCloud(np.zeros((0, 3)))
    # 4 columns are x y z intensity; labels need the 5-column layout
    return _build(values, ncols >= 4, ncols == 5, path, lines)


_PLY_KNOWN = {"x", "y", "z", "scalar_intensity", "intensity", "label"}


def _read_ply(path: Path) -> LabeledCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("missing 'ply' magic", path, line=1)
    props, n, end = [], None, None
    in_vertex = False
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise CloudFormatError(f"unsupported PLY format {' '.join(tok[1:])}", path, line=lineno)
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n = int(tok[2])
                except (IndexError, ValueError):
                    raise CloudFormatError("bad vertex count", path, line=lineno) from None
        elif tok[0] == "property":
            if in_vertex:
                if len(tok) != 3:
                    raise CloudFormatError("only scalar vertex properties are supported", path, line=lineno)
                props.append(tok[2])
        elif tok[0] == "end_header":
            end = lineno
            break
        else:
            raise CloudFormatError(f"unexpected header keyword {tok[0]!r}", path, line=lineno)
    if end is None:
        raise CloudFormatError("missing end_header", path, line=len(lines))
    if n is None:
        raise CloudFormatError("missing vertex element", path, line=end)
    if props[:3] != ["x", "y", "z"]:
        raise CloudFormatError("vertex properties must start with x y z", path, line=end)
    unknown = set(props) - _PLY_KNOWN
    if unknown:
        raise CloudFormatError(f"unsupported properties {sorted(unknown)}", path, line=end)
    ii = next((props.index(p) for p in ("scalar_intensity", "intensity") if p in props), None)
    li = props.index("label") if "label" in props else None

    body = lines[end:end + n]
    if len(body) < n:
        raise CloudFormatError(f"expected {n} vertices, found {len(body)}", path, line=end + len(body) + 1)
    values, linenos = [], []
    for k, line in enumerate(body):
        lineno = end + k + 1
        row = _parse_row(line.split(), len(props), path, lineno)
        picked = row[:3]
        if ii is not None:
            picked.append(row[ii])
        if li is not None:
            picked.append(row[li])
        values.append(picked)
        linenos.append(lineno)
    if n == 0:
        return LabeledCloud(
            np.zeros((0, 3)),
            np.zeros(0) if ii is not None else None,
            np.zeros(0, np.uint8) if li is not None else None,
        )
    return _build(values, ii is not None, li is not None, path, linenos)


# ----------------------------------------------------------------------------
# Grid subsampling
# ----------------------------------------------------------------------------


@dataclass
class GridIndex:
    """Uniform grid over space: cell of p is floor((p - origin) / cell_size)."""

    cell_size: float
    cells: np.ndarray  # (G, 3) int64 unique cells in lexicographic order
    inverse: np.ndarray  # (N,) cell id of each point
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def build(cls, coords: np.ndarray, cell_size: float, origin=None) -> "GridIndex":
        if not cell_size > 0:
            raise ValueError(f"cell size must be positive, got {cell_size}")
        origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
        keys = np.floor((coords - origin) / cell_size).astype(np.int64)
        if len(keys) == 0:
            return cls(cell_size, np.zeros((0, 3), np.int64), np.zeros(0, np.int64), origin)
        cells, inverse = np.unique(keys, axis=0, return_inverse=True)
        return cls(cell_size, cells, inverse.reshape(-1), origin)

    def __len__(self):
        return len(self.cells)

    def members(self) -> dict:
        """Map from integer cell triple to the sorted point indices it contains."""
        order = np.argsort(self.inverse, kind="stable")
        splits = np.cumsum(np.bincount(self.inverse, minlength=len(self.cells)))[:-1]
        groups = np.split(order, splits)
        return {tuple(int(v) for v in c): g for c, g in zip(self.cells, groups)}


def majority_labels(labels: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Per-group majority class; ties go to the smallest id, 255 only if a group has no labeled point."""
    counts = np.zeros((n_groups, NUM_CLASSES), dtype=np.int64)
    keep = labels != IGNORE_LABEL
    np.add.at(counts, (groups[keep], labels[keep].astype(np.int64)), 1)
    out = np.argmax(counts, axis=1).astype(np.uint8)
    out[counts.sum(axis=1) == 0] = IGNORE_LABEL
    return out


def grid_subsample(
    cloud: LabeledCloud,
    cell: float,
    label_mode: str = "majority",
    origin=None,
    return_inverse: bool = False,
):
    """Replace the points of each occupied cell by their barycenter.

    Output order follows the lexicographic order of the integer cells.
    ``origin`` shifts the grid; the pyramid builder uses it to keep the
    cell layout attached to the batch rather than to the world frame.
    """
    if label_mode not in ("majority", "none"):
        raise ValueError(f"label_mode must be 'majority' or 'none', got {label_mode!r}")
    grid = GridIndex.build(cloud.coords, cell, origin)
    g = len(grid)
    counts = np.bincount(grid.inverse, minlength=g).astype(np.float64)
    coords = np.empty((g, 3))
    for d in range(3):
        coords[:, d] = np.bincount(grid.inverse, weights=cloud.coords[:, d], minlength=g) / counts
    intensity = None
    if cloud.intensity is not None:
        intensity = np.bincount(grid.inverse, weights=cloud.intensity, minlength=g) / counts
    labels = None
    if cloud.labels is not None and label_mode == "majority":
        labels = majority_labels(cloud.labels, grid.inverse, g)
    out = LabeledCloud(coords, intensity, labels)
    if return_inverse:
        return out, grid.inverse
    return out


# ----------------------------------------------------------------------------
# Neighborhoods
# ----------------------------------------------------------------------------


@dataclass
class NeighborTable:
    """Padded neighbor lists; entries equal to ``n_supports`` are shadow padding."""

    indices: np.ndarray  # (M, H) int64
    radius: float
    n_supports: int

    @property
    def shadow(self) -> int:
        return self.n_supports

    def __len__(self):
        return len(self.indices)

    def counts(self) -> np.ndarray:
        return (self.indices < self.n_supports).sum(axis=1)

    def rows(self):
        """Yield the real (non-shadow) neighbor indices of each query."""
        for row in self.indices:
            yield row[row < self.n_supports]


def radius_search(
    queries: np.ndarray, supports: np.ndarray, radius: float, max_neighbors: int = 40
) -> NeighborTable:
    """Closed-ball neighbors of each query, nearest first.

    Rows hold every support with ||s - q|| <= radius; rows over
    ``max_neighbors`` keep the nearest ones. Ties in distance are broken by
    support index. Columns are trimmed to the longest row.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    supports = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    m, s = len(queries), len(supports)
    if m == 0 or s == 0:
        width = 1 if m else 0
        return NeighborTable(np.full((m, width), s, dtype=np.int64), float(radius), s)

    tree = cKDTree(supports)
    # a slightly inflated bound, then an exact closed-ball filter with our own distance formula
    bound = radius * (1.0 + 1e-9) + 1e-12
    k = min(max_neighbors + 1, s)
    kd_dist, cand = tree.query(queries, k=k, distance_upper_bound=bound)
    kd_dist, cand = kd_dist.reshape(m, k), cand.reshape(m, k)
    # rows where the tree's cut at max_neighbors may split a near-tie get the exhaustive path
    redo = np.zeros(m, dtype=bool)
    if k > max_neighbors:
        last, extra = kd_dist[:, max_neighbors - 1], kd_dist[:, max_neighbors]
        with np.errstate(invalid="ignore"):
            redo = np.isfinite(extra) & ~(extra - last > 1e-9 * radius + 1e-12)
    found = cand < s
    rows, slot = np.nonzero(found)
    cols = cand[rows, slot].astype(np.int64)
    if redo.any():
        keep_fast = ~redo[rows]
        rows, cols = rows[keep_fast], cols[keep_fast]
        slow_q = np.flatnonzero(redo)
        ball = tree.query_ball_point(queries[slow_q], bound)
        lengths = np.fromiter((len(c) for c in ball), dtype=np.int64, count=len(slow_q))
        rows = np.concatenate([rows, np.repeat(slow_q, lengths)])
        cols = np.concatenate([cols, np.concatenate([np.asarray(c, dtype=np.int64) for c in ball])])
    if len(rows) == 0:
        return NeighborTable(np.full((m, 1), s, dtype=np.int64), float(radius), s)
    dist = np.sqrt(((supports[cols] - queries[rows]) ** 2).sum(axis=1))
    keep = dist <= radius
    rows, cols, dist = rows[keep], cols[keep], dist[keep]
    if len(rows) == 0:
        return NeighborTable(np.full((m, 1), s, dtype=np.int64), float(radius), s)
    order = np.lexsort((cols, dist, rows))
    rows, cols = rows[order], cols[order]
    counts = np.bincount(rows, minlength=m)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(rows)) - starts[rows]
    keep = rank < max_neighbors
    width = max(1, int(min(counts.max(), max_neighbors)))
    table = np.full((m, width), s, dtype=np.int64)
    table[rows[keep], rank[keep]] = cols[keep]
    return NeighborTable(table, float(radius), s)


def nearest_index(queries: np.ndarray, supports: np.ndarray) -> np.ndarray:
    """Index of the closest support for every query (ties: smallest index)."""
    if len(supports) == 0:
        raise ValueError("no supports")
    _, idx = cKDTree(supports).query(queries, k=1)
    return np.asarray(idx, dtype=np.int64).reshape(-1)


def extract_sphere(cloud: LabeledCloud, center, R: float = 5.0):
    """Points within ``R`` of ``center`` (closed ball), with their original indices."""
    if not R > 0:
        raise ValueError(f"sphere radius must be positive, got {R}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    d = np.sqrt(((cloud.coords - center) ** 2).sum(axis=1))
    index = np.flatnonzero(d <= R)
    return cloud.subset(index), index


# ----------------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------------


@dataclass
class AugConfig:
    scale_range: tuple = (0.9, 1.1)
    rotate_z: bool = True
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < min <= max, got {self.scale_range}")
        self.scale_range = (float(lo), float(hi))


def augment(batch: LabeledCloud, cfg: AugConfig, rng: Optional[np.random.Generator] = None) -> LabeledCloud:
    """Shuffle, scale about the centroid, then rotate about the vertical axis through the centroid.

    Without an explicit generator one is seeded from ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    out = batch
    if cfg.shuffle:
        out = out.subset(rng.permutation(len(out)))
    if len(out) == 0:
        return out
    coords = out.coords.copy()
    centroid = coords.mean(axis=0)
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi) if lo != hi else lo
    if scale != 1.0:
        coords = centroid + (coords - centroid) * scale
    if cfg.rotate_z:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(theta), np.sin(theta)
        dx = coords[:, 0] - centroid[0]
        dy = coords[:, 1] - centroid[1]
        # z is left untouched by a rotation about the vertical axis
        coords[:, 0] = centroid[0] + c * dx - s * dy
        coords[:, 1] = centroid[1] + s * dx + c * dy
    return out.with_coords(coords)
