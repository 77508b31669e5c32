"""Graph datasets: on-disk format, k-NN graphs, synthetic trees, feature scaling.

Directory layout::

    features.bin   b"HYPF", u32 N, u32 d, then N*d little-endian float32, row-major
    features.csv   fallback, one comma-separated row per node
    labels.csv     one integer per line
    edges.csv      "src,dst" per line, 0-indexed (optional)
    splits.json    {"train": [...], "val": [...], "test": [...]}
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

MAGIC = b"HYPF"
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Invalid dataset; ``code`` identifies the violated rule."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass
class GraphDataset:
    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    splits: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.splits = {k: np.asarray(v, dtype=np.int64).reshape(-1) for k, v in self.splits.items()}

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def validate(self) -> "GraphDataset":
        if self.features.ndim != 2:
            raise DatasetError("E_SHAPE", f"features must be a matrix, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("E_VALUE", "features contain non-finite values")
        if self.labels.shape[0] != self.n:
            raise DatasetError("E_SHAPE", f"{self.labels.shape[0]} labels for {self.n} nodes")
        if self.labels.size and self.labels.min() < 0:
            raise DatasetError("E_RANGE", "labels must be non-negative")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n):
            raise DatasetError("E_RANGE", f"edge endpoint outside [0, {self.n})")
        for name in SPLITS:
            if name not in self.splits:
                raise DatasetError("E_SPLIT", f"missing split {name!r}")
            idx = self.splits[name]
            if idx.size == 0:
                raise DatasetError("E_SPLIT", f"split {name!r} is empty")
            if idx.min() < 0 or idx.max() >= self.n:
                raise DatasetError("E_RANGE", f"split {name!r} references a node outside [0, {self.n})")
            if np.unique(idx).size != idx.size:
                raise DatasetError("E_SPLIT", f"split {name!r} repeats a node")
        for i, a in enumerate(SPLITS):
            for b in SPLITS[i + 1:]:
                common = np.intersect1d(self.splits[a], self.splits[b])
                if common.size:
                    raise DatasetError("E_OVERLAP", f"splits {a!r} and {b!r} share node {int(common[0])}")
        missing = np.setdiff1d(np.arange(self.num_classes), self.labels[self.splits["train"]])
        if missing.size:
            raise DatasetError("E_CLASS", f"class {int(missing[0])} has no training node")
        return self


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def write_features_bin(path: Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features_bin(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetError("E_PARSE", f"{path}: bad magic at offset 0")
    if len(raw) < 12:
        raise DatasetError("E_PARSE", f"{path}: truncated header at offset {len(raw)}")
    n, d = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * n * d
    if len(raw) != need:
        raise DatasetError("E_PARSE", f"{path}: expected {need} bytes for {n}x{d} features, found {len(raw)} (offset {min(len(raw), need)})")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)


def _read_csv_rows(path: Path) -> list[tuple[int, list[str]]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        rows.append((lineno, line.split(",")))
    return rows


def _parse_numbers(path: Path, caster, width: int | None = None) -> list:
    out = []
    for lineno, cells in _read_csv_rows(path):
        if width is not None and len(cells) != width:
            raise DatasetError("E_PARSE", f"{path}:{lineno}: expected {width} fields, found {len(cells)}")
        try:
            out.append([caster(c) for c in cells])
        except ValueError:
            raise DatasetError("E_PARSE", f"{path}:{lineno}: cannot parse {','.join(cells)!r}") from None
    return out


def load_dataset(directory) -> GraphDataset:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError("E_MISSING", f"{root} is not a directory")
    if (root / "features.bin").exists():
        features = read_features_bin(root / "features.bin")
    elif (root / "features.csv").exists():
        rows = _parse_numbers(root / "features.csv", float)
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise DatasetError("E_PARSE", f"{root / 'features.csv'}: ragged rows")
        features = np.array(rows, dtype=np.float64)
    else:
        raise DatasetError("E_MISSING", f"{root}: no features.bin or features.csv")
    if not (root / "labels.csv").exists():
        raise DatasetError("E_MISSING", f"{root}: labels.csv missing")
    labels = np.array([r[0] for r in _parse_numbers(root / "labels.csv", int, width=1)], dtype=np.int64)
    edges = np.zeros((0, 2), dtype=np.int64)
    if (root / "edges.csv").exists():
        parsed = _parse_numbers(root / "edges.csv", int, width=2)
        if parsed:
            edges = np.array(parsed, dtype=np.int64)
    if not (root / "splits.json").exists():
        raise DatasetError("E_MISSING", f"{root}: splits.json missing")
    try:
        splits = json.loads((root / "splits.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError("E_PARSE", f"{root / 'splits.json'}:{exc.lineno}: {exc.msg} (offset {exc.pos})") from None
    if not isinstance(splits, dict):
        raise DatasetError("E_PARSE", f"{root / 'splits.json'}: top level must be an object")
    ds = GraphDataset(features, labels, edges, {k: splits.get(k, []) for k in SPLITS})
    return ds.validate()


def save_dataset(ds: GraphDataset, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_features_bin(root / "features.bin", ds.features)
    (root / "labels.csv").write_text("".join(f"{int(v)}\n" for v in ds.labels))
    (root / "edges.csv").write_text("".join(f"{int(a)},{int(b)}\n" for a, b in ds.edges))
    (root / "splits.json").write_text(json.dumps({k: [int(i) for i in ds.splits[k]] for k in SPLITS}))
    return root


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------


def knn_graph(features, k: int, chunk: int = 1024) -> np.ndarray:
    """Symmetrized k-nearest-neighbour edges on raw Euclidean features.

    Ties are broken by the lower node index.  Returns a sorted ``E x 2``
    array containing both directions of every edge.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < N={n}, got {k}")
    pairs = []
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        dist = cdist(x[lo:hi], x, "sqeuclidean")
        dist[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        src = np.repeat(np.arange(lo, hi), k)
        pairs.append(np.stack([src, nearest.reshape(-1)], axis=1))
    directed = np.concatenate(pairs)
    both = np.concatenate([directed, directed[:, ::-1]])
    return np.unique(both, axis=0)


def normalized_adjacency(edges, n: int) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` with ``A`` the symmetrized 0/1 adjacency."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise DatasetError("E_RANGE", f"edge endpoint outside [0, {n})")
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    a = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    a.data[:] = 1.0  # collapse duplicates
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    inv = 1.0 / np.sqrt(deg)
    return sp.diags(inv) @ a @ sp.diags(inv)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def tree_depths(depth: int, branching: int) -> np.ndarray:
    sizes = [branching**level for level in range(depth + 1)]
    return np.repeat(np.arange(depth + 1), sizes)


def gen_tree(
    depth: int,
    branching: int,
    feature_dim: int,
    noise: float,
    seed: int = 0,
    spread: float = 2.0,
) -> GraphDataset:
    """Balanced ``branching``-ary tree whose class is the depth-1 ancestor.

    Nodes are numbered breadth-first, so the children of ``i`` are
    ``branching*i + 1 ... branching*i + branching``.  The root is assigned
    class 0.  A node at depth ``l`` gets its class centroid plus Gaussian
    noise of standard deviation ``noise * sqrt(l)``.
    """
    if depth < 2 or branching < 2:
        raise ValueError("gen_tree needs depth >= 2 and branching >= 2")
    if feature_dim < branching:
        warnings.warn(f"feature_dim={feature_dim} < branching={branching}: class centroids overlap", stacklevel=2)
    n = (branching ** (depth + 1) - 1) // (branching - 1)
    child = np.arange(1, n)
    parent = (child - 1) // branching
    edges = np.stack([parent, child], axis=1)

    labels = np.zeros(n, dtype=np.int64)
    labels[1 : branching + 1] = np.arange(branching)
    for v in range(branching + 1, n):
        labels[v] = labels[(v - 1) // branching]
    depths = tree_depths(depth, branching)

    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((feature_dim, branching))
    if feature_dim >= branching:
        centroids = np.linalg.qr(raw)[0].T
    else:
        centroids = (raw / np.linalg.norm(raw, axis=0, keepdims=True)).T
    centroids = centroids * spread
    feats = centroids[labels] + noise * np.sqrt(depths)[:, None] * rng.standard_normal((n, feature_dim))
    feats = feats.astype(np.float32).astype(np.float64)

    splits = {name: [] for name in SPLITS}
    for c in range(branching):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(0.5 * members.size))
        n_val = int(round(0.25 * members.size))
        splits["train"].append(members[:n_train])
        splits["val"].append(members[n_train : n_train + n_val])
        splits["test"].append(members[n_train + n_val :])
    splits = {k: np.sort(np.concatenate(v)) for k, v in splits.items()}
    return GraphDataset(feats, labels, edges, splits).validate()


def normalize_features(features, mode: str = "none") -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if mode == "none":
        return x.copy()
    if mode == "rowwise_l2":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), x)
    if mode == "standardize":
        std = x.std(axis=0, keepdims=True)
        return (x - x.mean(axis=0, keepdims=True)) / np.where(std > 0, std, 1.0)
    raise ValueError(f"unknown normalization mode {mode!r}")
