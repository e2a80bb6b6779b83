"""Synthetic long-tailed relation datasets with planted predicate similarity.

Classes are arranged in latent clusters: class means of the same cluster sit
close together, so a linear classifier confuses them much like it confuses
"on" with "parked on". Class frequencies follow a power law in class rank.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._io import dumps, fmt_float, rng_for
from .errors import FormatError, InvalidArgument

FORMAT_VERSION = "1"
SPLITS = ("train", "val", "test")
# probability mass the prior keeps outside the true latent cluster
PRIOR_LEAK = 0.05


@dataclass(frozen=True)
class DatasetSpec:
    A: int = 20
    P: int = 16
    n_train: int = 2000
    n_val: int = 0
    n_test: int = 1000
    imbalance_exponent: float = 1.0
    n_latent_clusters: int = 2
    cluster_separation: float = 4.0
    noise_scale: float = 1.0
    scene_size: int = 32
    feature_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.A < 1 or self.P < 1:
            raise InvalidArgument("A and P must be positive")
        if not 1 <= self.n_latent_clusters <= self.A:
            raise InvalidArgument("need A >= n_latent_clusters >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise InvalidArgument("sample counts must be >= 0")
        if self.imbalance_exponent < 0:
            raise InvalidArgument("imbalance_exponent must be >= 0")
        if not (self.cluster_separation > 0 and self.noise_scale > 0 and self.feature_scale > 0):
            raise InvalidArgument("cluster_separation, noise_scale and feature_scale must be > 0")
        if self.scene_size < 1:
            raise InvalidArgument("scene_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgument(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**d)

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass
class RelationSample:
    e: np.ndarray
    u: np.ndarray
    z: np.ndarray
    g: int
    scene_id: int


@dataclass
class Split:
    """Column-oriented storage for one split; rows are RelationSamples."""

    e: np.ndarray  # (n, P)
    u: np.ndarray  # (n, P)
    z: np.ndarray  # (n, A)
    g: np.ndarray  # (n,) int
    scene_id: np.ndarray  # (n,) int

    def __len__(self) -> int:
        return int(self.g.shape[0])

    def __getitem__(self, i: int) -> RelationSample:
        return RelationSample(self.e[i], self.u[i], self.z[i], int(self.g[i]), int(self.scene_id[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Split":
        return Split(self.e[idx], self.u[idx], self.z[idx], self.g[idx], self.scene_id[idx])

    @classmethod
    def empty(cls, A: int, P: int) -> "Split":
        return cls(
            np.zeros((0, P)), np.zeros((0, P)), np.zeros((0, A)),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
        )


@dataclass
class Dataset:
    spec: DatasetSpec
    splits: dict[str, Split]
    class_means_e: np.ndarray
    class_means_u: np.ndarray
    latent_cluster: np.ndarray  # (A,) planted cluster id of each class
    class_counts: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_counts:
            self.class_counts = {
                name: np.bincount(s.g, minlength=self.spec.A).astype(np.int64)
                for name, s in self.splits.items()
            }

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def test(self) -> Split:
        return self.splits["test"]


def apportion(total: int, weights) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` integer units.

    Remainder ties go to the lower index, so the result is order-stable.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total == 0:
        return np.zeros(w.size, dtype=np.int64)
    quotas = total * w / w.sum()
    base = np.floor(quotas).astype(np.int64)
    left = total - int(base.sum())
    order = sorted(range(w.size), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def class_frequencies(A: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, A + 1, dtype=np.float64)
    w = ranks ** (-exponent)
    return w / w.sum()


def exponent_for_ratio(A: int, head_to_tail: float) -> float:
    """Power-law exponent giving the requested head:tail frequency ratio."""
    if A < 2:
        return 0.0
    return float(np.log(head_to_tail) / np.log(A))


def latent_assignment(A: int, n_clusters: int) -> np.ndarray:
    """Cluster id per class: classes are dealt round-robin by frequency rank.

    Each cluster then holds a mix of head and tail classes, which is the
    setting where similar-looking tails get absorbed by their heads.
    """
    return np.arange(A) % n_clusters


def _mean_pair_distances(means: np.ndarray, cluster: np.ndarray) -> tuple[float, float]:
    d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    same = cluster[:, None] == cluster[None, :]
    off = ~np.eye(len(cluster), dtype=bool)
    within = d[same & off]
    between = d[~same]
    return (float(within.mean()) if within.size else 0.0,
            float(between.mean()) if between.size else 0.0)


def planted_means(spec: DatasetSpec, cluster: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Class means with mean within-cluster distance 1 and between:within = separation.

    noise_scale is therefore measured in units of the typical distance
    between two similar classes; feature_scale is applied by the caller.

    Cluster centres are equidistant (scaled orthonormal directions in a
    random rotation); class offsets lie on a sphere around their centre.
    """
    A, P, C = spec.A, spec.P, spec.n_latent_clusters
    offsets = rng.standard_normal((A, P))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    if C == 1 or C > P:
        centres = rng.standard_normal((C, P))
    else:
        q, _ = np.linalg.qr(rng.standard_normal((P, P)))
        centres = q[:C] / np.sqrt(2.0)  # pairwise distance 1
    within, _ = _mean_pair_distances(offsets, cluster)
    if within == 0:  # every cluster is a single class
        return spec.cluster_separation * centres[cluster]
    offsets /= within
    if C == 1:
        return offsets

    def between(scale: float) -> float:
        return _mean_pair_distances(offsets + scale * centres[cluster], cluster)[1]

    lo, hi = 0.0, 1.0
    while between(hi) < spec.cluster_separation:
        hi *= 2.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if between(mid) < spec.cluster_separation:
            lo = mid
        else:
            hi = mid
    return offsets + hi * centres[cluster]


def log_prior(A: int, cluster: np.ndarray) -> np.ndarray:
    """(C, A) log-prior rows: uniform inside the cluster, PRIOR_LEAK spread elsewhere.

    Rows are centred (zero mean). softmax(row) is still the prior, and the
    smaller norm keeps learned projections of z well conditioned.
    """
    rows = []
    for c in range(int(cluster.max()) + 1):
        inside = cluster == c
        n_in, n_out = int(inside.sum()), int((~inside).sum())
        q = np.empty(A)
        if n_out == 0:
            q[:] = 1.0 / A
        else:
            q[inside] = (1.0 - PRIOR_LEAK) / n_in
            q[~inside] = PRIOR_LEAK / n_out
        lq = np.log(q)
        rows.append(lq - lq.mean())
    return np.array(rows)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    A, P = spec.A, spec.P
    if spec.n_train + spec.n_val + spec.n_test == 0:
        raise InvalidArgument("dataset spec requests zero samples in every split")
    cluster = latent_assignment(A, spec.n_latent_clusters)
    means_e = spec.feature_scale * planted_means(spec, cluster, rng_for(spec.seed, "means", "e"))
    means_u = spec.feature_scale * planted_means(spec, cluster, rng_for(spec.seed, "means", "u"))
    sigma = spec.feature_scale * spec.noise_scale
    priors = log_prior(A, cluster)
    freqs = class_frequencies(A, spec.imbalance_exponent)

    splits = {}
    for name in SPLITS:
        n = spec.split_size(name)
        counts = apportion(n, freqs)
        g_parts, e_parts, u_parts = [], [], []
        for c in range(A):
            # per-class substreams keep generation independent of iteration order
            rng = rng_for(spec.seed, name, "class", c)
            k = int(counts[c])
            g_parts.append(np.full(k, c, dtype=np.int64))
            e_parts.append(means_e[c] + sigma * rng.standard_normal((k, P)))
            u_parts.append(means_u[c] + sigma * rng.standard_normal((k, P)))
        g = np.concatenate(g_parts)
        order = rng_for(spec.seed, name, "shuffle").permutation(n)
        g = g[order]
        e = np.concatenate(e_parts)[order]
        u = np.concatenate(u_parts)[order]
        z = priors[cluster[g]]
        scene = np.arange(n, dtype=np.int64) // spec.scene_size
        splits[name] = Split(e, u, z.reshape(n, A), g, scene)
    return Dataset(spec, splits, means_e, means_u, cluster)


def _header(ds: Dataset) -> dict:
    spec = ds.spec
    return {
        "format_version": FORMAT_VERSION,
        "A": spec.A,
        "P": spec.P,
        "scene_size": spec.scene_size,
        "spec": asdict(spec),
        "class_means_e": ds.class_means_e,
        "class_means_u": ds.class_means_u,
        "latent_cluster": ds.latent_cluster,
    }


def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    lines = [dumps(_header(ds))]
    for name in SPLITS:
        s = ds.splits.get(name)
        if s is None:
            continue
        for i in range(len(s)):
            vals = ",".join(fmt_float(v) for v in np.concatenate([s.e[i], s.u[i], s.z[i]]))
            lines.append(f'["{name}",{int(s.scene_id[i])},{int(s.g[i])},{vals}]')
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> Dataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    try:
        header = json.loads(lines[0])
    except (json.JSONDecodeError, IndexError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')!r}"
                          if isinstance(header, dict) else f"{path}: header is not an object")
    try:
        spec = DatasetSpec.from_dict(header["spec"])
        A, P = int(header["A"]), int(header["P"])
    except (KeyError, TypeError, InvalidArgument) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if (A, P) != (spec.A, spec.P):
        raise FormatError(f"{path}: header A/P disagree with embedded spec")
    if not text.endswith("\n"):
        raise FormatError(f"{path}: file is truncated (no final newline)")

    width = 3 + 2 * P + A
    rows: dict[str, list] = {name: [] for name in SPLITS}
    for idx, line in enumerate(lines[1:-1]):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: record {idx} is malformed: {exc}") from None
        if not isinstance(rec, list) or len(rec) != width:
            got = len(rec) - 3 if isinstance(rec, list) else "?"
            raise FormatError(f"{path}: record {idx} has {got} feature values, expected {width - 3} (P={P}, A={A})")
        tag, scene, g = rec[0], rec[1], rec[2]
        if tag not in rows:
            raise FormatError(f"{path}: record {idx} has unknown split tag {tag!r}")
        if not (isinstance(g, int) and 0 <= g < A):
            raise FormatError(f"{path}: record {idx} label {g!r} outside [0, {A})")
        rows[tag].append(rec)

    splits = {}
    for name in SPLITS:
        recs = rows[name]
        if not recs:
            splits[name] = Split.empty(A, P)
            continue
        arr = np.array([r[3:] for r in recs], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: non-finite feature values in split {name}")
        splits[name] = Split(
            arr[:, :P].copy(), arr[:, P:2 * P].copy(), arr[:, 2 * P:].copy(),
            np.array([r[2] for r in recs], dtype=np.int64),
            np.array([r[1] for r in recs], dtype=np.int64),
        )
    try:
        means_e = np.array(header["class_means_e"], dtype=np.float64).reshape(A, P)
        means_u = np.array(header["class_means_u"], dtype=np.float64).reshape(A, P)
        cluster = np.array(header["latent_cluster"], dtype=np.int64).reshape(A)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad class means block: {exc}") from None
    return Dataset(spec, splits, means_e, means_u, cluster)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.spec != b.spec:
        return False
    for arr_a, arr_b in ((a.class_means_e, b.class_means_e), (a.class_means_u, b.class_means_u),
                         (a.latent_cluster, b.latent_cluster)):
        if not np.array_equal(arr_a, arr_b):
            return False
    for name in SPLITS:
        sa, sb = a.splits[name], b.splits[name]
        for col in ("e", "u", "z", "g", "scene_id"):
            if not np.array_equal(getattr(sa, col), getattr(sb, col)):
                return False
    return True
