"""Feature datasets, reproducible splits, pair constraints, and pair sampling.

A dataset is an ``(n, d)`` float64 feature matrix plus one identity label per
row.  Labels are always relabeled to dense integer ids ``0..K-1`` at load
time (in sorted order of the original label strings); the original strings
are kept in ``identity_names``.

Two file formats are supported:

* CSV with header ``id,label,f0,...,f{d-1}``; feature values are written
  with full round-trip precision.
* A binary container: magic ``MFID``, version u32, ``n`` u64, ``d`` u64,
  row-major little-endian float64 features, then u32 label ids.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"MFID"
BINARY_VERSION = 1

STRATIFIED = "stratified-by-sample"
DISJOINT = "disjoint-by-identity"


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix with dense integer identity labels.

    Args:
        features: (n, d) array, coerced to float64.  Must be finite.
        labels: (n,) integer ids, dense in [0, K).
        identity_names: optional map from dense id to the original label
            string.  Loaders always fill this in.
    """

    features: np.ndarray
    labels: np.ndarray
    identity_names: dict[int, str] | None = None

    def __post_init__(self) -> None:
        features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        n, d = features.shape
        if n < 1 or d < 1:
            raise ValueError(f"need at least one sample and one feature, got {n}x{d}")
        if labels.ndim != 1 or labels.shape[0] != n:
            raise ValueError(f"expected {n} labels, got array of shape {labels.shape}")
        bad = np.flatnonzero(~np.isfinite(features).all(axis=1))
        if bad.size:
            raise ValueError(f"non-finite feature value in sample {int(bad[0])}")
        ids = np.unique(labels)
        if ids[0] < 0 or not np.array_equal(ids, np.arange(ids.size)):
            raise ValueError("identity ids must be dense integers in [0, K)")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_identities(self) -> int:
        return int(self.labels[-1] if self.labels.size == 1 else self.labels.max()) + 1


def dense_relabel(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map arbitrary integer labels onto 0..K-1 (sorted order of originals).

    Returns:
        (dense_labels, original_ids) where original_ids[k] is the source id
        that became dense id k.
    """
    labels = np.asarray(labels)
    originals = np.unique(labels)
    return np.searchsorted(originals, labels), originals


def _zero_padded_names(values) -> dict[int, str]:
    width = max(len(str(int(v))) for v in values)
    return {i: str(int(v)).zfill(width) for i, v in enumerate(values)}


def _labels_from_names(names: list[str]) -> tuple[np.ndarray, dict[int, str]]:
    order = sorted(set(names))
    mapping = {name: i for i, name in enumerate(order)}
    labels = np.array([mapping[name] for name in names], dtype=np.int64)
    return labels, dict(enumerate(order))


# ---------------------------------------------------------------------------
# file formats


def load_dataset(path, format: str | None = None) -> Dataset:
    """Load a dataset from ``path`` in ``format`` ("csv" or "binary").

    With ``format=None`` the format is inferred from the suffix (``.bin`` and
    ``.mfid`` are binary, everything else CSV).
    """
    path = Path(path)
    if format is None:
        format = "binary" if path.suffix in {".bin", ".mfid"} else "csv"
    if format == "csv":
        return _load_csv(path)
    if format == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown dataset format {format!r}")


def save_dataset(ds: Dataset, path, format: str | None = None,
                 header_comment: str | None = None) -> None:
    """Write ``ds`` to ``path``; see :func:`load_dataset` for formats.

    ``header_comment`` (without the leading ``#``) is prepended to CSV output
    as a comment line; binary output ignores it.
    """
    path = Path(path)
    if format is None:
        format = "binary" if path.suffix in {".bin", ".mfid"} else "csv"
    if format == "csv":
        _save_csv(ds, path, header_comment)
    elif format == "binary":
        _save_binary(ds, path)
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def _identity_name(ds: Dataset, label: int, width: int) -> str:
    if ds.identity_names is not None and label in ds.identity_names:
        return ds.identity_names[label]
    return str(label).zfill(width)


def _save_csv(ds: Dataset, path: Path, header_comment: str | None) -> None:
    width = len(str(ds.n_identities - 1))
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    lines.append("id,label," + ",".join(f"f{j}" for j in range(ds.dim)))
    for i in range(ds.n_samples):
        name = _identity_name(ds, int(ds.labels[i]), width)
        feats = ",".join(repr(float(v)) for v in ds.features[i])
        lines.append(f"{i},{name},{feats}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_csv(path: Path) -> Dataset:
    rows: list[list[float]] = []
    names: list[str] = []
    width: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if width is None:
                if fields[:2] != ["id", "label"] or len(fields) < 3:
                    raise ValueError(
                        f"{path}: line {lineno}: expected header 'id,label,f0,...'")
                width = len(fields) - 2
                continue
            if len(fields) != width + 2:
                raise ValueError(
                    f"{path}: line {lineno}: expected {width + 2} fields, got {len(fields)}")
            try:
                feats = [float(v) for v in fields[2:]]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed feature value") from None
            if not all(math.isfinite(v) for v in feats):
                raise ValueError(f"{path}: line {lineno}: non-finite feature value")
            names.append(fields[1])
            rows.append(feats)
    if width is None:
        raise ValueError(f"{path}: empty file")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    labels, identity_names = _labels_from_names(names)
    return Dataset(np.asarray(rows, dtype=np.float64), labels, identity_names)


def _save_binary(ds: Dataset, path: Path) -> None:
    if int(ds.labels.max()) >= 2 ** 32:
        raise ValueError("labels do not fit in u32")
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<I", BINARY_VERSION))
        fh.write(struct.pack("<QQ", ds.n_samples, ds.dim))
        fh.write(ds.features.astype("<f8").tobytes(order="C"))
        fh.write(ds.labels.astype("<u4").tobytes())


def _load_binary(path: Path) -> Dataset:
    blob = Path(path).read_bytes()
    header = struct.calcsize("<4sIQQ")
    if len(blob) < header:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, d = struct.unpack_from("<4sIQQ", blob)
    if magic != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = header + n * d * 8 + n * 4
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    features = np.frombuffer(blob, dtype="<f8", count=n * d, offset=header)
    features = features.reshape(n, d).astype(np.float64)
    raw = np.frombuffer(blob, dtype="<u4", count=n, offset=header + n * d * 8)
    labels, originals = dense_relabel(raw.astype(np.int64))
    return Dataset(features, labels, _zero_padded_names(originals))


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Split:
    """Disjoint train/test index sets plus the provenance (mode, seed)."""

    train_indices: np.ndarray
    test_indices: np.ndarray
    mode: str
    seed: int

    def __post_init__(self) -> None:
        train = np.sort(np.asarray(self.train_indices, dtype=np.int64))
        test = np.sort(np.asarray(self.test_indices, dtype=np.int64))
        if self.mode not in (STRATIFIED, DISJOINT):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if train.size == 0:
            raise ValueError("split has an empty training side")
        if np.intersect1d(train, test).size:
            raise ValueError("train and test indices overlap")
        object.__setattr__(self, "train_indices", train)
        object.__setattr__(self, "test_indices", test)


def stratified_splits(ds: Dataset, folds: int, test_fraction: float, seed: int,
                      scheme: str = "resample") -> list[Split]:
    """Per-identity stratified splits: every identity appears on both sides.

    Args:
        folds: number of splits to produce.
        test_fraction: per-identity held-out fraction (rounded to the nearest
            sample, clamped so both sides stay nonempty).
        scheme: "resample" (default) draws each fold independently, so folds
            may overlap; "kfold" partitions each identity's samples so the
            test sides are disjoint across folds (requires every identity to
            have at least ``folds`` samples; ``test_fraction`` is ignored).
    """
    if folds < 1:
        raise ValueError("folds must be at least 1")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    counts = np.bincount(ds.labels, minlength=ds.n_identities)
    lonely = np.flatnonzero(counts < 2)
    if lonely.size:
        raise ValueError(
            f"identity {int(lonely[0])} has a single sample and cannot be stratified")
    if scheme == "resample":
        streams = np.random.SeedSequence(seed).spawn(folds)
        return [_stratified_once(ds, test_fraction, seed, np.random.default_rng(s))
                for s in streams]
    if scheme == "kfold":
        short = np.flatnonzero(counts < folds)
        if short.size:
            ident = int(short[0])
            raise ValueError(
                f"identity {ident} has {int(counts[ident])} samples, fewer than {folds} folds")
        rng = np.random.default_rng(seed)
        perms = [rng.permutation(np.flatnonzero(ds.labels == ident))
                 for ident in range(ds.n_identities)]
        splits = []
        everything = np.arange(ds.n_samples)
        for f in range(folds):
            test = np.sort(np.concatenate([perm[f::folds] for perm in perms]))
            splits.append(Split(np.setdiff1d(everything, test), test, STRATIFIED, seed))
        return splits
    raise ValueError(f"unknown stratification scheme {scheme!r}")


def _stratified_once(ds: Dataset, test_fraction: float, seed: int,
                     rng: np.random.Generator) -> Split:
    test_parts = []
    for ident in range(ds.n_identities):
        idx = np.flatnonzero(ds.labels == ident)
        k = int(math.floor(idx.size * test_fraction + 0.5))
        k = min(max(k, 1), idx.size - 1)
        test_parts.append(rng.choice(idx, size=k, replace=False))
    test = np.sort(np.concatenate(test_parts))
    train = np.setdiff1d(np.arange(ds.n_samples), test)
    return Split(train, test, STRATIFIED, seed)


def identity_disjoint_split(ds: Dataset, identity_test_fraction: float, seed: int) -> Split:
    """Hold out whole identities: ceil(K * fraction) ids go to the test side."""
    k = ds.n_identities
    if k < 2:
        raise ValueError("identity-disjoint split needs at least two identities")
    if not 0.0 < identity_test_fraction < 1.0:
        raise ValueError(
            f"identity_test_fraction must be in (0, 1), got {identity_test_fraction}")
    # The 1e-9 guard keeps ceil() at the intended integer when the product
    # lands a few ulps above it (e.g. 90 * 0.2).
    n_test_ids = math.ceil(k * identity_test_fraction - 1e-9)
    if n_test_ids >= k:
        raise ValueError(
            f"test fraction {identity_test_fraction} leaves no training identities (K={k})")
    rng = np.random.default_rng(seed)
    test_ids = rng.permutation(k)[:n_test_ids]
    mask = np.isin(ds.labels, test_ids)
    return Split(np.flatnonzero(~mask), np.flatnonzero(mask), DISJOINT, seed)


def save_split(split: Split, stem) -> tuple[Path, Path]:
    """Write ``<stem>.train.txt`` / ``<stem>.test.txt``, one index per line."""
    stem = Path(stem)
    paths = []
    for side, indices in (("train", split.train_indices), ("test", split.test_indices)):
        path = stem.with_name(stem.name + f".{side}.txt")
        lines = [f"# mode={split.mode} seed={split.seed} side={side}"]
        lines.extend(str(int(i)) for i in indices)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(path)
    return paths[0], paths[1]


def load_split(stem) -> Split:
    """Load a split written by :func:`save_split` from its two side files."""
    stem = Path(stem)
    sides = {}
    mode = None
    seed = None
    for side in ("train", "test"):
        path = stem.with_name(stem.name + f".{side}.txt")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError(f"{path}: missing split header")
        header = dict(item.split("=", 1) for item in lines[0][1:].split() if "=" in item)
        if "mode" not in header or "seed" not in header:
            raise ValueError(f"{path}: header must name mode and seed")
        mode, seed = header["mode"], int(header["seed"])
        indices = []
        for lineno, line in enumerate(lines[1:], start=2):
            line = line.strip()
            if not line:
                continue
            try:
                indices.append(int(line))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed index") from None
        sides[side] = np.array(indices, dtype=np.int64)
    return Split(sides["train"], sides["test"], mode, seed)


# ---------------------------------------------------------------------------
# pair constraints and pair sampling


class PairConstraints:
    """Exhaustive similar/dissimilar unordered index pairs over a label sequence.

    Pairs are all (i, j) with i < j; a pair is similar iff the two labels are
    equal.  ``similar`` / ``dissimilar`` expose the pairs as frozensets; the
    internal arrays keep sampling fast and deterministic.
    """

    def __init__(self, similar_array: np.ndarray, dissimilar_array: np.ndarray):
        self._similar = np.asarray(similar_array, dtype=np.int64).reshape(-1, 2)
        self._dissimilar = np.asarray(dissimilar_array, dtype=np.int64).reshape(-1, 2)

    @property
    def n_similar(self) -> int:
        return self._similar.shape[0]

    @property
    def n_dissimilar(self) -> int:
        return self._dissimilar.shape[0]

    @cached_property
    def similar(self) -> frozenset:
        return frozenset((int(a), int(b)) for a, b in self._similar)

    @cached_property
    def dissimilar(self) -> frozenset:
        return frozenset((int(a), int(b)) for a, b in self._dissimilar)

    def draw(self, kind: str, count: int, rng: np.random.Generator) -> np.ndarray:
        pairs = self._similar if kind == "similar" else self._dissimilar
        picked = rng.choice(pairs.shape[0], size=count, replace=False)
        return pairs[picked]


def build_pair_constraints(labels) -> PairConstraints:
    """All n(n-1)/2 unordered index pairs, partitioned by label equality."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a nonempty 1-D sequence")
    i_upper, j_upper = np.triu_indices(labels.size, k=1)
    same = labels[i_upper] == labels[j_upper]
    similar = np.column_stack([i_upper[same], j_upper[same]])
    dissimilar = np.column_stack([i_upper[~same], j_upper[~same]])
    return PairConstraints(similar, dissimilar)


@dataclass(frozen=True)
class PairBatch:
    """A sampled batch of index pairs; ``image_count`` counts duplicates."""

    pairs: tuple
    image_count: int

    def __post_init__(self) -> None:
        pairs = tuple((int(a), int(b), bool(sim)) for a, b, sim in self.pairs)
        if self.image_count != 2 * len(pairs):
            raise ValueError(
                f"image_count {self.image_count} != 2 * {len(pairs)} pairs")
        object.__setattr__(self, "pairs", pairs)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(first indices, second indices, similar mask) as aligned arrays."""
        if not self.pairs:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty.copy(), np.empty(0, dtype=bool)
        a, b, sim = zip(*self.pairs)
        return (np.array(a, dtype=np.int64), np.array(b, dtype=np.int64),
                np.array(sim, dtype=bool))


def sample_pair_batch(ds: Dataset, n_pairs: int, similar_fraction: float,
                      rng: np.random.Generator,
                      constraints: PairConstraints | None = None) -> PairBatch:
    """Draw a pair batch uniformly from the constraint sets, without replacement.

    The similar count is round(n_pairs * similar_fraction); the remainder is
    dissimilar.  ``constraints`` may be passed in to avoid rebuilding the
    O(n^2) pair sets on every call; it must have been built from ``ds.labels``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    if not 0.0 <= similar_fraction <= 1.0:
        raise ValueError(f"similar_fraction must be in [0, 1], got {similar_fraction}")
    pc = constraints if constraints is not None else build_pair_constraints(ds.labels)
    n_similar = int(math.floor(n_pairs * similar_fraction + 0.5))
    n_dissimilar = n_pairs - n_similar
    if n_similar > pc.n_similar:
        raise ValueError(
            f"batch needs {n_similar} similar pairs but only {pc.n_similar} exist")
    if n_dissimilar > pc.n_dissimilar:
        raise ValueError(
            f"batch needs {n_dissimilar} dissimilar pairs but only {pc.n_dissimilar} exist")
    pairs = []
    if n_similar:
        pairs.extend((int(a), int(b), True) for a, b in pc.draw("similar", n_similar, rng))
    if n_dissimilar:
        pairs.extend((int(a), int(b), False)
                     for a, b in pc.draw("dissimilar", n_dissimilar, rng))
    return PairBatch(tuple(pairs), 2 * n_pairs)


# ---------------------------------------------------------------------------
# synthetic data


def synth_gaussian(k_identities: int, samples_per_identity: int, dim: int,
                   center_scale: float, noise_sigma: float, seed: int) -> Dataset:
    """Isotropic Gaussian identity clusters with uniformly placed centers.

    Centers are drawn uniformly from [-center_scale, center_scale]^dim; each
    sample is its identity's center plus N(0, noise_sigma^2 I) noise.
    """
    if k_identities < 1 or samples_per_identity < 1 or dim < 1:
        raise ValueError("k_identities, samples_per_identity and dim must be >= 1")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be non-negative, got {noise_sigma}")
    if center_scale < 0:
        raise ValueError(f"center_scale must be non-negative, got {center_scale}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_scale, center_scale, size=(k_identities, dim))
    n = k_identities * samples_per_identity
    noise = rng.normal(0.0, noise_sigma, size=(n, dim)) if noise_sigma > 0 else 0.0
    features = np.repeat(centers, samples_per_identity, axis=0) + noise
    labels = np.repeat(np.arange(k_identities), samples_per_identity)
    width = len(str(k_identities - 1))
    names = {i: f"id{str(i).zfill(width)}" for i in range(k_identities)}
    return Dataset(features, labels, names)
