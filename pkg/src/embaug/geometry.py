"""Vector and matrix kernels for embedding-space augmentation.

Provides row normalization, pairwise squared distances and inner-product
similarities, and synthetic point generation by internal division of
same-class pairs.  All math is done in 64-bit floats; every function here
is a pure function of its inputs and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidN, ZeroNormRow

# Rows with L2 norm at or below this are treated as zero vectors.
ZERO_NORM_TOL = 1e-12

# Division rule placing n points strictly inside the segment, at fractions
# k/(n+1) from the second point toward the first.
RULE_EQUAL_PARTS = "equal_parts"
# Division rule with denominator n: fractions k/n, so the last point
# coincides with the first source point.
RULE_ENDPOINT_INCLUSIVE = "endpoint_inclusive"

DIVISION_RULES = (RULE_EQUAL_PARTS, RULE_ENDPOINT_INCLUSIVE)


@dataclass
class EmbeddingBatch:
    """An N x D matrix of embedding vectors plus per-row integer class labels.

    Labels are positive integers; a batch is valid as long as every label
    is at least 1 and all entries are finite.
    """

    data: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionMismatch(f"expected N x D matrix with N,D >= 1, got shape {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise DimensionMismatch(
                f"labels shape {self.labels.shape} does not match {self.data.shape[0]} rows"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("batch contains non-finite entries")
        if self.labels.min() < 1:
            raise ValueError("labels must be positive integers")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class SyntheticPointSet:
    """Points generated on the segment between one same-class pair.

    ``fractions[k]`` is the weight on the first source point, so row k is
    ``fractions[k] * x_i + (1 - fractions[k]) * x_j`` before normalization.
    ``prenorm`` holds the pre-normalization row norms once ``normalized``
    is True (needed for the normalization Jacobian).
    """

    points: np.ndarray
    source_pair: tuple[int, int]
    class_label: int
    normalized: bool
    fractions: np.ndarray
    prenorm: np.ndarray | None = None


@dataclass
class AugmentedBatch:
    """Original batch rows followed by synthetic rows, with provenance.

    The first ``num_original`` rows equal the input batch in order.  Each
    synthetic row s carries the index of the positive pair it came from
    (``syn_pair_index[s]`` into ``pairs``) and its interpolation fraction.
    """

    data: np.ndarray
    labels: np.ndarray
    num_original: int
    pairs: np.ndarray            # (P, 2) original-row indices, i < j
    syn_pair_index: np.ndarray   # (S,) index into pairs
    syn_fraction: np.ndarray     # (S,) weight on pairs[., 0]
    syn_prenorm: np.ndarray | None  # (S,) norms before normalization, else None
    normalized: bool

    @property
    def total(self) -> int:
        return self.data.shape[0]

    @property
    def num_synthetic(self) -> int:
        return self.total - self.num_original

    @property
    def is_synthetic(self) -> np.ndarray:
        mask = np.zeros(self.total, dtype=bool)
        mask[self.num_original:] = True
        return mask

    @property
    def source_i(self) -> np.ndarray:
        return self.pairs[self.syn_pair_index, 0]

    @property
    def source_j(self) -> np.ndarray:
        return self.pairs[self.syn_pair_index, 1]

    def collapse_gradient(self, grad_aug: np.ndarray) -> np.ndarray:
        """Fold a gradient w.r.t. augmented rows back onto the originals.

        Synthetic rows are functions of their two source rows: a fixed
        linear interpolation, optionally followed by L2 normalization.
        Normalization backpropagates through the projection Jacobian
        (I - u u^T) / r where u is the normalized row and r the
        pre-normalization norm.
        """
        n = self.num_original
        grad = grad_aug[:n].copy()
        s = self.num_synthetic
        if s == 0:
            return grad
        g = grad_aug[n:]
        if self.normalized:
            u = self.data[n:]
            r = self.syn_prenorm
            g = (g - (np.sum(u * g, axis=1, keepdims=True)) * u) / r[:, None]
        lam = self.syn_fraction[:, None]
        np.add.at(grad, self.source_i, lam * g)
        np.add.at(grad, self.source_j, (1.0 - lam) * g)
        return grad


def l2_normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Divide every row by its L2 norm.

    Raises ZeroNormRow for any row whose norm is at or below 1e-12.
    """
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    bad = np.nonzero(norms <= ZERO_NORM_TOL)[0]
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return m / norms[:, None]


def pairwise_sq_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between the rows of two matrices.

    Returns out[p, q] = sum_d (a[p, d] - b[q, d])^2.  When called with the
    same array object for both sides the result is exactly symmetric with
    a zero diagonal.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    sq_a = np.einsum("ij,ij->i", a, a)
    sq_b = sq_a if b is a else np.einsum("ij,ij->i", b, b)
    out = sq_a[:, None] + sq_b[None, :] - 2.0 * (a @ b.T)
    np.maximum(out, 0.0, out=out)
    if b is a:
        out = 0.5 * (out + out.T)
        np.fill_diagonal(out, 0.0)
    return out


def pairwise_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inner products between the rows of two matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    return a @ b.T


def division_fractions(n: int, rule: str = RULE_EQUAL_PARTS) -> np.ndarray:
    """Interpolation weights on the first source point for each of n points.

    equal_parts places points at k/(n+1), k = 1..n, all strictly interior.
    endpoint_inclusive uses denominator n, so the last point sits exactly
    on the first source point.
    """
    if n < 1:
        raise InvalidN(f"need n >= 1, got {n}")
    if rule == RULE_EQUAL_PARTS:
        return np.arange(1, n + 1, dtype=np.float64) / (n + 1)
    if rule == RULE_ENDPOINT_INCLUSIVE:
        return np.arange(1, n + 1, dtype=np.float64) / n
    raise ValueError(f"unknown division rule {rule!r}; expected one of {DIVISION_RULES}")


def generate_internal_points(
    x_i: np.ndarray,
    x_j: np.ndarray,
    n: int,
    rule: str = RULE_EQUAL_PARTS,
    source_pair: tuple[int, int] = (0, 1),
    class_label: int = 1,
) -> SyntheticPointSet:
    """Generate n points dividing the segment from x_j to x_i.

    Point k is (k * x_i + (n + 1 - k) * x_j) / (n + 1) under the default
    rule, i.e. the k-th of the n points that cut the segment into n + 1
    equal parts.  The endpoint_inclusive rule uses denominator n instead,
    which makes point n coincide with x_i.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape or x_i.ndim != 1:
        raise DimensionMismatch(f"source points must be equal-length vectors, got {x_i.shape} and {x_j.shape}")
    lam = division_fractions(n, rule)
    points = lam[:, None] * x_i[None, :] + (1.0 - lam)[:, None] * x_j[None, :]
    return SyntheticPointSet(
        points=points,
        source_pair=source_pair,
        class_label=class_label,
        normalized=False,
        fractions=lam,
    )


def normalize_synthetics(s: SyntheticPointSet) -> SyntheticPointSet:
    """Project a synthetic point set onto the unit sphere.

    The input set must be unnormalized; the pre-normalization norms are
    retained on the result for gradient chaining.
    """
    if s.normalized:
        raise ValueError("point set is already normalized")
    norms = np.linalg.norm(s.points, axis=1)
    bad = np.nonzero(norms <= ZERO_NORM_TOL)[0]
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return SyntheticPointSet(
        points=s.points / norms[:, None],
        source_pair=s.source_pair,
        class_label=s.class_label,
        normalized=True,
        fractions=s.fractions,
        prenorm=norms,
    )


def positive_pairs(labels: np.ndarray) -> np.ndarray:
    """All unordered same-class index pairs (i, j) with i < j, ascending.

    Groups are processed per distinct class size so the cost stays flat in
    the number of classes.
    """
    labels = np.asarray(labels)
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    boundaries = np.nonzero(np.diff(sorted_labels))[0] + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [labels.shape[0]]))
    sizes = ends - starts
    out = []
    for g in np.unique(sizes):
        if g < 2:
            continue
        group_starts = starts[sizes == g]
        # (m, g) member indices for every group of this size at once
        members = order[group_starts[:, None] + np.arange(g)[None, :]]
        members.sort(axis=1)
        r, s = np.triu_indices(int(g), k=1)
        out.append(np.stack((members[:, r], members[:, s]), axis=2).reshape(-1, 2))
    if not out:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.concatenate(out, axis=0)
    keys = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[keys]


def expand_batch(
    batch: EmbeddingBatch,
    n: int,
    normalize: bool,
    rule: str = RULE_EQUAL_PARTS,
) -> AugmentedBatch:
    """Append n synthetic points per same-class pair to a batch.

    Classes with a single member contribute no pairs and therefore no
    synthetics; they still appear among the original rows.  Synthetic rows
    inherit the class label of their source pair and are L2-normalized
    when ``normalize`` is set.
    """
    if n < 1:
        raise InvalidN(f"need n >= 1, got {n}; disable expansion instead of passing n=0")
    pairs = positive_pairs(batch.labels)
    lam = division_fractions(n, rule)
    p = pairs.shape[0]
    n_orig, dim = batch.n, batch.dim
    if p == 0:
        data = batch.data.copy()
        syn_labels = np.empty(0, dtype=np.int64)
        pair_index = np.empty(0, dtype=np.int64)
        fractions = np.empty(0, dtype=np.float64)
        prenorm = np.empty(0, dtype=np.float64) if normalize else None
    else:
        # One output allocation: originals up front, synthetics written
        # straight into the tail (pair-major, n points per pair).
        data = np.empty((n_orig + p * n, dim), dtype=np.float64)
        data[:n_orig] = batch.data
        xi = batch.data[pairs[:, 0]]          # (P, D)
        xj = batch.data[pairs[:, 1]]
        tail = data[n_orig:].reshape(p, n, dim)
        np.einsum("k,pd->pkd", lam, xi - xj, out=tail)
        tail += xj[:, None, :]
        syn = data[n_orig:]
        pair_index = np.repeat(np.arange(p, dtype=np.int64), n)
        fractions = np.tile(lam, p)
        syn_labels = batch.labels[pairs[pair_index, 0]]
        prenorm = None
        if normalize:
            prenorm = np.sqrt(np.einsum("ij,ij->i", syn, syn))
            bad = np.nonzero(prenorm <= ZERO_NORM_TOL)[0]
            if bad.size:
                raise ZeroNormRow(int(n_orig + bad[0]))
            syn /= prenorm[:, None]
    return AugmentedBatch(
        data=data,
        labels=np.concatenate((batch.labels, syn_labels)),
        num_original=n_orig,
        pairs=pairs,
        syn_pair_index=pair_index,
        syn_fraction=fractions,
        syn_prenorm=prenorm,
        normalized=normalize,
    )
