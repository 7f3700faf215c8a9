"""Pair-based metric learning losses with analytic gradients.

Five base losses (triplet, batch-hard triplet, lifted structured, N-pair,
multi-similarity) and, for each, a variant that mines hard negative pairs
over a batch expanded with synthetic points.  Every loss returns its
scalar value together with the gradient with respect to the original
embedding rows; gradients flow through synthetic points by the
interpolation chain rule and, when synthetics are normalized, through the
projection Jacobian.  Min/max selections and mining conditions are treated
as constant within one evaluation (subgradient convention), and the hinge
subgradient at exactly zero is zero.

A central finite-difference oracle is included for verification; it
re-runs mining and selection at every perturbed point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoPositivePairs
from .geometry import (
    DIVISION_RULES,
    RULE_EQUAL_PARTS,
    AugmentedBatch,
    EmbeddingBatch,
    expand_batch,
    pairwise_similarity,
    pairwise_sq_distance,
    positive_pairs,
)
from .mining import MiningTrace, batch_hard_core, class_pair_extremes

LOSS_KINDS = ("triplet", "hphn_triplet", "lifted", "npair", "multisim")


@dataclass
class ExpansionConfig:
    enabled: bool = False
    n: int = 2
    normalize: bool = True
    rule: str = RULE_EQUAL_PARTS

    def __post_init__(self):
        if self.enabled and self.n < 1:
            raise ValueError(f"expansion needs n >= 1, got {self.n}")
        if self.rule not in DIVISION_RULES:
            raise ValueError(f"unknown division rule {self.rule!r}")


@dataclass
class LossConfig:
    """Hyper-parameters for every loss kind plus the expansion switch.

    ``triplet_inner`` selects how the triplet sum over negatives is
    normalized: "mean" averages over the valid negatives of each positive
    pair, "sum" leaves the inner sum unnormalized.
    """

    kind: str = "triplet"
    margin: float = 1.0
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_lambda: float = 1.0
    ms_eps: float = 0.1
    npair_reg_coeff: float = 0.005
    triplet_inner: str = "mean"
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.ms_alpha <= 0 or self.ms_beta <= 0:
            raise ValueError("ms_alpha and ms_beta must be > 0")
        if self.ms_eps < 0:
            raise ValueError("ms_eps must be >= 0")
        if self.npair_reg_coeff < 0:
            raise ValueError("npair_reg_coeff must be >= 0")
        if self.triplet_inner not in ("mean", "sum"):
            raise ValueError("triplet_inner must be 'mean' or 'sum'")
        if isinstance(self.expansion, dict):
            self.expansion = ExpansionConfig(**self.expansion)


@dataclass
class LossResult:
    """Scalar loss plus gradient w.r.t. the original embedding rows."""

    value: float
    grad: np.ndarray
    contributing_terms: int


def _expand(batch: EmbeddingBatch, config: LossConfig) -> AugmentedBatch:
    e = config.expansion
    if not e.enabled:
        raise ValueError("expansion-dependent loss called with expansion disabled")
    return expand_batch(batch, e.n, e.normalize, e.rule)


def _require_pairs(batch: EmbeddingBatch) -> np.ndarray:
    pairs = positive_pairs(batch.labels)
    if pairs.shape[0] == 0:
        raise NoPositivePairs("batch contains no same-class pair")
    return pairs


def _class_index(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    classes, inverse = np.unique(labels, return_inverse=True)
    return classes, inverse


def _cell_table(best: dict, classes: np.ndarray, fill: float) -> np.ndarray:
    c = classes.shape[0]
    table = np.full((c, c), fill)
    for (a, b), v in best.items():
        ia = int(np.searchsorted(classes, a))
        ib = int(np.searchsorted(classes, b))
        table[ia, ib] = v
    return table


def _one_hot(idx: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((idx.shape[0], width))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


def _pair_class_events(pair_class: np.ndarray, class_of: np.ndarray, n_classes: int) -> np.ndarray:
    """Mining-event counts per (pair class, negative class) cell.

    Each positive pair mines once against every other class present.
    """
    present = np.zeros(n_classes, dtype=np.int64)
    np.add.at(present, class_of, 1)
    per_class_pairs = np.zeros(n_classes, dtype=np.int64)
    np.add.at(per_class_pairs, pair_class, 1)
    events = np.outer(per_class_pairs, (present > 0).astype(np.int64))
    np.fill_diagonal(events, 0)
    return events


def _record_cell_trace(
    trace: MiningTrace | None,
    counts: np.ndarray,
    best_index: dict,
    classes: np.ndarray,
    is_synthetic: np.ndarray,
) -> None:
    """Log provenance of each cell's selected pair, once per mining event."""
    if trace is None:
        return
    for (a, b), (p, n) in best_index.items():
        ia = int(np.searchsorted(classes, a))
        ib = int(np.searchsorted(classes, b))
        c = int(counts[ia, ib])
        if c <= 0:
            continue
        syn = int(bool(is_synthetic[p])) + int(bool(is_synthetic[n]))
        trace.synthetic_members += c * syn
        trace.original_members += c * (2 - syn)


# ---------------------------------------------------------------------------
# Triplet


def triplet_loss(
    batch: EmbeddingBatch,
    config: LossConfig,
    *,
    trace: MiningTrace | None = None,
    want_grad: bool = True,
) -> LossResult:
    """Hinge of d2(anchor, positive) - d2(anchor, negative) + margin.

    The outer sum runs over positive pairs (anchor is the lower index) and
    is averaged by the pair count; the inner sum over negatives is
    averaged or summed per ``triplet_inner``.
    """
    pairs = _require_pairs(batch)
    e, y = batch.data, batch.labels
    p = pairs.shape[0]
    pi, pj = pairs[:, 0], pairs[:, 1]
    d2 = pairwise_sq_distance(e, e)
    neg_mask = y[None, :] != y[pi][:, None]
    counts = neg_mask.sum(axis=1)
    z = d2[pi, pj][:, None] - d2[pi, :] + config.margin
    active = neg_mask & (z > 0.0)
    if config.triplet_inner == "mean":
        w_pair = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / p
    else:
        w_pair = np.full(p, 1.0 / p)
    w = np.where(active, w_pair[:, None], 0.0)
    value = float(np.sum(w * np.where(active, z, 0.0)))
    contributing = int(active.sum())
    if not want_grad:
        return LossResult(value, np.zeros_like(e), contributing)

    grad = np.zeros_like(e)
    c = w.sum(axis=1)
    diff_ij = e[pi] - e[pj]
    np.add.at(grad, pi, 2.0 * c[:, None] * diff_ij)
    np.add.at(grad, pj, -2.0 * c[:, None] * diff_ij)
    # negative term: -d2(i, k) differentiated w.r.t. x_i and x_k
    np.add.at(grad, pi, 2.0 * (w @ e - c[:, None] * e[pi]))
    grad += 2.0 * (w.T @ e[pi] - w.sum(axis=0)[:, None] * e)
    return LossResult(value, grad, contributing)


def expanded_triplet_loss(
    batch: EmbeddingBatch,
    config: LossConfig,
    *,
    trace: MiningTrace | None = None,
    want_grad: bool = True,
) -> LossResult:
    """Triplet loss with the negative term min-pooled over candidate pairs.

    For each positive pair and negative point the squared-distance term is
    replaced by the minimum over all (p, n) candidates between the two
    classes in the expanded batch.
    """
    aug = _expand(batch, config)
    pairs = aug.pairs
    if pairs.shape[0] == 0:
        raise NoPositivePairs("batch contains no same-class pair")
    e, y = batch.data, batch.labels
    p = pairs.shape[0]
    pi, pj = pairs[:, 0], pairs[:, 1]

    d2_aug = pairwise_sq_distance(aug.data, aug.data)
    best_val, best_idx = class_pair_extremes(d2_aug, aug.labels, aug.labels, mode="min")
    classes, class_of = _class_index(y)
    table = _cell_table(best_val, classes, np.inf)

    neg_mask = y[None, :] != y[pi][:, None]
    counts = neg_mask.sum(axis=1)
    pooled = table[class_of[pi][:, None], class_of[None, :]]
    with np.errstate(invalid="ignore"):
        z = d2_aug[pi, pj][:, None] - pooled + config.margin
    active = neg_mask & (z > 0.0)
    if config.triplet_inner == "mean":
        w_pair = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / p
    else:
        w_pair = np.full(p, 1.0 / p)
    w = np.where(active, w_pair[:, None], 0.0)
    value = float(np.sum(w * np.where(active, z, 0.0)))
    contributing = int(active.sum())

    if trace is not None:
        events = _pair_class_events(class_of[pi], class_of, classes.size)
        _record_cell_trace(trace, events, best_idx, classes, aug.is_synthetic)

    if not want_grad:
        return LossResult(value, np.zeros_like(e), contributing)

    grad_aug = np.zeros_like(aug.data)
    c = w.sum(axis=1)
    diff_ij = e[pi] - e[pj]
    np.add.at(grad_aug, pi, 2.0 * c[:, None] * diff_ij)
    np.add.at(grad_aug, pj, -2.0 * c[:, None] * diff_ij)

    # Pooled negative term: accumulate hinge weights per class-pair cell,
    # then push the gradient through each cell's selected candidate pair.
    cell_w = np.zeros((classes.size, classes.size))
    np.add.at(cell_w, (class_of[pi],), w @ _one_hot(class_of, classes.size))
    for (a, b), (sp, sn) in best_idx.items():
        ia = int(np.searchsorted(classes, a))
        ib = int(np.searchsorted(classes, b))
        u = cell_w[ia, ib]
        if u == 0.0:
            continue
        diff = aug.data[sp] - aug.data[sn]
        grad_aug[sp] += -2.0 * u * diff
        grad_aug[sn] += 2.0 * u * diff
    grad = aug.collapse_gradient(grad_aug)
    return LossResult(value, grad, contributing)


# ---------------------------------------------------------------------------
# Batch-hard (hardest positive / hardest negative) triplet


def _hphn_impl(
    batch: EmbeddingBatch,
    config: LossConfig,
    expanded: bool,
    trace: MiningTrace | None,
    want_grad: bool,
) -> LossResult:
    e, y = batch.data, batch.labels
    if expanded:
        aug = _expand(batch, config)
        rows = aug.data
        all_labels = aug.labels
        synth = aug.is_synthetic
    else:
        aug = None
        rows = e
        all_labels = y
        synth = np.zeros(batch.n, dtype=bool)

    d2 = pairwise_sq_distance(e, rows)
    anchors_all = np.arange(batch.n)
    pos, neg, valid = batch_hard_core(d2, anchors_all, y, all_labels, synth)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return LossResult(0.0, np.zeros_like(e), 0)

    anchors = np.nonzero(valid)[0]
    hp = pos[anchors]
    hn = neg[anchors]
    z = d2[anchors, hp] - d2[anchors, hn] + config.margin
    hinge = np.maximum(z, 0.0)
    value = float(hinge.sum() / n_valid)

    if trace is not None:
        trace.record_many(np.zeros(n_valid, dtype=bool), synth[hn])

    if not want_grad:
        return LossResult(value, np.zeros_like(e), n_valid)

    act = z > 0.0
    grad_rows = np.zeros_like(rows)
    a_act = anchors[act]
    hp_act = hp[act]
    hn_act = hn[act]
    wgt = 1.0 / n_valid
    diff_pos = e[a_act] - rows[hp_act]
    diff_neg = e[a_act] - rows[hn_act]
    np.add.at(grad_rows, a_act, 2.0 * wgt * (diff_pos - diff_neg))
    np.add.at(grad_rows, hp_act, -2.0 * wgt * diff_pos)
    np.add.at(grad_rows, hn_act, 2.0 * wgt * diff_neg)
    grad = aug.collapse_gradient(grad_rows) if aug is not None else grad_rows
    return LossResult(value, grad, n_valid)


def hphn_triplet_loss(batch, config, *, trace=None, want_grad=True) -> LossResult:
    """Batch-hard triplet: per anchor, farthest positive vs closest negative."""
    return _hphn_impl(batch, config, False, trace, want_grad)


def expanded_hphn_triplet_loss(batch, config, *, trace=None, want_grad=True) -> LossResult:
    """Batch-hard triplet with negatives drawn from the expanded batch."""
    return _hphn_impl(batch, config, True, trace, want_grad)


# ---------------------------------------------------------------------------
# Lifted structured


def _safe_inv(d: np.ndarray) -> np.ndarray:
    # Subgradient 0 at coincident points: 1/d with d == 0 mapped to 0.
    out = np.zeros_like(d)
    np.divide(1.0, d, out=out, where=d > 0.0)
    return out


def _masked_row_lse(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp over masked entries, with max shifting.

    Returns (lse, shifted_exp) where rows with no unmasked entry get -inf
    and an all-zero exp row.  shifted_exp[r, k] = exp(values[r, k] - lse[r])
    for unmasked entries, zero elsewhere.
    """
    neg_inf = np.where(mask, values, -np.inf)
    row_max = neg_inf.max(axis=1, initial=-np.inf)
    finite = np.isfinite(row_max)
    safe_max = np.where(finite, row_max, 0.0)
    with np.errstate(invalid="ignore"):
        shifted = np.exp(neg_inf - safe_max[:, None], where=mask, out=np.zeros_like(values, dtype=np.float64))
    row_sum = shifted.sum(axis=1)
    lse = np.where(finite, safe_max + np.log(np.maximum(row_sum, 1e-300)), -np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(finite[:, None] & mask, shifted / np.maximum(row_sum, 1e-300)[:, None], 0.0)
    return lse, rel


def lifted_loss(
    batch: EmbeddingBatch,
    config: LossConfig,
    *,
    trace: MiningTrace | None = None,
    want_grad: bool = True,
) -> LossResult:
    """Squared hinge of log-sum-exp(margin - distance) plus the pair distance.

    Both anchors of each positive pair contribute their negative sums; the
    log-sum-exp is evaluated with max shifting so large margins cannot
    overflow.
    """
    pairs = _require_pairs(batch)
    e, y = batch.data, batch.labels
    p = pairs.shape[0]
    pi, pj = pairs[:, 0], pairs[:, 1]
    dist = np.sqrt(pairwise_sq_distance(e, e))
    neg_mask = y[None, :] != y[:, None]

    log_t, rel = _masked_row_lse(config.margin - dist, neg_mask)
    log_s = np.logaddexp(log_t[pi], log_t[pj])
    inner = log_s + dist[pi, pj]
    hinged = np.where(inner > 0.0, inner, 0.0)
    value = float(np.sum(hinged**2) / (2.0 * p))
    contributing = int((inner > 0.0).sum())
    if not want_grad:
        return LossResult(value, np.zeros_like(e), contributing)

    grad = np.zeros_like(e)
    c = hinged / p

    inv_dij = _safe_inv(dist[pi, pj])
    v = (c * inv_dij)[:, None] * (e[pi] - e[pj])
    np.add.at(grad, pi, v)
    np.add.at(grad, pj, -v)

    # log-sum part: rel[r, k] = exp(a_rk - log_t[r]) is the anchor-local
    # softmax; exp(log_t[r] - log_s[t]) <= 1 is the anchor's share of the
    # pooled sum.  Both are bounded, so any margin stays finite.
    u = np.zeros(batch.n)
    with np.errstate(invalid="ignore"):
        mass_i = np.where(np.isfinite(log_s), np.exp(np.minimum(log_t[pi] - log_s, 0.0)), 0.0)
        mass_j = np.where(np.isfinite(log_s), np.exp(np.minimum(log_t[pj] - log_s, 0.0)), 0.0)
    np.add.at(u, pi, c * mass_i)
    np.add.at(u, pj, c * mass_j)
    # dL/d(d_rk) = -u_r rel_rk, so x_r picks up u_r rel_rk (x_k - x_r) / d_rk
    b = u[:, None] * rel * _safe_inv(dist)
    grad += (b @ e) - b.sum(axis=1)[:, None] * e
    grad += (b.T @ e) - b.sum(axis=0)[:, None] * e
    return LossResult(value, grad, contributing)


def expanded_lifted_loss(
    batch: EmbeddingBatch,
    config: LossConfig,
    *,
    trace: MiningTrace | None = None,
    want_grad: bool = True,
) -> LossResult:
    """Lifted loss with one min-pooled distance term per negative class.

    The two per-anchor negative sums collapse into a single sum over
    negative classes, each contributing exp(margin - pooled distance)
    where the pooled distance is the minimum over candidate pairs between
    the two classes of the expanded batch; the prefactor is 1/|pairs|.
    """
    aug = _expand(batch, config)
    pairs = aug.pairs
    if pairs.shape[0] == 0:
        raise NoPositivePairs("batch contains no same-class pair")
    e, y = batch.data, batch.labels
    p = pairs.shape[0]
    pi, pj = pairs[:, 0], pairs[:, 1]

    d2_aug = pairwise_sq_distance(aug.data, aug.data)
    best_val, best_idx = class_pair_extremes(d2_aug, aug.labels, aug.labels, mode="min")
    classes, class_of = _class_index(y)
    n_classes = classes.size
    pooled_d = np.sqrt(_cell_table(best_val, classes, np.inf))

    pair_class = class_of[pi]
    with np.errstate(invalid="ignore"):
        exponents = config.margin - pooled_d[pair_class]   # (P, C); self cell -> -inf
    cell_mask = np.isfinite(exponents)
    log_s, rel = _masked_row_lse(exponents, cell_mask)
    d_ij = np.sqrt(d2_aug[pi, pj])
    inner = log_s + d_ij
    hinged = np.where(inner > 0.0, inner, 0.0)
    value = float(np.sum(hinged**2) / p)
    contributing = int((inner > 0.0).sum())

    if trace is not None:
        events = _pair_class_events(pair_class, class_of, n_classes)
        _record_cell_trace(trace, events, best_idx, classes, aug.is_synthetic)

    if not want_grad:
        return LossResult(value, np.zeros_like(e), contributing)

    grad_aug = np.zeros_like(aug.data)
    c = 2.0 * hinged / p

    inv_dij = _safe_inv(d_ij)
    v = (c * inv_dij)[:, None] * (e[pi] - e[pj])
    np.add.at(grad_aug, pi, v)
    np.add.at(grad_aug, pj, -v)

    # d/d(pooled distance) of the log term is -rel; accumulate per cell and
    # push through the selected candidate pair.
    cell_w = np.zeros((n_classes, n_classes))
    np.add.at(cell_w, (pair_class,), -(c[:, None] * rel))
    for (a, b), (sp, sn) in best_idx.items():
        ia = int(np.searchsorted(classes, a))
        ib = int(np.searchsorted(classes, b))
        u = cell_w[ia, ib]
        if u == 0.0:
            continue
        d_pn = pooled_d[ia, ib]
        if d_pn <= 0.0:
            continue
        diff = (aug.data[sp] - aug.data[sn]) / d_pn
        grad_aug[sp] += u * diff
        grad_aug[sn] -= u * diff
    grad = aug.collapse_gradient(grad_aug)
    return LossResult(value, grad, contributing)


# ---------------------------------------------------------------------------
# N-pair


def _npair_impl(
    batch: EmbeddingBatch,
    config: LossConfig,
    expanded: bool,
    trace: MiningTrace | None,
    want_grad: bool,
) -> LossResult:
    e, y = batch.data, batch.labels
    if expanded:
        aug = _expand(batch, config)
        pairs = aug.pairs
        if pairs.shape[0] == 0:
            raise NoPositivePairs("batch contains no same-class pair")
    else:
        pairs = _require_pairs(batch)
    n, p = batch.n, pairs.shape[0]
    pi, pj = pairs[:, 0], pairs[:, 1]

    if expanded:
        sim_aug = pairwise_similarity(aug.data, aug.data)
        best_val, best_idx = class_pair_extremes(sim_aug, aug.labels, aug.labels, mode="max")
        classes, class_of = _class_index(y)
        table = _cell_table(best_val, classes, -np.inf)
        s_pos = sim_aug[pi, pj]
        source = table[class_of[pi][:, None], class_of[None, :]]
    else:
        aug = None
        sim = pairwise_similarity(e, e)
        s_pos = sim[pi, pj]
        source = sim[pi, :]

    neg_mask = y[None, :] != y[pi][:, None]
    with np.errstate(invalid="ignore"):
        z = np.where(neg_mask, source - s_pos[:, None], -np.inf)
    # log(1 + sum exp(z)) with the implicit zero slot kept in the shift
    row_max = np.maximum(z.max(axis=1, initial=-np.inf), 0.0)
    with np.errstate(invalid="ignore"):
        expz = np.exp(z - row_max[:, None], where=neg_mask, out=np.zeros((p, n)))
    denom = np.exp(-row_max) + expz.sum(axis=1)
    log_terms = row_max + np.log(denom)
    reg = config.npair_reg_coeff * float(np.einsum("ij,ij->", e, e)) / n
    value = float(log_terms.mean() + reg)

    if expanded and trace is not None:
        events = _pair_class_events(class_of[pi], class_of, classes.size)
        _record_cell_trace(trace, events, best_idx, classes, aug.is_synthetic)

    if not want_grad:
        return LossResult(value, np.zeros_like(e), p)

    w = expz / denom[:, None] / p          # (P, N) weights on each z term
    c = w.sum(axis=1)
    if expanded:
        grad_aug = np.zeros_like(aug.data)
        np.add.at(grad_aug, pi, -c[:, None] * e[pj])
        np.add.at(grad_aug, pj, -c[:, None] * e[pi])
        cell_w = np.zeros((classes.size, classes.size))
        np.add.at(cell_w, (class_of[pi],), w @ _one_hot(class_of, classes.size))
        for (a, b), (sp, sn) in best_idx.items():
            ia = int(np.searchsorted(classes, a))
            ib = int(np.searchsorted(classes, b))
            u = cell_w[ia, ib]
            if u == 0.0:
                continue
            grad_aug[sp] += u * aug.data[sn]
            grad_aug[sn] += u * aug.data[sp]
        grad = aug.collapse_gradient(grad_aug)
    else:
        grad = np.zeros_like(e)
        np.add.at(grad, pi, w @ e - c[:, None] * e[pj])
        grad += w.T @ e[pi]
        np.add.at(grad, pj, -c[:, None] * e[pi])
    grad += (2.0 * config.npair_reg_coeff / n) * e
    return LossResult(value, grad, p)


def npair_loss(batch, config, *, trace=None, want_grad=True) -> LossResult:
    """log(1 + sum exp(s_neg - s_pos)) per pair, plus an L2-norm regularizer.

    Embeddings are expected unnormalized; the regularizer keeps their
    norms small instead.
    """
    return _npair_impl(batch, config, False, trace, want_grad)


def expanded_npair_loss(batch, config, *, trace=None, want_grad=True) -> LossResult:
    """N-pair loss with negative similarities max-pooled over candidate pairs."""
    return _npair_impl(batch, config, True, trace, want_grad)


# ---------------------------------------------------------------------------
# Multi-similarity


def _ms_selection_masks(
    sim: np.ndarray,
    labels: np.ndarray,
    eps: float,
    pooled: np.ndarray | None = None,
    class_of: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (anchor, candidate) masks for mined positives and negatives.

    ``pooled`` (classes x classes best candidate-pair similarity) switches
    the negative condition to its pooled form; thresholds always come from
    original rows.
    """
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)

    neg_threshold = np.where(same, sim, np.inf).min(axis=1) - eps
    diff_any = (~same).any(axis=1)
    pos_threshold = np.where(
        diff_any, np.where(~same, sim, -np.inf).max(axis=1) + eps, -np.inf
    )

    pos_mask = same & ~eye & (sim < pos_threshold[:, None])
    if pooled is None:
        neg_mask = ~same & (sim > neg_threshold[:, None])
    else:
        pooled_ij = pooled[class_of[:, None], class_of[None, :]]
        neg_mask = ~same & (pooled_ij > neg_threshold[:, None])
    return pos_mask, neg_mask


def _ms_impl(
    batch: EmbeddingBatch,
    config: LossConfig,
    expanded: bool,
    trace: MiningTrace | None,
    want_grad: bool,
) -> LossResult:
    e, y = batch.data, batch.labels
    sim = pairwise_similarity(e, e)
    alpha, beta, lam = config.ms_alpha, config.ms_beta, config.ms_lambda

    if expanded:
        aug = _expand(batch, config)
        sim_aug = pairwise_similarity(aug.data, aug.data)
        best_val, best_idx = class_pair_extremes(sim_aug, aug.labels, aug.labels, mode="max")
        classes, class_of = _class_index(y)
        pooled = _cell_table(best_val, classes, -np.inf)
        pos_mask, neg_mask = _ms_selection_masks(sim, y, config.ms_eps, pooled, class_of)
    else:
        pos_mask, neg_mask = _ms_selection_masks(sim, y, config.ms_eps)

    has_pos = pos_mask.any(axis=1)
    has_neg = neg_mask.any(axis=1)
    contributing = int((has_pos | has_neg).sum())
    if contributing == 0:
        return LossResult(0.0, np.zeros_like(e), 0)

    # Positive part: (1/alpha) log(1 + sum exp(-alpha (s - lambda))).
    zp = -alpha * (sim - lam)
    mp = np.maximum(np.where(pos_mask, zp, -np.inf).max(axis=1, initial=-np.inf), 0.0)
    with np.errstate(invalid="ignore"):
        ep = np.exp(zp - mp[:, None], where=pos_mask, out=np.zeros_like(zp))
    denom_p = np.exp(-mp) + ep.sum(axis=1)
    pos_term = np.where(has_pos, mp + np.log(denom_p), 0.0)

    # Negative part: (1/beta) log(sum exp(beta (s - lambda))); an empty
    # mined set contributes nothing rather than log(0).
    zn = beta * (sim - lam)
    mn = np.where(neg_mask, zn, -np.inf).max(axis=1, initial=-np.inf)
    mn_safe = np.where(has_neg, mn, 0.0)
    with np.errstate(invalid="ignore"):
        en = np.exp(zn - mn_safe[:, None], where=neg_mask, out=np.zeros_like(zn))
    sum_n = en.sum(axis=1)
    neg_term = np.where(has_neg, mn_safe + np.log(np.maximum(sum_n, 1e-300)), 0.0)

    value = float((pos_term.sum() / alpha + neg_term.sum() / beta) / contributing)

    if expanded and trace is not None:
        cell_counts = np.zeros((classes.size, classes.size), dtype=np.int64)
        sel_i, sel_j = np.nonzero(neg_mask)
        np.add.at(cell_counts, (class_of[sel_i], class_of[sel_j]), 1)
        _record_cell_trace(trace, cell_counts, best_idx, classes, aug.is_synthetic)

    if not want_grad:
        return LossResult(value, np.zeros_like(e), contributing)

    u = ep / denom_p[:, None]
    v = np.zeros_like(en)
    np.divide(en, sum_n[:, None], out=v, where=(sum_n[:, None] > 0))
    coeff = (-u + v) / contributing
    grad = coeff @ e + coeff.T @ e
    return LossResult(value, grad, contributing)


def ms_loss(batch, config, *, trace=None, want_grad=True) -> LossResult:
    """Multi-similarity loss over mined positive and negative sets."""
    return _ms_impl(batch, config, False, trace, want_grad)


def expanded_ms_loss(batch, config, *, trace=None, want_grad=True) -> LossResult:
    """Multi-similarity loss whose negative mining pools candidate pairs."""
    return _ms_impl(batch, config, True, trace, want_grad)


# ---------------------------------------------------------------------------
# Dispatch


_BASE = {
    "triplet": triplet_loss,
    "hphn_triplet": hphn_triplet_loss,
    "lifted": lifted_loss,
    "npair": npair_loss,
    "multisim": ms_loss,
}
_EXPANDED = {
    "triplet": expanded_triplet_loss,
    "hphn_triplet": expanded_hphn_triplet_loss,
    "lifted": expanded_lifted_loss,
    "npair": expanded_npair_loss,
    "multisim": expanded_ms_loss,
}


def compute_loss(
    batch: EmbeddingBatch,
    config: LossConfig,
    *,
    trace: MiningTrace | None = None,
    want_grad: bool = True,
) -> LossResult:
    """Evaluate the configured loss, expanded variant when enabled."""
    table = _EXPANDED if config.expansion.enabled else _BASE
    return table[config.kind](batch, config, trace=trace, want_grad=want_grad)


def loss_variants() -> list[tuple[str, bool]]:
    """All (kind, expanded) combinations, base variants first."""
    return [(k, False) for k in LOSS_KINDS] + [(k, True) for k in LOSS_KINDS]


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_grad(loss_value_fn, data: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix.

    The function is re-evaluated from scratch at every perturbed point, so
    mining and selections are recomputed as well.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    data = np.asarray(data, dtype=np.float64)
    grad = np.zeros_like(data)
    work = data.copy()
    for idx in np.ndindex(*data.shape):
        orig = work[idx]
        work[idx] = orig + h
        f_plus = loss_value_fn(work)
        work[idx] = orig - h
        f_minus = loss_value_fn(work)
        work[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def loss_value_fn(labels: np.ndarray, config: LossConfig):
    """Closure mapping an embedding matrix to the configured loss value."""

    def fn(data: np.ndarray) -> float:
        return compute_loss(EmbeddingBatch(data, labels), config, want_grad=False).value

    return fn


def gradient_relative_error(batch: EmbeddingBatch, config: LossConfig, h: float = 1e-6) -> float:
    """Max per-coordinate relative error of the analytic gradient vs the oracle.

    The denominator is floored at 1 so coordinates with near-zero gradient
    are compared absolutely; finite differences at h=1e-6 carry roughly
    1e-10 of noise, leaving ample headroom below the 1e-5 acceptance line.
    """
    analytic = compute_loss(batch, config, want_grad=True).grad
    numeric = finite_diff_grad(loss_value_fn(batch.labels, config), batch.data, h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Decision margins (distance to the nearest hinge kink or selection tie)


def _top2_gap(values: np.ndarray) -> float:
    if values.size < 2:
        return np.inf
    two = np.partition(values, 1)[:2]
    return float(abs(two[1] - two[0]))


def _cell_gaps(matrix: np.ndarray, labels: np.ndarray, mode: str) -> float:
    """Smallest best-vs-runner-up gap over all ordered class-pair cells."""
    gap = np.inf
    classes = np.unique(labels)
    rows = {int(c): np.nonzero(labels == c)[0] for c in classes}
    for a in classes:
        for b in classes:
            if a == b:
                continue
            block = matrix[np.ix_(rows[int(a)], rows[int(b)])].ravel()
            if mode == "max":
                block = -block
            gap = min(gap, _top2_gap(block))
    return gap


def decision_margin(batch: EmbeddingBatch, config: LossConfig) -> float:
    """Distance of the batch to the nearest nondifferentiable decision.

    Covers hinge kinks, min/max selection ties, mining-condition boundary
    crossings, and near-coincident points under square roots.  Batches
    with a small margin are unsuitable for finite-difference checks since
    the perturbation itself can flip a decision.
    """
    e, y = batch.data, batch.labels
    expanded = config.expansion.enabled
    margin = np.inf
    pairs = positive_pairs(y)

    if expanded:
        aug = _expand(batch, config)
        d2_aug = pairwise_sq_distance(aug.data, aug.data)
        sim_aug = pairwise_similarity(aug.data, aug.data)

    kind = config.kind
    if kind in ("triplet", "lifted", "npair") and pairs.shape[0] == 0:
        return margin
    if kind == "triplet":
        pi, pj = pairs[:, 0], pairs[:, 1]
        if expanded:
            best_val, _ = class_pair_extremes(d2_aug, aug.labels, aug.labels, mode="min")
            classes, class_of = _class_index(y)
            table = _cell_table(best_val, classes, np.inf)
            pooled = table[class_of[pi][:, None], class_of[None, :]]
            z = d2_aug[pi, pj][:, None] - pooled + config.margin
            margin = min(margin, _cell_gaps(d2_aug, aug.labels, "min"))
        else:
            d2 = pairwise_sq_distance(e, e)
            z = d2[pi, pj][:, None] - d2[pi, :] + config.margin
        mask = y[None, :] != y[pi][:, None]
        if mask.any():
            margin = min(margin, float(np.abs(z[mask]).min()))
    elif kind == "hphn_triplet":
        if expanded:
            d2 = pairwise_sq_distance(e, aug.data)
            all_labels, synth = aug.labels, aug.is_synthetic
        else:
            d2 = pairwise_sq_distance(e, e)
            all_labels, synth = y, np.zeros(batch.n, dtype=bool)
        anchors_all = np.arange(batch.n)
        pos, neg, valid = batch_hard_core(d2, anchors_all, y, all_labels, synth)
        same = y[:, None] == all_labels[None, :]
        pos_ok = same & ~synth[None, :]
        pos_ok[anchors_all, anchors_all] = False
        for a in np.nonzero(valid)[0]:
            margin = min(margin, _top2_gap(-d2[a][pos_ok[a]]))   # max selection
            margin = min(margin, _top2_gap(d2[a][~same[a]]))     # min selection
            z = d2[a, pos[a]] - d2[a, neg[a]] + config.margin
            margin = min(margin, abs(float(z)))
    elif kind == "lifted":
        pi, pj = pairs[:, 0], pairs[:, 1]
        if expanded:
            best_val, _ = class_pair_extremes(d2_aug, aug.labels, aug.labels, mode="min")
            classes, class_of = _class_index(y)
            pooled_d = np.sqrt(_cell_table(best_val, classes, np.inf))
            with np.errstate(invalid="ignore"):
                exponents = config.margin - pooled_d[class_of[pi]]
            log_s, _ = _masked_row_lse(exponents, np.isfinite(exponents))
            inner = log_s + np.sqrt(d2_aug[pi, pj])
            margin = min(margin, _cell_gaps(d2_aug, aug.labels, "min"))
            off = d2_aug.copy()
            np.fill_diagonal(off, np.inf)
            margin = min(margin, float(np.sqrt(off.min())))
        else:
            dist = np.sqrt(pairwise_sq_distance(e, e))
            neg_mask = y[None, :] != y[:, None]
            log_t, _ = _masked_row_lse(config.margin - dist, neg_mask)
            inner = np.logaddexp(log_t[pi], log_t[pj]) + dist[pi, pj]
            if neg_mask.any():
                margin = min(margin, float(dist[neg_mask].min()))
        finite_inner = inner[np.isfinite(inner)]
        if finite_inner.size:
            margin = min(margin, float(np.abs(finite_inner).min()))
    elif kind == "npair":
        if expanded:
            margin = min(margin, _cell_gaps(sim_aug, aug.labels, "max"))
    elif kind == "multisim":
        sim = pairwise_similarity(e, e)
        same = y[:, None] == y[None, :]
        eye = np.eye(batch.n, dtype=bool)
        neg_thr = np.where(same, sim, np.inf).min(axis=1) - config.ms_eps
        diff_any = (~same).any(axis=1)
        pos_thr = np.where(diff_any, np.where(~same, sim, -np.inf).max(axis=1) + config.ms_eps, -np.inf)
        pos_cand = same & ~eye & np.isfinite(pos_thr)[:, None]
        if pos_cand.any():
            slack = np.abs(sim - pos_thr[:, None])[pos_cand]
            margin = min(margin, float(slack.min()))
        if expanded:
            best_val, _ = class_pair_extremes(sim_aug, aug.labels, aug.labels, mode="max")
            classes, class_of = _class_index(y)
            pooled = _cell_table(best_val, classes, -np.inf)
            pooled_ij = pooled[class_of[:, None], class_of[None, :]]
            slack = np.abs(pooled_ij - neg_thr[:, None])[~same]
            margin = min(margin, _cell_gaps(sim_aug, aug.labels, "max"))
        else:
            slack = np.abs(sim - neg_thr[:, None])[~same]
        if slack.size:
            margin = min(margin, float(slack.min()))
        for i in range(batch.n):
            margin = min(margin, _top2_gap(sim[i][same[i]]))          # min threshold
            if diff_any[i]:
                margin = min(margin, _top2_gap(-sim[i][~same[i]]))    # max threshold
    return margin
