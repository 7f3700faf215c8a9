"""Positive-pair enumeration and hard negative pair selection.

Candidate negative pairs for a positive pair of class a and a negative
class b are all (p, n) combinations where p is any row of class a and n
any row of class b, synthetic rows included on both sides.  Selection
pools the candidate set with min (squared distance) or max (similarity)
and breaks ties by lowest (p, n) lexicographic index, which makes every
selection total and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyCandidateSet,
    EmptyTrace,
    NoNegativeAvailable,
    NoPositiveAvailable,
)
from .geometry import AugmentedBatch, EmbeddingBatch, positive_pairs

PROV_ORIGINAL = "original"
PROV_SYNTHETIC = "synthetic"


def enumerate_positive_pairs(labels: np.ndarray) -> np.ndarray:
    """All unordered same-class pairs (i, j), i < j, in ascending order."""
    return positive_pairs(labels)


@dataclass
class PairCatalog:
    """Positive pairs plus, per (pair, negative class), the candidate pool.

    Candidate pools depend only on the class combination, so they are
    materialized lazily per ordered class pair and shared between pairs of
    the same class.
    """

    positive_pairs: np.ndarray      # (P, 2)
    pair_classes: np.ndarray        # (P,)
    labels: np.ndarray              # (M,) labels over all rows
    is_synthetic: np.ndarray        # (M,)
    _class_rows: dict = field(default_factory=dict, repr=False)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def class_rows(self, c: int) -> np.ndarray:
        key = int(c)
        if key not in self._class_rows:
            self._class_rows[key] = np.nonzero(self.labels == key)[0]
        return self._class_rows[key]

    def negative_classes(self, pair_id: int) -> np.ndarray:
        c = self.pair_classes[pair_id]
        return self.classes[self.classes != c]

    def candidate_pairs(self, pair_id: int, neg_class: int) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (p, n) candidate arrays in lexicographic order."""
        p_rows = self.class_rows(int(self.pair_classes[pair_id]))
        n_rows = self.class_rows(int(neg_class))
        if p_rows.size == 0 or n_rows.size == 0:
            raise EmptyCandidateSet(
                f"no candidates for pair {pair_id} against class {neg_class}"
            )
        p_idx = np.repeat(p_rows, n_rows.size)
        n_idx = np.tile(n_rows, p_rows.size)
        return p_idx, n_idx


def build_pair_catalog(batch: AugmentedBatch | EmbeddingBatch) -> PairCatalog:
    """Build the catalog over an augmented batch (or a plain batch)."""
    if isinstance(batch, AugmentedBatch):
        labels = batch.labels
        synthetic = batch.is_synthetic
        pairs = batch.pairs
    else:
        labels = batch.labels
        synthetic = np.zeros(labels.shape[0], dtype=bool)
        pairs = positive_pairs(labels)
    pair_classes = labels[pairs[:, 0]] if pairs.size else np.empty(0, dtype=np.int64)
    return PairCatalog(
        positive_pairs=pairs,
        pair_classes=pair_classes,
        labels=labels,
        is_synthetic=synthetic,
    )


@dataclass
class HardestPair:
    value: float
    pair: tuple[int, int]
    provenance: tuple[str, str]


def _provenance(catalog: PairCatalog, row: int) -> str:
    return PROV_SYNTHETIC if catalog.is_synthetic[row] else PROV_ORIGINAL


def hardest_negative_by_distance(
    catalog: PairCatalog, sq_dist: np.ndarray, pair_id: int, neg_class: int
) -> HardestPair:
    """Candidate pair minimizing squared distance; ties to lowest (p, n)."""
    p_idx, n_idx = catalog.candidate_pairs(pair_id, neg_class)
    values = sq_dist[p_idx, n_idx]
    best = int(np.argmin(values))
    pair = (int(p_idx[best]), int(n_idx[best]))
    return HardestPair(
        value=float(values[best]),
        pair=pair,
        provenance=(_provenance(catalog, pair[0]), _provenance(catalog, pair[1])),
    )


def hardest_negative_by_similarity(
    catalog: PairCatalog, sim: np.ndarray, pair_id: int, neg_class: int
) -> HardestPair:
    """Candidate pair maximizing similarity; ties to lowest (p, n)."""
    p_idx, n_idx = catalog.candidate_pairs(pair_id, neg_class)
    values = sim[p_idx, n_idx]
    best = int(np.argmax(values))
    pair = (int(p_idx[best]), int(n_idx[best]))
    return HardestPair(
        value=float(values[best]),
        pair=pair,
        provenance=(_provenance(catalog, pair[0]), _provenance(catalog, pair[1])),
    )


def class_pair_extremes(
    values: np.ndarray,
    row_labels: np.ndarray,
    col_labels: np.ndarray,
    mode: str,
) -> tuple[dict, dict]:
    """Per ordered class pair (a, b), the extreme entry of the (a, b) block.

    Returns (best_value, best_index) dicts keyed by (a, b) with a != b.
    ``values`` is indexed [row, col]; rows of class a are the p side and
    cols of class b the n side.  First-occurrence argmin/argmax over
    ascending row/col indices reproduces lowest-(p, n) tie-breaking.
    """
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
    reduce_arg = np.argmin if mode == "min" else np.argmax
    row_classes = np.unique(row_labels)
    col_classes = np.unique(col_labels)
    col_rows = {int(c): np.nonzero(col_labels == c)[0] for c in col_classes}
    row_rows = {int(c): np.nonzero(row_labels == c)[0] for c in row_classes}

    # Stage 1: per row, the extreme column within each column class.
    per_col = {}
    for c, cols in col_rows.items():
        block = values[:, cols]
        arg = reduce_arg(block, axis=1)
        per_col[c] = (cols[arg], block[np.arange(block.shape[0]), arg])

    best_value: dict = {}
    best_index: dict = {}
    for a, rows in row_rows.items():
        for b, (col_idx, col_val) in per_col.items():
            if a == b:
                continue
            vals = col_val[rows]
            arg = int(reduce_arg(vals))
            best_value[(a, b)] = float(vals[arg])
            best_index[(a, b)] = (int(rows[arg]), int(col_idx[rows[arg]]))
    return best_value, best_index


def batch_hard_core(
    d2_rows: np.ndarray,
    anchor_cols: np.ndarray,
    anchor_labels: np.ndarray,
    all_labels: np.ndarray,
    synth_mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hardest positive / hardest negative per anchor row of a rectangular
    distance matrix.

    ``d2_rows[r]`` holds the anchor's squared distances to every candidate
    column; ``anchor_cols[r]`` is the anchor's own column (excluded from
    positives).  Positives are same-class non-synthetic columns, negatives
    any different-class column.  Ties go to the lowest column index.
    Returns (pos_idx, neg_idx, valid) with -1 entries where invalid.
    """
    n_anchor = d2_rows.shape[0]
    same = anchor_labels[:, None] == all_labels[None, :]
    pos_ok = same & ~synth_mask[None, :]
    pos_ok[np.arange(n_anchor), anchor_cols] = False
    neg_ok = ~same
    has_pos = pos_ok.any(axis=1)
    has_neg = neg_ok.any(axis=1)
    pos = np.argmax(np.where(pos_ok, d2_rows, -np.inf), axis=1)
    neg = np.argmin(np.where(neg_ok, d2_rows, np.inf), axis=1)
    valid = has_pos & has_neg
    return (
        np.where(valid, pos, -1).astype(np.int64),
        np.where(valid, neg, -1).astype(np.int64),
        valid,
    )


def batch_hard_pairs(
    sq_dist: np.ndarray,
    labels: np.ndarray,
    synth_mask: np.ndarray,
    on_missing: str = "raise",
) -> tuple[np.ndarray, np.ndarray]:
    """Per original anchor, the hardest positive and hardest negative.

    The hardest positive is the farthest same-class original (synthetics
    never serve as positives); the hardest negative is the closest
    different-class row, synthetic or original.  Ties go to the lowest row
    index.  With on_missing="skip", anchors lacking a positive or a
    negative get -1 in both outputs instead of raising.
    """
    labels = np.asarray(labels)
    synth_mask = np.asarray(synth_mask, dtype=bool)
    anchors = np.nonzero(~synth_mask)[0]
    pos, neg, valid = batch_hard_core(
        sq_dist[anchors], anchors, labels[anchors], labels, synth_mask
    )
    if on_missing == "raise":
        same = labels[anchors][:, None] == labels[None, :]
        pos_ok = same & ~synth_mask[None, :]
        pos_ok[np.arange(anchors.size), anchors] = False
        for a, ok in zip(anchors, pos_ok.any(axis=1)):
            if not ok:
                raise NoPositiveAvailable(int(a))
        for a, ok in zip(anchors, (~same).any(axis=1)):
            if not ok:
                raise NoNegativeAvailable(int(a))
    elif on_missing != "skip":
        raise ValueError(f"on_missing must be 'raise' or 'skip', got {on_missing!r}")
    return pos, neg


def ms_select_pairs(
    sim: np.ndarray,
    labels: np.ndarray,
    eps: float,
    augmented: AugmentedBatch | None = None,
) -> tuple[list, list]:
    """Mined positive and negative index sets per anchor.

    Base rule: negative j joins when s[i, j] beats the anchor's weakest
    same-class similarity minus eps; positive j joins when s[i, j] is
    below the anchor's strongest different-class similarity plus eps.
    When an augmented batch is supplied ``sim`` must cover its rows, and a
    negative j joins when the best candidate-pair similarity between the
    two classes beats the same threshold.  Anchors and mined indices are
    always original rows.  Empty selections are valid.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    sim = np.asarray(sim)
    if augmented is not None:
        labels = augmented.labels
        n = augmented.num_original
        best_sim, _ = class_pair_extremes(sim, labels, labels, mode="max")
    else:
        labels = np.asarray(labels)
        n = labels.shape[0]
        best_sim = None
    if sim.shape[0] != labels.shape[0]:
        raise ValueError("similarity matrix does not match label count")

    orig_labels = labels[:n]
    pos_sets: list = []
    neg_sets: list = []
    for i in range(n):
        same = orig_labels == orig_labels[i]
        s_row = sim[i, :n]
        # Thresholds use original rows only.
        pos_threshold = -np.inf
        if (~same).any():
            pos_threshold = s_row[~same].max() + eps
        neg_threshold = s_row[same].min() - eps

        pos_candidates = np.nonzero(same)[0]
        pos_candidates = pos_candidates[pos_candidates != i]
        pos_sets.append(pos_candidates[s_row[pos_candidates] < pos_threshold])

        neg_candidates = np.nonzero(~same)[0]
        if best_sim is None:
            selected = neg_candidates[s_row[neg_candidates] > neg_threshold]
        else:
            ci = int(orig_labels[i])
            pooled = np.array(
                [best_sim[(ci, int(orig_labels[j]))] for j in neg_candidates]
            )
            selected = neg_candidates[pooled > neg_threshold]
        neg_sets.append(selected)
    return pos_sets, neg_sets


@dataclass
class MiningTrace:
    """Accumulates provenance of selected hard-negative pair members.

    Every selected pair contributes both of its endpoints to the counts,
    so one selection adds two member observations.
    """

    synthetic_members: int = 0
    original_members: int = 0

    def record(self, p_is_synthetic: bool, n_is_synthetic: bool) -> None:
        for flag in (p_is_synthetic, n_is_synthetic):
            if flag:
                self.synthetic_members += 1
            else:
                self.original_members += 1

    def record_many(self, p_flags: np.ndarray, n_flags: np.ndarray) -> None:
        flags = np.concatenate((np.asarray(p_flags, dtype=bool), np.asarray(n_flags, dtype=bool)))
        self.synthetic_members += int(flags.sum())
        self.original_members += int((~flags).sum())

    @property
    def total_members(self) -> int:
        return self.synthetic_members + self.original_members

    def merge(self, other: "MiningTrace") -> None:
        self.synthetic_members += other.synthetic_members
        self.original_members += other.original_members

    def format_line(self, step: int) -> str:
        ratio = record_selection_ratio(self)
        return f"{step},{ratio!r},{self.synthetic_members},{self.original_members}"


def record_selection_ratio(trace: MiningTrace) -> float:
    """Fraction of selected pair members that are synthetic."""
    if trace.total_members == 0:
        raise EmptyTrace("no selections recorded")
    return trace.synthetic_members / trace.total_members
