"""Retrieval and clustering metrics plus feature-level diagnostics.

Includes Recall@K, seeded k-means for NMI/F1 clustering scores, the
synthetic-query diagnostics (label certainty of generated points,
robustness of combined queries), pairwise-distance heatmap export, and a
wall-clock benchmark of synthetic point generation versus total loss
evaluation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureDataset
from .errors import EmptyDatabase, InvalidK, LengthMismatch
from .geometry import (
    EmbeddingBatch,
    expand_batch,
    l2_normalize_rows,
    pairwise_sq_distance,
)
from .losses import LossConfig, compute_loss


@dataclass
class MetricsReport:
    """Per-epoch metric bundle, serializable as one JSON object per line."""

    epoch: int
    recall_at: dict = field(default_factory=dict)
    nmi: float = 0.0
    f1: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_json_line(self) -> str:
        payload = {
            "epoch": self.epoch,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "nmi": self.nmi,
            "f1": self.f1,
            "extras": {k: self.extras[k] for k in sorted(self.extras)},
        }
        return json.dumps(payload, sort_keys=False)

    @staticmethod
    def from_json_line(line: str) -> "MetricsReport":
        obj = json.loads(line)
        return MetricsReport(
            epoch=int(obj["epoch"]),
            recall_at={int(k): float(v) for k, v in obj["recall_at"].items()},
            nmi=float(obj["nmi"]),
            f1=float(obj["f1"]),
            extras=obj.get("extras", {}),
        )


def recall_at_k(
    queries: EmbeddingBatch,
    database: EmbeddingBatch,
    ks: list[int],
    self_match: bool = True,
) -> dict[int, float]:
    """Fraction of queries with a same-label row among their K nearest.

    Distances are Euclidean with ties broken by lowest database index.
    With ``self_match=False`` the query and database are taken to be the
    same ordered set and row i of the database is excluded for query i.
    """
    if database.n == 0:
        raise EmptyDatabase("database has no rows")
    if ks != sorted(ks) or any(k < 1 for k in ks):
        raise ValueError("ks must be sorted ascending and positive")
    d2 = pairwise_sq_distance(queries.data, database.data)
    if not self_match:
        if queries.n != database.n:
            raise LengthMismatch("self exclusion requires query set == database set")
        np.fill_diagonal(d2, np.inf)
    if max(ks) == 1:
        # argmin keeps the same first-occurrence tie rule as the full sort
        nearest = np.argmin(d2, axis=1)
        return {1: float((database.labels[nearest] == queries.labels).mean())}
    order = np.argsort(d2, axis=1, kind="stable")
    hits_sorted = database.labels[order] == queries.labels[:, None]
    out = {}
    for k in ks:
        kk = min(k, database.n)
        out[k] = float(hits_sorted[:, :kk].any(axis=1).mean())
    return out


def kmeans(
    data: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    return_inertia: bool = False,
):
    """Seeded k-means++ initialization followed by Lloyd iterations.

    Runs to an assignment fixpoint or ``max_iters``; empty clusters are
    re-seeded to the point farthest from its assigned centroid.
    Deterministic for a given seed.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if k < 1 or k > n:
        raise InvalidK(f"k must be in 1..{n}, got {k}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    closest = pairwise_sq_distance(data, centers[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[c] = data[rng.integers(n)]
        else:
            centers[c] = data[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, pairwise_sq_distance(data, centers[c : c + 1]).ravel())

    assign = np.full(n, -1, dtype=np.int64)
    inertia_trace = []
    for _ in range(max_iters):
        d2 = pairwise_sq_distance(data, centers)
        new_assign = np.argmin(d2, axis=1)
        inertia_trace.append(float(d2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = data[assign == c]
            if members.shape[0] == 0:
                farthest = int(np.argmax(d2[np.arange(n), assign]))
                centers[c] = data[farthest]
            else:
                centers[c] = members.mean(axis=0)
    if return_inertia:
        return assign, inertia_trace
    return assign


def nmi(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Normalized mutual information I(A;L)/sqrt(H(A) H(L)), natural logs.

    Degenerate cases with zero entropy on either side score 0.
    """
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape:
        raise LengthMismatch("assignments and labels differ in length")
    n = assignments.shape[0]
    _, a_idx = np.unique(assignments, return_inverse=True)
    _, l_idx = np.unique(labels, return_inverse=True)
    table = np.zeros((a_idx.max() + 1, l_idx.max() + 1))
    np.add.at(table, (a_idx, l_idx), 1.0)
    pa = table.sum(axis=1) / n
    pl = table.sum(axis=0) / n
    h_a = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    h_l = -np.sum(pl[pl > 0] * np.log(pl[pl > 0]))
    if h_a <= 0 or h_l <= 0:
        return 0.0
    pij = table / n
    outer = pa[:, None] * pl[None, :]
    nz = pij > 0
    info = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    return info / float(np.sqrt(h_a * h_l))


def pairwise_f1(assignments: np.ndarray, labels: np.ndarray) -> float:
    """F1 over same-cluster decisions on all unordered point pairs."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape:
        raise LengthMismatch("assignments and labels differ in length")
    n = assignments.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")

    def _pair_count(values: np.ndarray) -> float:
        _, counts = np.unique(values, return_counts=True)
        return float((counts * (counts - 1) // 2).sum())

    # Pairs sharing both cluster and label, counted via joint ids.
    joint = assignments.astype(np.int64) * (labels.max() + 1) + labels
    tp = _pair_count(joint)
    same_cluster = _pair_count(assignments)
    same_label = _pair_count(labels)
    precision = tp / same_cluster if same_cluster > 0 else 0.0
    recall = tp / same_label if same_label > 0 else 0.0
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def synthetic_label_certainty(
    dataset: FeatureDataset,
    embedder,
    n: int,
    normalize: bool,
) -> tuple[float, float]:
    """Recall@1 of synthetic queries vs originals, and originals vs selves.

    Embeds the dataset, generates synthetic points per same-class pair,
    and queries them against the original embeddings.  The original-side
    score excludes self matches.
    """
    emb = embedder.forward(dataset.features)
    batch = EmbeddingBatch(emb, dataset.labels)
    aug = expand_batch(batch, n, normalize)
    if aug.num_synthetic == 0:
        raise ValueError("no same-class pair available to generate synthetics")
    syn = EmbeddingBatch(aug.data[batch.n:], aug.labels[batch.n:])
    syn_recall = recall_at_k(syn, batch, [1], self_match=True)[1]
    ori_recall = recall_at_k(batch, batch, [1], self_match=False)[1]
    return syn_recall, ori_recall


def synthetic_query_robustness(
    batch: EmbeddingBatch,
    combine_count: int,
    trials: int,
    seed: int = 0,
    normalize: bool = True,
) -> float:
    """Recall@1 of randomly combined same-class queries against the batch.

    Each trial averages ``combine_count`` distinct same-class embeddings
    (classes with fewer members are skipped), optionally re-normalizes,
    and queries the original batch.
    """
    if combine_count < 1:
        raise ValueError("combine_count must be >= 1")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(batch.labels, return_counts=True)
    eligible = classes[counts >= combine_count]
    if eligible.size == 0:
        raise ValueError(f"no class has {combine_count} members")
    queries = np.empty((trials, batch.dim))
    q_labels = np.empty(trials, dtype=np.int64)
    for t in range(trials):
        c = eligible[rng.integers(eligible.size)]
        members = np.nonzero(batch.labels == c)[0]
        chosen = rng.choice(members, size=combine_count, replace=False)
        queries[t] = batch.data[chosen].mean(axis=0)
        q_labels[t] = c
    if normalize:
        queries = l2_normalize_rows(queries)
    qbatch = EmbeddingBatch(queries, q_labels)
    return recall_at_k(qbatch, batch, [1], self_match=True)[1]


def export_distance_heatmap(batch: EmbeddingBatch, pairs_per_class: int, path: str) -> np.ndarray:
    """Write the first-sample x second-sample distance matrix as CSV.

    For every class, ``pairs_per_class`` (first, second) sample pairs are
    taken in index order; entry (r, c) is the Euclidean distance between
    first sample r and second sample c, normalized to [0, 1] by the matrix
    maximum.  The block diagonal holds same-class pair distances.
    """
    if pairs_per_class < 1:
        raise ValueError("pairs_per_class must be >= 1")
    firsts = []
    seconds = []
    for c in np.unique(batch.labels):
        idx = np.nonzero(batch.labels == c)[0]
        if idx.size < 2 * pairs_per_class:
            raise ValueError(f"class {c} has fewer than {2 * pairs_per_class} samples")
        for p in range(pairs_per_class):
            firsts.append(idx[2 * p])
            seconds.append(idx[2 * p + 1])
    first_rows = batch.data[np.array(firsts)]
    second_rows = batch.data[np.array(seconds)]
    dist = np.sqrt(pairwise_sq_distance(first_rows, second_rows))
    peak = dist.max()
    if peak > 0:
        dist = dist / peak
    with open(path, "w") as fh:
        for row in dist:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return dist


def load_heatmap_csv(path: str) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def _median_ms(fn, repeats: int, warmup: int = 3) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples))


def bench_generation(
    batch_sizes: list[int],
    n_values: list[int],
    repeats: int = 10,
    dim: int = 64,
    seed: int = 0,
) -> list[dict]:
    """Median wall-clock (ms) of generation alone vs total loss evaluation.

    Batches follow the training composition of four samples per class.
    "gen" times the synthetic point construction; "total" times the
    batch-hard triplet loss over the expanded batch, value and gradient,
    mining included.  n=0 rows time the unexpanded loss, with generation 0
    by definition.  Each measurement is the median of ``repeats`` timed
    runs after a short warmup.
    """
    if repeats < 10:
        raise ValueError("repeats must be >= 10")
    rng = np.random.default_rng(seed)
    rows = []
    for size in batch_sizes:
        if size < 8 or size % 4:
            raise ValueError(f"batch size must be a multiple of 4 and >= 8, got {size}")
        data = l2_normalize_rows(rng.normal(size=(size, dim)))
        labels = np.repeat(np.arange(1, size // 4 + 1), 4)
        batch = EmbeddingBatch(data, labels)
        for n in n_values:
            gen_ms = 0.0
            if n > 0:
                gen_ms = _median_ms(lambda: expand_batch(batch, n, True), repeats)
            config = LossConfig(kind="hphn_triplet")
            if n > 0:
                config.expansion.enabled = True
                config.expansion.n = n
            total_ms = _median_ms(lambda: compute_loss(batch, config), repeats)
            rows.append(
                {
                    "batch_size": size,
                    "n": n,
                    "gen_ms": gen_ms,
                    "total_ms": total_ms,
                }
            )
    return rows
