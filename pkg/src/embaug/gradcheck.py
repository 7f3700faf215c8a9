"""Gradient verification harness shared by the CLI and the test suite.

Random batches are screened by their decision margin before use: a batch
sitting within ``margin_threshold`` of a hinge kink, selection tie, or
mining-condition boundary is resampled, because a central difference at
h=1e-6 would itself flip the decision and measure garbage.
"""

from __future__ import annotations

import numpy as np

from .geometry import EmbeddingBatch, l2_normalize_rows
from .losses import (
    LOSS_KINDS,
    ExpansionConfig,
    LossConfig,
    compute_loss,
    decision_margin,
    finite_diff_grad,
    loss_value_fn,
    loss_variants,
)

DEFAULT_THRESHOLD = 1e-5
DEFAULT_MARGIN = 1e-4


def variant_config(kind: str, expanded: bool, n: int = 2) -> LossConfig:
    """Natural hyper-parameters for gradient checks of one variant."""
    normalize = kind != "npair"
    return LossConfig(
        kind=kind,
        margin=0.4 if kind in ("triplet", "hphn_triplet") else 1.0,
        expansion=ExpansionConfig(enabled=expanded, n=n, normalize=normalize),
    )


def random_batch(
    rng: np.random.Generator,
    n: int = 16,
    dim: int = 8,
    classes: int = 4,
    normalized: bool = True,
) -> EmbeddingBatch:
    labels = np.repeat(np.arange(1, classes + 1), n // classes)
    if labels.shape[0] < n:
        labels = np.concatenate([labels, np.full(n - labels.shape[0], classes)])
    data = rng.normal(size=(n, dim))
    data = l2_normalize_rows(data) if normalized else data / np.sqrt(dim)
    return EmbeddingBatch(data, labels)


def sample_clean_batch(
    rng: np.random.Generator,
    config: LossConfig,
    n: int = 16,
    dim: int = 8,
    classes: int = 4,
    margin_threshold: float = DEFAULT_MARGIN,
    max_tries: int = 200,
) -> EmbeddingBatch:
    """Draw batches until one clears the kink/tie margin screen."""
    normalized = config.kind != "npair"
    for _ in range(max_tries):
        batch = random_batch(rng, n, dim, classes, normalized)
        if decision_margin(batch, config) >= margin_threshold:
            return batch
    raise RuntimeError("could not sample a batch away from decision boundaries")


def check_variant(
    kind: str,
    expanded: bool,
    trials: int,
    seed: int,
    h: float = 1e-6,
    n: int = 16,
    dim: int = 8,
    classes: int = 4,
    margin_threshold: float = DEFAULT_MARGIN,
    corrupt: bool = False,
) -> float:
    """Max relative error over ``trials`` screened random batches.

    ``corrupt`` perturbs the analytic gradient before comparison; it
    exists so the suite's failure detection can itself be tested.
    """
    rng = np.random.default_rng(seed)
    config = variant_config(kind, expanded)
    worst = 0.0
    for _ in range(trials):
        batch = sample_clean_batch(rng, config, n, dim, classes, margin_threshold)
        analytic = compute_loss(batch, config, want_grad=True).grad
        if corrupt:
            analytic = analytic + 1e-3
        numeric = finite_diff_grad(loss_value_fn(batch.labels, config), batch.data, h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


def run_suite(
    kinds: list[str] | None = None,
    trials: int = 10,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    corrupt_variant: tuple[str, bool] | None = None,
    **kwargs,
) -> list[dict]:
    """Check every (kind, expanded) variant; one result row per variant."""
    kinds = list(LOSS_KINDS) if kinds is None else kinds
    rows = []
    for variant_seed, (kind, expanded) in enumerate(loss_variants()):
        if kind not in kinds:
            continue
        corrupt = corrupt_variant == (kind, expanded)
        err = check_variant(
            kind, expanded, trials=trials, seed=seed * 1000 + variant_seed, corrupt=corrupt, **kwargs
        )
        rows.append(
            {
                "loss": kind,
                "expanded": expanded,
                "max_rel_err": err,
                "passed": bool(err <= threshold),
            }
        )
    return rows
