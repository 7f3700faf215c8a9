"""Desk-scale embedder, P x K batch sampling, optimizers, training loop.

The embedder is a linear map or a one-hidden-layer MLP over raw features;
augmentation happens downstream in embedding space, never on the inputs.
Everything is seeded and 64-bit so that a (seed, config, dataset) triple
reproduces every logged number bit for bit.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureDataset
from .errors import InsufficientClasses, NonFiniteLoss, ShapeMismatch
from .evaluation import MetricsReport, kmeans, nmi, pairwise_f1, recall_at_k, synthetic_label_certainty
from .geometry import EmbeddingBatch, l2_normalize_rows
from .losses import LossConfig, compute_loss
from .mining import MiningTrace, record_selection_ratio

ACTIVATIONS = ("tanh", "relu")
ARCHITECTURES = ("linear", "mlp")

CHECKPOINT_MAGIC = b"EMBAUGW1"
CHECKPOINT_VERSION = 1


class Embedder:
    """Maps input features to embedding space.

    linear: Z = X W.  mlp: Z = act(X W1) W2.  With ``normalize_output``
    every output row is L2-normalized.  Weights are Xavier-uniform
    initialized from the given seed.
    """

    def __init__(
        self,
        input_dim: int,
        embed_dim: int,
        arch: str = "linear",
        hidden_width: int = 64,
        activation: str = "tanh",
        normalize_output: bool = True,
        seed: int = 0,
    ):
        if arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {ARCHITECTURES}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if input_dim < 1 or embed_dim < 1 or hidden_width < 1:
            raise ValueError("dimensions must be positive")
        self.input_dim = input_dim
        self.embed_dim = embed_dim
        self.arch = arch
        self.hidden_width = hidden_width
        self.activation = activation
        self.normalize_output = normalize_output
        rng = np.random.default_rng(seed)
        if arch == "linear":
            self.weights = [_xavier(rng, input_dim, embed_dim)]
        else:
            self.weights = [
                _xavier(rng, input_dim, hidden_width),
                _xavier(rng, hidden_width, embed_dim),
            ]

    def _act(self, pre: np.ndarray) -> np.ndarray:
        return np.tanh(pre) if self.activation == "tanh" else np.maximum(pre, 0.0)

    def _act_grad(self, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
        return 1.0 - post**2 if self.activation == "tanh" else (pre > 0.0).astype(np.float64)

    def forward(self, x: np.ndarray) -> np.ndarray:
        z, _ = self.forward_with_cache(x)
        return z

    def forward_with_cache(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"expected (B, {self.input_dim}) input, got {x.shape}")
        cache = {"x": x}
        if self.arch == "linear":
            raw = x @ self.weights[0]
        else:
            pre = x @ self.weights[0]
            hidden = self._act(pre)
            cache["pre"] = pre
            cache["hidden"] = hidden
            raw = hidden @ self.weights[1]
        cache["raw"] = raw
        if self.normalize_output:
            norms = np.linalg.norm(raw, axis=1, keepdims=True)
            if np.any(norms <= 1e-12):
                raise NonFiniteLoss("embedder produced a zero-norm row; cannot normalize")
            z = raw / norms
            cache["z"] = z
            cache["norms"] = norms
        else:
            z = raw
        return z, cache

    def backward(self, cache: dict, grad_z: np.ndarray) -> list[np.ndarray]:
        """Weight gradients given the gradient w.r.t. the output embeddings."""
        grad_z = np.asarray(grad_z, dtype=np.float64)
        if grad_z.shape != cache["raw"].shape:
            raise ShapeMismatch(f"upstream gradient shape {grad_z.shape} does not match output")
        if self.normalize_output:
            z, norms = cache["z"], cache["norms"]
            g_raw = (grad_z - np.sum(z * grad_z, axis=1, keepdims=True) * z) / norms
        else:
            g_raw = grad_z
        x = cache["x"]
        if self.arch == "linear":
            return [x.T @ g_raw]
        g_w2 = cache["hidden"].T @ g_raw
        g_hidden = g_raw @ self.weights[1].T
        g_pre = g_hidden * self._act_grad(cache["pre"], cache["hidden"])
        return [x.T @ g_pre, g_w2]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Adam:
    def __init__(self, shapes, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, weights: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for i, (w, g) in enumerate(zip(weights, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g**2
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            w -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, shapes, lr=1e-2, momentum=0.0):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros(s) for s in shapes]

    def step(self, weights: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for i, (w, g) in enumerate(zip(weights, grads)):
            self.velocity[i] = self.momentum * self.velocity[i] + g
            w -= self.lr * self.velocity[i]


@dataclass
class TrainConfig:
    """Everything the training loop needs, including the loss config."""

    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    lr: float = 1e-4
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    p_classes: int = 8
    k_samples: int = 4
    epochs: int = 10
    seed: int = 0
    eval_every: int = 1
    arch: str = "linear"
    hidden_width: int = 64
    activation: str = "tanh"
    embed_dim: int = 16
    normalize_output: bool = True
    record_label_certainty: bool = True
    recall_ks: tuple = (1, 2, 4, 8)
    kmeans_seed: int = 0
    kmeans_max_iters: int = 100

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.p_classes < 2 or self.k_samples < 2:
            raise ValueError("need p_classes >= 2 and k_samples >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        self.recall_ks = tuple(sorted(int(k) for k in self.recall_ks))

    @property
    def batch_size(self) -> int:
        return self.p_classes * self.k_samples


def pk_sample(labels: np.ndarray, p_classes: int, k_samples: int, rng: np.random.Generator) -> np.ndarray:
    """P distinct classes with K samples each; short classes sample with
    replacement.  Deterministic given the generator state."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < p_classes:
        raise InsufficientClasses(f"need {p_classes} classes, dataset has {classes.size}")
    chosen = rng.choice(classes, size=p_classes, replace=False)
    out = []
    for c in chosen:
        members = np.nonzero(labels == c)[0]
        replace = members.size < k_samples
        out.append(rng.choice(members, size=k_samples, replace=replace))
    return np.concatenate(out)


@dataclass
class TrainResult:
    embedder: Embedder
    reports: list
    trace_lines: list
    epoch_times_ms: list
    final_metrics: dict


def _evaluate(embedder: Embedder, dataset: FeatureDataset, config: TrainConfig) -> dict:
    emb = embedder.forward(dataset.features)
    batch = EmbeddingBatch(emb, dataset.labels)
    ks = [k for k in config.recall_ks if k <= dataset.n - 1] or [1]
    recall = recall_at_k(batch, batch, ks, self_match=False)
    k_clusters = int(np.unique(dataset.labels).size)
    assign = kmeans(emb, k_clusters, seed=config.kmeans_seed, max_iters=config.kmeans_max_iters)
    return {
        "recall_at": recall,
        "nmi": nmi(assign, dataset.labels),
        "f1": pairwise_f1(assign, dataset.labels),
    }


def train(
    dataset: FeatureDataset,
    config: TrainConfig,
    eval_dataset: FeatureDataset | None = None,
) -> TrainResult:
    """Run the sample / embed / expand / mine / loss / update loop.

    Per epoch the loop logs mean loss and mean synthetic selection ratio;
    on the eval cadence it scores retrieval and clustering metrics on the
    eval dataset (the train set when none is given) and, when enabled, the
    label-certainty diagnostic on the train set.  Raises NonFiniteLoss
    with a diagnostic payload if the loss or gradient leaves the reals.
    """
    sample_seed, init_seed = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(sample_seed)
    embedder = Embedder(
        input_dim=dataset.dim,
        embed_dim=config.embed_dim,
        arch=config.arch,
        hidden_width=config.hidden_width,
        activation=config.activation,
        normalize_output=config.normalize_output,
        seed=init_seed,
    )
    shapes = [w.shape for w in embedder.weights]
    if config.optimizer == "adam":
        optimizer = Adam(shapes, lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    else:
        optimizer = SGD(shapes, lr=config.lr, momentum=config.momentum)

    steps_per_epoch = max(1, dataset.n // config.batch_size)
    reports: list[MetricsReport] = []
    trace_lines: list[str] = []
    epoch_times: list[float] = []
    global_step = 0

    for epoch in range(1, config.epochs + 1):
        t_epoch = time.perf_counter()
        losses = []
        ratios = []
        for _ in range(steps_per_epoch):
            idx = pk_sample(dataset.labels, config.p_classes, config.k_samples, rng)
            x = dataset.features[idx]
            z, cache = embedder.forward_with_cache(x)
            batch = EmbeddingBatch(z, dataset.labels[idx])
            trace = MiningTrace()
            result = compute_loss(batch, config.loss, trace=trace)
            if not np.isfinite(result.value) or not np.all(np.isfinite(result.grad)):
                exc = NonFiniteLoss(f"non-finite loss at epoch {epoch} step {global_step}")
                exc.diagnostics = {
                    "epoch": epoch,
                    "step": global_step,
                    "value": result.value,
                    "weight_norms": [float(np.linalg.norm(w)) for w in embedder.weights],
                }
                raise exc
            grads = embedder.backward(cache, result.grad)
            optimizer.step(embedder.weights, grads)
            losses.append(result.value)
            if trace.total_members > 0:
                ratio = record_selection_ratio(trace)
                ratios.append(ratio)
                trace_lines.append(trace.format_line(global_step))
            global_step += 1
        epoch_times.append((time.perf_counter() - t_epoch) * 1e3)

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            target = eval_dataset if eval_dataset is not None else dataset
            scored = _evaluate(embedder, target, config)
            extras = {
                "train_loss_mean": float(np.mean(losses)) if losses else 0.0,
            }
            if ratios:
                extras["ratio_syn_mean"] = float(np.mean(ratios))
            if config.record_label_certainty and config.loss.expansion.enabled:
                syn_r1, ori_r1 = synthetic_label_certainty(
                    dataset, embedder, config.loss.expansion.n, config.loss.expansion.normalize
                )
                extras["syn_recall_at_1"] = syn_r1
                extras["ori_recall_at_1"] = ori_r1
            reports.append(
                MetricsReport(
                    epoch=epoch,
                    recall_at=scored["recall_at"],
                    nmi=scored["nmi"],
                    f1=scored["f1"],
                    extras=extras,
                )
            )

    if not reports:
        target = eval_dataset if eval_dataset is not None else dataset
        scored = _evaluate(embedder, target, config)
        reports.append(MetricsReport(epoch=0, recall_at=scored["recall_at"], nmi=scored["nmi"], f1=scored["f1"]))
    final = reports[-1]
    return TrainResult(
        embedder=embedder,
        reports=reports,
        trace_lines=trace_lines,
        epoch_times_ms=epoch_times,
        final_metrics={"recall_at": final.recall_at, "nmi": final.nmi, "f1": final.f1},
    )


# ---------------------------------------------------------------------------
# Checkpoint format (documented in README): magic "EMBAUGW1", uint32
# version, uint32 header length, UTF-8 JSON header, then float64
# little-endian weight blobs in header order.


def save_checkpoint(embedder: Embedder, path: str) -> None:
    header = {
        "arch": embedder.arch,
        "input_dim": embedder.input_dim,
        "embed_dim": embedder.embed_dim,
        "hidden_width": embedder.hidden_width,
        "activation": embedder.activation,
        "normalize_output": embedder.normalize_output,
        "shapes": [list(w.shape) for w in embedder.weights],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for w in embedder.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Embedder:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic)")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        embedder = Embedder(
            input_dim=header["input_dim"],
            embed_dim=header["embed_dim"],
            arch=header["arch"],
            hidden_width=header["hidden_width"],
            activation=header["activation"],
            normalize_output=header["normalize_output"],
        )
        weights = []
        for shape in header["shapes"]:
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError("checkpoint truncated")
            weights.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    embedder.weights = weights
    return embedder
