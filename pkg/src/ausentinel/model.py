"""Per-timestep classifier: a 17-4-2 network with confidence-weighted output.

Each 1/3 s timestep is classified independently from its 17 AU intensities
(no temporal features). The softmax error probability becomes the timestep's
weight when the error class wins the argmax, otherwise the weight is 0 —
so weights are either 0 or in (0.5, 1], and the sliding-window filter
downstream sums them.

Training rebalances classes by randomly undersampling no-error timesteps
every epoch to match the error-timestep count, then takes one full-batch
gradient step on the softmax cross-entropy. Everything is deterministic
given the seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from ausentinel.core import (
    N_AUS,
    ModelIntegrityError,
    TrialRecord,
    UnusableCorpusError,
    catalog_hash,
)

logger = logging.getLogger(__name__)

N_HIDDEN = 4
N_CLASSES = 2
MODEL_FILE_VERSION = 1
HIDDEN_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class WeightedClassification:
    """One timestep's classifier verdict: error probability and its weight.

    weight is 0 when the argmax is no-error, else equal to p_error — hence
    never in the open interval (0, 0.5).
    """

    timestep: int
    p_error: float
    weight: float

    def __post_init__(self) -> None:
        if not (self.weight == 0.0 or 0.5 <= self.weight <= 1.0):
            raise ModelIntegrityError(f"weight {self.weight} outside {{0}} ∪ [0.5, 1]")
        if self.weight > self.p_error + 1e-12:
            raise ModelIntegrityError("weight exceeds p_error")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Network weights plus the training metadata needed to reproduce them."""

    w1: np.ndarray  # (17, 4)
    b1: np.ndarray  # (4,)
    w2: np.ndarray  # (4, 2)
    b2: np.ndarray  # (2,)
    hidden_activation: str = "relu"
    seed: int = 0
    epochs: int = 0
    learning_rate: float = 0.0

    def __post_init__(self) -> None:
        shapes = {
            "w1": (self.w1, (N_AUS, N_HIDDEN)),
            "b1": (self.b1, (N_HIDDEN,)),
            "w2": (self.w2, (N_HIDDEN, N_CLASSES)),
            "b2": (self.b2, (N_CLASSES,)),
        }
        for name, (arr, want) in shapes.items():
            if not isinstance(arr, np.ndarray) or arr.shape != want:
                raise ModelIntegrityError(f"{name} must have shape {want}")
            if arr.dtype != np.float64:
                raise ModelIntegrityError(f"{name} must be float64")
            if not np.all(np.isfinite(arr)):
                raise ModelIntegrityError(f"{name} contains non-finite values")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ModelIntegrityError(
                f"hidden_activation must be one of {HIDDEN_ACTIVATIONS}"
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    learning_rate: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise UnusableCorpusError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise UnusableCorpusError("learning_rate must be > 0")


def init_params(seed: int = 0, hidden_activation: str = "relu") -> ModelParams:
    """Seeded initialization: weights U(-0.5, 0.5)/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    w1 = (rng.random((N_AUS, N_HIDDEN)) - 0.5) / math.sqrt(N_AUS)
    w2 = (rng.random((N_HIDDEN, N_CLASSES)) - 0.5) / math.sqrt(N_HIDDEN)
    return ModelParams(
        w1=w1, b1=np.zeros(N_HIDDEN), w2=w2, b2=np.zeros(N_CLASSES),
        hidden_activation=hidden_activation, seed=seed,
    )


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, x) -> tuple[float, float]:
    """Single-timestep forward pass → (p_no_error, p_error), summing to 1.

    This is the exact code path used live; batch evaluation loops it so that
    offline scores are bit-identical to streaming behavior.
    """
    x = np.asarray(x, dtype=np.float64)
    h = _activate(x @ params.w1 + params.b1, params.hidden_activation)
    logits = h @ params.w2 + params.b2
    if not np.all(np.isfinite(logits)):
        raise ModelIntegrityError("non-finite logits in forward pass")
    p = _softmax_rows(logits)
    return float(p[0]), float(p[1])


def weigh(probs: tuple[float, float]) -> float:
    """Confidence weight: p_error when the error class wins, else 0.

    The exact tie p_error = 0.5 resolves to no-error, so the output is never
    in the open interval (0, 0.5).
    """
    p_error = probs[1]
    return p_error if p_error > 0.5 else 0.0


def classify_timestep(params: ModelParams, timestep) -> WeightedClassification:
    probs = forward(params, timestep.au)
    return WeightedClassification(
        timestep=timestep.index, p_error=probs[1], weight=weigh(probs)
    )


def corpus_matrices(corpus: list[TrialRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack a corpus into (X, y): intensities (n, 17) and boolean labels (n,)."""
    xs = [t.au_matrix() for t in corpus]
    ys = [t.label_array() for t in corpus]
    if not xs:
        return np.zeros((0, N_AUS)), np.zeros(0, dtype=bool)
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def loss_and_gradients(params: ModelParams, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over a batch plus analytic gradients for all params.

    y holds integer class indices (0 = no error, 1 = error).
    """
    n = X.shape[0]
    h_pre = X @ params.w1 + params.b1
    h = _activate(h_pre, params.hidden_activation)
    logits = h @ params.w2 + params.b2
    p = _softmax_rows(logits)
    eps = 1e-300  # guards log(0) only; softmax of finite logits is positive
    loss = float(-np.mean(np.log(p[np.arange(n), y] + eps)))

    d_logits = p.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    g_w2 = h.T @ d_logits
    g_b2 = d_logits.sum(axis=0)
    d_h = d_logits @ params.w2.T
    if params.hidden_activation == "relu":
        d_pre = d_h * (h_pre > 0)
    else:
        d_pre = d_h * (1.0 - h * h)
    g_w1 = X.T @ d_pre
    g_b1 = d_pre.sum(axis=0)
    return loss, {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def _fit(start: ModelParams, X: np.ndarray, y_labels: np.ndarray,
         hyper: TrainConfig, epoch_log: list | None = None) -> ModelParams:
    err_idx = np.flatnonzero(y_labels)
    noerr_idx = np.flatnonzero(~y_labels)
    n_err = err_idx.size
    if n_err == 0:
        raise UnusableCorpusError(
            "corpus has no error-labeled timesteps; undersampling rule needs >= 1"
        )
    degenerate = noerr_idx.size < n_err
    if degenerate:
        logger.warning(
            "only %d no-error timesteps for %d error timesteps; "
            "undersampling degenerates to the full no-error set",
            noerr_idx.size, n_err,
        )
    rng = np.random.default_rng(hyper.seed)
    w1, b1 = start.w1.copy(), start.b1.copy()
    w2, b2 = start.w2.copy(), start.b2.copy()
    y_int = y_labels.astype(np.int64)
    for epoch in range(hyper.epochs):
        if degenerate:
            sampled = noerr_idx
        else:
            sampled = rng.choice(noerr_idx, size=n_err, replace=False)
            assert sampled.size == n_err  # equal class counts, every epoch
        idx = np.concatenate([err_idx, sampled])
        cur = ModelParams(w1=w1, b1=b1, w2=w2, b2=b2,
                          hidden_activation=start.hidden_activation)
        loss, grads = loss_and_gradients(cur, X[idx], y_int[idx])
        w1 -= hyper.learning_rate * grads["w1"]
        b1 -= hyper.learning_rate * grads["b1"]
        w2 -= hyper.learning_rate * grads["w2"]
        b2 -= hyper.learning_rate * grads["b2"]
        if epoch_log is not None:
            epoch_log.append({
                "epoch": epoch,
                "loss": loss,
                "n_error": int(n_err),
                "n_no_error": int(sampled.size),
            })
    return ModelParams(
        w1=w1, b1=b1, w2=w2, b2=b2,
        hidden_activation=start.hidden_activation,
        seed=hyper.seed, epochs=hyper.epochs, learning_rate=hyper.learning_rate,
    )


def train(corpus: list[TrialRecord], hyper: TrainConfig | None = None,
          epoch_log: list | None = None) -> ModelParams:
    """Train from scratch on annotated trials; deterministic given hyper.seed."""
    hyper = hyper or TrainConfig()
    X, y = corpus_matrices(corpus)
    start = init_params(hyper.seed)
    return _fit(start, X, y, hyper, epoch_log)


def finetune(params: ModelParams, trials: list[TrialRecord],
             hyper: TrainConfig | None = None,
             epoch_log: list | None = None) -> ModelParams:
    """Continue optimization from `params` on the given trials only.

    Zero epochs returns the input parameters unchanged.
    """
    hyper = hyper or TrainConfig()
    if hyper.epochs == 0:
        return params
    if not trials:
        raise UnusableCorpusError("finetune requires at least one trial")
    X, y = corpus_matrices(trials)
    return _fit(params, X, y, hyper, epoch_log)


def save(params: ModelParams, path) -> None:
    """Serialize to a versioned JSON container; byte-stable for equal params.

    Weights are flat row-major lists; floats use shortest round-trip repr,
    so save→load→save is byte-identical.
    """
    doc = {
        "version": MODEL_FILE_VERSION,
        "catalog_hash": catalog_hash(),
        "activation": params.hidden_activation,
        "seed": params.seed,
        "epochs": params.epochs,
        "learning_rate": params.learning_rate,
        "w1": [float(v) for v in params.w1.ravel(order="C")],
        "b1": [float(v) for v in params.b1],
        "w2": [float(v) for v in params.w2.ravel(order="C")],
        "b2": [float(v) for v in params.b2],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load(path) -> ModelParams:
    """Load a model file, refusing version or AU-ordering mismatches."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelIntegrityError(f"unreadable model file {path}: {exc}")
    if not isinstance(doc, dict):
        raise ModelIntegrityError("model file is not a JSON object")
    if doc.get("version") != MODEL_FILE_VERSION:
        raise ModelIntegrityError(
            f"unsupported model file version {doc.get('version')!r}"
        )
    if doc.get("catalog_hash") != catalog_hash():
        raise ModelIntegrityError("model file AU catalog does not match this build")
    try:
        w1 = np.asarray(doc["w1"], dtype=np.float64).reshape(N_AUS, N_HIDDEN)
        b1 = np.asarray(doc["b1"], dtype=np.float64).reshape(N_HIDDEN)
        w2 = np.asarray(doc["w2"], dtype=np.float64).reshape(N_HIDDEN, N_CLASSES)
        b2 = np.asarray(doc["b2"], dtype=np.float64).reshape(N_CLASSES)
        return ModelParams(
            w1=w1, b1=b1, w2=w2, b2=b2,
            hidden_activation=doc["activation"],
            seed=int(doc["seed"]),
            epochs=int(doc.get("epochs", 0)),
            learning_rate=float(doc.get("learning_rate", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelIntegrityError(f"malformed model file {path}: {exc}")
