"""Gated attention MIL aggregator with a linear head, trained with AdamW.

For a bag of tile features ``H`` (n x d) the model computes

    e_k   = w . (tanh(V h_k) * sigmoid(U h_k))
    a     = softmax(e)
    z     = sum_k a_k h_k
    logit = c . z + b

and is trained on binary cross-entropy with logits. Gradients are derived by
hand; everything runs in float64 so finite-difference checks are sharp.

Parameters live in one flat vector laid out as ``[V; U], w, c, b`` so the
optimizer touches a single array per step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import auc
from .embed_store import EmbeddingSet
from .errors import (
    BadMagicError,
    BadVersionError,
    InvalidConfigError,
    InvalidInputError,
    LengthMismatchError,
    NonFiniteError,
    ShapeError,
    UndefinedAUCError,
)

MODEL_MAGIC = b"PGMA"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIIIQ")


@dataclass
class Bag:
    slide_id: str
    features: np.ndarray
    label: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"bag {self.slide_id}: features must be (n >= 1, d)")


class GMAParams:
    """Flat parameter vector with named views ``V, U, w, c, b``."""

    def __init__(self, flat: np.ndarray, d: int, hidden: int):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size(d, hidden),):
            raise ShapeError(f"flat vector of length {flat.shape} does not fit d={d}, L={hidden}")
        self.flat = flat
        self.d = d
        self.hidden = hidden

    @staticmethod
    def size(d: int, hidden: int) -> int:
        return 2 * hidden * d + hidden + d + 1

    @property
    def VU(self) -> np.ndarray:
        return self.flat[: 2 * self.hidden * self.d].reshape(2 * self.hidden, self.d)

    @property
    def V(self) -> np.ndarray:
        return self.VU[: self.hidden]

    @property
    def U(self) -> np.ndarray:
        return self.VU[self.hidden :]

    @property
    def w(self) -> np.ndarray:
        o = 2 * self.hidden * self.d
        return self.flat[o : o + self.hidden]

    @property
    def c(self) -> np.ndarray:
        o = 2 * self.hidden * self.d + self.hidden
        return self.flat[o : o + self.d]

    @property
    def b(self) -> float:
        return float(self.flat[-1])

    def blocks(self) -> dict[str, np.ndarray]:
        return {"V": self.V, "U": self.U, "w": self.w, "c": self.c, "b": self.flat[-1:]}

    def copy(self) -> "GMAParams":
        return GMAParams(self.flat.copy(), self.d, self.hidden)

    @classmethod
    def zeros(cls, d: int, hidden: int = 128) -> "GMAParams":
        return cls(np.zeros(cls.size(d, hidden)), d, hidden)

    @classmethod
    def from_arrays(cls, V, U, w, c, b) -> "GMAParams":
        V, U = np.asarray(V, dtype=np.float64), np.asarray(U, dtype=np.float64)
        hidden, d = V.shape
        if U.shape != (hidden, d) or np.shape(w) != (hidden,) or np.shape(c) != (d,):
            raise ShapeError("inconsistent GMA parameter shapes")
        flat = np.concatenate([V.ravel(), U.ravel(), np.ravel(w), np.ravel(c), [float(b)]])
        return cls(flat, d, hidden)

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator) -> "GMAParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every block."""
        p = cls.zeros(d, hidden)
        sd, sl = 1 / math.sqrt(d), 1 / math.sqrt(hidden)
        p.VU[:] = rng.uniform(-sd, sd, size=(2 * hidden, d))
        p.w[:] = rng.uniform(-sl, sl, size=hidden)
        p.c[:] = rng.uniform(-sd, sd, size=d)
        p.flat[-1] = rng.uniform(-sd, sd)
        return p


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: GMAParams) -> "OptimizerState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), 0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    base_lr: float = 1e-3
    final_lr: float = 1e-6
    warmup_start_lr: float = 0.0
    # strong decoupled decay keeps attention from memorizing tiles of small cohorts
    base_wd: float = 5.0
    final_wd: float = 5.0
    warmup_epochs: int = 5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    hidden: int = 128
    max_tiles_per_bag: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidConfigError(
                f"warmup_epochs must satisfy 0 <= warmup_epochs < epochs, got {self.warmup_epochs}"
            )
        if len(self.betas) != 2:
            raise InvalidConfigError(f"betas needs two values, got {self.betas}")
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise InvalidConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if min(self.base_lr, self.final_lr, self.warmup_start_lr, self.base_wd, self.final_wd) < 0:
            raise InvalidConfigError("learning rates and weight decays must be non-negative")
        if self.hidden < 1:
            raise InvalidConfigError(f"hidden must be positive, got {self.hidden}")
        if self.max_tiles_per_bag is not None and self.max_tiles_per_bag < 1:
            raise InvalidConfigError("max_tiles_per_bag must be positive when set")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float


@dataclass
class TrainResult:
    params: GMAParams
    records: list[EpochRecord] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)

    @property
    def final_val_auc(self) -> float:
        return self.records[-1].val_auc if self.records else float("nan")


# --- model ------------------------------------------------------------------


def _check_shapes(params: GMAParams, H: np.ndarray) -> None:
    if H.ndim != 2 or H.shape[1] != params.d:
        raise ShapeError(f"bag has feature dim {H.shape[-1]}, model expects {params.d}")


def _gates(params: GMAParams, H: np.ndarray):
    L = params.hidden
    X = H @ params.VU.T
    X[:, L:] *= 0.5
    T = np.tanh(X)
    t = T[:, :L]
    s = 0.5 * (1.0 + T[:, L:])  # sigmoid(u) = (1 + tanh(u / 2)) / 2
    return t, s


def _softmax(e: np.ndarray) -> np.ndarray:
    a = np.exp(e - e.max())
    return a / a.sum()


def gma_forward(params: GMAParams, bag: Bag | np.ndarray) -> tuple[float, np.ndarray]:
    """Return ``(logit, attention)`` for one bag."""
    H = bag.features if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)
    _check_shapes(params, H)
    t, s = _gates(params, H)
    a = _softmax((t * s) @ params.w)
    z = a @ H
    return float(params.c @ z + params.b), a


def bce_with_logits(logit: float, y: float) -> float:
    return max(logit, 0.0) - logit * y + math.log1p(math.exp(-abs(logit)))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def loss_and_grad(params: GMAParams, H: np.ndarray, y: float, out: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """BCE loss and its gradient as a flat vector matching ``params.flat``."""
    _check_shapes(params, H)
    L, d = params.hidden, params.d
    t, s = _gates(params, H)
    g = t * s
    w, c = params.w, params.c
    a = _softmax(g @ w)
    z = a @ H
    logit = float(c @ z) + params.b

    grad = np.empty_like(params.flat) if out is None else out
    dlogit = _sigmoid(logit) - y
    o = 2 * L * d
    grad[o + L : o + L + d] = dlogit * z
    grad[-1] = dlogit
    da = H @ (dlogit * c)
    de = a * (da - a @ da)
    grad[o : o + L] = g.T @ de
    dg = np.outer(de, w)
    dX = np.empty((H.shape[0], 2 * L))
    dX[:, :L] = dg * s * (1.0 - t * t)
    dX[:, L:] = dg * t * s * (1.0 - s)
    np.matmul(dX.T, H, out=grad[:o].reshape(2 * L, d))
    return bce_with_logits(logit, y), grad


def gma_backward(params: GMAParams, bag: Bag) -> GMAParams:
    """Gradient of the BCE-with-logits loss, returned in the parameter layout."""
    _, grad = loss_and_grad(params, bag.features, float(bag.label))
    return GMAParams(grad, params.d, params.hidden)


# --- optimization -----------------------------------------------------------


def cosine_warmup(step: int, total_steps: int, warmup_steps: int,
                  start_value: float, base_value: float, final_value: float) -> float:
    """Linear warmup from ``start_value`` to ``base_value``, then cosine decay to ``final_value``.

    Both ends of the decay are returned exactly rather than through the
    cosine so traces hit ``base_value`` and ``final_value`` bit for bit.
    """
    if step < warmup_steps:
        return start_value + (base_value - start_value) * step / warmup_steps
    if step >= total_steps:
        return final_value
    if step == warmup_steps:
        return base_value
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return final_value + 0.5 * (base_value - final_value) * (1.0 + math.cos(math.pi * progress))


def _adamw_inplace(theta, grad, state: OptimizerState, lr, wd, betas, eps) -> None:
    b1, b2 = betas
    state.t += 1
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    theta *= 1 - lr * wd
    theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adamw_step(params: GMAParams, grads: GMAParams | np.ndarray, state: OptimizerState,
               lr: float, wd: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> tuple[GMAParams, OptimizerState]:
    """One AdamW update with decoupled weight decay; inputs are left untouched."""
    g = grads.flat if isinstance(grads, GMAParams) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise ShapeError("gradient / optimizer state shape does not match parameters")
    new = params.copy()
    new_state = OptimizerState(state.m.copy(), state.v.copy(), state.t)
    _adamw_inplace(new.flat, g, new_state, lr, wd, betas, eps)
    return new, new_state


# --- training ---------------------------------------------------------------


def _subsample(H: np.ndarray, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or H.shape[0] <= limit:
        return H
    return H[np.sort(rng.choice(H.shape[0], size=limit, replace=False))]


def make_bags(dataset: EmbeddingSet, ids: Sequence[str]) -> list[Bag]:
    missing = [s for s in ids if s not in dataset.labels]
    if missing:
        raise InvalidInputError(f"ids without labels: {missing[:5]}")
    return [Bag(s, dataset.slides[s].values, dataset.labels[s]) for s in ids]


def evaluate(params: GMAParams, bags: Sequence[Bag]) -> tuple[float, float]:
    """Mean BCE loss and AUC over ``bags``, always on every tile."""
    logits = np.array([gma_forward(params, b)[0] for b in bags])
    labels = np.array([b.label for b in bags])
    loss = float(np.mean([bce_with_logits(l, y) for l, y in zip(logits, labels)]))
    return loss, auc(logits, labels)


def train_gma(dataset: EmbeddingSet, train_ids: Sequence[str], val_ids: Sequence[str],
              config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train one GMA model, one bag per optimizer step.

    Bag order is reshuffled every epoch from ``(config.seed, epoch)``; the
    learning rate and weight decay follow :func:`cosine_warmup` per step.
    ``max_tiles_per_bag`` subsamples training bags only. Validation loss and
    AUC are recorded after each epoch.
    """
    if set(train_ids) & set(val_ids):
        raise InvalidInputError("train and validation ids overlap")
    if not train_ids:
        raise InvalidInputError("no training samples")
    train_bags = make_bags(dataset, sorted(train_ids))
    val_bags = make_bags(dataset, sorted(val_ids))
    if len({b.label for b in val_bags}) < 2:
        raise UndefinedAUCError("validation set lacks one of the classes; AUC is undefined")

    d = dataset.profile.dim
    params = GMAParams.init(d, config.hidden, np.random.default_rng(np.random.SeedSequence([config.seed, 0])))
    result = TrainResult(params)
    if config.epochs == 0:
        return result

    state = OptimizerState.zeros_like(params)
    n = len(train_bags)
    last = config.epochs * n - 1
    warmup = min(config.warmup_epochs * n, max(last - 1, 0))
    grad = np.empty_like(params.flat)
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, epoch]))
        losses = []
        for i in rng.permutation(n):
            bag = train_bags[i]
            lr = cosine_warmup(step, last, warmup, config.warmup_start_lr, config.base_lr, config.final_lr)
            wd = cosine_warmup(step, last, warmup, config.base_wd, config.base_wd, config.final_wd)
            H = _subsample(bag.features, config.max_tiles_per_bag, rng)
            loss, _ = loss_and_grad(params, H, float(bag.label), out=grad)
            _adamw_inplace(params.flat, grad, state, lr, wd, config.betas, config.eps)
            losses.append(loss)
            result.lr_trace.append(lr)
            step += 1
        if not np.isfinite(params.flat).all():
            raise NonFiniteError(f"parameters diverged at epoch {epoch}")
        val_loss, val_auc = evaluate(params, val_bags)
        result.records.append(EpochRecord(epoch + 1, float(np.mean(losses)), val_loss, val_auc))
    return result


# --- files ------------------------------------------------------------------


def save_params(params: GMAParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, params.hidden, params.d, 0)
    path.write_bytes(header + params.flat.astype("<f8").tobytes())
    return path


def load_params(path: str | Path) -> GMAParams:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise LengthMismatchError(f"{path}: shorter than header")
    magic, version, hidden, d, _ = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    n = GMAParams.size(d, hidden)
    if len(data) != _MODEL_HEADER.size + 8 * n:
        raise LengthMismatchError(f"{path}: expected {n} parameters")
    flat = np.frombuffer(data, dtype="<f8", offset=_MODEL_HEADER.size).astype(np.float64)
    if not np.isfinite(flat).all():
        raise NonFiniteError(f"{path}: non-finite parameters")
    return GMAParams(flat, d, hidden)


def records_to_csv(records: Sequence[EpochRecord]) -> str:
    rows = ["epoch,train_loss,val_loss,val_auc"]
    rows += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_auc!r}" for r in records]
    return "\n".join(rows) + "\n"
