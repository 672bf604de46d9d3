"""Training loop: joint loss with gate regularization, plain SGD on all
parameters including the gate matrices, and perplexity-triggered lr decay.

One backward pass per batch serves both the transformer parameters and the
synaptic gate matrices; both descend the same loss with the same step size.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .datagen import Batch, batches
from .model import GateMode, ModelConfig, Params, forward_batch, init_params
from .numcore import GradGraph, NumericError, Rng, Tensor2


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the training loop.

    ppl_threshold None means "resolve to 1.5 * vocab size at run start", which
    keeps the decay rule active early and inert after convergence.
    """

    epochs: int
    batch_size: int
    lr: float = 3e-4
    lr_decay: float = 0.5
    ppl_threshold: float | None = None
    reg_weight: float = 1e-4
    grad_clip: float | None = None
    seed: int = 0
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError(f"lr_decay must be in (0, 1), got {self.lr_decay}")
        if self.lr <= self.min_lr:
            raise ValueError(f"lr {self.lr} must start above min_lr {self.min_lr}")
        if self.reg_weight < 0:
            raise ValueError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if self.ppl_threshold is not None and self.ppl_threshold <= 0:
            raise ValueError("ppl_threshold must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    def resolve(self, vocab_size: int) -> "TrainConfig":
        """Pin the default perplexity threshold against the vocabulary."""
        if self.ppl_threshold is not None:
            return self
        return replace(self, ppl_threshold=1.5 * vocab_size)


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    mean_ce: float
    mean_reg: float
    val_ppl: float
    lr: float
    decay_triggered: bool
    wall_ms: float


@dataclass
class TrainResult:
    params: Params
    history: list[EpochReport]
    stream_digest: str  # sha256 over consumed batch tokens, for ablation pairing


class TrainingAbort(RuntimeError):
    """Numeric failure mid-run; carries the partial history."""

    def __init__(self, message: str, epoch: int, history: list[EpochReport]):
        super().__init__(message)
        self.epoch = epoch
        self.history = history


def loss(
    logits: Tensor2,
    targets,
    mask,
    synaptic: list[Tensor2],
    reg_weight: float,
    graph: GradGraph | None = None,
    synaptic_frozen: bool = False,
) -> tuple[Tensor2, Tensor2, Tensor2]:
    """total = cross entropy + reg_weight * sum of squared gate norms.

    Returns (total, ce, reg); total is the backward root. With
    synaptic_frozen the reg term is a constant: its value still reports, but
    no gradient reaches the gate matrices.
    """
    ce = nc.cross_entropy_logits(logits, targets, mask, graph)
    if not synaptic or reg_weight == 0.0:
        reg = nc.zeros(1, 1, dtype=logits.dtype)
        return ce, ce, reg
    reg_graph = None if synaptic_frozen else graph
    raw = None
    for w_s in synaptic:
        term = nc.frobenius_sq(w_s, reg_graph)
        raw = term if raw is None else nc.add(raw, term, reg_graph)
    reg = nc.scale(raw, reg_weight, reg_graph)
    if synaptic_frozen:
        total = nc.add_const(ce, reg.item(), graph)
    else:
        total = nc.add(ce, reg, graph)
    return total, ce, reg


def sgd_step(
    params: Params,
    grads: dict[str, np.ndarray],
    lr: float,
    grad_clip: float | None = None,
) -> Params:
    """In-place descent p <- p - lr*g on every tensor, after optional
    global-norm clipping. Plain SGD, no momentum."""
    named = list(params.named_tensors())
    for name, t in named:
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for {name}")
        if g.shape != t.data.shape:
            raise nc.DimensionError(f"gradient shape {g.shape} != {t.data.shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    if lr == 0.0:
        return params
    scale = lr
    if grad_clip is not None:
        norm_sq = sum(float((grads[name].astype(np.float64) ** 2).sum()) for name, _ in named)
        norm = np.sqrt(norm_sq)
        if norm > grad_clip:
            scale = lr * grad_clip / norm
    for name, t in named:
        t.data -= t.dtype.type(scale) * grads[name]
    return params


@dataclass
class EpochStats:
    mean_loss: float = 0.0
    mean_ce: float = 0.0
    mean_reg: float = 0.0
    n_batches: int = 0
    last_ce: float = 0.0


def train_epoch(
    params: Params,
    batch_stream,
    config: TrainConfig,
    lr: float,
    mode: GateMode | None = None,
    on_step=None,
) -> EpochStats:
    """One pass over the batch stream: forward, loss, one backward, one SGD
    step per batch, updating transformer and gate parameters jointly.
    on_step(index, total, ce, reg) is called with each step's loss values."""
    mode = GateMode(mode if mode is not None else params.config.gate_mode)
    frozen = mode != GateMode.LEARNED
    totals = np.zeros(3, dtype=np.float64)
    stats = EpochStats()
    for index, batch in enumerate(batch_stream):
        try:
            graph = GradGraph()
            for _, t in params.named_tensors():
                graph.watch(t)
            logits = forward_batch(params, batch.tokens, mode=mode, graph=graph)
            total, ce, reg = loss(
                logits,
                batch.targets.reshape(-1),
                batch.loss_mask.reshape(-1),
                params.synaptic(),
                config.reg_weight,
                graph=graph,
                synaptic_frozen=frozen,
            )
            nc.backward(graph, total)
            grads = {name: t.grad for name, t in params.named_tensors()}
            sgd_step(params, grads, lr, config.grad_clip)
        except NumericError as err:
            raise NumericError(f"batch {index}: {err}") from err
        if on_step is not None:
            on_step(index, total.item(), ce.item(), reg.item())
        totals += (total.item(), ce.item(), reg.item())
        stats.n_batches = index + 1
        stats.last_ce = ce.item()
    if stats.n_batches == 0:
        raise ValueError("empty batch stream")
    stats.mean_loss, stats.mean_ce, stats.mean_reg = (totals / stats.n_batches).tolist()
    return stats


def lr_decay_check(val_ppl: float, lr: float, config: TrainConfig) -> tuple[float, bool]:
    """If validation perplexity exceeds the threshold, decay lr by the
    configured factor, floored at min_lr."""
    if not np.isfinite(val_ppl) or val_ppl <= 0:
        raise ValueError(f"validation perplexity must be finite and positive, got {val_ppl}")
    tau = config.ppl_threshold
    if tau is None:
        raise ValueError("ppl_threshold unresolved; call TrainConfig.resolve first")
    if val_ppl > tau:
        return max(lr * config.lr_decay, config.min_lr), True
    return lr, False


class _DigestStream:
    """Wraps a batch stream, hashing consumed tokens for pairing checks."""

    def __init__(self, stream, digest):
        self._stream = stream
        self._digest = digest

    def __iter__(self):
        for batch in self._stream:
            self._digest.update(batch.tokens.astype(np.int64).tobytes())
            yield batch


def run_training(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data: tuple[Batch, Batch],
    metrics_sink=None,
    on_epoch=None,
    init: Params | None = None,
    dtype=np.float32,
) -> TrainResult:
    """Full training: per epoch, one train pass, validation perplexity, and
    the decay check. Emits an EpochReport per epoch to metrics_sink and calls
    on_epoch(params, report) after each. Deterministic given configs and seeds."""
    from .evalsuite import perplexity  # local import; evalsuite.ablate uses run_training

    train_ds, val_ds = data
    config = train_config.resolve(model_config.vocab_size)
    rng = Rng(config.seed)
    params = init if init is not None else init_params(model_config, rng.split(), dtype=dtype)
    mode = GateMode(model_config.gate_mode)
    lr = config.lr
    history: list[EpochReport] = []
    digest = hashlib.sha256()
    for epoch in range(config.epochs):
        started = time.perf_counter()
        stream = _DigestStream(
            batches(train_ds, config.batch_size, rng.split(), shuffle=True), digest
        )
        try:
            stats = train_epoch(params, stream, config, lr, mode=mode)
        except NumericError as err:
            raise TrainingAbort(f"epoch {epoch}: {err}", epoch, history) from err
        val_ppl = perplexity(params, val_ds, mode=mode)
        lr, triggered = lr_decay_check(val_ppl, lr, config)
        report = EpochReport(
            epoch=epoch,
            mean_loss=stats.mean_loss,
            mean_ce=stats.mean_ce,
            mean_reg=stats.mean_reg,
            val_ppl=val_ppl,
            lr=lr,
            decay_triggered=triggered,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )
        history.append(report)
        if metrics_sink is not None:
            metrics_sink(report)
        if on_epoch is not None:
            on_epoch(params, report)
    return TrainResult(params=params, history=history, stream_digest=digest.hexdigest())
