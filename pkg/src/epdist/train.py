"""Training loop, learning-rate schedule and kilometre-scale evaluation."""

from __future__ import annotations

import copy
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from ._alloc import keep_heap_resident
from .data import Dataset
from .errors import InvalidArgument, NumericFailure
from .nn import Model, ModelConfig, build_model
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LR_GRID = (1e-3, 1e-4, 1e-5)
GAMMA_GRID = (0.5, 0.9)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    gamma: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # lr0/gamma outside the grids are rejected unless this is set
    allow_override: bool = False
    # >1 shards every batch over threads; faster on multi-core hosts but
    # not bitwise reproducible (and BN statistics become per-shard)
    workers: int = 1

    def validate(self) -> "TrainConfig":
        if not self.allow_override:
            if not any(math.isclose(self.lr0, v, rel_tol=1e-9) for v in LR_GRID):
                raise InvalidArgument(f"lr0={self.lr0} not in {LR_GRID} (set allow_override to use it)")
            if not any(math.isclose(self.gamma, v, rel_tol=1e-9) for v in GAMMA_GRID):
                raise InvalidArgument(f"gamma={self.gamma} not in {GAMMA_GRID} (set allow_override to use it)")
        if not self.lr0 > 0 or not 0 < self.gamma <= 1:
            raise InvalidArgument(f"need lr0 > 0 and 0 < gamma <= 1, got {self.lr0}, {self.gamma}")
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise InvalidArgument("epochs, batch_size and workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgument(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        return self


@dataclass
class Metrics:
    train_l1_km: list = field(default_factory=list)
    val_l1_km: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    test_l1_km: float | None = None
    runtime_min: float = 0.0
    best_epoch: int | None = None

    @property
    def best_val_l1_km(self) -> float | None:
        return None if self.best_epoch is None else self.val_l1_km[self.best_epoch]


def schedule(lr0: float, gamma: float, epoch: int) -> float:
    if epoch < 0:
        raise InvalidArgument(f"epoch must be >= 0, got {epoch}")
    return lr0 * gamma**epoch


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr / c1 * m / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)


def predict(model: Model, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions in km, one per record."""
    out = [model(Tensor(x), training=False).data for x, _ in dataset.batches(batch_size)]
    return np.concatenate(out).astype(np.float64)


def l1_km(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise InvalidArgument("empty split")
    return float(np.mean(np.abs(pred - target)))


def evaluate(model: Model, dataset: Dataset, batch_size: int = 64) -> float:
    """Mean absolute error in km over ``dataset`` (model in eval mode)."""
    if dataset is None or len(dataset) == 0:
        raise InvalidArgument("empty split")
    return l1_km(predict(model, dataset, batch_size), dataset.targets)


def set_target_affine(model: Model, targets) -> None:
    """Map the unit-scale head output onto the training targets' mean and spread."""
    targets = np.asarray(targets, dtype=np.float64)
    std = float(targets.std())
    model.buffers["target_offset"][...] = float(targets.mean())
    model.buffers["target_scale"][...] = std if std > 0 else 1.0


def _loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    with Tape() as tape:
        loss = T.l1_loss(model(Tensor(x), training=True), Tensor(y))
    model.zero_grad()
    T.backward(loss, tape)
    return float(loss.data), {k: p.grad for k, p in model.params.items()}


def _shard_model(model: Model) -> Model:
    # shares parameter storage, owns its gradients and BN running statistics
    shard = copy.copy(model)
    shard.params = {k: Tensor(p.data, requires_grad=True, name=k) for k, p in model.params.items()}
    shard.buffers = {k: b.copy() for k, b in model.buffers.items()}
    return shard


def _parallel_step(model: Model, pool: ThreadPoolExecutor, workers: int, x, y) -> tuple[float, dict]:
    parts = [p for p in np.array_split(np.arange(len(y)), workers) if len(p)]
    shards = [_shard_model(model) for _ in parts]
    results = list(pool.map(lambda a: _loss_and_grads(a[0], x[a[1]], y[a[1]]), zip(shards, parts)))
    n = len(y)
    loss = sum(r[0] * len(p) for r, p in zip(results, parts)) / n
    grads = {}
    for k in model.params:
        acc = None
        for (_, g), p in zip(results, parts):
            if g[k] is not None:
                acc = g[k] * (len(p) / n) if acc is None else acc + g[k] * (len(p) / n)
        grads[k] = acc
    for k in model.buffers:
        if k.endswith(".running_mean") or k.endswith(".running_var"):
            model.buffers[k][...] = np.mean([s.buffers[k] for s in shards], axis=0)
    return loss, grads


def _snapshot(model: Model) -> dict:
    state = {k: p.data.copy() for k, p in model.params.items()}
    state.update({f"buffer:{k}": b.copy() for k, b in model.buffers.items()})
    return state


def _restore(model: Model, state: dict) -> None:
    for k, p in model.params.items():
        p.data[...] = state[k]
    for k, b in model.buffers.items():
        b[...] = state[f"buffer:{k}"]


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset,
          test_ds: Dataset | None = None, on_epoch: Callable[[dict], None] | None = None,
          model: Model | None = None) -> tuple[Model, Metrics]:
    """Fit a model and return it restored to its best-validation epoch.

    Losses are L1 in km throughout.  ``on_epoch`` receives one dict per
    epoch with ``epoch, lr_now, train_l1_km, val_l1_km, wall_s``.  A
    non-finite loss raises :class:`NumericFailure` carrying the epoch.
    """
    train_cfg.validate()
    model_cfg.validate()
    for name, ds in (("train", train_ds), ("validation", val_ds)):
        if ds is None or len(ds) == 0:
            raise InvalidArgument(f"empty {name} split")
    for ds in (train_ds, val_ds, test_ds):
        if ds is not None and ds.channels != model_cfg.in_channels:
            raise InvalidArgument(f"dataset has {ds.channels} channels, model expects {model_cfg.in_channels}")

    keep_heap_resident()
    model = model or build_model(model_cfg)
    set_target_affine(model, train_ds.targets)
    opt = Adam(model.params, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    rng = np.random.default_rng(train_cfg.seed)
    metrics = Metrics()
    best_state, best_val = None, math.inf
    pool = ThreadPoolExecutor(train_cfg.workers) if train_cfg.workers > 1 else None
    t0 = time.perf_counter()
    try:
        for epoch in range(train_cfg.epochs):
            lr = schedule(train_cfg.lr0, train_cfg.gamma, epoch)
            total = 0.0
            for x, y in train_ds.batches(train_cfg.batch_size, rng.permutation(len(train_ds))):
                try:
                    if pool is None:
                        loss, grads = _loss_and_grads(model, x, y)
                    else:
                        loss, grads = _parallel_step(model, pool, train_cfg.workers, x, y)
                except NumericFailure as exc:
                    raise NumericFailure(str(exc), layer=exc.layer, epoch=epoch) from None
                if not math.isfinite(loss):
                    raise NumericFailure("non-finite training loss", layer="loss", epoch=epoch)
                opt.step(lr, grads)
                total += loss * len(y)
            train_l1 = total / len(train_ds)
            try:
                val_l1 = evaluate(model, val_ds)
            except NumericFailure as exc:
                raise NumericFailure(str(exc), layer=exc.layer, epoch=epoch) from None
            metrics.train_l1_km.append(train_l1)
            metrics.val_l1_km.append(val_l1)
            metrics.lr.append(lr)
            if val_l1 < best_val:
                best_val, best_state, metrics.best_epoch = val_l1, _snapshot(model), epoch
            log.info("epoch %d lr=%.3g train_l1=%.4f val_l1=%.4f", epoch, lr, train_l1, val_l1)
            if on_epoch is not None:
                on_epoch({"epoch": epoch, "lr_now": lr, "train_l1_km": train_l1,
                          "val_l1_km": val_l1, "wall_s": time.perf_counter() - t0})
    finally:
        if pool is not None:
            pool.shutdown()
    _restore(model, best_state)
    model.eval()
    if test_ds is not None:
        metrics.test_l1_km = evaluate(model, test_ds)
    metrics.runtime_min = (time.perf_counter() - t0) / 60.0
    return model, metrics
