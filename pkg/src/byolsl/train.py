"""Training loop: momentum SGD on the online network, EMA on the target.

Seeds are split from the single ``train.seed`` root with
``numpy.random.SeedSequence``:

    [root, 0]          parameter initialization
    [root, 1, epoch]   batch order within an epoch
    [root, 2, step]    augmentations of both views
    [root, 3, step]    dropout masks

so a run resumed from a checkpoint replays exactly the same stream.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .augment import augment_batch, normalize
from .config import ConfigError, RunConfig
from .data import DataError, ImageDataset, batch_indices, channel_stats, make_synthetic, read_stl10
from .loss import loss_terms
from .model import (
    Checkpoint,
    ModelPair,
    ema_update,
    load_checkpoint,
    pair_state,
    restore_pair,
    save_checkpoint,
)
from .nn import freeze_batch_stats
from .tensor import ContractError, NumericError, Tensor

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "epoch",
    "loss",
    "diagonal",
    "refinement",
    "collapse",
    "positives",
    "negatives",
    "wall_time",
)


class CollapseError(RuntimeError):
    """Strict-mode abort; carries the step, the metric, and its initial value."""

    def __init__(self, message: str, step: int = 0, value: float = 0.0, initial: float = 0.0):
        super().__init__(message)
        self.step, self.value, self.initial = step, value, initial


@dataclass
class OptimizerState:
    lr: float
    momentum: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    diagonal: float
    refinement: float
    collapse: float
    positives: int
    negatives: int
    wall_time: float

    def row(self) -> list[str]:
        return [
            str(self.step),
            str(self.epoch),
            repr(self.loss),
            repr(self.diagonal),
            repr(self.refinement),
            repr(self.collapse),
            str(self.positives),
            str(self.negatives),
            f"{self.wall_time:.3f}",
        ]


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """v <- m v + g; p <- p - lr v (heavy-ball momentum, no weight decay)."""
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        norms = {n: float(np.linalg.norm(np.nan_to_num(g))) for n, g in grads.items()}
        raise NumericError(f"non-finite gradient for {bad}; gradient norms: {json.dumps(norms)}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise T.DimensionError(f"sgd_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g if state.momentum else g.copy()
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = p.data - p.data.dtype.type(state.lr) * state.velocity[name]


def collapse_metric(representations: np.ndarray) -> float:
    """Mean over dimensions of the per-dimension std across the batch."""
    x = np.asarray(representations.data if isinstance(representations, Tensor) else representations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"collapse_metric: need an (N >= 2, d) batch, got {x.shape}")
    return float(x.std(axis=0).mean())


# ---------------------------------------------------------------------- helpers


def load_training_data(cfg: RunConfig) -> ImageDataset:
    if cfg.data.source == "synthetic":
        return make_synthetic(cfg.synthetic, split="unlabeled")
    if not cfg.data.path:
        raise DataError("data.path is required for stl10 data")
    path = Path(cfg.data.path)
    if not path.exists():
        raise DataError(f"dataset path does not exist: {path}")
    return read_stl10(path, cfg.data.split)


def resolve_stats(cfg: RunConfig, dataset: ImageDataset) -> RunConfig:
    if cfg.data.mean and cfg.data.std:
        return cfg
    mean, std = channel_stats(dataset)
    return cfg.replace(data=replace(cfg.data, mean=mean, std=std))


def prepare_views(images: np.ndarray, cfg: RunConfig, rng: np.random.Generator, dtype) -> tuple[np.ndarray, np.ndarray]:
    v1 = augment_batch(images, cfg.augment, rng)
    v2 = augment_batch(images, cfg.augment_prime, rng)
    return (
        normalize(v1, cfg.data.mean, cfg.data.std).astype(dtype, copy=False),
        normalize(v2, cfg.data.mean, cfg.data.std).astype(dtype, copy=False),
    )


def build_pair(cfg: RunConfig) -> ModelPair:
    seed = int(np.random.SeedSequence([cfg.train.seed, 0]).generate_state(1)[0])
    return ModelPair(cfg.model, tau=cfg.train.tau, seed=seed)


def make_checkpoint(cfg: RunConfig, pair: ModelPair, state: OptimizerState, step: int) -> Checkpoint:
    return Checkpoint(config_text=cfg.to_text(), step=step, sections=pair_state(pair, state.velocity))


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:07d}.bin"


@dataclass
class StepOutput:
    loss: float
    diagonal: float
    refinement: float
    collapse: float
    positives: int
    negatives: int


def train_step(pair: ModelPair, cfg: RunConfig, state: OptimizerState, v1: np.ndarray, v2: np.ndarray) -> StepOutput:
    """One symmetrized update: forward both views through both networks,
    backpropagate into the online parameters, SGD, then EMA."""
    x1, x2 = Tensor(v1), Tensor(v2)
    o1 = pair.forward_online(x1)
    o2 = pair.forward_online(x2)
    z1 = T.l2_normalize(pair.forward_target(x1))
    z2 = T.l2_normalize(pair.forward_target(x2))
    q1 = T.l2_normalize(o1.prediction)
    q2 = T.l2_normalize(o2.prediction)
    a = loss_terms(q1, z2, cfg.loss)
    b = loss_terms(q2, z1, cfg.loss)
    total = a.total + b.total
    params = pair.online_parameters()
    for p in params.values():
        p.grad = None
    T.backward(total)
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    sgd_step(params, grads, state)
    ema_update(pair)
    return StepOutput(
        loss=float(total.data),
        diagonal=a.diagonal + b.diagonal,
        refinement=a.refinement + b.refinement,
        collapse=collapse_metric(q1.data),
        positives=a.positives + b.positives,
        negatives=a.negatives + b.negatives,
    )


@dataclass
class TrainResult:
    config: RunConfig
    pair: ModelPair
    state: OptimizerState
    metrics: list[MetricsRecord]
    checkpoints: list[Path]
    steps: int
    collapsed: bool = False
    initial_collapse: float | None = None
    min_collapse: float | None = None


class MetricsWriter:
    def __init__(self, path: Path | None, append: bool = False):
        self.path = path
        self._fh = None
        if path is not None:
            exists = path.exists() and append
            self._fh = open(path, "a" if exists else "w", newline="")
            self._writer = csv.writer(self._fh)
            if not exists:
                self._writer.writerow(METRIC_COLUMNS)

    def write(self, rec: MetricsRecord) -> None:
        if self._fh is not None:
            self._writer.writerow(rec.row())
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def train_run(
    cfg: RunConfig,
    output_dir: str | Path | None = None,
    resume: str | Path | None = None,
    dataset: ImageDataset | None = None,
    callback: Callable[[MetricsRecord], None] | None = None,
) -> TrainResult:
    """Run the configured number of steps and write artifacts under ``output_dir``.

    Artifacts: ``config.resolved.cfg``, ``metrics.csv`` (one row per logged
    step), and ``ckpt_<step>.bin`` at step 0, every ``checkpoint_every``
    steps, and at the end.
    """
    tc = cfg.train
    T.set_default_dtype(tc.dtype)
    T.set_deterministic(tc.deterministic)
    dtype = np.dtype(tc.dtype).type

    dataset = dataset if dataset is not None else load_training_data(cfg)
    if len(dataset) < tc.batch_size:
        raise DataError(f"dataset has {len(dataset)} images, fewer than batch size {tc.batch_size}")
    cfg = resolve_stats(cfg, dataset)
    out = Path(output_dir or tc.output_dir) if (output_dir or tc.output_dir) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.cfg").write_text(cfg.to_text())

    pair = build_pair(cfg)
    state = OptimizerState(cfg.optim.lr, cfg.optim.momentum)
    start = 0
    if resume:
        ckpt = load_checkpoint(resume)
        saved = RunConfig.from_text(ckpt.config_text)
        if saved.model != cfg.model:
            raise ConfigError(f"checkpoint {resume} was written for a different model configuration")
        restore_pair(pair, ckpt.sections)
        state.velocity = {k: v.astype(dtype) for k, v in ckpt.sections.get("velocity", {}).items()}
        start = ckpt.step
    elif tc.warm_start:
        ckpt = load_checkpoint(tc.warm_start)
        saved = RunConfig.from_text(ckpt.config_text)
        if saved.model != cfg.model:
            raise ConfigError(f"warm-start checkpoint {tc.warm_start} has a different model configuration")
        restore_pair(pair, ckpt.sections)
    if tc.freeze_bn:
        freeze_batch_stats(pair.online)
        freeze_batch_stats(pair.target)
    pair.train()

    per_epoch = len(dataset) // tc.batch_size
    total = tc.epochs * per_epoch
    if tc.max_steps:
        total = min(total, tc.max_steps)

    checkpoints: list[Path] = []

    def checkpoint(step: int) -> None:
        if out is None:
            return
        path = out / checkpoint_name(step)
        save_checkpoint(path, make_checkpoint(cfg, pair, state, step))
        checkpoints.append(path)

    if start == 0:
        checkpoint(0)

    writer = MetricsWriter(out / "metrics.csv" if out is not None else None, append=start > 0)
    metrics: list[MetricsRecord] = []
    initial_collapse = min_collapse = None
    low_run = 0
    collapsed = False
    t0 = time.perf_counter()
    step = start
    try:
        while step < total:
            epoch, offset = divmod(step, per_epoch)
            order = list(batch_indices(len(dataset), tc.batch_size, np.random.SeedSequence([tc.seed, 1, epoch])))
            for idx in order[offset:]:
                if step >= total:
                    break
                rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 2, step]))
                v1, v2 = prepare_views(dataset.images[idx], cfg, rng, dtype)
                pair.reseed_dropout(np.random.SeedSequence([tc.seed, 3, step]))
                res = train_step(pair, cfg, state, v1, v2)
                step += 1

                if initial_collapse is None:
                    initial_collapse = res.collapse
                min_collapse = res.collapse if min_collapse is None else min(min_collapse, res.collapse)
                if res.collapse < tc.collapse_floor * initial_collapse:
                    low_run += 1
                else:
                    low_run = 0
                if low_run == tc.collapse_patience and not collapsed:
                    collapsed = True
                    logger.warning("representation collapse: metric %.3g at step %d", res.collapse, step)
                    if tc.strict_collapse:
                        raise CollapseError(
                            f"representation collapse detected at step {step}", step, res.collapse, initial_collapse
                        )

                if step % tc.log_every == 0 or step == total:
                    wall = 0.0 if tc.deterministic else time.perf_counter() - t0
                    rec = MetricsRecord(
                        step, epoch, res.loss, res.diagonal, res.refinement, res.collapse, res.positives, res.negatives, wall
                    )
                    metrics.append(rec)
                    writer.write(rec)
                    if callback is not None:
                        callback(rec)
                if tc.checkpoint_every and step % tc.checkpoint_every == 0 and step != total:
                    checkpoint(step)
    finally:
        writer.close()
    if step > start or (start == 0 and total == 0 and not checkpoints):
        checkpoint(step)
    return TrainResult(cfg, pair, state, metrics, checkpoints, step, collapsed, initial_collapse, min_collapse)


def smoothed(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
