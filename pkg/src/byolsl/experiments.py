"""Desk-scale experiment runs shared by ``scripts/`` and the acceptance tests.

A desk run trains the tiny CNN on the synthetic shapes with the desk
profile, then scores the final online encoder with a linear probe.

Refinement losses (``ccsl``, ``ccsl-with-repulsion``, ``cssl``) select pairs
from the similarity of the current representations, which is only
meaningful once the encoder has learned something. ``desk_experiment``
therefore warm-starts them from a BYOL checkpoint trained for
``WARM_STEPS`` steps and fine-tunes for the rest of the step budget; plain
``byol`` trains cold for the whole budget.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import RunConfig, desk_profile
from .evaluate import eval_datasets, linear_eval
from .model import save_checkpoint
from .train import CollapseError, make_checkpoint, train_run

VARIANTS = ("byol", "ccsl", "ccsl-with-repulsion", "cssl")
REFINEMENTS = ("ccsl", "ccsl-with-repulsion", "cssl")
DESK_STEPS = 2000
WARM_STEPS = 1000
NORMS = {"bn": ("bn", False), "ln+ws": ("ln", True), "gn+ws": ("gn", True), "bn+ws": ("bn", True), "none": ("none", False)}


@dataclass
class RunSummary:
    variant: str
    seed: int
    norm: str
    steps: int
    accuracy: float | None
    initial_collapse: float
    final_collapse: float
    min_collapse_ratio: float
    collapsed: bool
    seconds: float
    collapse_trace: list[tuple[int, float]] = field(default_factory=list)
    warm_steps: int = 0
    warm_seconds: float = 0.0

    @property
    def final_collapse_ratio(self) -> float:
        return self.final_collapse / self.initial_collapse


def desk_config(variant: str = "byol", seed: int = 0, norm: str = "bn", steps: int | None = None) -> RunConfig:
    if norm not in NORMS:
        raise ValueError(f"unknown normalization setting {norm!r}; expected one of {sorted(NORMS)}")
    layer, ws = NORMS[norm]
    cfg = desk_profile()
    train = replace(cfg.train, seed=seed, log_every=10)
    if steps is not None:
        train = replace(train, max_steps=steps)
    return cfg.replace(
        loss=replace(cfg.loss, variant=variant),
        model=replace(cfg.model, norm=layer, weight_standardize=ws),
        train=train,
    )


def desk_run(
    cfg: RunConfig,
    output_dir: str | Path | None = None,
    evaluate: bool = True,
    stop_below: float | None = None,
) -> RunSummary:
    """Train ``cfg``; optionally probe the final encoder.

    ``stop_below`` ends training early once the collapse metric falls under
    that fraction of its initial value (the run is then reported collapsed).
    """
    start = time.perf_counter()
    if stop_below is not None:
        cfg = cfg.replace(train=replace(cfg.train, strict_collapse=True, collapse_floor=stop_below, collapse_patience=1))
    trace: list[tuple[int, float]] = []
    try:
        result = train_run(cfg, output_dir, callback=lambda rec: trace.append((rec.step, rec.collapse)))
    except CollapseError as exc:
        trace.append((exc.step, exc.value))
        collapsed, initial, lowest, final, steps, accuracy = True, exc.initial, exc.value, exc.value, exc.step, None
    else:
        collapsed, initial, lowest, steps = result.collapsed, result.initial_collapse, result.min_collapse, result.steps
        final = trace[-1][1] if trace else initial
        accuracy = None
        if evaluate:
            ckpt = make_checkpoint(result.config, result.pair, result.state, result.steps)
            train_set, test_set = eval_datasets(result.config)
            accuracy = linear_eval(ckpt, train_set, test_set).accuracy
    return RunSummary(
        variant=cfg.loss.variant,
        seed=cfg.train.seed,
        norm=f"{cfg.model.norm}{'+ws' if cfg.model.weight_standardize else ''}",
        steps=steps,
        accuracy=accuracy,
        initial_collapse=initial,
        final_collapse=final,
        min_collapse_ratio=lowest / initial,
        collapsed=collapsed,
        seconds=time.perf_counter() - start,
        collapse_trace=trace,
    )


_WARM: dict[tuple[int, str, int], tuple[Path, float]] = {}


def warm_checkpoint(seed: int, norm: str = "bn", steps: int = WARM_STEPS, directory: str | Path | None = None) -> tuple[Path, float]:
    """BYOL checkpoint after ``steps`` desk steps, and the seconds it took.

    Cached per process, so every refinement variant of a seed starts from
    the same weights; the cached entry reports its original cost.
    """
    key = (seed, norm, steps)
    if key not in _WARM:
        directory = Path(directory or tempfile.mkdtemp(prefix="byolsl-warm-"))
        directory.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        result = train_run(desk_config("byol", seed, norm, steps))
        path = directory / f"byol_{norm}_seed{seed}_{steps}.bin"
        save_checkpoint(path, make_checkpoint(result.config, result.pair, result.state, result.steps))
        _WARM[key] = (path, time.perf_counter() - start)
    return _WARM[key]


def desk_experiment(
    variant: str,
    seed: int,
    norm: str = "bn",
    steps: int = DESK_STEPS,
    warm_steps: int = WARM_STEPS,
    output_dir: str | Path | None = None,
    **kwargs,
) -> RunSummary:
    """Desk protocol: cold ``byol``, or refinement fine-tuned from a BYOL warm start.

    ``steps`` is the total budget including the warm-start phase, whose cost
    is added to ``seconds``. ``kwargs`` go to ``desk_run``.
    """
    if variant not in REFINEMENTS or warm_steps <= 0:
        return desk_run(desk_config(variant, seed, norm, steps), output_dir, **kwargs)
    if not 0 < warm_steps < steps:
        raise ValueError(f"warm_steps must be below the total budget {steps}, got {warm_steps}")
    path, warm_seconds = warm_checkpoint(seed, norm, warm_steps)
    cfg = desk_config(variant, seed, norm, steps - warm_steps)
    cfg = cfg.replace(train=replace(cfg.train, warm_start=str(path)))
    summary = desk_run(cfg, output_dir, **kwargs)
    return replace(summary, steps=summary.steps + warm_steps, seconds=summary.seconds + warm_seconds,
                   warm_steps=warm_steps, warm_seconds=warm_seconds)
