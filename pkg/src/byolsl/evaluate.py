"""Linear evaluation of frozen encoders, similarity reports, accuracy curves."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import normalize, resize
from .config import ConfigError, ProbeConfig, RunConfig
from .data import DataError, ImageDataset, make_synthetic, read_stl10, to_float
from .loss import SimilarityMatrix, similarity_matrix
from .model import Checkpoint, ModelPair, load_checkpoint, param_checksum, restore_pair
from .nn import Linear
from .tensor import Tensor
from .train import OptimizerState, sgd_step

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict[int, float]
    curve: list[float]
    checkpoint: str
    step: int
    epochs: int

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, indent=2, sort_keys=True)


@dataclass
class LinearProbe:
    """A single fully connected layer on frozen features."""

    width: int
    classes: int
    seed: int = 0
    layer: Linear = field(init=False)

    def __post_init__(self):
        self.layer = Linear(self.width, self.classes, np.random.default_rng(self.seed))

    def logits(self, features: Tensor) -> Tensor:
        return self.layer(features)

    def predict(self, features: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return np.argmax(self.logits(Tensor(features)).data, axis=1)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``targets`` are 0-based class ids."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    log_norm = T.log(T.sum(T.exp(z), axis=1))
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(targets)), targets] = 1.0
    return T.mean(log_norm - T.sum(z * Tensor(onehot), axis=1))


# ---------------------------------------------------------------- features


def pair_from_checkpoint(ckpt: Checkpoint) -> tuple[ModelPair, RunConfig]:
    cfg = RunConfig.from_text(ckpt.config_text)
    T.set_default_dtype(cfg.train.dtype)
    pair = ModelPair(cfg.model, tau=cfg.train.tau)
    restore_pair(pair, ckpt.sections)
    pair.eval()
    return pair, cfg


def prepare_images(images: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """uint8 or [0, 1] images -> resized, channel-normalized network input."""
    x = resize(to_float(images), cfg.augment.size)
    if cfg.data.mean and cfg.data.std:
        x = normalize(x, cfg.data.mean, cfg.data.std)
    return x.astype(T.get_default_dtype(), copy=False)


def extract_features(pair: ModelPair, images: np.ndarray, cfg: RunConfig, batch_size: int = 256) -> np.ndarray:
    """Inference-mode encoder features, preparing one batch of images at a time."""
    chunks = [
        pair.encode(prepare_images(images[lo : lo + batch_size], cfg), batch_size)
        for lo in range(0, len(images), batch_size)
    ]
    if not chunks:
        return np.zeros((0, cfg.model.representation_width))
    return np.concatenate(chunks).astype(np.float64)


# ------------------------------------------------------------------ probing


def train_probe(
    features: np.ndarray, labels: np.ndarray, classes: int, cfg: ProbeConfig
) -> tuple[LinearProbe, list[float], int]:
    """SGD with momentum on cross-entropy until the epoch loss stops
    improving by ``min_delta`` for ``patience`` epochs, or ``max_epochs``."""
    with T.default_dtype("float64"):
        probe = LinearProbe(features.shape[1], classes, cfg.seed)
        params = probe.layer.named_parameters()
        state = OptimizerState(cfg.lr, cfg.momentum)
        targets = labels.astype(int) - 1
        rng = np.random.default_rng(cfg.seed)
        curve: list[float] = []
        best, stale, epoch = np.inf, 0, 0
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(features))
            total = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                loss = cross_entropy(probe.logits(Tensor(features[idx])), targets[idx])
                T.backward(loss)
                sgd_step(params, {k: p.grad for k, p in params.items()}, state)
                total += float(loss.data) * len(idx)
            curve.append(total / len(features))
            if curve[-1] < best - cfg.min_delta:
                best, stale = curve[-1], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return probe, curve, epoch


def _standardizer(train: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0) + 1e-6
    return lambda f: (f - mu) / sd


def probe_features(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    cfg: ProbeConfig,
    classes: int | None = None,
) -> tuple[float, dict[int, float], list[float], int]:
    classes = classes or int(max(train_y.max(), test_y.max()))
    if train_y.max() > classes or test_y.max() > classes:
        raise ConfigError(f"labels reach {max(train_y.max(), test_y.max())} but the probe has {classes} outputs")
    if cfg.standardize:
        scale = _standardizer(train_x)
        train_x, test_x = scale(train_x), scale(test_x)
    probe, curve, epochs = train_probe(train_x, train_y, classes, cfg)
    pred = probe.predict(test_x) + 1
    correct = pred == test_y
    per_class = {int(c): float(correct[test_y == c].mean()) for c in np.unique(test_y)}
    return float(correct.mean()), per_class, curve, epochs


def linear_eval(
    checkpoint: Checkpoint | str | Path,
    train_set: ImageDataset,
    test_set: ImageDataset,
    probe: ProbeConfig | None = None,
    classes: int | None = None,
) -> EvalReport:
    """Train a linear classifier on frozen online-encoder features and
    score it on ``test_set``. Norm layers run in inference mode."""
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, Checkpoint) else checkpoint
    if train_set.labels is None or test_set.labels is None:
        raise DataError("linear evaluation needs labeled train and test sets")
    pair, cfg = pair_from_checkpoint(ckpt)
    probe = probe or cfg.probe
    before = param_checksum(pair.online_parameters())
    train_x = extract_features(pair, train_set.images, cfg)
    test_x = extract_features(pair, test_set.images, cfg)
    acc, per_class, curve, epochs = probe_features(
        train_x, train_set.labels, test_x, test_set.labels, probe, classes
    )
    if param_checksum(pair.online_parameters()) != before:
        raise RuntimeError("encoder parameters changed during linear evaluation")
    return EvalReport(acc, per_class, curve, ckpt.digest, ckpt.step, epochs)


def eval_datasets(cfg: RunConfig, data_dir: str | Path | None = None) -> tuple[ImageDataset, ImageDataset]:
    """Labeled (train, test) sets for a run: STL10 splits from ``data_dir``,
    otherwise the run's synthetic set and a fresh draw with a shifted seed."""
    if data_dir is not None:
        return read_stl10(data_dir, "train"), read_stl10(data_dir, "test")
    spec = cfg.synthetic
    train = make_synthetic(spec, split="train")
    test = make_synthetic(replace(spec, seed=spec.seed + 1, per_class=max(1, spec.per_class // 2)), split="test")
    return train, test


# ------------------------------------------------------------- similarities


def read_image_list(path: str | Path, size: int | None = None) -> tuple[np.ndarray, list[str]]:
    """Load every image named in a list file (one path per line, relative
    paths resolved against the list, ``#`` comments) as an (N, 3, S, S)
    float array in [0, 1]. Images are resized to ``size`` (default: the
    first image's size). All unreadable entries are reported together."""
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise DataError(f"image list not found: {path}")
    images, names, errors = [], [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        entry = raw.split("#", 1)[0].strip()
        if not entry:
            continue
        p = Path(entry) if Path(entry).is_absolute() else path.parent / entry
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
        except (OSError, ValueError) as exc:
            errors.append(f"{path}:{lineno}: cannot read {entry!r}: {exc}")
            continue
        size = size or arr.shape[1]
        images.append(resize(arr[None], size)[0])
        names.append(entry)
    if errors:
        raise DataError("unreadable image entries:\n" + "\n".join(errors))
    stacked = np.stack(images) if images else np.zeros((0, 3, size or 1, size or 1), np.float32)
    return stacked, names


def pair_similarities(pair: ModelPair, images: np.ndarray, cfg: RunConfig, theta_p: float, theta_n: float) -> SimilarityMatrix:
    """Cosine similarities between online predictions (rows) and target
    projections (columns) of un-augmented images."""
    x = Tensor(prepare_images(images, cfg))
    pair.eval()
    with T.no_grad():
        q = T.l2_normalize(pair.forward_online(x).prediction).data
        z = T.l2_normalize(pair.forward_target(x)).data
    return similarity_matrix(q.astype(np.float64), z.astype(np.float64), theta_p, theta_n)


def write_similarity_csv(path: Path, sim: SimilarityMatrix, names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "row_image", "col_image", "score", "positive", "negative"])
        for i in range(sim.n):
            for j in range(sim.n):
                w.writerow([i, j, names[i], names[j], repr(float(sim.scores[i, j])),
                            int(sim.positive[i, j]), int(sim.negative[i, j])])


def _cell_color(v: float) -> str:
    # diverging blue (-1) / white (0) / red (+1)
    v = float(np.clip(v, -1.0, 1.0))
    if v >= 0:
        r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
    else:
        r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def similarity_svg(sim: SimilarityMatrix, names: list[str], cell: int = 48) -> str:
    n = sim.n
    pad = 24
    size = pad + n * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'font-family="monospace" font-size="{max(8, cell // 4)}">'
    ]
    for i in range(n):
        parts.append(f'<text x="{pad + i * cell + cell // 2}" y="{pad - 6}" text-anchor="middle">{i}</text>')
        parts.append(f'<text x="{pad - 4}" y="{pad + i * cell + cell // 2 + 4}" text-anchor="end">{i}</text>')
        for j in range(n):
            v = float(sim.scores[i, j])
            x, y = pad + j * cell, pad + i * cell
            stroke = ' stroke="black" stroke-width="2"' if sim.positive[i, j] else ""
            stroke = ' stroke="navy" stroke-width="2" stroke-dasharray="4"' if sim.negative[i, j] else stroke
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_cell_color(v)}"{stroke}/>')
            parts.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" text-anchor="middle">{v:.2f}</text>')
    parts.append("<!-- " + " | ".join(f"{i}: {name}" for i, name in enumerate(names)).replace("--", "- -") + " -->")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def similarity_report(
    checkpoint: Checkpoint | str | Path,
    images: np.ndarray,
    theta_p: float | None = None,
    theta_n: float | None = None,
    output: str | Path | None = None,
    names: list[str] | None = None,
) -> SimilarityMatrix:
    """Similarity matrix of ``images`` under a checkpoint; optionally writes
    ``similarity.csv`` and ``similarity.svg`` into ``output``."""
    if len(images) < 2:
        raise ConfigError(f"similarity report needs at least 2 images, got {len(images)}")
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, Checkpoint) else checkpoint
    pair, cfg = pair_from_checkpoint(ckpt)
    theta_p = cfg.loss.theta_p if theta_p is None else theta_p
    theta_n = cfg.loss.theta_n if theta_n is None else theta_n
    sim = pair_similarities(pair, images, cfg, theta_p, theta_n)
    names = names or [f"image{i}" for i in range(len(images))]
    if output is not None:
        out = Path(output)
        out.mkdir(parents=True, exist_ok=True)
        write_similarity_csv(out / "similarity.csv", sim, names)
        (out / "similarity.svg").write_text(similarity_svg(sim, names))
    return sim


# ------------------------------------------------------------------- curves

_CKPT = re.compile(r"ckpt_(\d+)\.bin$")


def run_checkpoints(run_dir: str | Path) -> list[tuple[int, Path]]:
    found = []
    for p in Path(run_dir).glob("ckpt_*.bin"):
        m = _CKPT.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def accuracy_curve(
    run_dir: str | Path,
    train_set: ImageDataset | None = None,
    test_set: ImageDataset | None = None,
    probe: ProbeConfig | None = None,
    output: str | Path | None = None,
) -> list[tuple[int, float]]:
    """Probe every checkpoint in a run directory, in step order, and write
    ``accuracy_curve.csv`` (columns step, accuracy)."""
    run_dir = Path(run_dir)
    ckpts = run_checkpoints(run_dir)
    if not ckpts:
        raise DataError(f"no checkpoints in {run_dir}")
    cfg_path = run_dir / "config.resolved.cfg"
    if cfg_path.exists():
        cfg = RunConfig.from_text(cfg_path.read_text(), source=str(cfg_path))
        every, last = cfg.train.checkpoint_every, ckpts[-1][0]
        if every:
            expected = set(range(0, last + 1, every)) | {last}
            missing = sorted(expected - {s for s, _ in ckpts})
            if missing:
                logger.warning("accuracy curve is partial: missing checkpoints for steps %s", missing)
    if train_set is None or test_set is None:
        first = load_checkpoint(ckpts[0][1])
        train_set, test_set = eval_datasets(RunConfig.from_text(first.config_text))
    rows = []
    for step, path in ckpts:
        try:
            report = linear_eval(path, train_set, test_set, probe)
        except (ValueError, OSError) as exc:
            logger.warning("skipping unreadable checkpoint %s: %s", path, exc)
            continue
        rows.append((step, report.accuracy))
    out = Path(output) if output is not None else run_dir / "accuracy_curve.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "accuracy"])
        w.writerows([(s, repr(a)) for s, a in rows])
    return rows


def curve_is_monotone(values, tolerance: float = 0.05, window: int = 3) -> bool:
    """Non-decreasing within ``tolerance`` after a moving-average of ``window``."""
    v = np.asarray(values, dtype=float)
    if len(v) >= window:
        v = np.convolve(v, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(v) >= -tolerance))
