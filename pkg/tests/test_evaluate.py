import csv
import logging

import numpy as np
import pytest
from PIL import Image

from byolsl import evaluate as E
from byolsl import tensor as T
from byolsl import train as TR
from byolsl.config import ConfigError, ProbeConfig
from byolsl.data import DataError, ImageDataset
from byolsl.model import load_checkpoint, param_checksum

from .conftest import tiny_config

FAST = ProbeConfig(lr=0.1, max_epochs=60, patience=10, batch_size=32)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    TR.train_run(tiny_config(max_steps=4, checkpoint_every=2), out)
    return out


def _labeled(rng, n, classes=2, size=16):
    return ImageDataset(rng.integers(0, 256, size=(n, 3, size, size), dtype=np.uint8),
                        np.arange(n) % classes + 1, "train")


# ------------------------------------------------------------------ probe


def test_cross_entropy_uniform_logits():
    loss = E.cross_entropy(T.Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert float(loss.data) == pytest.approx(np.log(4))


def test_cross_entropy_gradient(rng):
    targets = rng.integers(0, 5, size=6)
    rep = T.grad_check(lambda z: E.cross_entropy(z, targets), [T.Tensor(rng.normal(size=(6, 5)))])
    assert rep.passed, str(rep)


def test_one_sample_per_class_memorized(rng):
    x = rng.normal(size=(5, 8))
    y = np.arange(1, 6)
    acc, per_class, curve, _ = E.probe_features(x, y, x, y, FAST)
    assert acc == 1.0 and per_class == {c: 1.0 for c in range(1, 6)}
    assert curve[-1] < curve[0]


def test_random_features_near_chance(rng):
    classes = 4
    train_x, test_x = rng.normal(size=(400, 16)), rng.normal(size=(2000, 16))
    train_y, test_y = rng.integers(1, classes + 1, 400), rng.integers(1, classes + 1, 2000)
    acc, *_ = E.probe_features(train_x, train_y, test_x, test_y, FAST)
    assert abs(acc - 1 / classes) < 0.05


def test_separable_features_solved(rng):
    y = rng.integers(1, 4, 300)
    x = np.eye(3)[y - 1] * 3 + 0.1 * rng.normal(size=(300, 3))
    acc, *_ = E.probe_features(x[:200], y[:200], x[200:], y[200:], FAST)
    assert acc == 1.0


def test_probe_stops_on_plateau(rng):
    x = rng.normal(size=(20, 4))
    y = np.arange(20) % 2 + 1
    _, curve, epochs = E.train_probe(x, y, 2, ProbeConfig(lr=0.0, max_epochs=50, patience=3))
    assert epochs == 4 == len(curve)


def test_labels_beyond_classes_rejected(rng):
    x = rng.normal(size=(4, 3))
    with pytest.raises(ConfigError, match="labels"):
        E.probe_features(x, np.array([1, 2, 3, 4]), x, np.array([1, 2, 3, 4]), FAST, classes=3)


# ------------------------------------------------------------- linear eval


def test_linear_eval_report_and_frozen_encoder(run_dir, rng):
    path = E.run_checkpoints(run_dir)[-1][1]
    ckpt = load_checkpoint(path)
    before = {k: v.copy() for k, v in ckpt.sections["online"].items()}
    report = E.linear_eval(path, _labeled(rng, 40), _labeled(rng, 20), FAST)
    assert 0.0 <= report.accuracy <= 1.0 and set(report.per_class) == {1, 2}
    assert report.step == ckpt.step and report.checkpoint == ckpt.digest
    assert report.epochs == len(report.curve)
    after = load_checkpoint(path).sections["online"]
    assert all(np.array_equal(after[k], v) for k, v in before.items())
    assert '"accuracy"' in report.to_json()


def test_features_deterministic_in_eval_mode(run_dir, rng):
    ckpt = load_checkpoint(E.run_checkpoints(run_dir)[-1][1])
    pair, cfg = E.pair_from_checkpoint(ckpt)
    images = _labeled(rng, 6).images
    before = param_checksum(pair.online_parameters())
    a = E.extract_features(pair, images, cfg)
    b = E.extract_features(pair, images[:3], cfg)
    np.testing.assert_allclose(a[:3], b, rtol=1e-5, atol=1e-6)
    assert param_checksum(pair.online_parameters()) == before


def test_linear_eval_needs_labels(run_dir, rng):
    unlabeled = ImageDataset(_labeled(rng, 4).images, None, "unlabeled")
    with pytest.raises(DataError):
        E.linear_eval(E.run_checkpoints(run_dir)[-1][1], unlabeled, unlabeled, FAST)


def test_eval_datasets_synthetic_split_differs():
    cfg = tiny_config()
    train, test = E.eval_datasets(cfg)
    assert len(train) == 32 and len(test) == 16
    assert not np.array_equal(train.images[:16], test.images)


# ------------------------------------------------------------- similarity


def _write_images(tmp_path, rng, n, size=16):
    lines = []
    for i in range(n):
        name = f"img{i}.png"
        Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(tmp_path / name)
        lines.append(name)
    return lines


def test_read_image_list_relative_paths_and_comments(tmp_path, rng):
    names = _write_images(tmp_path, rng, 3, size=20)
    (tmp_path / "list.txt").write_text("# header\n" + "\n".join(names) + "\n\n")
    images, got = E.read_image_list(tmp_path / "list.txt", size=16)
    assert images.shape == (3, 3, 16, 16) and got == names
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_read_image_list_reports_every_bad_entry(tmp_path, rng):
    names = _write_images(tmp_path, rng, 1)
    (tmp_path / "junk.png").write_bytes(b"not an image")
    (tmp_path / "list.txt").write_text(f"{names[0]}\nmissing.png\njunk.png\n")
    with pytest.raises(DataError, match=r"(?s)list.txt:2.*missing.png.*list.txt:3.*junk.png"):
        E.read_image_list(tmp_path / "list.txt")
    with pytest.raises(DataError, match="not found"):
        E.read_image_list(tmp_path / "nope.txt")


def test_similarity_report_files(run_dir, tmp_path, rng):
    names = _write_images(tmp_path, rng, 3)
    (tmp_path / "list.txt").write_text("\n".join(names))
    images, names = E.read_image_list(tmp_path / "list.txt", 16)
    sim = E.similarity_report(E.run_checkpoints(run_dir)[-1][1], images, 0.8, -0.5, tmp_path / "out", names)
    assert sim.scores.shape == (3, 3) and np.all(np.abs(sim.scores) <= 1 + 1e-9)
    with open(tmp_path / "out" / "similarity.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    for r in rows:
        i, j = int(r["row"]), int(r["col"])
        assert float(r["score"]) == sim.scores[i, j]
        assert int(r["positive"]) == (i != j and sim.scores[i, j] >= 0.8)
        assert int(r["negative"]) == (i != j and sim.scores[i, j] <= -0.5)
        assert r["row_image"] == names[i]
    svg = (tmp_path / "out" / "similarity.svg").read_text()
    assert svg.count("<rect") == 9 and svg.startswith("<svg")


def test_duplicate_images_score_identically(run_dir, rng):
    img = rng.random((1, 3, 16, 16))
    sim = E.similarity_report(E.run_checkpoints(run_dir)[-1][1], np.concatenate([img, img, rng.random((1, 3, 16, 16))]))
    np.testing.assert_allclose(sim.scores[0, 1], sim.scores[0, 0], rtol=1e-5)
    np.testing.assert_allclose(sim.scores[:, 0], sim.scores[:, 1], rtol=1e-5)


def test_similarity_needs_two_images(run_dir, rng):
    with pytest.raises(ConfigError, match="at least 2"):
        E.similarity_report(E.run_checkpoints(run_dir)[-1][1], rng.random((1, 3, 16, 16)))


def test_svg_colors():
    assert E._cell_color(1.0) == "#ff0000"
    assert E._cell_color(0.0) == "#ffffff"
    assert E._cell_color(-1.0) == "#0000ff"


# ----------------------------------------------------------------- curves


def test_accuracy_curve_over_run(run_dir, rng):
    rows = E.accuracy_curve(run_dir, _labeled(rng, 40), _labeled(rng, 20), FAST)
    assert [s for s, _ in rows] == [0, 2, 4]
    with open(run_dir / "accuracy_curve.csv") as fh:
        assert next(csv.reader(fh)) == ["step", "accuracy"]


def test_accuracy_curve_warns_on_gaps(run_dir, tmp_path, rng, caplog):
    import shutil

    for name in ("ckpt_0000000.bin", "ckpt_0000004.bin", "config.resolved.cfg"):
        shutil.copy(run_dir / name, tmp_path / name)
    with caplog.at_level(logging.WARNING):
        rows = E.accuracy_curve(tmp_path, _labeled(rng, 20), _labeled(rng, 10), FAST)
    assert [s for s, _ in rows] == [0, 4]
    assert "partial" in caplog.text and "[2]" in caplog.text
    with pytest.raises(DataError):
        E.accuracy_curve(tmp_path / "empty")


@pytest.mark.parametrize(
    "values,expected",
    [([0.3, 0.4, 0.5, 0.6], True), ([0.5, 0.48, 0.52, 0.55], True), ([0.9, 0.9, 0.5, 0.4, 0.3], False)],
)
def test_curve_is_monotone(values, expected):
    assert E.curve_is_monotone(values) is expected
