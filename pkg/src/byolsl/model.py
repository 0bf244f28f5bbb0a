"""Encoders, projection heads, and the online/target network pair."""

from __future__ import annotations

import copy
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

PRESETS = ("tiny-cnn", "resnet18")
PLACEMENTS = ("everywhere", "encoder-only", "none")
RESNET18_WIDTH = 512
RESNET18_STAGES = (64, 128, 256, 512)

DEFAULT_TAU = 0.996


@dataclass
class EncoderConfig:
    preset: str = "tiny-cnn"
    norm: str = "bn"
    gn_groups: int = nn.GN_DEFAULT_GROUPS
    weight_standardize: bool = False
    norm_placement: str = "everywhere"
    dropout: float = 0.0
    width: int = 64
    in_channels: int = 3

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ContractError(f"unknown encoder preset {self.preset!r}; expected one of {PRESETS}")
        if self.norm_placement not in PLACEMENTS:
            raise ContractError(f"unknown norm placement {self.norm_placement!r}; expected one of {PLACEMENTS}")
        nn.NormKind(self.norm, self.gn_groups)
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout rate must lie in [0, 1)")

    @property
    def representation_width(self) -> int:
        return RESNET18_WIDTH if self.preset == "resnet18" else self.width

    def encoder_norm(self) -> nn.NormKind:
        kind = self.norm if self.norm_placement in ("everywhere", "encoder-only") else "none"
        return nn.NormKind(kind, self.gn_groups)

    def head_norm(self) -> nn.NormKind:
        kind = self.norm if self.norm_placement == "everywhere" else "none"
        return nn.NormKind(kind, self.gn_groups)


# -------------------------------------------------------------------- encoders


class ConvNormAct(nn.Module):
    def __init__(self, cin, cout, kernel, stride, padding, norm: nn.NormKind, ws: bool, rng, act=True):
        self.conv = nn.Conv2d(
            cin, cout, kernel, rng, stride=stride, padding=padding, bias=norm.kind == "none", standardize=ws
        )
        self.norm = norm.build(cout)
        self.act = act

    def forward(self, x):
        x = self.norm(self.conv(x))
        return T.relu(x) if self.act else x


class TinyCNN(nn.Module):
    """Four stride-2 3x3 conv stages and global average pooling.

    Desk-scale stand-in for the residual encoder; channels run
    width/4, width/2, width, width.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        w = cfg.width
        chans = [cfg.in_channels, max(w // 4, 1), max(w // 2, 1), w, w]
        norm = cfg.encoder_norm()
        self.stages = [
            ConvNormAct(chans[i], chans[i + 1], 3, 2, 1, norm, cfg.weight_standardize, rng) for i in range(4)
        ]
        self.drops = [nn.Dropout(cfg.dropout) for _ in range(3)]

    def forward(self, x):
        for i, stage in enumerate(self.stages):
            if i:
                x = self.drops[i - 1](x)
            x = stage(x)
        return T.mean(x, (2, 3))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, norm: nn.NormKind, ws: bool, rng):
        self.conv1 = ConvNormAct(cin, cout, 3, stride, 1, norm, ws, rng)
        self.conv2 = ConvNormAct(cout, cout, 3, 1, 1, norm, ws, rng, act=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = ConvNormAct(cin, cout, 1, stride, 0, norm, ws, rng, act=False)

    def forward(self, x):
        out = self.conv2(self.conv1(x))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.relu(out + skip)


class ResNet18(nn.Module):
    """18-layer residual encoder without the classifier; 512-wide output.

    Dropout sits between the four residual stages.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        norm = cfg.encoder_norm()
        ws = cfg.weight_standardize
        self.stem = ConvNormAct(cfg.in_channels, 64, 7, 2, 3, norm, ws, rng)
        blocks = []
        cin = 64
        for i, cout in enumerate(RESNET18_STAGES):
            stride = 1 if i == 0 else 2
            blocks.append(nn.Sequential(BasicBlock(cin, cout, stride, norm, ws, rng), BasicBlock(cout, cout, 1, norm, ws, rng)))
            cin = cout
        self.blocks = blocks
        self.drops = [nn.Dropout(cfg.dropout) for _ in range(3)]

    def forward(self, x):
        x = T.max_pool2d(self.stem(x), 3, 2, 1)
        for i, block in enumerate(self.blocks):
            if i:
                x = self.drops[i - 1](x)
            x = block(x)
        return T.mean(x, (2, 3))


class MLPHead(nn.Module):
    """Linear -> norm -> relu -> Linear, all widths equal."""

    def __init__(self, width: int, norm: nn.NormKind, rng: np.random.Generator):
        self.fc1 = nn.Linear(width, width, rng, bias=norm.kind == "none")
        self.norm = norm.build(width)
        self.fc2 = nn.Linear(width, width, rng)

    def forward(self, x):
        return self.fc2(T.relu(self.norm(self.fc1(x))))


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> nn.Module:
    if cfg.preset == "resnet18":
        return ResNet18(cfg, rng)
    return TinyCNN(cfg, rng)


# ------------------------------------------------------------------ model pair


class OnlineNetwork(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        width = cfg.representation_width
        self.encoder = build_encoder(cfg, rng)
        self.projector = MLPHead(width, cfg.head_norm(), rng)
        self.predictor = MLPHead(width, cfg.head_norm(), rng)


class TargetNetwork(nn.Module):
    def __init__(self, online: OnlineNetwork):
        self.encoder = copy.deepcopy(online.encoder)
        self.projector = copy.deepcopy(online.projector)
        for p in self.parameters():
            p.requires_grad = False


def _check_input(cfg: EncoderConfig, v: Tensor) -> None:
    if v.ndim != 4 or v.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected images of shape (N, {cfg.in_channels}, H, W), got {v.shape}")


@dataclass
class Outputs:
    representation: Tensor
    projection: Tensor
    prediction: Tensor | None = None


@dataclass
class ModelPair:
    """Online parameters (encoder, projector, predictor) and their slow
    moving-average copy (encoder, projector) used as the target."""

    config: EncoderConfig
    tau: float = DEFAULT_TAU
    seed: int = 0
    online: OnlineNetwork = field(init=False)
    target: TargetNetwork = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError(f"tau must lie in [0, 1], got {self.tau}")
        rng = np.random.default_rng(self.seed)
        self.online = OnlineNetwork(self.config, rng)
        self.target = TargetNetwork(self.online)

    def forward_online(self, v: Tensor) -> Outputs:
        _check_input(self.config, v)
        y = self.online.encoder(v)
        z = self.online.projector(y)
        return Outputs(y, z, self.online.predictor(z))

    def forward_target(self, v: Tensor) -> Tensor:
        """Target projection, cut from the graph."""
        _check_input(self.config, v)
        with T.no_grad():
            z = self.target.projector(self.target.encoder(v))
        return T.stop_gradient(z)

    def online_parameters(self) -> dict[str, Tensor]:
        return self.online.named_parameters()

    def target_parameters(self) -> dict[str, Tensor]:
        return self.target.named_parameters()

    def train(self, mode: bool = True) -> None:
        self.online.train(mode)
        self.target.train(mode)

    def eval(self) -> None:
        self.train(False)

    def reseed_dropout(self, seed_seq: np.random.SeedSequence) -> None:
        drops = [m for net in (self.online, self.target) for m in net.modules() if isinstance(m, nn.Dropout)]
        for m, child in zip(drops, seed_seq.spawn(len(drops))):
            m.rng = np.random.default_rng(child)

    def encode(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Online encoder features in inference mode, no graph."""
        was = self.online.training
        self.online.eval()
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.online.encoder(Tensor(images[i : i + batch_size])).data)
        self.online.train(was)
        return np.concatenate(out) if out else np.zeros((0, self.config.representation_width))


def ema_update(pair: ModelPair, tau: float | None = None) -> None:
    """target <- tau * target + (1 - tau) * online, elementwise, in place."""
    tau = pair.tau if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    online = pair.online_parameters()
    for name, xi in pair.target_parameters().items():
        theta = online[name].data
        if xi.shape != theta.shape:
            raise DimensionError(f"ema_update: {name} has shapes {xi.shape} vs {theta.shape}")
        t = xi.data.dtype.type(tau)
        xi.data = t * xi.data + (xi.data.dtype.type(1.0) - t) * theta


def parameter_table(module: nn.Module) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, p.shape, int(p.size)) for name, p in module.named_parameters().items()]


def count_parameters(module: nn.Module) -> int:
    return sum(int(p.size) for p in module.parameters())


def param_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ checkpoint
#
# Layout, all integers little-endian:
#   magic      8 bytes  b"BYOLSLCK"
#   version    u32      CHECKPOINT_VERSION
#   digest     32 bytes sha256 of the config text
#   config     u32 length + utf-8 run config text
#   step       u64
#   sections   u32 count, then per section:
#                u16 name length + utf-8 name
#                u32 entry count, then per entry:
#                  u16 name length + utf-8 name
#                  u8 ndim, ndim x u32 extents
#                  float32 data, C order
# Sections written by ``save_checkpoint``: online, target, velocity,
# online_buffers, target_buffers.

MAGIC = b"BYOLSLCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    step: int
    sections: dict[str, dict[str, np.ndarray]]
    version: int = CHECKPOINT_VERSION

    @property
    def digest(self) -> str:
        return config_digest(self.config_text)


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_str(buf, s: str, fmt: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<" + fmt, len(raw)))
    buf.write(raw)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(bytes.fromhex(ckpt.digest))
    _write_str(buf, ckpt.config_text, "I")
    buf.write(struct.pack("<Q", ckpt.step))
    buf.write(struct.pack("<I", len(ckpt.sections)))
    for sname, entries in ckpt.sections.items():
        _write_str(buf, sname, "H")
        buf.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            arr = np.asarray(arr)
            _write_str(buf, name, "H")
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def string(self, fmt: str, what: str) -> str:
        (n,) = self.unpack(fmt, what)
        return self.take(n, what).decode("utf-8")


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32, "digest").hex()
    config_text = r.string("I", "config")
    if config_digest(config_text) != digest:
        raise CheckpointError("config digest does not match stored config")
    (step,) = r.unpack("Q", "step")
    (nsec,) = r.unpack("I", "section count")
    sections: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(nsec):
        sname = r.string("H", "section name")
        (count,) = r.unpack("I", "entry count")
        entries = {}
        for _ in range(count):
            name = r.string("H", "entry name")
            (ndim,) = r.unpack("B", f"{name} rank")
            shape = r.unpack(f"{ndim}I", f"{name} shape") if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").reshape(shape)
            entries[name] = data.astype(np.float32)
        sections[sname] = entries
    if r.pos != len(raw):
        raise CheckpointError(f"trailing bytes after checkpoint at byte offset {r.pos}")
    return Checkpoint(config_text=config_text, step=step, sections=sections, version=version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def pair_state(pair: ModelPair, velocity: dict[str, np.ndarray] | None = None) -> dict[str, dict[str, np.ndarray]]:
    return {
        "online": {k: v.data for k, v in pair.online_parameters().items()},
        "target": {k: v.data for k, v in pair.target_parameters().items()},
        "velocity": dict(velocity or {}),
        "online_buffers": pair.online.named_buffers(),
        "target_buffers": pair.target.named_buffers(),
    }


def _assign(params: dict[str, Tensor], values: dict[str, np.ndarray], what: str) -> None:
    missing = set(params) - set(values)
    extra = set(values) - set(params)
    if missing or extra:
        raise CheckpointError(f"{what}: parameter names differ (missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, p in params.items():
        if p.shape != values[name].shape:
            raise CheckpointError(f"{what}: {name} has shape {values[name].shape}, model expects {p.shape}")
        p.data = np.array(values[name], dtype=p.dtype)


def _assign_buffers(module: nn.Module, values: dict[str, np.ndarray]) -> None:
    for prefix, m in _named_modules(module):
        for b in getattr(m, "_buffers", ()):
            key = prefix + b
            if key in values:
                getattr(m, b)[...] = values[key]


def _named_modules(module: nn.Module, prefix: str = ""):
    yield prefix, module
    for name, child in module.children():
        yield from _named_modules(child, f"{prefix}{name}.")


def restore_pair(pair: ModelPair, sections: dict[str, dict[str, np.ndarray]], target: bool = True) -> None:
    _assign(pair.online_parameters(), sections["online"], "online")
    _assign_buffers(pair.online, sections.get("online_buffers", {}))
    if target:
        _assign(pair.target_parameters(), sections["target"], "target")
        _assign_buffers(pair.target, sections.get("target_buffers", {}))
