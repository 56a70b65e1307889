"""SPANet: crop image + environment one-hot -> axis endpoints and 6 action success rates."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

logger = logging.getLogger(__name__)

ACTIONS = ("VS-0", "VS-90", "TV-0", "TV-90", "TA-0", "TA-90")
ENVS = ("ISO", "WALL", "STACK")
PARAM_BUDGET = (900_000, 1_300_000)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class SpanetConfig:
    input_size: int = 288
    k_actions: int = 6
    env_dim: int = 3
    # (out_channels, kernel, stride, padding, pool_after) per base conv
    conv_channels: list[int] = field(default_factory=lambda: [16, 48, 64, 96, 128, 128, 128])
    conv_kernels: list[int] = field(default_factory=lambda: [8, 3, 3, 3, 3, 3, 3])
    conv_strides: list[int] = field(default_factory=lambda: [4, 1, 1, 1, 1, 1, 1])
    conv_pool: list[bool] = field(default_factory=lambda: [True, True, False, True, False, True, True])
    fcn_channels: list[int] = field(default_factory=lambda: [640, 256, 128])
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def out_dim(self) -> int:
        return 4 + self.k_actions

    def spatial_schedule(self) -> list[int]:
        """Spatial side length after each base conv block (post pooling)."""
        sides, s = [], self.input_size
        for k, st, pool in zip(self.conv_kernels, self.conv_strides, self.conv_pool):
            pad = k // 2 if st == 1 else (k - st) // 2
            s = (s + 2 * pad - k) // st + 1
            if pool:
                s //= 2
            sides.append(s)
        return sides

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1] * self.spatial_schedule()[-1] ** 2

    def parameter_count(self) -> int:
        """Closed-form count: conv weights+biases, batchnorm affine, fcn, final linear."""
        total, c = 0, 3
        for o, k in zip(self.conv_channels, self.conv_kernels):
            total += o * c * k * k + o + 2 * o
            c = o
        f = self.feature_dim + self.env_dim
        for g in self.fcn_channels:
            total += g * f + g
            f = g
        total += self.out_dim * f + self.out_dim
        return total

    def validate(self, enforce_budget: bool = True) -> None:
        n = len(self.conv_channels)
        if n != 7:
            raise ConfigError(f"base network needs exactly 7 conv layers, got {n}")
        for name in ("conv_kernels", "conv_strides", "conv_pool"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} must have {n} entries")
        if len(self.fcn_channels) != 3:
            raise ConfigError(f"head needs exactly 3 fully convolutional layers, got {len(self.fcn_channels)}")
        if self.k_actions != 6 or self.env_dim != 3:
            raise ConfigError("k_actions must be 6 and env_dim 3")
        sides = self.spatial_schedule()
        if min(sides) < 1:
            raise ConfigError(f"input_size {self.input_size} collapses to zero spatially: {sides}")
        if enforce_budget:
            lo, hi = PARAM_BUDGET
            count = self.parameter_count()
            if not lo <= count <= hi:
                raise ConfigError(f"parameter count {count} outside budget [{lo}, {hi}]")

    @classmethod
    def tiny(cls, seed: int = 0) -> "SpanetConfig":
        """Same topology at toy width and resolution, for gradient checks and quick tests."""
        return cls(input_size=32, conv_channels=[4, 4, 6, 6, 8, 8, 8], conv_kernels=[4, 3, 3, 3, 3, 3, 3],
                   conv_strides=[2, 1, 1, 1, 1, 1, 1], conv_pool=[False, True, False, True, False, True, False],
                   fcn_channels=[12, 10, 8], seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpanetConfig":
        return cls(**d)


@dataclass
class PredictionVector:
    axis: np.ndarray  # (4,) x0, y0, x1, y1 in [0, 1], smaller-x endpoint first
    rates: np.ndarray  # (6,) clamped to [0, 1], ACTIONS order
    raw: np.ndarray  # (10,) unclamped network output

    def __post_init__(self):
        if self.axis.shape != (4,) or self.rates.shape != (6,):
            raise ValueError("prediction vector must be 4 axis coords + 6 rates")

    @property
    def best_action(self) -> int:
        return int(np.argmax(self.rates))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.axis, self.rates])


def canonical_endpoints(axis) -> np.ndarray:
    """Order endpoints smaller-x first, ties broken by smaller y."""
    a = np.asarray(axis, dtype=np.float64).reshape(-1, 4).copy()
    swap = (a[:, 2] < a[:, 0]) | ((a[:, 2] == a[:, 0]) & (a[:, 3] < a[:, 1]))
    a[swap] = a[swap][:, [2, 3, 0, 1]]
    return a.reshape(np.shape(axis))


def env_onehot(envs: Sequence[str | int]) -> np.ndarray:
    out = np.zeros((len(envs), 3), dtype=np.float32)
    for i, e in enumerate(envs):
        out[i, ENVS.index(e) if isinstance(e, str) else int(e)] = 1.0
    return out


class Model:
    def __init__(self, config: SpanetConfig, dtype=np.float32, enforce_budget: bool = True):
        config.validate(enforce_budget)
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.Generator(np.random.PCG64(config.seed))
        c = 3
        for i, (o, k) in enumerate(zip(config.conv_channels, config.conv_kernels)):
            fan_in = c * k * k
            self._add(f"conv{i}.weight", rng.standard_normal((o, c, k, k)) * math.sqrt(2.0 / fan_in))
            self._add(f"conv{i}.bias", np.zeros(o))
            self._add(f"bn{i}.gamma", np.ones(o))
            self._add(f"bn{i}.beta", np.zeros(o))
            self.bn[f"bn{i}"] = BatchNormState(o, self.dtype)
            c = o
        f = config.feature_dim + config.env_dim
        for i, g in enumerate(config.fcn_channels):
            self._add(f"fcn{i}.weight", rng.standard_normal((g, f)) * math.sqrt(2.0 / f))
            self._add(f"fcn{i}.bias", np.zeros(g))
            f = g
        self._add("out.weight", rng.standard_normal((config.out_dim, f)) * math.sqrt(1.0 / f))
        self._add("out.bias", np.zeros(config.out_dim))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        for name, s in self.bn.items():
            state[f"{name}.running_mean"] = s.mean.copy()
            state[f"{name}.running_var"] = s.var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype)
        for name, s in self.bn.items():
            s.mean = np.array(state[f"{name}.running_mean"], dtype=self.dtype)
            s.var = np.array(state[f"{name}.running_var"], dtype=self.dtype)

    def forward(self, images, env, training: bool = False) -> Tensor:
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        e = env if isinstance(env, Tensor) else Tensor(np.asarray(env, dtype=self.dtype))
        n = x.shape[0]
        if x.shape[1:] != (3, cfg.input_size, cfg.input_size):
            raise T.ShapeError(f"images must be [N,3,{cfg.input_size},{cfg.input_size}], got {x.shape}", axis="H")
        if e.shape != (n, cfg.env_dim):
            raise T.ShapeError(f"env one-hot must be [{n},{cfg.env_dim}], got {e.shape}", axis=1)
        ed = e.data
        if not (np.all((ed == 0) | (ed == 1)) and np.all(ed.sum(axis=1) == 1)):
            bad = int(np.flatnonzero(~(np.all((ed == 0) | (ed == 1), axis=1) & (ed.sum(axis=1) == 1)))[0])
            raise ValueError(f"env row {bad} is not one-hot: {ed[bad].tolist()}")
        p = self.params
        for i, (k, st, pool) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides, cfg.conv_pool)):
            pad = k // 2 if st == 1 else (k - st) // 2
            x = T.conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=st, padding=pad)
            x = T.batchnorm2d(x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn[f"bn{i}"], training,
                              cfg.bn_momentum, cfg.bn_eps)
            x = T.relu(x)
            if pool:
                x = T.maxpool2d(x, 2, 2)
        h = T.concat([T.flatten(x), e], axis=1)
        for i in range(len(cfg.fcn_channels)):
            h = T.relu(T.linear(h, p[f"fcn{i}.weight"], p[f"fcn{i}.bias"]))
        return T.linear(h, p["out.weight"], p["out.bias"])

    __call__ = forward

    def infer(self, images, env) -> np.ndarray:
        with T.no_grad():
            return self.forward(images, env, training=False).data


def build_model(config: SpanetConfig | None = None, dtype=np.float32, enforce_budget: bool = True) -> Model:
    return Model(config or SpanetConfig(), dtype=dtype, enforce_budget=enforce_budget)


# ------------------------------------------------------------------- training

@dataclass
class TrainHyper:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    color_augment: bool = False  # random hue rotation, saturation and brightness per training sample


@dataclass
class Dataset:
    images: np.ndarray  # [N,3,S,S]; float in [0,1], or uint8 scaled on the fly
    env: np.ndarray  # [N,3] one-hot
    targets: np.ndarray  # [N,10]

    def __post_init__(self):
        n = len(self.images)
        if len(self.env) != n or len(self.targets) != n:
            raise ValueError("images, env and targets must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.env[idx], self.targets[idx])

    def batch_images(self, idx, dtype=np.float32) -> np.ndarray:
        x = self.images[idx]
        if x.dtype == np.uint8:
            return x.astype(dtype) / dtype(255.0)
        return x.astype(dtype, copy=False)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_epoch: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(a), repr(b)])


def _batches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        # a lone trailing sample would make train-mode batchnorm degenerate
        if len(idx) == 1 and s > 0:
            continue
        yield np.sort(idx)


_GRAY = np.full((3, 3), 1.0 / 3.0)  # projector onto the grey axis
_CROSS = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]]) / math.sqrt(3.0)  # [u]x, u = grey axis


def color_jitter(x: np.ndarray, rng: np.random.Generator, saturation=(0.4, 1.6), value=(0.7, 1.3)) -> np.ndarray:
    """Rotate hue uniformly about the grey axis and scale chroma and grey level; x is [N,3,H,W] in [0, 1]."""
    n = len(x)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    s = rng.uniform(*saturation, n)
    v = rng.uniform(*value, n)
    chroma = np.cos(theta)[:, None, None] * (np.eye(3) - _GRAY) + np.sin(theta)[:, None, None] * _CROSS
    m = (v[:, None, None] * _GRAY + s[:, None, None] * chroma).astype(x.dtype)
    return np.clip(np.einsum("nij,njhw->nihw", m, x), 0.0, 1.0)


def evaluate_loss(model: Model, data: Dataset, batch_size: int = 64) -> float:
    total = 0.0
    for idx in _batches(len(data), batch_size, None):
        out = model.infer(data.batch_images(idx, model.dtype.type), data.env[idx])
        d = np.abs(out.astype(np.float64) - data.targets[idx])
        total += float(np.where(d < 1, 0.5 * d * d, d - 0.5).sum())
    return total / (len(data) * model.config.out_dim)


def train(model: Model, train_set: Dataset, val_set: Dataset, hyper: TrainHyper | None = None,
          callback=None) -> History:
    """Minimise smooth-L1 over the 10-d targets with SGD; early stopping restores the best epoch."""
    hyper = hyper or TrainHyper()
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("train and validation sets must be non-empty")
    if len(train_set) < 2:
        raise TrainingError("need at least 2 training samples for batchnorm")
    rng = np.random.Generator(np.random.PCG64(hyper.seed))
    opt = T.SGD(model.parameters(), hyper.lr, hyper.momentum)
    hist = History()
    best_state = model.state_dict()
    since_best = 0
    for epoch in range(1, hyper.max_epochs + 1):
        running, seen = 0.0, 0
        for idx in _batches(len(train_set), hyper.batch_size, rng):
            x = train_set.batch_images(idx, model.dtype.type)
            if hyper.color_augment:
                # item colour alone would identify the training items; jittering it leaves shape as the cue
                x = color_jitter(x, rng)
            out = model.forward(x, train_set.env[idx], training=True)
            loss = T.smooth_l1_loss(out, train_set.targets[idx].astype(model.dtype))
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite loss {lv} at epoch {epoch}; batch indices {idx[:8].tolist()}...")
            T.backward(loss)
            opt.step()
            running += lv * len(idx)
            seen += len(idx)
        val = evaluate_loss(model, val_set)
        hist.train_loss.append(running / seen)
        hist.val_loss.append(val)
        hist.stopped_epoch = epoch
        logger.info("epoch %d train %.5f val %.5f", epoch, hist.train_loss[-1], val)
        if callback is not None:
            callback(epoch, hist)
        if val < hist.best_val:
            hist.best_val, hist.best_epoch = val, epoch
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= hyper.patience:
                break
    model.load_state_dict(best_state)
    return hist


# ----------------------------------------------------------------- inference

def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Resize an HxWxC array to size x size (pixel-centre aligned bilinear)."""
    h, w = img.shape[:2]
    src = img.astype(np.float64)

    def coords(n_in):
        x = (np.arange(size) + 0.5) * n_in / size - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def prepare_crop_u8(crop: np.ndarray, size: int = 288) -> np.ndarray:
    """uint8 HxWx3 crop -> uint8 3 x size x size (resized, rounded); compact storage for datasets."""
    crop = np.asarray(crop)
    if crop.ndim != 3 or crop.shape[0] == 0 or crop.shape[1] == 0 or crop.shape[2] != 3:
        raise ValueError(f"crop must be a non-empty HxWx3 image, got shape {crop.shape}")
    out = np.clip(np.rint(resize_bilinear(crop, size)), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def prepare_crop(crop: np.ndarray, size: int = 288) -> np.ndarray:
    """uint8 HxWx3 crop -> float32 3 x size x size in [0, 1]; same pixels the datasets train on."""
    return prepare_crop_u8(crop, size).astype(np.float32) / np.float32(255.0)


def to_prediction(raw: np.ndarray) -> PredictionVector:
    raw = np.asarray(raw, dtype=np.float64)
    axis = canonical_endpoints(np.clip(raw[:4], 0.0, 1.0))
    return PredictionVector(axis=axis, rates=np.clip(raw[4:], 0.0, 1.0), raw=raw.copy())


def predict(model: Model, crop: np.ndarray, env: str) -> PredictionVector:
    return predict_batch(model, [crop], [env])[0]


def predict_batch(model: Model, crops: Sequence[np.ndarray], envs: Sequence[str],
                  batch_size: int = 64) -> list[PredictionVector]:
    size = model.config.input_size
    out: list[PredictionVector] = []
    for s in range(0, len(crops), batch_size):
        imgs = np.stack([prepare_crop(c, size) for c in crops[s:s + batch_size]])
        raw = model.infer(imgs, env_onehot(envs[s:s + batch_size]))
        out.extend(to_prediction(r) for r in raw)
    return out


# ---------------------------------------------------------------- checkpoint

MAGIC = b"SPAN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic: not a checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """Truncated data or header/body disagreement."""


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    header = {"config": model.config.to_dict(), "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(state))]
    for name, arr in state.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(f"truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> tuple[Model, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}")
    r = _Reader(buf)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    state: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(r.take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims).copy()
    if r.pos != len(buf):
        raise CheckpointCorruptError(f"{path}: {len(buf) - r.pos} trailing bytes after {count} tensors")
    config = SpanetConfig.from_dict(header["config"])
    model = Model(config, enforce_budget=False)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path}: {exc}") from exc
    return model, header.get("meta", {})
