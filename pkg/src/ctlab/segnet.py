"""A small U-Net in plain numpy with hand-written backpropagation.

Activations are kept channels-last internally; the public functions take and
return channels-first batches of shape (B, C, S, S).
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class UNetConfig:
    input_channels: int = 4
    output_channels: int = 2
    depth: int = 4
    base_width: int = 8
    image_side: int = 320

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if min(self.input_channels, self.output_channels, self.base_width) < 1:
            raise ValueError("channel counts must be >= 1")
        if self.image_side < 1 or self.image_side % (2 ** self.depth):
            raise ValueError(f"image_side {self.image_side} is not divisible by 2**depth = {2 ** self.depth}")

    def width(self, level: int) -> int:
        return self.base_width * 2 ** level

    def layer_shapes(self) -> list:
        """Ordered (name, weight shape) pairs; weights are (out, in, k, k)."""
        shapes = []
        cin = self.input_channels
        for i in range(self.depth):
            w = self.width(i)
            shapes += [(f"enc{i}.conv0", (w, cin, 3, 3)), (f"enc{i}.conv1", (w, w, 3, 3))]
            cin = w
        w = self.width(self.depth)
        shapes += [("mid.conv0", (w, cin, 3, 3)), ("mid.conv1", (w, w, 3, 3))]
        for i in reversed(range(self.depth)):
            w = self.width(i)
            shapes += [(f"dec{i}.up", (w, self.width(i + 1), 3, 3)),
                       (f"dec{i}.conv0", (w, 2 * w, 3, 3)),
                       (f"dec{i}.conv1", (w, w, 3, 3))]
        shapes.append(("head", (self.output_channels, self.base_width, 1, 1)))
        return shapes


@dataclass
class ParamSet:
    """Weights ``<layer>.w`` and biases ``<layer>.b`` keyed by name, in layer order."""

    config: UNetConfig
    tensors: dict
    init_seed: int | None = None

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.init_seed)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.init_seed)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def equals(self, other: "ParamSet") -> bool:
        return (self.config == other.config and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))

    def save(self, path) -> None:
        """Write ``<path>.json`` (layer shapes) and ``<path>.bin`` (little-endian float32)."""
        path = Path(path)
        meta = {
            "config": asdict(self.config),
            "init_seed": self.init_seed,
            "dtype": "<f4",
            "layers": [{"name": k, "shape": list(v.shape)} for k, v in self.tensors.items()],
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
        blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.tensors.values())
        path.with_suffix(".bin").write_bytes(blob)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ParamSet":
        path = Path(path)
        jpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
        if not jpath.exists() or not bpath.exists():
            raise FileNotFoundError(f"checkpoint not found: {jpath} / {bpath}")
        meta = json.loads(jpath.read_text())
        flat = np.fromfile(bpath, dtype="<f4")
        expected = sum(int(np.prod(layer["shape"])) for layer in meta["layers"])
        if flat.size != expected:
            raise ValueError(f"checkpoint blob holds {flat.size} floats, manifest implies {expected}")
        tensors, pos = {}, 0
        for layer in meta["layers"]:
            n = int(np.prod(layer["shape"]))
            tensors[layer["name"]] = flat[pos:pos + n].reshape(layer["shape"]).astype(dtype)
            pos += n
        return cls(UNetConfig(**meta["config"]), tensors, meta.get("init_seed"))


def init_unet(config: UNetConfig, seed: int, dtype=np.float32) -> ParamSet:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.layer_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt((1.0 if name == "head" else 2.0) / fan_in)
        tensors[name + ".w"] = (rng.standard_normal(shape) * std).astype(dtype)
        tensors[name + ".b"] = np.zeros(shape[0], dtype=dtype)
    return ParamSet(config, tensors, seed)


# ---------------------------------------------------------------- primitives

def _conv_fwd(x, w, b):
    """Same-padded stride-1 conv; x is (B, H, W, C), w is (O, C, k, k)."""
    B, H, W, C = x.shape
    O, _, k, _ = w.shape
    wm = w.transpose(0, 2, 3, 1).reshape(O, k * k * C)
    if k == 1:
        cols = x.reshape(B * H * W, C)
    else:
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))           # B,H,W,C,k,k
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, k * k * C)
    out = cols @ wm.T
    out += b
    return out.reshape(B, H, W, O), (cols, wm, x.shape, k)


def _conv_bwd(dout, cache, need_dx=True):
    cols, wm, xshape, k = cache
    B, H, W, C = xshape
    O = wm.shape[0]
    d2 = dout.reshape(-1, O)
    dw = (d2.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if k == 1:
        return (d2 @ wm).reshape(B, H, W, C), dw, db
    # input gradient = same-padded conv of dout with the spatially flipped, transposed kernel
    wflip = wm.reshape(O, k, k, C)[:, ::-1, ::-1, :].transpose(3, 1, 2, 0).reshape(C, k * k * O)
    p = k // 2
    dp = np.pad(dout, ((0, 0), (p, p), (p, p), (0, 0)))
    dcols = sliding_window_view(dp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, k * k * O)
    return (dcols @ wflip.T).reshape(B, H, W, C), dw, db


def _pool_fwd(x):
    B, H, W, C = x.shape
    blocks = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _pool_bwd(dout, cache):
    arg, (B, H, W, C) = cache
    d = np.zeros(arg.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(d, arg[..., None], dout[..., None], axis=-1)
    return d.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)


def _up_fwd(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_bwd(dout):
    B, H, W, C = dout.shape
    return dout.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


# ---------------------------------------------------------------- network

def _forward(params: ParamSet, x_nchw, keep_cache: bool):
    cfg = params.config
    t = params.tensors
    x = np.ascontiguousarray(np.asarray(x_nchw, dtype=params.dtype).transpose(0, 2, 3, 1))
    tape = []

    def conv_relu(x, name):
        z, cache = _conv_fwd(x, t[name + ".w"], t[name + ".b"])
        a = np.maximum(z, 0)
        if keep_cache:
            tape.append(("conv_relu", name, cache, z > 0))
        return a

    skips = []
    for i in range(cfg.depth):
        x = conv_relu(x, f"enc{i}.conv0")
        x = conv_relu(x, f"enc{i}.conv1")
        skips.append(x)
        x, pc = _pool_fwd(x)
        if keep_cache:
            tape.append(("pool", i, pc, None))
    x = conv_relu(x, "mid.conv0")
    x = conv_relu(x, "mid.conv1")
    for i in reversed(range(cfg.depth)):
        x = _up_fwd(x)
        if keep_cache:
            tape.append(("up", None, None, None))
        x = conv_relu(x, f"dec{i}.up")
        skip = skips[i]
        x = np.concatenate([skip, x], axis=-1)
        if keep_cache:
            tape.append(("concat", i, skip.shape[-1], None))
        x = conv_relu(x, f"dec{i}.conv0")
        x = conv_relu(x, f"dec{i}.conv1")
    z, hc = _conv_fwd(x, t["head.w"], t["head.b"])
    if keep_cache:
        tape.append(("head", "head", hc, None))
    s = expit(z)
    return s.transpose(0, 3, 1, 2), tape


def forward(params: ParamSet, batch) -> np.ndarray:
    """Sigmoid probabilities, shape (B, output_channels, S, S), strictly inside (0, 1)."""
    batch = np.asarray(batch)
    cfg = params.config
    expected = (cfg.input_channels, cfg.image_side, cfg.image_side)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ValueError(f"batch shape {batch.shape} does not match (B, {expected[0]}, {expected[1]}, {expected[2]})")
    s, _ = _forward(params, batch, keep_cache=False)
    tiny = np.finfo(s.dtype)
    return np.clip(s, tiny.tiny, 1.0 - tiny.epsneg)


def _check_target(target):
    t = np.asarray(target)
    if ((t != 0) & (t != 1)).any():
        raise ValueError("target must be binary one-hot")
    if t.shape[1] > 1 and not np.all(t.sum(axis=1) == 1):
        raise ValueError("target channels must sum to 1 at every pixel")


def loss(pred, target) -> float:
    """Mean pixelwise binary cross-entropy over all channels, probabilities clamped to [eps, 1-eps]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    _check_target(target)
    p = np.clip(pred, EPS, 1 - EPS)
    t = target.astype(np.float64)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log(1 - p)))


def loss_and_grad(params: ParamSet, batch, target):
    """Return (loss, gradient ParamSet) for one batch."""
    batch = np.asarray(batch)
    target = np.asarray(target)
    _check_target(target)
    s, tape = _forward(params, batch, keep_cache=True)
    if s.shape != target.shape:
        raise ValueError(f"output shape {s.shape} != target shape {target.shape}")
    t = target.astype(s.dtype)
    n = s.size
    p = np.clip(s, EPS, 1 - EPS)
    value = float(-np.mean(t * np.log(p) + (1 - t) * np.log(1 - p), dtype=np.float64))

    # gradient w.r.t. the logits, taken from the unclamped sigmoid. Gating it by the
    # clamp would freeze a net whose outputs all overshoot past eps on the wrong side.
    dz = ((s - t) / n).astype(s.dtype).transpose(0, 2, 3, 1)
    grads = {}
    skip_grads = {}
    d = dz
    first_conv = params.config.layer_shapes()[0][0]
    for kind, name, cache, extra in reversed(tape):
        if kind == "head":
            d, grads["head.w"], grads["head.b"] = _conv_bwd(d, cache)
        elif kind == "conv_relu":
            d = d * extra
            d, grads[name + ".w"], grads[name + ".b"] = _conv_bwd(d, cache, need_dx=name != first_conv)
        elif kind == "concat":
            c = cache
            skip_grads[name] = d[..., :c]
            d = d[..., c:]
        elif kind == "up":
            d = _up_bwd(d)
        elif kind == "pool":
            # the pooled tensor also fed the skip connection
            d = _pool_bwd(d, cache) + skip_grads.pop(name)
    ordered = {k: grads[k].astype(params.dtype, copy=False) for k in params.tensors}
    return value, ParamSet(params.config, ordered, params.init_seed)


def backward(params: ParamSet, batch, target) -> ParamSet:
    return loss_and_grad(params, batch, target)[1]


def predict_proba(params: ParamSet, inputs, batch_size: int = 64) -> np.ndarray:
    inputs = np.asarray(inputs)
    out = [forward(params, inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.output_channels) + inputs.shape[2:])


def predict_mask(params: ParamSet, sample, threshold: float = 0.5) -> np.ndarray:
    """Binary mask from the first (lesion) output channel: ``prob >= threshold``.

    ``sample`` may be a Sample, a single (C, S, S) input or a (B, C, S, S) batch.
    """
    x = np.asarray(getattr(sample, "input", sample))
    single = x.ndim == 3
    if single:
        x = x[None]
    mask = (predict_proba(params, x)[:, 0] >= threshold).astype(np.uint8)
    return mask[0] if single else mask


def eval_loss(params: ParamSet, inputs, targets, batch_size: int = 64) -> float:
    total = 0.0
    for i in range(0, len(inputs), batch_size):
        xb, tb = inputs[i:i + batch_size], targets[i:i + batch_size]
        total += loss(forward(params, xb), tb) * len(xb)
    return total / len(inputs)


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: ParamSet, grads: ParamSet) -> None:
        for k, v in params.tensors.items():
            v -= self.learning_rate * grads.tensors[k]


class Adam:
    """Adam with Keras defaults (beta1=0.9, beta2=0.999, eps=1e-7)."""

    def __init__(self, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-7):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: ParamSet, grads: ParamSet) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, p in params.tensors.items():
            g = grads.tensors[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.learning_rate * corr) * m / (np.sqrt(v) + self.eps)


OPTIMIZERS = {"adam": Adam, "sgd": SGD}


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 45
    max_epochs: int = 200
    patience: int = 10
    shuffle: bool = True
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    stop_reason: str = "max_epochs"    # or "early_stop"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(float(tr)), repr(float(va))])

    def same_as(self, other: "TrainLog") -> bool:
        return (self.train_loss == other.train_loss and self.val_loss == other.val_loss
                and self.stopped_epoch == other.stopped_epoch and self.stop_reason == other.stop_reason)


def _arrays(data):
    if hasattr(data, "inputs"):
        return np.asarray(data.inputs), np.asarray(data.targets)
    x, t = data
    return np.asarray(x), np.asarray(t)


def train(params: ParamSet, train_set, val_set, cfg: TrainConfig = TrainConfig()):
    """Mini-batch training with validation early stopping.

    ``train_set`` and ``val_set`` are SampleSets or ``(inputs, targets)``
    pairs. Returns the parameters of the best validation epoch and a TrainLog.
    """
    x_tr, t_tr = _arrays(train_set)
    x_va, t_va = _arrays(val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("train and validation sets must be nonempty")
    x_tr = x_tr.astype(params.dtype, copy=False)
    x_va = x_va.astype(params.dtype, copy=False)

    params = params.copy()
    opt = OPTIMIZERS[cfg.optimizer](cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainLog()
    best, best_val, wait = params.copy(), np.inf, 0
    n = len(x_tr)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grads = loss_and_grad(params, x_tr[idx], t_tr[idx])
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, value)
            opt.step(params, grads)
            total += value * len(idx)
        val = eval_loss(params, x_va, t_va)
        if not np.isfinite(val):
            raise TrainingDiverged(epoch, val)
        trace.train_loss.append(total / n)
        trace.val_loss.append(val)
        trace.stopped_epoch = epoch
        log.debug("epoch %d train %.6f val %.6f", epoch, total / n, val)
        if val < best_val:
            best_val, best, wait = val, params.copy(), 0
            trace.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                trace.stop_reason = "early_stop"
                break
    return best, trace
