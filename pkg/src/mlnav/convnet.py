"""A small encoder-decoder convolutional network in numpy.

Public tensors are (batch, channels, rows, cols). Internally activations are
kept channels-last so each 3x3 convolution reduces to a few matrix products.

A network is a flat list of layer tuples evaluated in order:

    ("conv", in_ch, out_ch)   3x3, stride 1, zero padding 1
    ("relu",)  ("sigmoid",)
    ("pool",)                 2x2 max-pool
    ("up",)                   2x nearest-neighbour upsample
    ("push",)                 save the current activation for a skip link
    ("concat",)               pop the last saved activation, append its channels
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

OUT_CHANNELS = 8


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class WeightsError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[tuple, ...]
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(layer) for layer in self.layers))
        self.validate()

    def validate(self) -> None:
        ch = self.in_channels
        depth = 0
        stack: list[tuple[int, int]] = []
        for i, layer in enumerate(self.layers):
            op = layer[0]
            if op == "conv":
                if layer[1] != ch:
                    raise ShapeError(f"layer {i}: conv expects {layer[1]} input channels, gets {ch}")
                ch = layer[2]
            elif op == "pool":
                depth += 1
            elif op == "up":
                depth -= 1
                if depth < 0:
                    raise ShapeError(f"layer {i}: upsample above input resolution")
            elif op == "push":
                stack.append((ch, depth))
            elif op == "concat":
                if not stack:
                    raise ShapeError(f"layer {i}: concat without a saved activation")
                skip_ch, skip_depth = stack.pop()
                if skip_depth != depth:
                    raise ShapeError(f"layer {i}: skip resolution mismatch ({skip_depth} vs {depth})")
                ch += skip_ch
            elif op not in ("relu", "sigmoid"):
                raise ShapeError(f"layer {i}: unknown op {op!r}")
        if depth != 0:
            raise ShapeError("output resolution differs from input")
        if ch != OUT_CHANNELS:
            raise ShapeError(f"network must output {OUT_CHANNELS} channels, got {ch}")
        if not self.layers or self.layers[-1][0] != "sigmoid":
            raise ShapeError("last layer must be a sigmoid")

    @property
    def downsamples(self) -> int:
        return sum(1 for layer in self.layers if layer[0] == "pool")

    @property
    def conv_shapes(self) -> list[tuple[int, int]]:
        return [(layer[1], layer[2]) for layer in self.layers if layer[0] == "conv"]

    @property
    def param_count(self) -> int:
        return sum(o * i * 9 + o for i, o in self.conv_shapes)

    def to_json(self) -> dict:
        return {"in_channels": self.in_channels, "layers": [list(layer) for layer in self.layers]}

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(tuple(layer) for layer in d["layers"]), d.get("in_channels", 1))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def unet_spec(widths=(8, 16, 32), in_channels: int = 1) -> NetworkSpec:
    """U-shaped encoder/decoder with one skip link per downsample stage."""
    layers: list[tuple] = []
    ch = in_channels
    for w in widths[:-1]:
        layers += [("conv", ch, w), ("relu",), ("conv", w, w), ("relu",), ("push",), ("pool",)]
        ch = w
    bottom = widths[-1]
    layers += [("conv", ch, bottom), ("relu",), ("conv", bottom, bottom), ("relu",)]
    ch = bottom
    for w in reversed(widths[:-1]):
        layers += [("up",), ("concat",), ("conv", ch + w, w), ("relu",), ("conv", w, w), ("relu",)]
        ch = w
    layers += [("conv", ch, OUT_CHANNELS), ("sigmoid",)]
    return NetworkSpec(tuple(layers), in_channels)


@dataclass
class ModelWeights:
    params: list[np.ndarray]  # W0, b0, W1, b1, ... in conv order
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "ModelWeights":
        return ModelWeights([p.copy() for p in self.params], dict(self.metadata))


def init_weights(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """He (fan-in) initialization from a seeded generator."""
    rng = np.random.default_rng(seed)
    params = []
    for c_in, c_out in spec.conv_shapes:
        std = np.sqrt(2.0 / (c_in * 9))
        params.append((rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype))
        params.append(np.zeros(c_out, dtype=dtype))
    return ModelWeights(params, {"init_seed": seed})


def zero_weights(spec: NetworkSpec, dtype=np.float64) -> ModelWeights:
    params = []
    for c_in, c_out in spec.conv_shapes:
        params += [np.zeros((c_out, c_in, 3, 3), dtype), np.zeros(c_out, dtype)]
    return ModelWeights(params)


def _check_params(spec: NetworkSpec, weights: ModelWeights) -> None:
    expected = []
    for c_in, c_out in spec.conv_shapes:
        expected += [(c_out, c_in, 3, 3), (c_out,)]
    got = [p.shape for p in weights.params]
    if got != expected:
        raise ShapeError(f"weights do not match spec: expected {expected}, got {got}")


# --- layer kernels (channels-last) ---


def _im2col(a):
    """(n, h, w, c) -> (n*h*w, 9*c) with columns ordered (tap_row, tap_col, channel)."""
    n, h, wd, c = a.shape
    ap = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, wd, 3, 3, c), dtype=a.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = ap[:, i : i + h, j : j + wd, :]
    return cols.reshape(n * h * wd, 9 * c)


# Column buffers are built on whichever side has fewer channels: the input for
# expanding layers, the output gradient for contracting ones.


def _conv_fwd(x, w, b):
    n, h, wd, c = x.shape
    o = w.shape[0]
    if c <= o:
        cols = _im2col(x)
        out = cols @ w.transpose(0, 2, 3, 1).reshape(o, -1).T + b
        return out.reshape(n, h, wd, o), cols
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = (xp.reshape(-1, c) @ w.transpose(1, 2, 3, 0).reshape(c, 9 * o)).reshape(n, h + 2, wd + 2, 9, o)
    out = np.empty((n, h, wd, o), dtype=x.dtype)
    out[...] = b
    for i in range(3):
        for j in range(3):
            out += taps[:, i : i + h, j : j + wd, 3 * i + j, :]
    return out, x


def _conv_bwd(g, saved, w, x_shape):
    n, h, wd, c = x_shape
    o = w.shape[0]
    g2 = g.reshape(-1, o)
    db = g2.sum(axis=0)
    if c <= o:
        cols = saved
        dw = (g2.T @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
        dcols = (g2 @ w.transpose(0, 2, 3, 1).reshape(o, -1)).reshape(n, h, wd, 3, 3, c)
        dxp = np.zeros((n, h + 2, wd + 2, c), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i, j, :]
        return dxp[:, 1:-1, 1:-1, :], np.ascontiguousarray(dw), db
    x = saved
    # gcols[p, (a, b, o)] = g[p + (a-1, b-1), o], which pairs with kernel tap (2-a, 2-b)
    gcols = _im2col(g)
    wflip = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * o, c)
    dx = (gcols @ wflip).reshape(n, h, wd, c)
    dw_flip = (gcols.T @ x.reshape(-1, c)).reshape(3, 3, o, c)
    dw = dw_flip[::-1, ::-1].transpose(2, 3, 0, 1)
    return dx, np.ascontiguousarray(dw), db


def _pool_fwd(x):
    n, h, wd, c = x.shape
    blocks = x.reshape(n, h // 2, 2, wd // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, wd // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def _pool_bwd(g, idx, x_shape):
    n, h, wd, c = x_shape
    blocks = np.zeros(g.shape + (4,), dtype=g.dtype)
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    return blocks.reshape(n, h // 2, wd // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def _up_fwd(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_bwd(g):
    n, h, wd, c = g.shape
    return g.reshape(n, h // 2, 2, wd // 2, 2, c).sum(axis=(2, 4))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_pass(spec: NetworkSpec, weights: ModelWeights, x: np.ndarray, *, logits: bool = False):
    """Run the network on an NCHW batch; returns (output NCHW, cache for backward).

    With ``logits=True`` the final sigmoid is skipped.
    """
    _check_params(spec, weights)
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"expected input (batch, {spec.in_channels}, rows, cols), got {x.shape}")
    step = 2**spec.downsamples
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(f"input rows/cols must be divisible by {step}, got {x.shape[2:]}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("input contains non-finite values")
    a = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).astype(weights.params[0].dtype, copy=False)
    cache = []
    stack = []
    k = 0
    last = len(spec.layers) - 1
    for i, layer in enumerate(spec.layers):
        op = layer[0]
        if op == "conv":
            w, b = weights.params[k], weights.params[k + 1]
            shape = a.shape
            a, cols = _conv_fwd(a, w, b)
            cache.append((cols, shape, k))
            k += 2
        elif op == "relu":
            mask = a > 0
            a = a * mask
            cache.append(mask)
        elif op == "pool":
            shape = a.shape
            a, idx = _pool_fwd(a)
            cache.append((idx, shape))
        elif op == "up":
            a = _up_fwd(a)
            cache.append(None)
        elif op == "push":
            stack.append(a)
            cache.append(None)
        elif op == "concat":
            skip = stack.pop()
            cache.append(a.shape[-1])
            a = np.concatenate([a, skip], axis=-1)
        elif op == "sigmoid":
            if logits and i == last:
                cache.append(None)
                continue
            a = _sigmoid(a)
            cache.append(a)
    return a.transpose(0, 3, 1, 2), cache


def backward_pass(spec: NetworkSpec, weights: ModelWeights, cache, grad: np.ndarray, *, from_logits: bool = False):
    """Back-propagate an NCHW gradient of the output (or of the logits).

    Returns (parameter gradients in weight order, input gradient NCHW).
    """
    g = np.ascontiguousarray(np.asarray(grad).transpose(0, 2, 3, 1)).astype(weights.params[0].dtype, copy=False)
    grads: list[np.ndarray | None] = [None] * len(weights.params)
    skip_grads: list[np.ndarray] = []
    last = len(spec.layers) - 1
    for i in range(last, -1, -1):
        op = spec.layers[i][0]
        c = cache[i]
        if op == "sigmoid":
            if from_logits and i == last:
                continue
            g = g * c * (1.0 - c)
        elif op == "relu":
            g = g * c
        elif op == "conv":
            cols, shape, k = c
            g, dw, db = _conv_bwd(g, cols, weights.params[k], shape)
            grads[k], grads[k + 1] = dw, db
        elif op == "pool":
            idx, shape = c
            g = _pool_bwd(g, idx, shape)
        elif op == "up":
            g = _up_bwd(g)
        elif op == "concat":
            n_main = c
            skip_grads.append(g[..., n_main:])
            g = g[..., :n_main]
        elif op == "push":
            g = g + skip_grads.pop()
    return grads, g.transpose(0, 3, 1, 2)


def forward(spec: NetworkSpec, weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    return forward_pass(spec, weights, x)[0]


def backward(spec: NetworkSpec, weights: ModelWeights, x: np.ndarray, grad_output: np.ndarray):
    """Gradients of ``sum(grad_output * forward(x))`` w.r.t. parameters and input."""
    out, cache = forward_pass(spec, weights, x)
    if np.shape(grad_output) != out.shape:
        raise ShapeError(f"grad_output shape {np.shape(grad_output)} does not match output {out.shape}")
    return backward_pass(spec, weights, cache, grad_output)


def bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy of sigmoid(z) against labels y."""
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def bce_grad_logits(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-element derivative of BCE(sigmoid(z), y) with respect to z."""
    return p - y


def pixel_accuracy(p: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((p > 0.5) == (y > 0.5)))


# --- training ---


@dataclass(frozen=True)
class HyperParams:
    lr: float = 0.05
    batch: int = 16
    epochs: int = 20
    seed: int = 0
    momentum: float = 0.9
    augment: bool = True


def augment_pair(x: np.ndarray, y: np.ndarray, rot: int, flip: bool):
    """Rotate/mirror an (N, C, rows, cols) input and its 8-heading label together.

    ``rot`` counts quarter turns counter-clockwise in world coordinates (row
    index = y); heading channels are permuted to match.
    """
    if flip:
        # x -> -x maps heading t to pi - t
        x = x[..., ::-1]
        y = y[:, [(4 - k) % 8 for k in range(8)]][..., ::-1]
    if rot:
        x = np.rot90(x, k=-rot, axes=(2, 3))
        y = np.rot90(y, k=-rot, axes=(2, 3))
        y = np.roll(y, 2 * rot, axis=1)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def evaluate(spec, weights, x, y, batch: int = 32) -> tuple[float, float]:
    """(mean BCE, pixel accuracy) over a dataset."""
    loss_sum = 0.0
    correct = 0.0
    total = 0
    for i in range(0, len(x), batch):
        xb, yb = x[i : i + batch], y[i : i + batch]
        z, _ = forward_pass(spec, weights, xb, logits=True)
        loss_sum += bce_from_logits(z, yb) * yb.size
        correct += float(np.sum((z > 0) == (yb > 0.5)))
        total += yb.size
    return loss_sum / total, correct / total


def train(
    spec: NetworkSpec,
    train_x: np.ndarray,
    train_y: np.ndarray,
    hp: HyperParams = HyperParams(),
    val_x: np.ndarray | None = None,
    val_y: np.ndarray | None = None,
    weights: ModelWeights | None = None,
    log_path=None,
) -> tuple[ModelWeights, list[dict]]:
    """Momentum-SGD on mean per-pixel-per-channel BCE.

    Returns the trained weights and one log row per epoch with the training
    loss measured after the epoch (and validation loss/accuracy when given).
    """
    if len(train_x) == 0:
        raise TrainingError("empty training set")
    if train_x.shape[0] != train_y.shape[0] or train_x.shape[2:] != train_y.shape[2:]:
        raise ShapeError("inputs and labels disagree in count or spatial size")
    rng = np.random.default_rng(hp.seed)
    weights = weights.copy() if weights is not None else init_weights(spec, hp.seed)
    dtype = weights.params[0].dtype
    velocity = [np.zeros_like(p) for p in weights.params]
    train_x = train_x.astype(dtype, copy=False)
    train_y = train_y.astype(dtype, copy=False)
    history: list[dict] = []
    n = len(train_x)
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch):
            idx = order[start : start + hp.batch]
            xb, yb = train_x[idx], train_y[idx]
            if hp.augment:
                xb, yb = augment_pair(xb, yb, int(rng.integers(4)), bool(rng.integers(2)))
            z, cache = forward_pass(spec, weights, xb, logits=True)
            if not np.all(np.isfinite(z)):
                raise TrainingError(f"non-finite activations at epoch {epoch}, batch starting {start}")
            g = bce_grad_logits(_sigmoid(z), yb) / yb.size
            grads, _ = backward_pass(spec, weights, cache, g, from_logits=True)
            for p, v, gp in zip(weights.params, velocity, grads):
                v *= hp.momentum
                v -= hp.lr * gp
                p += v
        loss, acc = evaluate(spec, weights, train_x, train_y)
        if not np.isfinite(loss):
            raise TrainingError(f"training loss diverged at epoch {epoch} (lr={hp.lr})")
        row = {"epoch": epoch, "train_loss": loss, "train_accuracy": acc, "val_loss": "", "val_accuracy": ""}
        if val_x is not None and len(val_x):
            vl, va = evaluate(spec, weights, val_x.astype(dtype, copy=False), val_y.astype(dtype, copy=False))
            row["val_loss"], row["val_accuracy"] = vl, va
        history.append(row)
        log.info("epoch %d loss %.4f acc %.4f val %s", epoch, loss, acc, row["val_accuracy"])
        if log_path is not None:
            write_training_log(history, log_path)
    weights.metadata.update({"hyperparams": hp.__dict__, "epochs_run": len(history), "train_samples": n})
    return weights, history


def write_training_log(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_accuracy"], extrasaction="ignore")
        writer.writeheader()
        writer.writerows(history)


# --- serialization: <stem>.json manifest + <stem>.f32 payload ---


def save_weights(spec: NetworkSpec, weights: ModelWeights, path) -> tuple[Path, Path]:
    _check_params(spec, weights)
    stem = Path(path).with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "mlnav-weights-1",
        "spec": spec.to_json(),
        "spec_hash": spec.digest(),
        "params": [list(p.shape) for p in weights.params],
        "metadata": weights.metadata,
    }
    mpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".f32")
    mpath.write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    bpath.write_bytes(b"".join(np.asarray(p, dtype="<f4").tobytes() for p in weights.params))
    return mpath, bpath


def load_weights(path, spec: NetworkSpec | None = None) -> tuple[NetworkSpec, ModelWeights]:
    """Load a weights file; with ``spec`` given, its hash must match the manifest."""
    stem = Path(path).with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    stored = NetworkSpec.from_json(manifest["spec"])
    if manifest.get("spec_hash") != stored.digest():
        raise WeightsError("manifest spec hash does not match its own spec")
    if spec is not None and spec.digest() != manifest["spec_hash"]:
        raise WeightsError("weights were trained for a different network spec")
    flat = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4")
    params = []
    offset = 0
    for shape in manifest["params"]:
        size = int(np.prod(shape))
        if offset + size > flat.size:
            raise WeightsError("weights payload is truncated")
        params.append(flat[offset : offset + size].reshape(shape).astype(np.float32))
        offset += size
    if offset != flat.size:
        raise WeightsError("weights payload has trailing data")
    weights = ModelWeights(params, manifest.get("metadata", {}))
    _check_params(stored, weights)
    return stored, weights


@dataclass
class Model:
    spec: NetworkSpec
    weights: ModelWeights

    def predict(self, x: np.ndarray, batch: int = 16) -> np.ndarray:
        outs = [forward(self.spec, self.weights, x[i : i + batch]) for i in range(0, len(x), batch)]
        return np.concatenate(outs)

    @classmethod
    def load(cls, path) -> "Model":
        spec, weights = load_weights(path)
        return cls(spec, weights)

    def save(self, path):
        return save_weights(self.spec, self.weights, path)
