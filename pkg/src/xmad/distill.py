"""Cross-modal hallucination: small dense regressors trained from scratch.

A distiller learns to predict the missing modality from the present one.
Routes (input -> output, "main" is the modality present at inference):

    f2f  main's feature cell        -> other modality's feature cell
    i2f  main's raw pixel patch     -> other modality's feature cell
    f2i  main's feature cell        -> other modality's raw pixel patch,
         re-extracted into features at inference

Networks are plain fully connected stacks (ReLU hidden, identity output)
trained with bias-corrected Adam on a mean squared per-cell loss, with a
linear learning-rate warm-up. Everything is numpy and seeded, so training is
bitwise reproducible.
"""

import copy
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import extractor
from .errors import ConfigError, DataError
from .io import (
    FeatureMap,
    RgbImage,
    StructuredPointCloud,
    file_sha256,
    read_feature_tensor,
    read_json,
    write_feature_tensor,
    write_json,
)

ROUTES = ("f2f", "f2i", "i2f")
CHECKPOINT_FORMAT = "dense-net-v1"

# Production-scale default hidden widths per route; desk-scale runs override.
DEFAULT_HIDDEN = {"f2f": (1920, 1920), "i2f": (1024, 1024), "f2i": (1024, 1024)}
DEFAULT_LEARNING_RATE = {"f2f": 5e-4, "i2f": 3e-4, "f2i": 5e-4}


def other_modality(modality):
    if modality not in ("pc", "rgb"):
        raise ConfigError(f"unknown modality {modality!r}")
    return "rgb" if modality == "pc" else "pc"


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str  # "relu" | "identity"


@dataclass
class DenseNet:
    layers: list
    route: str = "f2f"
    source: str = "pc"  # the modality whose data feeds the input
    patch: tuple | None = None  # (ph, pw) for raw-pixel ends of i2f/f2i

    @property
    def in_dim(self):
        return self.layers[0].weights.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].weights.shape[1]

    @property
    def dims(self):
        return [self.in_dim] + [lay.weights.shape[1] for lay in self.layers]


def init_net(dims, route="f2f", source="pc", seed=0, patch=None):
    """He-initialized stack; dims is the full [in, hidden..., out] chain."""
    if route not in ROUTES:
        raise ConfigError(f"unknown route {route!r}; valid: {', '.join(ROUTES)}")
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"need at least [in, out] positive dims, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        act = "identity" if i == len(dims) - 2 else "relu"
        layers.append(DenseLayer(weights, np.zeros(fan_out), act))
    return DenseNet(layers, route, source, patch)


def net_forward(net, x):
    """Apply the stack; accepts (in_dim,) or (batch, in_dim)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    h = arr[None, :] if single else arr
    if h.shape[1] != net.in_dim:
        raise ValueError(f"input dim {h.shape[1]} != net input {net.in_dim}")
    for layer in net.layers:
        h = h @ layer.weights + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def net_loss(net, x, target):
    """Mean over the batch of squared error / out_dim."""
    y = net_forward(net, x)
    diff = y - target
    return float(np.sum(diff * diff) / (diff.shape[0] * net.out_dim))


def net_gradient(net, x, target):
    """Loss and exact reverse-mode gradients [(dW, db), ...] per layer."""
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    acts = [x]
    pre = []
    h = x
    for layer in net.layers:
        z = h @ layer.weights + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    diff = acts[-1] - target
    batch = x.shape[0]
    loss = float(np.sum(diff * diff) / (batch * net.out_dim))
    grad_out = 2.0 * diff / (batch * net.out_dim)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            grad_out = grad_out * (pre[i] > 0.0)
        grads[i] = (acts[i].T @ grad_out, grad_out.sum(axis=0))
        if i > 0:
            grad_out = grad_out @ layer.weights.T
    return grads, loss


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


def adam_init(net):
    zeros = lambda lay: (np.zeros_like(lay.weights), np.zeros_like(lay.bias))
    return AdamState([zeros(l) for l in net.layers], [zeros(l) for l in net.layers])


def adam_step(net, state, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new (net, state)."""
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_layers = []
    new_m = []
    new_v = []
    for layer, (mw, mb), (vw, vb), (gw, gb) in zip(net.layers, state.m, state.v, grads):
        mw = beta1 * mw + (1.0 - beta1) * gw
        mb = beta1 * mb + (1.0 - beta1) * gb
        vw = beta2 * vw + (1.0 - beta2) * (gw * gw)
        vb = beta2 * vb + (1.0 - beta2) * (gb * gb)
        new_w = layer.weights - lr * (mw / bc1) / (np.sqrt(vw / bc2) + eps)
        new_b = layer.bias - lr * (mb / bc1) / (np.sqrt(vb / bc2) + eps)
        new_layers.append(DenseLayer(new_w, new_b, layer.activation))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return (
        DenseNet(new_layers, net.route, net.source, net.patch),
        AdamState(new_m, new_v, step),
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float | None = None  # None -> per-route default
    warmup_epochs: int = 10
    checkpoint_every: int = 10
    hidden: tuple | None = None  # None -> per-route default widths
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.warmup_epochs < 0 or self.checkpoint_every < 1:
            raise ConfigError("bad warmup_epochs or checkpoint_every")


@dataclass
class Checkpoint:
    net: DenseNet
    epoch: int
    loss: float


def _raw_pixels(sample, modality):
    if modality == "rgb":
        if sample.rgb is None:
            raise DataError(f"sample {sample.sample_id} has no raw rgb image")
        return sample.rgb.pixels.astype(np.float64)
    if sample.pc is None:
        raise DataError(f"sample {sample.sample_id} has no raw point grid")
    return sample.pc.coords.astype(np.float64)


def _masked_rgb(sample):
    """Raw rgb with pixels zeroed wherever the point grid is background."""
    pixels = _raw_pixels(sample, "rgb")
    if sample.pc is not None:
        masked = pixels.copy()
        masked[~sample.pc.foreground_mask()] = 0.0
        return masked
    return pixels


def build_pairs(route, main, samples):
    """Stack per-cell (input, target) training pairs for a route.

    Returns (x, target, patch) where patch is the (ph, pw) pixel-patch shape
    for routes with a raw end (None for f2f). Cell order is row-major within
    each sample, samples in the given order.
    """
    if route not in ROUTES:
        raise ConfigError(f"unknown route {route!r}; valid: {', '.join(ROUTES)}")
    if not samples:
        raise DataError("no training samples")
    target_mod = other_modality(main)
    xs, ts = [], []
    patch = None
    for sample in samples:
        if route == "f2f":
            xs.append(sample.features(main).cells().astype(np.float64))
            ts.append(sample.features(target_mod).cells().astype(np.float64))
            continue
        if route == "i2f":
            feats = sample.features(target_mod)
            raw = _masked_rgb(sample) if main == "rgb" else _raw_pixels(sample, main)
            blocks, patch = extractor.patchify_image(raw, feats.rows, feats.cols)
            xs.append(blocks)
            ts.append(feats.cells().astype(np.float64))
            continue
        feats = sample.features(main)
        raw = _raw_pixels(sample, target_mod)
        blocks, patch = extractor.patchify_image(raw, feats.rows, feats.cols)
        xs.append(feats.cells().astype(np.float64))
        ts.append(blocks)
    return np.concatenate(xs), np.concatenate(ts), patch


def train_distiller(route, main, samples, cfg=TrainConfig()):
    """Train a hallucination net; returns checkpoints (always includes the
    final epoch). Shuffling, init, and updates are all seeded."""
    x, target, patch = build_pairs(route, main, samples)
    hidden = cfg.hidden if cfg.hidden is not None else DEFAULT_HIDDEN[route]
    lr_base = (
        cfg.learning_rate
        if cfg.learning_rate is not None
        else DEFAULT_LEARNING_RATE[route]
    )
    dims = [x.shape[1], *hidden, target.shape[1]]
    net = init_net(dims, route, main, seed=cfg.seed, patch=patch)
    state = adam_init(net)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    n = x.shape[0]
    checkpoints = []
    for epoch in range(1, cfg.epochs + 1):
        if cfg.warmup_epochs > 0:
            lr = lr_base * min(1.0, epoch / cfg.warmup_epochs)
        else:
            lr = lr_base
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            grads, loss = net_gradient(net, x[idx], target[idx])
            net, state = adam_step(net, state, grads, lr)
            epoch_loss += loss * idx.shape[0]
        epoch_loss /= n
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            checkpoints.append(Checkpoint(copy.deepcopy(net), epoch, epoch_loss))
    return checkpoints


def hallucinate(net, source, rgb_spec=None, pc_spec=None, grouping=None):
    """Predict the missing modality's feature map from `source`.

    f2f: source is the main modality's FeatureMap.
    i2f: source is the main modality's raw image/point grid.
    f2i: source is the main modality's FeatureMap; the predicted raw image is
         re-extracted with the target modality's extractor (rgb_spec or
         pc_spec + grouping must be provided).
    """
    target_mod = other_modality(net.source)
    if net.route == "f2f":
        _want_map(source, net.in_dim)
        cells = net_forward(net, source.cells().astype(np.float64))
        return FeatureMap(cells.reshape(source.rows, source.cols, net.out_dim))

    if net.route == "i2f":
        pixels = _raw_from(source, net.source)
        if net.patch is None:
            raise ConfigError("i2f net is missing its patch shape")
        ph, pw = net.patch
        h, w = pixels.shape[:2]
        if h % ph or w % pw:
            raise ValueError(f"input {h}x{w} does not tile with {ph}x{pw} patches")
        rows, cols = h // ph, w // pw
        blocks, _ = extractor.patchify_image(pixels, rows, cols)
        cells = net_forward(net, blocks)
        return FeatureMap(cells.reshape(rows, cols, net.out_dim))

    if net.route == "f2i":
        _want_map(source, net.in_dim)
        if net.patch is None:
            raise ConfigError("f2i net is missing its patch shape")
        blocks = net_forward(net, source.cells().astype(np.float64))
        image = extractor.assemble_image(blocks, source.rows, source.cols, net.patch)
        if target_mod == "rgb":
            if rgb_spec is None:
                raise ConfigError("f2i to rgb needs rgb_spec to re-extract")
            return extractor.extract_rgb(rgb_spec, RgbImage(np.clip(image, 0.0, 1.0)))
        if pc_spec is None or grouping is None:
            raise ConfigError("f2i to pc needs pc_spec and grouping to re-extract")
        return extractor.pc_feature_map(
            pc_spec, StructuredPointCloud(image), grouping
        )
    raise ConfigError(f"unknown route {net.route!r}")


def _want_map(source, dim):
    if not isinstance(source, FeatureMap):
        raise ValueError(f"expected a FeatureMap source, got {type(source).__name__}")
    if source.dim != dim:
        raise ValueError(f"source dim {source.dim} != net input {dim}")


def _raw_from(source, modality):
    if modality == "rgb":
        if not isinstance(source, RgbImage):
            raise ValueError("i2f from rgb expects an RgbImage source")
        return source.pixels.astype(np.float64)
    if not isinstance(source, StructuredPointCloud):
        raise ValueError("i2f from pc expects a StructuredPointCloud source")
    return source.coords.astype(np.float64)


# ---------------------------------------------------------------------------
# Checkpoint persistence


def _tensor3(arr):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    return FeatureMap(a[:, :, None].astype(np.float32))


def save_checkpoint(out_dir, checkpoint, train_config=None):
    """Write a checkpoint directory: one tensor file per weight/bias plus a
    manifest. Weights are quantized to the format's 4-byte floats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = checkpoint.net
    tensors = {}
    for i, layer in enumerate(net.layers):
        for tag, arr in (("w", layer.weights), ("b", layer.bias)):
            name = f"layer{i:02d}_{tag}.cmft"
            write_feature_tensor(_tensor3(arr), out / name)
            tensors[name] = file_sha256(out / name)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "route": net.route,
        "source": net.source,
        "dims": net.dims,
        "activations": [l.activation for l in net.layers],
        "patch": list(net.patch) if net.patch else None,
        "epoch": checkpoint.epoch,
        "loss": checkpoint.loss,
        "tensors": tensors,
    }
    if train_config is not None:
        manifest["train_config"] = {
            f.name: getattr(train_config, f.name) for f in fields(train_config)
        }
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_checkpoint(path):
    """Read a checkpoint directory (or its manifest path) back into memory."""
    path = Path(path)
    manifest_path = path if path.is_file() else path / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no checkpoint manifest at {manifest_path}")
    manifest = read_json(manifest_path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cdir = manifest_path.parent
    layers = []
    for i, act in enumerate(manifest["activations"]):
        w = read_feature_tensor(cdir / f"layer{i:02d}_w.cmft")
        b = read_feature_tensor(cdir / f"layer{i:02d}_b.cmft")
        layers.append(
            DenseLayer(
                w.data[:, :, 0].astype(np.float64),
                b.data[0, :, 0].astype(np.float64),
                act,
            )
        )
    patch = manifest.get("patch")
    net = DenseNet(
        layers,
        manifest["route"],
        manifest["source"],
        tuple(patch) if patch else None,
    )
    return Checkpoint(net, manifest["epoch"], manifest["loss"])
