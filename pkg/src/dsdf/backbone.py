"""Feature extractor, classification heads and their reverse-mode gradients.

The extractor is either a ReLU MLP or a small stack of 3x3 convolutions whose
last feature maps are global-average-pooled into the feature vector ``z``.
On top of ``z`` sit the original C-way head (``omega``) used for pretraining
and category similarity, the T per-tree heads producing neuron outputs, and
the tree selection MLP (whose forward pass lives in :mod:`dsdf.forest`).

All gradients are written out by hand; ``gradients`` takes a loss callback
that maps activations to upstream derivatives and returns one gradient array
per trainable tensor.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigurationError,
    InputShapeError,
    NumericError,
    TrainingDivergenceError,
)

ARCHS = ("mlp", "tiny_conv")


@dataclass
class BackboneConfig:
    input_shape: tuple
    arch: str = "mlp"
    hidden_dims: list = field(default_factory=lambda: [32])
    feature_dim: int = 16
    num_classes: int = 2
    seed: int = 0
    dtype: str = "float64"
    head_bias: bool = True

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in np.atleast_1d(self.input_shape))
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("hidden_dims must be a non-empty list of positive ints")
        if not self.input_shape or any(s < 1 for s in self.input_shape):
            raise ConfigurationError(f"invalid input_shape {self.input_shape}")
        if self.arch == "tiny_conv" and len(self.input_shape) != 3:
            raise ConfigurationError("tiny_conv needs a spatial (channels, height, width) input")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError("dtype must be float64 or float32")

    @property
    def flat_dim(self):
        return int(np.prod(self.input_shape))

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "arch": self.arch,
            "hidden_dims": list(self.hidden_dims),
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "dtype": self.dtype,
            "head_bias": self.head_bias,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelParams:
    """Every trainable tensor of a dDSDF model.

    ``heads`` has shape (T, N, F), ``head_bias`` (T, N) and ``leaf_dists``
    (T, L, C) with N = 2**(d-1) - 1 split nodes and L = N + 1 leaves.
    """

    config: BackboneConfig
    theta: dict
    omega: np.ndarray
    omega_bias: np.ndarray
    heads: np.ndarray
    head_bias: np.ndarray
    tsm: dict
    leaf_dists: np.ndarray
    tsm_normalization: str = "softmax"

    @property
    def num_trees(self):
        return self.heads.shape[0]

    @property
    def depth(self):
        return int(round(math.log2(self.heads.shape[1] + 1))) + 1

    def named_tensors(self):
        """All tensors (trainable or not) keyed by flat name, as live references."""
        out = {f"theta/{k}": v for k, v in self.theta.items()}
        out["omega"] = self.omega
        out["omega_bias"] = self.omega_bias
        out["heads"] = self.heads
        out["head_bias"] = self.head_bias
        out.update({f"tsm/{k}": v for k, v in self.tsm.items()})
        out["leaf_dists"] = self.leaf_dists
        return out

    def trainable(self, groups=("theta", "omega", "heads", "tsm")):
        """Gradient-trained tensors (never ``leaf_dists``) restricted to ``groups``."""
        out = {}
        for name, arr in self.named_tensors().items():
            if name == "leaf_dists":
                continue
            if name == "head_bias" and not self.config.head_bias:
                continue
            group = {"omega_bias": "omega", "head_bias": "heads"}.get(name, name.split("/")[0])
            if group in groups:
                out[name] = arr
        return out

    def copy(self):
        return copy.deepcopy(self)

    def equals(self, other):
        """Bit-exact comparison of every tensor and the configuration."""
        a, b = self.named_tensors(), other.named_tensors()
        if a.keys() != b.keys() or self.config != other.config:
            return False
        if self.tsm_normalization != other.tsm_normalization:
            return False
        return all(a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a)


@dataclass
class Activation:
    """Forward results. Per sample, or with a leading batch axis from ``forward_batch``."""

    features: np.ndarray
    conv_maps: np.ndarray | None
    neuron_outputs: np.ndarray


class HeadGrads(NamedTuple):
    """What a loss callback hands back to :func:`gradients`."""

    d_features: np.ndarray | None = None
    d_neuron_outputs: np.ndarray | None = None
    param_grads: dict | None = None


def num_split_nodes(depth):
    return 2 ** (depth - 1) - 1


def _tsm_hidden(F):
    return int(math.ceil(F / 4))


def init_model(config, T, d, seed=None, tsm_normalization="softmax"):
    """Randomly initialize a model with T trees of depth d.

    Extractor and TSM weights use He-normal scaling, the original and tree
    heads are N(0, 1/F) with zero bias, and every leaf starts uniform.
    """
    config.validate()
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if d < 2:
        raise ConfigurationError("depth must be >= 2")
    if tsm_normalization not in ("softmax", "sigmoid"):
        raise ConfigurationError("tsm_normalization must be 'softmax' or 'sigmoid'")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dt = np.dtype(config.dtype)
    F, C = config.feature_dim, config.num_classes
    N = num_split_nodes(d)

    theta = {}
    if config.arch == "mlp":
        dims = [config.flat_dim, *config.hidden_dims, F]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            theta[f"fc{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / a), (b, a))
            theta[f"fc{i}.b"] = np.zeros(b)
    else:
        chans = [config.input_shape[0], *config.hidden_dims, F]
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            theta[f"conv{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / (9 * a)), (b, a, 3, 3))
            theta[f"conv{i}.b"] = np.zeros(b)

    omega = rng.normal(0.0, 1.0 / math.sqrt(F), (C, F))
    heads = rng.normal(0.0, 1.0 / math.sqrt(F), (T, N, F))
    h = _tsm_hidden(F)
    tsm = {
        "l1.w": rng.normal(0.0, math.sqrt(2.0 / F), (h, F)),
        "l1.b": np.zeros(h),
        "l2.w": rng.normal(0.0, math.sqrt(2.0 / h), (h, h)),
        "l2.b": np.zeros(h),
        "l3.w": rng.normal(0.0, 1.0 / math.sqrt(h), (T, h)),
        "l3.b": np.zeros(T),
    }
    return ModelParams(
        config=config,
        theta={k: v.astype(dt) for k, v in theta.items()},
        omega=omega.astype(dt),
        omega_bias=np.zeros(C, dtype=dt),
        heads=heads.astype(dt),
        head_bias=np.zeros((T, N), dtype=dt),
        tsm={k: v.astype(dt) for k, v in tsm.items()},
        leaf_dists=np.full((T, N + 1, C), 1.0 / C, dtype=dt),
        tsm_normalization=tsm_normalization,
    )


# ---------------------------------------------------------------------------
# extractor forward / backward


def _im2col(x):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)


def _col2im(dcols, shape):
    B, C, H, W = shape
    d = dcols.reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, C, H + 2, W + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + H, j:j + W] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def _check_batch(config, X):
    X = np.asarray(X)
    if X.shape[1:] != config.input_shape:
        if config.arch == "mlp" and X.ndim >= 2 and int(np.prod(X.shape[1:])) == config.flat_dim:
            X = X.reshape(X.shape[0], config.flat_dim)
        else:
            raise InputShapeError(
                f"expected samples of shape {config.input_shape}, got {X.shape[1:]}"
            )
    return X.astype(config.dtype, copy=False)


def extract(params, X):
    """Run the extractor on a batch; returns (z, conv_maps or None, cache)."""
    cfg = params.config
    X = _check_batch(cfg, X)
    cache = []
    if cfg.arch == "mlp":
        h = X.reshape(X.shape[0], -1)
        n_layers = len(cfg.hidden_dims) + 1
        for i in range(n_layers):
            pre = h @ params.theta[f"fc{i}.w"].T + params.theta[f"fc{i}.b"]
            cache.append((h, pre > 0))
            h = np.maximum(pre, 0.0)
        return h, None, cache
    h = X
    n_layers = len(cfg.hidden_dims) + 1
    for i in range(n_layers):
        W = params.theta[f"conv{i}.w"]
        B, _, H, Wd = h.shape
        cols = _im2col(h)
        pre = (cols @ W.reshape(W.shape[0], -1).T + params.theta[f"conv{i}.b"])
        pre = pre.reshape(B, H, Wd, W.shape[0]).transpose(0, 3, 1, 2)
        cache.append((h.shape, cols, pre > 0))
        h = np.maximum(pre, 0.0)
    z = h.mean(axis=(2, 3))
    return z, h, cache


def extract_backward(params, cache, dz, d_maps=None):
    """Gradients of the extractor weights given dL/dz (and optionally dL/dA)."""
    cfg = params.config
    grads = {}
    if cfg.arch == "mlp":
        dh = dz
        for i in reversed(range(len(cache))):
            h_in, mask = cache[i]
            dpre = dh * mask
            grads[f"theta/fc{i}.w"] = dpre.T @ h_in
            grads[f"theta/fc{i}.b"] = dpre.sum(axis=0)
            dh = dpre @ params.theta[f"fc{i}.w"]
        return grads
    shape_last, _, mask_last = cache[-1]
    B, K, H, W = mask_last.shape
    dh = np.broadcast_to(dz[:, :, None, None] / (H * W), mask_last.shape).copy()
    if d_maps is not None:
        dh += d_maps
    for i in reversed(range(len(cache))):
        in_shape, cols, mask = cache[i]
        Wt = params.theta[f"conv{i}.w"]
        dpre = (dh * mask).transpose(0, 2, 3, 1).reshape(-1, Wt.shape[0])
        grads[f"theta/conv{i}.w"] = (dpre.T @ cols).reshape(Wt.shape)
        grads[f"theta/conv{i}.b"] = dpre.sum(axis=0)
        if i > 0:
            dh = _col2im(dpre @ Wt.reshape(Wt.shape[0], -1), in_shape)
    return grads


def head_outputs(params, z):
    """Neuron outputs of every tree head, shape (B, T, N)."""
    out = np.einsum("tnf,bf->btn", params.heads, z)
    if params.config.head_bias:
        out = out + params.head_bias[None]
    return out


def forward_batch(params, X, return_cache=False):
    z, maps, cache = extract(params, X)
    acts = Activation(features=z, conv_maps=maps, neuron_outputs=head_outputs(params, z))
    return (acts, cache) if return_cache else acts


def forward(params, x):
    """Forward pass for a single sample."""
    x = np.asarray(x)
    cfg = params.config
    if x.shape != cfg.input_shape and not (cfg.arch == "mlp" and x.size == cfg.flat_dim):
        raise InputShapeError(f"expected a sample of shape {cfg.input_shape}, got {x.shape}")
    a = forward_batch(params, x.reshape((1, *cfg.input_shape)))
    return Activation(
        features=a.features[0],
        conv_maps=None if a.conv_maps is None else a.conv_maps[0],
        neuron_outputs=a.neuron_outputs[0],
    )


def zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.trainable().items()}


def value_and_gradients(params, batch, loss_fn: Callable):
    """Mean loss over ``batch`` and its gradient w.r.t. every trainable tensor.

    ``loss_fn(params, activations, labels)`` returns ``(loss, HeadGrads)``
    where the upstream derivatives are already those of the batch mean.
    Tensors the loss does not touch get exact zeros.
    """
    X, y = batch
    if len(X) == 0:
        raise InputShapeError("empty batch")
    acts, cache = forward_batch(params, X, return_cache=True)
    loss, head = loss_fn(params, acts, np.asarray(y))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    grads = zero_grads(params)
    for k, g in (head.param_grads or {}).items():
        grads[k] = grads[k] + g
    z = acts.features
    dz = np.zeros_like(z) if head.d_features is None else np.array(head.d_features, copy=True)
    if head.d_neuron_outputs is not None:
        dN = head.d_neuron_outputs
        grads["heads"] = grads["heads"] + np.einsum("btn,bf->tnf", dN, z)
        if "head_bias" in grads:
            grads["head_bias"] = grads["head_bias"] + dN.sum(axis=0)
        dz += np.einsum("btn,tnf->bf", dN, params.heads)
    for k, g in extract_backward(params, cache, dz).items():
        grads[k] = grads[k] + g
    return float(loss), grads


def gradients(params, batch, loss_fn):
    return value_and_gradients(params, batch, loss_fn)[1]


# ---------------------------------------------------------------------------
# original head, pretraining, optimizer


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def original_logits(params, z):
    return z @ params.omega.T + params.omega_bias


def cross_entropy_loss(params, acts, y):
    """Softmax cross-entropy on the original C-way head."""
    B = len(y)
    logp = log_softmax(original_logits(params, acts.features))
    loss = -logp[np.arange(B), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    return loss, HeadGrads(
        d_features=dlogits @ params.omega,
        param_grads={"omega": dlogits.T @ acts.features, "omega_bias": dlogits.sum(axis=0)},
    )


@dataclass
class SGDConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 50
    batch_size: int = 64
    decay_every_fraction: float = 0.375
    decay_factor: float = 0.1
    seed: int = 0

    def lr_at(self, epoch):
        """Step schedule: multiply by ``decay_factor`` every fraction of the run."""
        step = max(1, int(round(self.decay_every_fraction * self.epochs)))
        return self.lr * self.decay_factor ** (epoch // step)


class SGD:
    """Momentum SGD with L2 weight decay, updating arrays in place."""

    def __init__(self, tensors, momentum=0.9, weight_decay=0.0):
        self.tensors = tensors
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, grads, lr):
        for k, p in self.tensors.items():
            g = grads[k] + self.weight_decay * p
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p -= lr * v


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def accuracy(params, X, y):
    z, _, _ = extract(params, X)
    return float((original_logits(params, z).argmax(axis=1) == np.asarray(y)).mean())


def pretrain(params, dataset, opt=None, log=None):
    """Train extractor and original head with cross-entropy; returns a new ModelParams.

    Tree heads, TSM and leaf distributions are left untouched.
    """
    opt = opt or SGDConfig()
    X, y = dataset.samples, np.asarray(dataset.labels)
    if len(X) == 0:
        raise InputShapeError("empty dataset")
    C = params.config.num_classes
    if y.min() < 0 or y.max() >= C:
        raise InputShapeError(f"labels must lie in 0..{C - 1}")
    params = params.copy()
    if opt.epochs <= 0:
        return params
    sgd = SGD(params.trainable(groups=("theta", "omega")), opt.momentum, opt.weight_decay)
    rng = np.random.default_rng(opt.seed)
    for epoch in range(opt.epochs):
        lr = opt.lr_at(epoch)
        total = 0.0
        for idx in minibatches(len(X), opt.batch_size, rng):
            try:
                loss, grads = value_and_gradients(params, (X[idx], y[idx]), cross_entropy_loss)
            except NumericError as exc:
                raise TrainingDivergenceError(f"loss diverged at epoch {epoch}", epoch=epoch) from exc
            sgd.step(grads, lr)
            total += loss * len(idx)
        mean = total / len(X)
        if not np.isfinite(mean):
            raise TrainingDivergenceError(f"loss diverged at epoch {epoch}", epoch=epoch)
        if log is not None:
            log.append({"epoch": epoch, "phase": "pretrain", "nll": mean,
                        "accuracy": accuracy(params, X, y), "learning_rate": lr})
    return params
