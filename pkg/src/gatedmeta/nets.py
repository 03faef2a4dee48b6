"""A small NumPy network engine with per-layer channel gates.

All parameters of a :class:`GatedBackbone` live in one flat ``float64`` vector,
backbone parameters first and gate parameters after them. Layer weights are
views into that vector, so optimizer code works on flat arrays only.

A gate attached to a layer reads the layer's *input*, averages it over the
spatial dimensions, runs it through a one-hidden-layer perceptron and emits a
binary mask over the layer's output channels (``logit >= 0``). The mask
multiplies the layer output channel-wise.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .core_math import GroupLayout, group_lasso_value

__all__ = [
    "Dense",
    "Conv",
    "ReLU",
    "MaxPool",
    "GlobalAvgPool",
    "Batch",
    "GatedBackbone",
    "ShapeError",
    "forward",
    "backward",
    "loss_and_grad",
    "gate_mask",
    "group_lasso_value",
    "cross_entropy",
    "mlp",
    "small_cnn",
    "save_checkpoint",
    "load_checkpoint",
    "parse_architecture",
]


class ShapeError(ValueError):
    """Input shapes do not match the network."""


# --------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    gated: bool = False

    @property
    def out_channels(self):
        return self.n_out

    @property
    def in_channels(self):
        return self.n_in

    def param_shapes(self):
        return [(self.n_out, self.n_in), (self.n_out,)]

    def describe(self):
        return f"dense({self.n_in},{self.n_out}{',gated' if self.gated else ''})"


@dataclass(frozen=True)
class Conv:
    """3x3 convolution, zero same-padding, stride 1."""

    c_in: int
    c_out: int
    gated: bool = False

    @property
    def out_channels(self):
        return self.c_out

    @property
    def in_channels(self):
        return self.c_in

    def param_shapes(self):
        return [(self.c_out, self.c_in, 3, 3), (self.c_out,)]

    def describe(self):
        return f"conv({self.c_in},{self.c_out}{',gated' if self.gated else ''})"


@dataclass(frozen=True)
class ReLU:
    def describe(self):
        return "relu"


@dataclass(frozen=True)
class MaxPool:
    """2x2 max pooling, stride 2."""

    def describe(self):
        return "maxpool"


@dataclass(frozen=True)
class GlobalAvgPool:
    def describe(self):
        return "gap"


_PARAM_LAYERS = (Dense, Conv)


def parse_architecture(desc: str):
    """Inverse of :meth:`GatedBackbone.describe`; returns (layers, options)."""
    parts = desc.split("|")
    layers = []
    for tok in parts[0].split(";"):
        tok = tok.strip()
        m = re.fullmatch(r"(dense|conv)\((\d+),(\d+)(,gated)?\)", tok)
        if m:
            cls = Dense if m.group(1) == "dense" else Conv
            layers.append(cls(int(m.group(2)), int(m.group(3)), bool(m.group(4))))
        elif tok == "relu":
            layers.append(ReLU())
        elif tok == "maxpool":
            layers.append(MaxPool())
        elif tok == "gap":
            layers.append(GlobalAvgPool())
        else:
            raise ValueError(f"unknown layer token {tok!r}")
    options = {}
    for kv in parts[1:]:
        k, _, v = kv.partition("=")
        options[k] = v
    return layers, options


# --------------------------------------------------------------------------
# data


@dataclass
class Batch:
    """Inputs ``(n, features)`` or ``(n, channels, h, w)`` with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] == 0:
            raise ValueError("batch is empty")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError("one label per input is required")
        if self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Batch(self.inputs[idx], self.labels[idx])


# --------------------------------------------------------------------------
# the network


@dataclass
class _Slot:
    start: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def stop(self):
        return self.start + self.size


class GatedBackbone:
    """A feed-forward network with optional channel gates.

    Parameters
    ----------
    layers : sequence of layer specs
    gate_hidden : int
        Hidden width of every gate perceptron.
    grad_mode : {"gumbel", "ste"}
        Backward rule through the binarizer. ``"gumbel"`` uses the sigmoid
        derivative at ``temperature``; ``"ste"`` passes the gradient unchanged.
    gumbel_noise : bool
        Add logistic noise to gate logits in the forward pass (needs an rng).
    params : array, optional
        Flat parameter vector; random Glorot initialization when omitted.
    """

    def __init__(
        self,
        layers: Sequence,
        gate_hidden: int = 16,
        grad_mode: str = "gumbel",
        temperature: float = 1.0,
        gumbel_noise: bool = False,
        params: Optional[np.ndarray] = None,
        seed: int = 0,
        gate_bias_init: float = 1.0,
    ):
        if grad_mode not in ("gumbel", "ste"):
            raise ValueError(f"unknown grad_mode {grad_mode!r}")
        self.layers = list(layers)
        self.gate_hidden = int(gate_hidden)
        self.grad_mode = grad_mode
        self.temperature = float(temperature)
        self.gumbel_noise = bool(gumbel_noise)
        self.gate_bias_init = float(gate_bias_init)
        self._layout()
        if params is None:
            self.params = np.zeros(self.n_params)
            self._init_params(np.random.default_rng(seed))
        else:
            params = np.array(params, dtype=np.float64).reshape(-1)
            if params.size != self.n_params:
                raise ShapeError(f"expected {self.n_params} parameters, got {params.size}")
            self.params = params

    # ---- layout -------------------------------------------------------

    def _layout(self):
        pos = 0
        self.theta_slots = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, _PARAM_LAYERS):
                slots = []
                for shp in layer.param_shapes():
                    s = _Slot(pos, shp)
                    slots.append(s)
                    pos = s.stop
                self.theta_slots[i] = slots
        self.n_theta = pos
        self.gate_slots = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, _PARAM_LAYERS) and layer.gated:
                h = self.gate_hidden
                shapes = [(h, layer.in_channels), (h,), (layer.out_channels, h + 1)]
                slots = []
                for shp in shapes:
                    s = _Slot(pos, shp)
                    slots.append(s)
                    pos = s.stop
                self.gate_slots[i] = slots
        self.n_params = pos
        self.n_phi = pos - self.n_theta

    @property
    def theta_range(self):
        return slice(0, self.n_theta)

    @property
    def phi_range(self):
        return slice(self.n_theta, self.n_params)

    @property
    def gated_layers(self) -> List[int]:
        return sorted(self.gate_slots)

    def view(self, slot: _Slot, vec=None):
        vec = self.params if vec is None else vec
        return vec[slot.start:slot.stop].reshape(slot.shape)

    def _init_params(self, rng):
        for i, slots in self.theta_slots.items():
            layer = self.layers[i]
            w = self.view(slots[0])
            if isinstance(layer, Conv):
                fan_in, fan_out = layer.c_in * 9, layer.c_out * 9
            else:
                fan_in, fan_out = layer.n_in, layer.n_out
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w[...] = rng.uniform(-lim, lim, size=w.shape)
        for i, (w1s, _, w2s) in self.gate_slots.items():
            w1 = self.view(w1s)
            lim = np.sqrt(6.0 / sum(w1.shape))
            w1[...] = rng.uniform(-lim, lim, size=w1.shape)
            w2 = self.view(w2s)
            lim = np.sqrt(6.0 / (w2.shape[0] + w2.shape[1] - 1))
            w2[:, :-1] = rng.uniform(-lim, lim, size=(w2.shape[0], w2.shape[1] - 1))
            w2[:, -1] = self.gate_bias_init

    # ---- value semantics ----------------------------------------------

    def clone(self, params=None) -> "GatedBackbone":
        """Independent copy, optionally with a different flat parameter vector."""
        p = self.params if params is None else params
        return GatedBackbone(
            self.layers,
            gate_hidden=self.gate_hidden,
            grad_mode=self.grad_mode,
            temperature=self.temperature,
            gumbel_noise=self.gumbel_noise,
            params=np.array(p, dtype=np.float64, copy=True),
            gate_bias_init=self.gate_bias_init,
        )

    def describe(self) -> str:
        body = ";".join(layer.describe() for layer in self.layers)
        return (
            f"{body}|gate_hidden={self.gate_hidden}|grad_mode={self.grad_mode}"
            f"|temperature={self.temperature!r}|gate_bias_init={self.gate_bias_init!r}"
        )

    @property
    def n_classes(self):
        last = [layer for layer in self.layers if isinstance(layer, _PARAM_LAYERS)][-1]
        return last.out_channels

    # ---- index helpers ------------------------------------------------

    def gate_group_layout(self, weights=None) -> GroupLayout:
        """One group per gate output unit: its row of output weights plus bias."""
        groups = []
        for i in self.gated_layers:
            w2s = self.gate_slots[i][2]
            n_out, width = w2s.shape
            for k in range(n_out):
                a = w2s.start + k * width
                groups.append((a, a + width))
        return GroupLayout(tuple(groups), weights)

    def theta_weight_indices(self) -> np.ndarray:
        """Flat indices of backbone weight tensors (biases excluded)."""
        return np.concatenate(
            [np.arange(slots[0].start, slots[0].stop) for _, slots in sorted(self.theta_slots.items())]
        )

    def channel_feed_indices(self, layer_index: int, k: int) -> np.ndarray:
        """Indices of the filter (weights and bias) producing output channel ``k``."""
        w, b = self.theta_slots[layer_index]
        per = w.size // w.shape[0]
        return np.concatenate([np.arange(w.start + k * per, w.start + (k + 1) * per), [b.start + k]])

    def channel_read_indices(self, layer_index: int, k: int) -> np.ndarray:
        """Indices of the next parametric layer's weights that read channel ``k``."""
        for j in range(layer_index + 1, len(self.layers)):
            if isinstance(self.layers[j], _PARAM_LAYERS):
                w = self.theta_slots[j][0]
                idx = np.arange(w.start, w.stop).reshape(w.shape)
                return idx[:, k].reshape(-1)
        return np.array([], dtype=np.int64)


def mlp(n_in=196, hidden=100, n_classes=10, gated=False, **kw) -> GatedBackbone:
    """Two-layer perceptron ``n_in -> hidden -> n_classes``; optional gates on the hidden units."""
    return GatedBackbone([Dense(n_in, hidden, gated), ReLU(), Dense(hidden, n_classes)], **kw)


def small_cnn(c_in=3, n_classes=10, c1=8, c2=16, gated=True, **kw) -> GatedBackbone:
    """conv(c_in->c1)-relu-maxpool-conv(c1->c2, gated)-relu-gap-dense(c2->n_classes)."""
    layers = [Conv(c_in, c1), ReLU(), MaxPool(), Conv(c1, c2, gated), ReLU(), GlobalAvgPool(), Dense(c2, n_classes)]
    return GatedBackbone(layers, **kw)


# --------------------------------------------------------------------------
# forward / backward


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _pool_channels(x):
    return x if x.ndim == 2 else x.mean(axis=(2, 3))


def gate_mask(net: GatedBackbone, layer_index: int, feature_map, surrogate=False, noise=None):
    """Evaluate one gate on the input feature map of ``layer_index``.

    Returns ``(mask, cache)``. ``mask`` is binary unless ``surrogate`` is set,
    in which case the differentiable stand-in is returned instead (sigmoid for
    ``gumbel``, the raw logit for ``ste``).
    """
    layer = net.layers[layer_index]
    x = np.asarray(feature_map, dtype=np.float64)
    if x.ndim < 2 or x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"gate on layer {layer_index} expects {layer.in_channels} input channels, got shape {x.shape}"
        )
    w1s, b1s, w2s = net.gate_slots[layer_index]
    w1, b1, w2b = net.view(w1s), net.view(b1s), net.view(w2s)
    pooled = _pool_channels(x)
    h_pre = pooled @ w1.T + b1
    h = np.maximum(h_pre, 0.0)
    z = h @ w2b[:, :-1].T + w2b[:, -1]
    if noise is not None:
        z = z + noise
    if surrogate:
        mask = _sigmoid(z / net.temperature) if net.grad_mode == "gumbel" else z.copy()
    else:
        mask = (z >= 0.0).astype(np.float64)
    cache = {"x_shape": x.shape, "pooled": pooled, "h_pre": h_pre, "h": h, "z": z, "mask": mask}
    return mask, cache


def _gate_backward(net, layer_index, cache, dmask, grad, trace=None):
    """Backprop through a gate; writes its parameter gradient into ``grad``.

    Returns the gradient with respect to the gate's input feature map.
    """
    w1s, b1s, w2s = net.gate_slots[layer_index]
    w1, w2b = net.view(w1s), net.view(w2s)
    z = cache["z"]
    if net.grad_mode == "gumbel":
        s = _sigmoid(z / net.temperature)
        dz = dmask * s * (1.0 - s) / net.temperature
    else:
        dz = dmask
    if trace is not None:
        trace[layer_index] = {"dmask": dmask.copy(), "dz": dz.copy()}
    h = cache["h"]
    gw2 = net.view(w2s, grad)
    gw2[:, :-1] += dz.T @ h
    gw2[:, -1] += dz.sum(axis=0)
    dh = dz @ w2b[:, :-1]
    dh_pre = dh * (cache["h_pre"] > 0)
    net.view(w1s, grad)[...] += dh_pre.T @ cache["pooled"]
    net.view(b1s, grad)[...] += dh_pre.sum(axis=0)
    dpooled = dh_pre @ w1
    shp = cache["x_shape"]
    if len(shp) == 2:
        return dpooled
    return np.broadcast_to((dpooled / (shp[2] * shp[3]))[:, :, None, None], shp)


def forward(net: GatedBackbone, inputs, gating=True, surrogate=False, rng=None):
    """Run the network; returns ``(logits, masks, cache)``.

    ``masks`` maps gated layer index to the ``(n, channels)`` mask used. With
    ``gating=False`` gates are skipped entirely (mask of ones, not recorded).
    """
    x = np.asarray(inputs, dtype=np.float64)
    first = next(layer for layer in net.layers if isinstance(layer, _PARAM_LAYERS))
    if isinstance(first, Conv):
        if x.ndim != 4 or x.shape[1] != first.c_in:
            raise ShapeError(f"expected input (n, {first.c_in}, h, w), got {x.shape}")
    elif x.ndim != 2 or x.shape[1] != first.n_in:
        raise ShapeError(f"expected input (n, {first.n_in}), got {x.shape}")
    masks = {}
    caches = []
    for i, layer in enumerate(net.layers):
        c = {"x": x}
        if isinstance(layer, Dense):
            if x.ndim != 2 or x.shape[1] != layer.n_in:
                raise ShapeError(f"layer {i}: expected (n, {layer.n_in}), got {x.shape}")
            w, b = (net.view(s) for s in net.theta_slots[i])
            y = x @ w.T + b
        elif isinstance(layer, Conv):
            if x.ndim != 4 or x.shape[1] != layer.c_in:
                raise ShapeError(f"layer {i}: expected {layer.c_in} channels, got {x.shape}")
            w, b = (net.view(s) for s in net.theta_slots[i])
            y = kernels.conv3x3_forward(x, w, b)
        elif isinstance(layer, ReLU):
            y = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            if x.shape[2] % 2 or x.shape[3] % 2:
                raise ShapeError(f"layer {i}: max pooling needs even spatial dims, got {x.shape}")
            y, c["idx"] = kernels.maxpool2_forward(x)
        elif isinstance(layer, GlobalAvgPool):
            y = x.mean(axis=(2, 3))
        else:
            raise TypeError(f"unsupported layer {layer!r}")
        if gating and isinstance(layer, _PARAM_LAYERS) and layer.gated:
            noise = None
            if net.gumbel_noise and rng is not None:
                u = rng.uniform(1e-12, 1.0 - 1e-12, size=(x.shape[0], layer.out_channels))
                noise = np.log(u) - np.log1p(-u)
            m, gcache = gate_mask(net, i, x, surrogate=surrogate, noise=noise)
            masks[i] = m
            c["gate"] = gcache
            c["pre_mask"] = y
            y = y * (m[:, :, None, None] if y.ndim == 4 else m)
        caches.append(c)
        x = y
    return x, masks, {"layers": caches, "gating": gating}


def backward(net: GatedBackbone, cache, dlogits, trace=None) -> np.ndarray:
    """Flat gradient (length ``n_params``) given ``dL/dlogits``."""
    grad = np.zeros(net.n_params)
    dy = np.asarray(dlogits, dtype=np.float64)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        c = cache["layers"][i]
        x = c["x"]
        dgate_in = None
        if "gate" in c:
            m = c["gate"]["mask"]
            pre = c["pre_mask"]
            if pre.ndim == 4:
                dmask = (dy * pre).sum(axis=(2, 3))
                dy = dy * m[:, :, None, None]
            else:
                dmask = dy * pre
                dy = dy * m
            dgate_in = _gate_backward(net, i, c["gate"], dmask, grad, trace)
        if isinstance(layer, Dense):
            ws, bs = net.theta_slots[i]
            w = net.view(ws)
            net.view(ws, grad)[...] = dy.T @ x
            net.view(bs, grad)[...] = dy.sum(axis=0)
            dx = dy @ w
        elif isinstance(layer, Conv):
            ws, bs = net.theta_slots[i]
            dx, dw, db = kernels.conv3x3_backward(x, net.view(ws), dy)
            net.view(ws, grad)[...] = dw
            net.view(bs, grad)[...] = db
        elif isinstance(layer, ReLU):
            dx = dy * (x > 0)
        elif isinstance(layer, MaxPool):
            dx = kernels.maxpool2_backward(dy, c["idx"], x.shape)
        elif isinstance(layer, GlobalAvgPool):
            hw = x.shape[2] * x.shape[3]
            dx = np.broadcast_to((dy / hw)[:, :, None, None], x.shape)
        if dgate_in is not None:
            dx = dx + dgate_in
        dy = dx
    return grad


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    p = np.exp(shifted - logz[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


def loss_and_grad(net: GatedBackbone, batch: Batch, gating=True, surrogate=False, rng=None, trace=None):
    """Mean cross-entropy and ``(grad_theta, grad_phi)``."""
    if batch.labels.max() >= net.n_classes:
        raise ValueError(f"label {batch.labels.max()} outside [0, {net.n_classes})")
    logits, _, cache = forward(net, batch.inputs, gating=gating, surrogate=surrogate, rng=rng)
    loss, dlogits = cross_entropy(logits, batch.labels)
    grad = backward(net, cache, dlogits, trace=trace)
    return loss, grad[net.theta_range], grad[net.phi_range]


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"MGTR"
_VERSION = 1


def save_checkpoint(path, net: GatedBackbone) -> None:
    """Write ``MGTR`` header, architecture descriptor and little-endian float64 params."""
    desc = net.describe().encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQI", _VERSION, net.n_params, len(desc)))
        f.write(desc)
        f.write(np.ascontiguousarray(net.params, dtype="<f8").tobytes())


def load_checkpoint(path) -> GatedBackbone:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic at offset 0)")
    if len(data) < 20:
        raise ValueError("checkpoint header truncated at offset 4")
    version, count, dlen = struct.unpack_from("<IQI", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 20
    if len(data) < off + dlen:
        raise ValueError(f"architecture descriptor truncated at offset {off}")
    desc = data[off:off + dlen].decode("utf-8")
    off += dlen
    if len(data) != off + 8 * count:
        raise ValueError(f"parameter block has wrong size at offset {off}")
    params = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
    layers, opts = parse_architecture(desc)
    net = GatedBackbone(
        layers,
        gate_hidden=int(opts.get("gate_hidden", 16)),
        grad_mode=opts.get("grad_mode", "gumbel"),
        temperature=float(opts.get("temperature", 1.0)),
        gate_bias_init=float(opts.get("gate_bias_init", 1.0)),
        params=params,
    )
    return net
