"""Owned tensor math and model definitions (MLP and small CNN).

Everything here is pure numpy in float64: exact analytic forward/backward
passes for the two fixed architectures, cross-entropy loss, and the flat
parameter-vector representation shared by the federated algorithms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Input or parameter shape does not match the model spec."""


class LayoutMismatchError(ValueError):
    """Two parameter vectors do not share the same layout."""


class NumericalError(ArithmeticError):
    """A public operation produced a non-finite value."""


@dataclass(frozen=True)
class Tensor:
    """Dense float64 array, row-major, guaranteed finite."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor contains NaN/Inf")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True)
class Batch:
    """A mini-batch of inputs with integer class labels."""

    inputs: Tensor
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != self.inputs.shape[0]:
            raise ShapeMismatchError(
                f"labels shape {labels.shape} does not match batch of "
                f"{self.inputs.shape[0]} inputs"
            )
        if labels.shape[0] < 1:
            raise ShapeMismatchError("batch must contain at least one sample")
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description for the two supported model families.

    kind="mlp": dense layers input -> hidden... -> classes, ReLU between.
    kind="cnn": two conv(kernel x kernel, valid, stride 1) + 2x2 max-pool
    stages, then two fully connected layers.
    """

    kind: str
    input_shape: tuple[int, ...]
    classes: int
    hidden: tuple[int, ...] = ()
    conv_channels: tuple[int, int] = (8, 16)
    kernel: int = 3
    fc_hidden: int = 64
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        if self.kind == "cnn":
            if len(self.conv_channels) != 2:
                raise ValueError("cnn requires exactly two conv stages")
            c, h, w = self._chw()
            for _ in self.conv_channels:
                h = (h - self.kernel + 1) // 2
                w = (w - self.kernel + 1) // 2
            if h < 1 or w < 1:
                raise ShapeMismatchError(
                    "input too small for two conv+pool stages"
                )

    def _chw(self) -> tuple[int, int, int]:
        if len(self.input_shape) == 2:
            return (1,) + self.input_shape
        if len(self.input_shape) == 3:
            return self.input_shape
        raise ShapeMismatchError(
            f"cnn input_shape must be (H, W) or (C, H, W), got {self.input_shape}"
        )

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))


@dataclass(frozen=True)
class Segment:
    layer: str
    role: str  # "weight" | "bias"
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    segments: tuple[Segment, ...]

    @property
    def size(self) -> int:
        last = self.segments[-1]
        return last.offset + last.size


def build_layout(spec: ModelSpec) -> ParamLayout:
    """Derive the canonical flat parameter layout for an architecture."""
    segs: list[Segment] = []
    offset = 0

    def add(layer, role, shape):
        nonlocal offset
        segs.append(Segment(layer, role, tuple(shape), offset))
        offset += int(np.prod(shape))

    if spec.kind == "mlp":
        dims = [spec.input_size, *spec.hidden, spec.classes]
        for i in range(len(dims) - 1):
            add(f"fc{i}", "weight", (dims[i], dims[i + 1]))
            if spec.bias:
                add(f"fc{i}", "bias", (dims[i + 1],))
    else:
        c, h, w = spec._chw()
        k = spec.kernel
        in_c = c
        for i, out_c in enumerate(spec.conv_channels):
            add(f"conv{i}", "weight", (out_c, in_c, k, k))
            if spec.bias:
                add(f"conv{i}", "bias", (out_c,))
            h = (h - k + 1) // 2
            w = (w - k + 1) // 2
            in_c = out_c
        flat = in_c * h * w
        add("fc0", "weight", (flat, spec.fc_hidden))
        if spec.bias:
            add("fc0", "bias", (spec.fc_hidden,))
        add("fc1", "weight", (spec.fc_hidden, spec.classes))
        if spec.bias:
            add("fc1", "bias", (spec.classes,))
    return ParamLayout(tuple(segs))


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 view of all trainable parameters, plus its layout."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vals.ndim != 1 or vals.shape[0] != self.layout.size:
            raise LayoutMismatchError(
                f"expected {self.layout.size} values, got shape {vals.shape}"
            )
        object.__setattr__(self, "values", vals)

    def segment(self, layer: str, role: str) -> np.ndarray:
        for seg in self.layout.segments:
            if seg.layer == layer and seg.role == role:
                return self.values[seg.offset : seg.offset + seg.size].reshape(
                    seg.shape
                )
        raise KeyError(f"no segment ({layer}, {role})")

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)


def require_same_layout(*vectors) -> None:
    layouts = {v.layout for v in vectors}
    if len(layouts) > 1:
        raise LayoutMismatchError("parameter vectors have different layouts")


def init_params(spec: ModelSpec, seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases, from a seeded generator."""
    layout = build_layout(spec)
    rng = np.random.default_rng(seed)
    values = np.empty(layout.size)
    for seg in layout.segments:
        view = values[seg.offset : seg.offset + seg.size]
        if seg.role == "bias":
            view[:] = 0.0
        elif len(seg.shape) == 2:
            fan_in, fan_out = seg.shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            view[:] = rng.uniform(-a, a, seg.size)
        else:  # conv weight (OC, C, k, k)
            oc, c, k, _ = seg.shape
            fan_in = c * k * k
            fan_out = oc * k * k
            a = math.sqrt(6.0 / (fan_in + fan_out))
            view[:] = rng.uniform(-a, a, seg.size)
    return ParameterVector(values, layout)


# ---------------------------------------------------------------------------
# forward / backward primitives


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + ho, j : j + wo]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, x_shape, k: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = h - k + 1, w - k + 1
    dc = dcols.reshape(n, c, k, k, ho, wo)
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + ho, j : j + wo] += dc[:, :, i, j]
    return dx


def _maxpool2(x: np.ndarray):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xr = x[:, :, : ho * 2, : wo * 2].reshape(n, c, ho, 2, wo, 2)
    windows = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout: np.ndarray, idx: np.ndarray, x_shape):
    n, c, h, w = x_shape
    ho, wo = h // 2, w // 2
    dwin = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dxr = (
        dwin.reshape(n, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * 2, wo * 2)
    )
    dx = np.zeros(x_shape)
    dx[:, :, : ho * 2, : wo * 2] = dxr
    return dx


def _check_batch(spec: ModelSpec, params: ParameterVector, batch: Batch) -> None:
    if params.layout != build_layout(spec):
        raise LayoutMismatchError("parameter layout does not match model spec")
    if batch.inputs.shape[1:] != spec.input_shape:
        raise ShapeMismatchError(
            f"input: batch sample shape {batch.inputs.shape[1:]} does not "
            f"match spec input_shape {spec.input_shape}"
        )
    if int(batch.labels.max(initial=0)) >= spec.classes:
        raise ShapeMismatchError(
            f"label {int(batch.labels.max())} out of range for "
            f"{spec.classes} classes"
        )


def _forward_cached(spec: ModelSpec, params: ParameterVector, x: np.ndarray):
    """Run the forward pass keeping what backprop needs."""
    caches = []
    if spec.kind == "mlp":
        a = x.reshape(x.shape[0], -1)
        n_layers = len(spec.hidden) + 1
        for i in range(n_layers):
            w = params.segment(f"fc{i}", "weight")
            z = a @ w
            if spec.bias:
                z = z + params.segment(f"fc{i}", "bias")
            if i < n_layers - 1:
                caches.append(("fc", f"fc{i}", a, z > 0))
                a = np.maximum(z, 0.0)
            else:
                caches.append(("fc", f"fc{i}", a, None))
                a = z
        return a, caches

    c, h, w_ = spec._chw()
    a = x.reshape(x.shape[0], c, h, w_)
    k = spec.kernel
    for i in range(2):
        wgt = params.segment(f"conv{i}", "weight")
        oc = wgt.shape[0]
        cols = _im2col(a, k)
        z = np.einsum("ok,nkl->nol", wgt.reshape(oc, -1), cols)
        if spec.bias:
            z = z + params.segment(f"conv{i}", "bias")[None, :, None]
        ho, wo = a.shape[2] - k + 1, a.shape[3] - k + 1
        z = z.reshape(a.shape[0], oc, ho, wo)
        relu_mask = z > 0
        r = np.maximum(z, 0.0)
        pooled, pool_idx = _maxpool2(r)
        caches.append(("conv", f"conv{i}", a.shape, cols, relu_mask, pool_idx, r.shape))
        a = pooled
    flat_shape = a.shape
    a = a.reshape(a.shape[0], -1)
    w0 = params.segment("fc0", "weight")
    z0 = a @ w0
    if spec.bias:
        z0 = z0 + params.segment("fc0", "bias")
    caches.append(("fc_flat", "fc0", a, z0 > 0, flat_shape))
    a1 = np.maximum(z0, 0.0)
    w1 = params.segment("fc1", "weight")
    z1 = a1 @ w1
    if spec.bias:
        z1 = z1 + params.segment("fc1", "bias")
    caches.append(("fc", "fc1", a1, None))
    return z1, caches


def _backward(spec: ModelSpec, params: ParameterVector, caches, dlogits):
    """Exact gradient of a scalar loss given d(loss)/d(logits)."""
    grads = np.zeros(params.layout.size)
    gvec = ParameterVector(grads, params.layout)  # writable views
    da = dlogits
    k = spec.kernel
    for cache in reversed(caches):
        tag = cache[0]
        if tag in ("fc", "fc_flat"):
            name, a_in, relu_mask = cache[1], cache[2], cache[3]
            if relu_mask is not None:
                # da is w.r.t. this layer's post-ReLU output; undo the ReLU
                da = da * relu_mask
            w = params.segment(name, "weight")
            gvec.segment(name, "weight")[...] += a_in.T @ da
            if spec.bias:
                gvec.segment(name, "bias")[...] += da.sum(axis=0)
            da = da @ w.T
            if tag == "fc_flat":
                da = da.reshape(cache[4])
        else:  # conv stage
            name, in_shape, cols, relu_mask, pool_idx, pre_pool_shape = cache[1:]
            dz = _maxpool2_backward(da, pool_idx, pre_pool_shape)
            dz = dz * relu_mask
            oc = dz.shape[1]
            dflat = dz.reshape(dz.shape[0], oc, -1)
            gvec.segment(name, "weight")[...] += np.einsum(
                "nol,nkl->ok", dflat, cols
            ).reshape(gvec.segment(name, "weight").shape)
            if spec.bias:
                gvec.segment(name, "bias")[...] += dflat.sum(axis=(0, 2))
            wgt = params.segment(name, "weight")
            dcols = np.einsum("ok,nol->nkl", wgt.reshape(oc, -1), dflat)
            da = _col2im(dcols, in_shape, k)
    return params.with_values(grads)


def forward(spec: ModelSpec, params: ParameterVector, batch: Batch) -> Tensor:
    """Logits for a batch: shape (batch, classes)."""
    _check_batch(spec, params, batch)
    logits, _ = _forward_cached(spec, params, batch.inputs.data)
    return Tensor(logits)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(
    spec: ModelSpec, params: ParameterVector, batch: Batch
) -> tuple[float, ParameterVector]:
    """Mean cross-entropy over the batch and its exact gradient."""
    _check_batch(spec, params, batch)
    logits, caches = _forward_cached(spec, params, batch.inputs.data)
    n = batch.size
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), batch.labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), batch.labels] -= 1.0
    dlogits /= n
    grad = _backward(spec, params, caches, dlogits)
    if not math.isfinite(loss) or not np.all(np.isfinite(grad.values)):
        raise NumericalError("loss/gradient not finite")
    return loss, grad


def per_sample_loglik_grad(
    spec: ModelSpec, params: ParameterVector, sample: Batch
) -> ParameterVector:
    """Gradient of log p(y|x; params) for a single sample."""
    if sample.size != 1:
        raise ShapeMismatchError("per-sample gradient requires batch size 1")
    _, grad = loss_and_grad(spec, params, sample)
    return grad.with_values(-grad.values)


def sum_squared_loglik_grads(
    spec: ModelSpec, params: ParameterVector, batch: Batch
) -> np.ndarray:
    """Sum over the batch of squared per-sample log-likelihood gradients.

    MLP only. Exploits that a dense layer's per-sample weight gradient is
    the outer product a_in[n] x dz[n], so the squared sum contracts to
    (a_in^2)^T @ (dz^2) without materializing per-sample gradients.
    """
    if spec.kind != "mlp":
        raise ValueError("vectorized squared-gradient path supports MLP only")
    _check_batch(spec, params, batch)
    logits, caches = _forward_cached(spec, params, batch.inputs.data)
    n = batch.size
    dlogits = np.exp(_log_softmax(logits))
    dlogits[np.arange(n), batch.labels] -= 1.0  # per-sample, unscaled
    out = np.zeros(params.layout.size)
    ovec = ParameterVector(out, params.layout)
    da = dlogits
    for cache in reversed(caches):
        _, name, a_in, relu_mask = cache
        if relu_mask is not None:
            da = da * relu_mask
        ovec.segment(name, "weight")[...] += (a_in**2).T @ (da**2)
        if spec.bias:
            ovec.segment(name, "bias")[...] += (da**2).sum(axis=0)
        da = da @ params.segment(name, "weight").T
    return out


def sgd_step(
    params: ParameterVector, grad: ParameterVector, lr: float
) -> ParameterVector:
    """One plain SGD step: params - lr * grad."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    require_same_layout(params, grad)
    return params.with_values(params.values - lr * grad.values)


def lr_schedule(initial_lr: float, epoch: int) -> float:
    """Step decay: divide by 3 after every 5 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial_lr / 3 ** (epoch // 5)


def accuracy(spec: ModelSpec, params: ParameterVector, batch: Batch) -> float:
    """Fraction of argmax predictions matching labels (ties -> lowest class)."""
    logits = forward(spec, params, batch)
    preds = logits.data.argmax(axis=1)
    return float((preds == batch.labels).mean())
