"""Shallow convolutional map from a permeability image to coarse nodal
properties, with hand-rolled reverse-mode differentiation.

Everything runs in double precision on single samples shaped (C, H, W).
Batch normalization uses the spatial statistics of the sample in training
mode and running averages (momentum 0.1) at prediction. A final
softplus-plus-floor keeps the emitted properties strictly positive for the
downstream solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArchitectureError, NumericalError

__all__ = [
    "LayerSpec",
    "Architecture",
    "Tape",
    "panis_cnn",
    "mpanis_cnn",
    "init_xavier",
    "forward",
    "backward",
    "init_bn_state",
]

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | deconv | avgpool | batchnorm | softplus
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_ch: int = 0
    out_ch: int = 0
    channels: int = 0  # batchnorm

    @property
    def n_params(self) -> int:
        if self.kind in ("conv", "deconv"):
            return self.kernel**2 * self.in_ch * self.out_ch + self.out_ch
        if self.kind == "batchnorm":
            return 2 * self.channels
        return 0


def _conv(k, s, p, cin, cout):
    return LayerSpec("conv", kernel=k, stride=s, padding=p, in_ch=cin, out_ch=cout)


def _deconv(k, s, p, cin, cout):
    return LayerSpec("deconv", kernel=k, stride=s, padding=p, in_ch=cin, out_ch=cout)


def _pool(k, s):
    return LayerSpec("avgpool", kernel=k, stride=s)


def _bn(c):
    return LayerSpec("batchnorm", channels=c)


_SOFTPLUS = LayerSpec("softplus")


@dataclass(frozen=True)
class Architecture:
    name: str
    input_hw: int
    layers: tuple[LayerSpec, ...]
    positive_output: bool = True
    output_floor: float = 1e-6

    def layer_name(self, i: int) -> str:
        return f"{i:02d}_{self.layers[i].kind}"

    def infer_shapes(self) -> list[tuple[int, int, int]]:
        """Shape after each layer starting from (1, H, W); validates the stack."""
        shapes = [(1, self.input_hw, self.input_hw)]
        c, h, w = shapes[0]
        for i, spec in enumerate(self.layers):
            where = f"layer {i} ({spec.kind})"
            if spec.kind == "conv":
                if spec.in_ch != c:
                    raise ArchitectureError(f"{where}: expects {spec.in_ch} channels, got {c}")
                h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                c = spec.out_ch
            elif spec.kind == "deconv":
                if spec.in_ch != c:
                    raise ArchitectureError(f"{where}: expects {spec.in_ch} channels, got {c}")
                h = (h - 1) * spec.stride - 2 * spec.padding + spec.kernel
                w = (w - 1) * spec.stride - 2 * spec.padding + spec.kernel
                c = spec.out_ch
            elif spec.kind == "avgpool":
                h = (h - spec.kernel) // spec.stride + 1
                w = (w - spec.kernel) // spec.stride + 1
            elif spec.kind == "batchnorm":
                if spec.channels != c:
                    raise ArchitectureError(f"{where}: normalizes {spec.channels} channels, got {c}")
            elif spec.kind == "softplus":
                pass
            else:
                raise ArchitectureError(f"{where}: unknown layer kind")
            if h < 1 or w < 1 or c < 1:
                raise ArchitectureError(f"{where}: produces empty output {c}x{h}x{w}")
            shapes.append((c, h, w))
        return shapes

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.infer_shapes()[-1]

    def param_layout(self) -> dict[str, tuple[int, ...]]:
        layout: dict[str, tuple[int, ...]] = {}
        for i, spec in enumerate(self.layers):
            name = self.layer_name(i)
            if spec.kind == "conv":
                layout[f"{name}/weight"] = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
                layout[f"{name}/bias"] = (spec.out_ch,)
            elif spec.kind == "deconv":
                layout[f"{name}/weight"] = (spec.in_ch, spec.out_ch, spec.kernel, spec.kernel)
                layout[f"{name}/bias"] = (spec.out_ch,)
            elif spec.kind == "batchnorm":
                layout[f"{name}/scale"] = (spec.channels,)
                layout[f"{name}/shift"] = (spec.channels,)
        return layout

    @property
    def n_params(self) -> int:
        return sum(spec.n_params for spec in self.layers)


def panis_cnn(input_hw: int = 129, out_ch: int = 1) -> Architecture:
    """Single-scale stack: two conv/pool stages and two deconvolutions.

    Emits a 17x17 grid from 129x129 input. At desk inputs (33x33) the
    second pooling stage is dropped so the output lands on 9x9; pooling
    carries no parameters, so the total stays the same.
    """
    head = (
        _conv(3, 2, 1, 1, 8), _SOFTPLUS, _bn(8),
        _pool(2, 2),
        _conv(3, 1, 1, 8, 24), _SOFTPLUS, _bn(24),
    )
    tail = (
        _deconv(4, 1, 1, 24, 8), _SOFTPLUS, _bn(8),
        _deconv(3, 1, 1, 8, out_ch),
    )
    if input_hw >= 64:
        layers = head + (_pool(2, 2),) + tail
    else:
        layers = head + tail
    return Architecture(name="panis", input_hw=input_hw, layers=layers)


def mpanis_cnn(input_hw: int = 129, out_ch: int = 1) -> Architecture:
    """Multiscale stack: three conv stages; emits 9x9 from 129x129 input.

    At 65x65 input the final pooling stage is dropped so the output stays
    on the 9x9 coarse grid.
    """
    head = (
        _conv(3, 1, 1, 1, 8), _SOFTPLUS, _bn(8),
        _pool(4, 4),
        _conv(3, 1, 1, 8, 16), _SOFTPLUS, _bn(16),
        _pool(2, 2),
        _conv(3, 1, 1, 16, 32), _SOFTPLUS, _bn(32),
    )
    tail = (
        _deconv(3, 1, 1, 32, 16), _SOFTPLUS, _bn(16),
        _deconv(4, 1, 1, 16, 8), _SOFTPLUS, _bn(8),
        _deconv(3, 1, 1, 8, out_ch),
    )
    if input_hw >= 128:
        layers = head + (_pool(2, 2),) + tail
    else:
        layers = head + tail
    return Architecture(name="mpanis", input_hw=input_hw, layers=layers)


def init_xavier(arch: Architecture, rng: np.random.Generator) -> dict:
    """Xavier-uniform conv/deconv weights, zero biases, unit batch-norm scale."""
    params: dict[str, np.ndarray] = {}
    for i, spec in enumerate(arch.layers):
        name = arch.layer_name(i)
        if spec.kind in ("conv", "deconv"):
            fan_in = spec.in_ch * spec.kernel**2
            fan_out = spec.out_ch * spec.kernel**2
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            shape = arch.param_layout()[f"{name}/weight"]
            params[f"{name}/weight"] = rng.uniform(-bound, bound, size=shape)
            params[f"{name}/bias"] = np.zeros(spec.out_ch)
        elif spec.kind == "batchnorm":
            params[f"{name}/scale"] = np.ones(spec.channels)
            params[f"{name}/shift"] = np.zeros(spec.channels)
    return params


def init_bn_state(arch: Architecture) -> dict:
    state = {}
    for i, spec in enumerate(arch.layers):
        if spec.kind == "batchnorm":
            state[arch.layer_name(i)] = {
                "mean": np.zeros(spec.channels),
                "var": np.ones(spec.channels),
            }
    return state


@dataclass
class Tape:
    """Forward activations for one backward pass; consumed exactly once."""

    arch: Architecture
    entries: list = field(default_factory=list)
    output_cache: object = None
    consumed: bool = False


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_forward(x, wt, b, s, p):
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (wt.shape[2], wt.shape[3]), axis=(1, 2))[:, ::s, ::s]
    out = np.einsum("ihwab,oiab->ohw", win, wt, optimize=True) + b[:, None, None]
    return out, (x.shape, win)


def _conv_backward(dout, wt, s, p, cache):
    x_shape, win = cache
    dw = np.einsum("ihwab,ohw->oiab", win, dout, optimize=True)
    db = dout.sum(axis=(1, 2))
    c, h, w = x_shape
    k = wt.shape[2]
    hp, wp = h + 2 * p, w + 2 * p
    dxp = np.zeros((c, hp, wp))
    ho, wo = dout.shape[1], dout.shape[2]
    for a in range(k):
        for bb in range(k):
            contrib = np.einsum("oi,ohw->ihw", wt[:, :, a, bb], dout, optimize=True)
            dxp[:, a:a + s * ho:s, bb:bb + s * wo:s] += contrib
    dx = dxp[:, p:p + h, p:p + w] if p else dxp
    return dx, dw, db


def _deconv_forward(x, wt, b, s, p):
    cin, cout, k, _ = wt.shape
    c, h, w = x.shape
    hf, wf = (h - 1) * s + k, (w - 1) * s + k
    full = np.zeros((cout, hf, wf))
    tmp = np.einsum("chw,coab->oabhw", x, wt, optimize=True)
    for a in range(k):
        for bb in range(k):
            full[:, a:a + s * h:s, bb:bb + s * w:s] += tmp[:, a, bb]
    ho, wo = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
    out = full[:, p:p + ho, p:p + wo] + b[:, None, None]
    return out, (x, (hf, wf))


def _deconv_backward(dout, wt, s, p, cache):
    x, (hf, wf) = cache
    cin, cout, k, _ = wt.shape
    c, h, w = x.shape
    dfull = np.zeros((cout, hf, wf))
    dfull[:, p:p + dout.shape[1], p:p + dout.shape[2]] = dout
    dx = np.zeros_like(x)
    dw = np.zeros_like(wt)
    for a in range(k):
        for bb in range(k):
            dslice = dfull[:, a:a + s * h:s, bb:bb + s * w:s]
            dx += np.einsum("co,ohw->chw", wt[:, :, a, bb], dslice, optimize=True)
            dw[:, :, a, bb] = np.einsum("chw,ohw->co", x, dslice, optimize=True)
    db = dout.sum(axis=(1, 2))
    return dx, dw, db


def _pool_forward(x, k, s):
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    return win.mean(axis=(3, 4)), x.shape


def _pool_backward(dout, k, s, x_shape):
    dx = np.zeros(x_shape)
    ho, wo = dout.shape[1], dout.shape[2]
    share = dout / (k * k)
    for a in range(k):
        for bb in range(k):
            dx[:, a:a + s * ho:s, bb:bb + s * wo:s] += share
    return dx


def forward(arch: Architecture, params: dict, x2d: np.ndarray,
            bn_state: dict | None = None, *, train: bool = True,
            update_running: bool = True):
    """Run the stack on one image; returns (output (C,H,W), Tape)."""
    x = np.asarray(x2d, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] != arch.input_hw or x.shape[2] != arch.input_hw:
        raise ArchitectureError(
            f"input is {x.shape[1]}x{x.shape[2]}, architecture expects "
            f"{arch.input_hw}x{arch.input_hw}")
    tape = Tape(arch=arch)
    for i, spec in enumerate(arch.layers):
        name = arch.layer_name(i)
        if spec.kind == "conv":
            x, cache = _conv_forward(x, params[f"{name}/weight"], params[f"{name}/bias"],
                                     spec.stride, spec.padding)
            tape.entries.append(cache)
        elif spec.kind == "deconv":
            x, cache = _deconv_forward(x, params[f"{name}/weight"], params[f"{name}/bias"],
                                       spec.stride, spec.padding)
            tape.entries.append(cache)
        elif spec.kind == "avgpool":
            x, cache = _pool_forward(x, spec.kernel, spec.stride)
            tape.entries.append(cache)
        elif spec.kind == "softplus":
            tape.entries.append(x)
            x = _softplus(x)
        elif spec.kind == "batchnorm":
            gamma = params[f"{name}/scale"]
            beta = params[f"{name}/shift"]
            if train:
                mu = x.mean(axis=(1, 2))
                var = x.var(axis=(1, 2))
                if update_running and bn_state is not None:
                    st = bn_state[name]
                    st["mean"] = (1 - _BN_MOMENTUM) * st["mean"] + _BN_MOMENTUM * mu
                    st["var"] = (1 - _BN_MOMENTUM) * st["var"] + _BN_MOMENTUM * var
            else:
                if bn_state is None:
                    raise ArchitectureError(f"{name}: eval mode needs running statistics")
                mu, var = bn_state[name]["mean"], bn_state[name]["var"]
            inv = 1.0 / np.sqrt(var + _BN_EPS)
            xhat = (x - mu[:, None, None]) * inv[:, None, None]
            tape.entries.append((xhat, inv, gamma, train))
            x = gamma[:, None, None] * xhat + beta[:, None, None]
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite activation after layer {i} ({spec.kind})")
    if arch.positive_output:
        tape.output_cache = x
        x = _softplus(x) + arch.output_floor
    return x, tape


def backward(arch: Architecture, tape: Tape, d_out: np.ndarray,
             params: dict) -> dict:
    """Parameter gradients for one recorded forward pass (input gets none)."""
    if tape.consumed:
        raise ArchitectureError("tape already consumed by a previous backward pass")
    tape.consumed = True
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dx = np.asarray(d_out, dtype=np.float64)
    if dx.ndim == 2:
        dx = dx[None]
    if arch.positive_output:
        dx = dx * _sigmoid(tape.output_cache)
    for i in range(len(arch.layers) - 1, -1, -1):
        spec = arch.layers[i]
        name = arch.layer_name(i)
        cache = tape.entries[i]
        if spec.kind == "conv":
            dx, dw, db = _conv_backward(dx, params[f"{name}/weight"],
                                        spec.stride, spec.padding, cache)
            grads[f"{name}/weight"] += dw
            grads[f"{name}/bias"] += db
        elif spec.kind == "deconv":
            dx, dw, db = _deconv_backward(dx, params[f"{name}/weight"],
                                          spec.stride, spec.padding, cache)
            grads[f"{name}/weight"] += dw
            grads[f"{name}/bias"] += db
        elif spec.kind == "avgpool":
            dx = _pool_backward(dx, spec.kernel, spec.stride, cache)
        elif spec.kind == "softplus":
            dx = dx * _sigmoid(cache)
        elif spec.kind == "batchnorm":
            xhat, inv, gamma, was_train = cache
            grads[f"{name}/shift"] += dx.sum(axis=(1, 2))
            grads[f"{name}/scale"] += (dx * xhat).sum(axis=(1, 2))
            dxh = dx * gamma[:, None, None]
            if was_train:
                mean_dxh = dxh.mean(axis=(1, 2))[:, None, None]
                mean_dxh_xh = (dxh * xhat).mean(axis=(1, 2))[:, None, None]
                dx = inv[:, None, None] * (dxh - mean_dxh - xhat * mean_dxh_xh)
            else:
                dx = dxh * inv[:, None, None]
    return grads
