"""Differentiable layers: the four convolution variants and U-Net building blocks.

Every layer takes either an unbatched [C][P][H][W] tensor or a batched
[N][C][P][H][W] tensor and returns the same rank.  Convolutions are
same-padded, stride 1, cross-correlation (no kernel flip).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

VARIANTS = ("standard", "full", "affine", "separable")


class LayerError(ValueError):
    pass


def _batched(name: str, x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 4:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim == 5:
        return x, False
    raise LayerError(f"{name}: expected [C][P][H][W] or [N][C][P][H][W], got {x.shape}")


def _restore(y: Tensor, squeezed: bool) -> Tensor:
    return ad.reshape(y, y.shape[1:]) if squeezed else y


def _channel_bias(y: Tensor, bias) -> Tensor:
    bias = as_tensor(bias)
    if bias.shape != (y.shape[1],):
        raise LayerError(f"bias shape {bias.shape} != ({y.shape[1]},)")
    return y + ad.reshape(bias, (bias.shape[0], 1, 1, 1))


# --------------------------------------------------------------- convolutions

def conv3d(x, weight, bias=None) -> Tensor:
    """weight [C_out][C_in][k_d][k_h][k_w], bias [C_out]."""
    xb, squeezed = _batched("conv3d", x)
    weight = as_tensor(weight)
    if weight.ndim != 5 or weight.shape[1] != xb.shape[1]:
        raise LayerError(f"conv3d: weight {weight.shape} does not match input {as_tensor(x).shape}")
    y = ad.correlate3d(xb, weight)
    if bias is not None:
        y = _channel_bias(y, bias)
    return _restore(y, squeezed)


def conv_full(x, weight, bias=None) -> Tensor:
    """Depth-unshared convolution: weight [P][C_out][C_in][k...], bias [P][C_out]."""
    xb, squeezed = _batched("conv_full", x)
    weight = as_tensor(weight)
    if weight.ndim != 6 or weight.shape[0] != xb.shape[2] or weight.shape[2] != xb.shape[1]:
        raise LayerError(f"conv_full: weight {weight.shape} does not match input {as_tensor(x).shape}")
    y = ad.correlate3d_unshared(xb, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0], weight.shape[1]):
            raise LayerError(f"conv_full: bias {bias.shape} != {(weight.shape[0], weight.shape[1])}")
        y = y + ad.reshape(ad.transpose(bias, (1, 0)), (bias.shape[1], bias.shape[0], 1, 1))
    return _restore(y, squeezed)


def affine_level(x, scale, shift) -> Tensor:
    """y[c][p] = scale[c][p] * x[c][p] + shift[c][p]."""
    xb, squeezed = _batched("affine_level", x)
    scale, shift = as_tensor(scale), as_tensor(shift)
    want = xb.shape[1:3]
    if scale.shape != want or shift.shape != want:
        raise LayerError(f"affine_level: scale {scale.shape} / shift {shift.shape}, expected {want}")
    shp = want + (1, 1)
    return _restore(ad.scale_shift(xb, ad.reshape(scale, shp), ad.reshape(shift, shp)), squeezed)


def conv_separable(x, horiz_weights, vert_weights, bias=None) -> Tensor:
    """Per-level 2-D conv [C_out][C_in][k_h][k_w] then level-axis conv [C_out][C_out][k_d]."""
    xb, squeezed = _batched("conv_separable", x)
    hw, vw = as_tensor(horiz_weights), as_tensor(vert_weights)
    if hw.ndim != 4 or hw.shape[1] != xb.shape[1]:
        raise LayerError(f"conv_separable: horizontal weights {hw.shape} vs input {as_tensor(x).shape}")
    if vw.ndim != 3 or vw.shape[0] != hw.shape[0] or vw.shape[1] != hw.shape[0]:
        raise LayerError(f"conv_separable: vertical weights {vw.shape} vs {hw.shape[0]} channels")
    mid = ad.correlate3d(xb, ad.reshape(hw, (hw.shape[0], hw.shape[1], 1) + hw.shape[2:]))
    y = ad.correlate3d(mid, ad.reshape(vw, vw.shape + (1, 1)))
    if bias is not None:
        y = _channel_bias(y, bias)
    return _restore(y, squeezed)


# ------------------------------------------------------------ resampling

def maxpool3d(x, window=(1, 2, 2)) -> Tensor:
    xb, squeezed = _batched("maxpool3d", x)
    try:
        return _restore(ad.max_window(xb, tuple(window)), squeezed)
    except ad.AutodiffError as exc:
        raise LayerError(f"maxpool3d: {exc}") from None


def upsample3d(x, factor=(1, 2, 2)) -> Tensor:
    """Nearest-neighbour replication along (P, H, W)."""
    xb, squeezed = _batched("upsample3d", x)
    fd, fh, fw = factor
    n, c, p, h, w = xb.shape
    expanded = ad.reshape(xb, (n, c, p, 1, h, 1, w, 1)) * np.ones((fd, 1, fh, 1, fw))
    return _restore(ad.reshape(expanded, (n, c, p * fd, h * fh, w * fw)), squeezed)


# ------------------------------------------------------------ normalization

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False

    @classmethod
    def zeros(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), False)


def batchnorm(x, gamma, beta, mode: str = "train", running: RunningStats | None = None,
              eps: float = 1e-5, momentum: float = 0.1, groups: int = 1) -> Tensor:
    """Per-channel batch normalization over (N, P, H, W).

    In train mode the batch is split into ``groups`` equal consecutive chunks
    that are normalized independently; ``running`` (if given) is updated in
    place from the averaged chunk statistics.
    """
    xb, squeezed = _batched("batchnorm", x)
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    n, c = xb.shape[:2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise LayerError(f"batchnorm: gamma {gamma.shape} / beta {beta.shape} for {c} channels")
    g4 = ad.reshape(gamma, (c, 1, 1, 1))
    b4 = ad.reshape(beta, (c, 1, 1, 1))
    if mode == "eval":
        if running is None or not running.initialized:
            raise LayerError("batchnorm: eval mode before running statistics were initialized")
        inv = 1.0 / np.sqrt(running.var + eps)
        xn = ad.scale_shift(xb, inv.reshape(c, 1, 1, 1), (-running.mean * inv).reshape(c, 1, 1, 1))
        return _restore(ad.scale_shift(xn, g4, b4), squeezed)
    if mode != "train":
        raise LayerError(f"batchnorm: unknown mode {mode!r}")
    if n < 1 or groups < 1 or n % groups:
        raise LayerError(f"batchnorm: batch of {n} cannot be split into {groups} groups")
    xg = ad.reshape(xb, (groups, n // groups) + xb.shape[1:])
    axes = (1, 3, 4, 5)
    mu = ad.mean(xg, axis=axes, keepdims=True)
    xc = xg - mu
    var = ad.mean(xc * xc, axis=axes, keepdims=True)
    xn = ad.reshape(xc * ad.power(var + eps, -0.5), xb.shape)
    if running is not None:
        count = xg.shape[1] * int(np.prod(xb.shape[2:]))
        bm = mu.data.reshape(groups, c).mean(axis=0)
        bv = var.data.reshape(groups, c).mean(axis=0) * (count / max(count - 1, 1))
        if running.initialized:
            running.mean = (1 - momentum) * running.mean + momentum * bm
            running.var = (1 - momentum) * running.var + momentum * bv
        else:
            running.mean, running.var, running.initialized = bm, bv, True
    return _restore(ad.scale_shift(xn, g4, b4), squeezed)


# ------------------------------------------------------------------ ConvLSTM

def convlstm_cell(x, h_prev, c_prev, params: dict) -> tuple[Tensor, Tensor]:
    """ConvLSTM step without peepholes.

    ``params``: ``wx`` [4C_h][C_in][k...], ``wh`` [4C_h][C_h][k...], ``b`` [4C_h];
    gate blocks are ordered input, forget, output, candidate.
    """
    h_prev, c_prev = as_tensor(h_prev), as_tensor(c_prev)
    ch = h_prev.shape[-4]
    if c_prev.shape != h_prev.shape or as_tensor(params["wx"]).shape[0] != 4 * ch:
        raise LayerError(f"convlstm_cell: h {h_prev.shape}, c {c_prev.shape}, "
                         f"wx {as_tensor(params['wx']).shape} inconsistent")
    z = conv3d(x, params["wx"], params["b"]) + conv3d(h_prev, params["wh"])
    axis = z.ndim - 4
    parts = []
    for k in range(4):
        index = (slice(None),) * axis + (slice(k * ch, (k + 1) * ch),)
        parts.append(z[index])
    i, f, o = ad.sigmoid(parts[0]), ad.sigmoid(parts[1]), ad.sigmoid(parts[2])
    g = ad.tanh(parts[3])
    c_t = f * c_prev + i * g
    h_t = o * ad.tanh(c_t)
    return h_t, c_t


# --------------------------------------------------------------- parameters

def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    variant: str = "standard"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise LayerError(f"unknown conv variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise LayerError(f"kernel extents must be odd, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise LayerError("channel counts must be >= 1")


def conv_param_count(spec: ConvSpec, n_levels: int) -> int:
    kd, kh, kw = spec.kernel
    ci, co = spec.in_channels, spec.out_channels
    standard = kd * kh * kw * ci * co + co
    if spec.variant == "standard":
        return standard
    if spec.variant == "full":
        return n_levels * standard
    if spec.variant == "affine":
        return standard + 2 * co * n_levels
    return kh * kw * ci * co + kd * co * co + co


def init_conv(spec: ConvSpec, n_levels: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    kd, kh, kw = spec.kernel
    ci, co = spec.in_channels, spec.out_channels
    fan_in = ci * kd * kh * kw
    if spec.variant == "full":
        return {"weight": he_uniform(rng, (n_levels, co, ci, kd, kh, kw), fan_in),
                "bias": np.zeros((n_levels, co))}
    if spec.variant == "separable":
        return {"horiz": he_uniform(rng, (co, ci, kh, kw), ci * kh * kw),
                "vert": he_uniform(rng, (co, co, kd), co * kd),
                "bias": np.zeros(co)}
    p = {"weight": he_uniform(rng, (co, ci, kd, kh, kw), fan_in), "bias": np.zeros(co)}
    if spec.variant == "affine":
        p["scale"] = np.ones((co, n_levels))
        p["shift"] = np.zeros((co, n_levels))
    return p


def apply_conv(spec: ConvSpec, params: dict, x) -> Tensor:
    if spec.variant == "full":
        return conv_full(x, params["weight"], params["bias"])
    if spec.variant == "separable":
        return conv_separable(x, params["horiz"], params["vert"], params["bias"])
    y = conv3d(x, params["weight"], params["bias"])
    if spec.variant == "affine":
        y = affine_level(y, params["scale"], params["shift"])
    return y
