"""Finite-difference gradient suite over every layer and a tiny end-to-end U-Net.

Each check contracts the layer output with a fixed random tensor to get a
scalar, then compares backward() against central differences for every
differentiable argument.  Inputs are drawn away from kinks: max-pool inputs
have well separated values, and ReLU-bearing checks avoid near-zero
pre-activations by construction of the seed.

Layers that are linear in each argument separately (all convolutions, the
affine transform, pooling, upsampling) are probed with a wider step: central
differences are exact for them and the wider step keeps rounding noise far
below the tolerance.  Conv biases that feed a batch norm are not probed in
the U-Net check: their exact gradient is zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .layers import (affine_level, batchnorm, conv3d, conv_full, conv_separable,
                     convlstm_cell, maxpool3d, upsample3d)
from .models import ModelSpec, build_unet

LAYER_TOL = 1e-6
UNET_TOL = 1e-5


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        return (f"{self.name:<16} max_rel_error={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} {'PASS' if self.ok else 'FAIL'}")


LINEAR_EPS = 1e-3


def _check_args(fn: Callable, args: list, rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Max relative error over every argument of ``fn(*args)``."""
    probe = rng.standard_normal(np.shape(fn(*[Tensor(a) for a in args]).data))

    worst = 0.0
    for i in range(len(args)):
        def f(t, i=i):
            full = [Tensor(a) for a in args]
            full[i] = t
            return ad.sum(fn(*full) * probe)
        worst = max(worst, grad_check(f, args[i], eps))
    return worst


def _separated(rng: np.random.Generator, shape, gap: float = 1e-2) -> np.ndarray:
    """Random permutation of evenly spaced values (no near-ties for max-pooling)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - 0.5 * gap * n).reshape(shape)


def layer_checks(seed: int = 0) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    g = rng.standard_normal
    out = []

    x = g((2, 2, 3, 4, 4))
    out.append(GradResult("conv3d", _check_args(
        lambda x, w, b: conv3d(x, w, b), [x, g((3, 2, 3, 3, 3)), g(3)], rng, LINEAR_EPS), LAYER_TOL))
    out.append(GradResult("conv_full", _check_args(
        lambda x, w, b: conv_full(x, w, b), [x, g((3, 3, 2, 3, 3, 3)), g((3, 3))], rng, LINEAR_EPS), LAYER_TOL))
    out.append(GradResult("affine_level", _check_args(
        lambda x, s, t: affine_level(x, s, t), [x, g((2, 3)), g((2, 3))], rng, LINEAR_EPS), LAYER_TOL))
    out.append(GradResult("conv_separable", _check_args(
        lambda x, h, v, b: conv_separable(x, h, v, b), [x, g((3, 2, 3, 3)), g((3, 3, 3)), g(3)], rng, LINEAR_EPS),
        LAYER_TOL))
    out.append(GradResult("maxpool3d", _check_args(
        lambda x: maxpool3d(x, (1, 2, 2)), [_separated(rng, (2, 2, 3, 4, 4))], rng, LINEAR_EPS), LAYER_TOL))
    out.append(GradResult("upsample3d", _check_args(
        lambda x: upsample3d(x, (1, 2, 2)), [g((2, 2, 2, 2, 3))], rng, LINEAR_EPS), LAYER_TOL))
    out.append(GradResult("batchnorm", _check_args(
        lambda x, ga, be: batchnorm(x, ga, be, mode="train", groups=2),
        [g((4, 3, 2, 3, 3)) * 2 + 1, g(3), g(3)], rng), LAYER_TOL))
    # A single-level cell keeps the weight count (and so the chance of a
    # near-zero gradient component drowning in rounding noise) small.
    ch = 2
    out.append(GradResult("convlstm_cell", _check_args(
        lambda x, h, c, wx, wh, b: ad.concat(list(convlstm_cell(x, h, c, {"wx": wx, "wh": wh, "b": b})),
                                             axis=1),
        [g((1, 2, 1, 3, 3)), g((1, ch, 1, 3, 3)), g((1, ch, 1, 3, 3)),
         g((4 * ch, 2, 1, 3, 3)) * 0.3, g((4 * ch, ch, 1, 3, 3)) * 0.3, g(4 * ch)], rng), LAYER_TOL))
    return out


def unet_check(seed: int = 0) -> GradResult:
    """Input and first/last-layer parameter gradients of a tiny U-Net in train mode."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(in_channels=2, base_channels=2, depth=1, n_levels=2, n_lat=4, n_lon=4, seed=seed)
    model = build_unet(spec)
    tensors = model.params.tensors
    x = rng.standard_normal((2, 2, 2, 4, 4))
    probe = rng.standard_normal((2, 1, 2, 4, 4))

    def loss_wrt(name):
        def f(t):
            saved = tensors[name] if name else None
            if name:
                tensors[name] = t
            try:
                return ad.sum(model.forward(x if name else t, mode="train", norm_groups=1) * probe)
            finally:
                if name:
                    tensors[name] = saved
        return f

    worst = grad_check(loss_wrt(None), x)
    for name in ("enc0.conv1.weight", "mid.norm2.gamma", "dec0.norm2.beta", "head.weight"):
        worst = max(worst, grad_check(loss_wrt(name), tensors[name].data))
    return GradResult("unet", worst, UNET_TOL)


def gradient_suite(seed: int = 0) -> list[GradResult]:
    return layer_checks(seed) + [unet_check(seed)]


