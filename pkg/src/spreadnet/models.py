"""3D U-Net assembly with a convolution-variant selector, plus the linear baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (VARIANTS, ConvSpec, RunningStats, apply_conv, batchnorm, conv3d,
                     conv_param_count, init_conv, maxpool3d, upsample3d)

TEMPORAL_MODES = ("none", "spread_channels", "spread_channels_plus_ip")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int
    out_channels: int = 1
    base_channels: int = 32
    depth: int = 2
    conv_variant: str = "standard"
    temporal_mode: str = "none"
    seed: int = 0
    n_levels: int = 7
    n_lat: int = 20
    n_lon: int = 32
    kernel: tuple = (3, 3, 3)

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.conv_variant not in VARIANTS:
            raise ModelError(f"unknown conv_variant {self.conv_variant!r}; choose from {VARIANTS}")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ModelError(f"unknown temporal_mode {self.temporal_mode!r}; choose from {TEMPORAL_MODES}")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ModelError("depth, base_channels and channel counts must be >= 1")
        f = 2 ** self.depth
        if self.n_lat % f or self.n_lon % f:
            raise ModelError(f"grid {self.n_lat}x{self.n_lon} not divisible by 2**depth = {f}")

    @property
    def model_levels(self) -> int:
        """Level extent seen by the network (temporal models work one level at a time)."""
        return 1 if self.temporal_mode != "none" else self.n_levels

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_plan(spec: ModelSpec) -> list[tuple[str, ConvSpec]]:
    """(name, ConvSpec) for every variant-selected conv, in forward order."""
    k, v, b = spec.kernel, spec.conv_variant, spec.base_channels
    plan = []
    cin = spec.in_channels
    for s in range(spec.depth):
        ch = b * 2 ** s
        plan += [(f"enc{s}.conv1", ConvSpec(cin, ch, k, v)), (f"enc{s}.conv2", ConvSpec(ch, ch, k, v))]
        cin = ch
    ch = b * 2 ** spec.depth
    plan += [("mid.conv1", ConvSpec(cin, ch, k, v)), ("mid.conv2", ConvSpec(ch, ch, k, v))]
    for s in reversed(range(spec.depth)):
        skip = b * 2 ** s
        plan += [(f"dec{s}.conv1", ConvSpec(ch + skip, skip, k, v)),
                 (f"dec{s}.conv2", ConvSpec(skip, skip, k, v))]
        ch = skip
    return plan


def expected_param_count(spec: ModelSpec) -> int:
    """Trainable parameter count implied by ``spec``."""
    total = 0
    for _, cs in _conv_plan(spec):
        total += conv_param_count(cs, spec.model_levels) + 2 * cs.out_channels  # + norm
    return total + spec.base_channels * spec.out_channels + spec.out_channels


@dataclass
class ModelParams:
    """Named trainable tensors plus batch-norm running statistics."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    running: dict[str, RunningStats] = field(default_factory=dict)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        """Everything needed to restore the model, including running stats."""
        out = {name: t.data for name, t in self.tensors.items()}
        for name, rs in self.running.items():
            out[f"{name}.running_mean"] = rs.mean
            out[f"{name}.running_var"] = rs.var
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()},
            {n: RunningStats(r.mean.copy(), r.var.copy(), r.initialized) for n, r in self.running.items()},
        )

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            if name not in arrays or np.shape(arrays[name]) != t.shape:
                raise ModelError(f"checkpoint lacks parameter {name} with shape {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)
        for name, rs in self.running.items():
            rs.mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            rs.var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)
            rs.initialized = True


class UNet:
    """3D U-Net; pooling and upsampling act on lat/lon only."""

    def __init__(self, spec: ModelSpec, params: ModelParams):
        self.spec = spec
        self.params = params
        self.plan = _conv_plan(spec)

    def _block(self, name: str, cs: ConvSpec, x, mode, update_running, groups):
        t = self.params.tensors
        conv_p = {k.split(".")[-1]: v for k, v in t.items() if k.startswith(name + ".")}
        y = apply_conv(cs, conv_p, x)
        norm = name.replace("conv", "norm")
        y = batchnorm(y, t[norm + ".gamma"], t[norm + ".beta"], mode=mode,
                      running=self.params.running[norm] if (update_running or mode == "eval") else None,
                      groups=groups)
        return ad.relu(y)

    def forward(self, x, mode: str = "eval", update_running: bool = False, norm_groups: int = 1) -> Tensor:
        """Predict standardized spread for x [C][P][H][W] or a batch [N][C][P][H][W]."""
        spec = self.spec
        x = ad.as_tensor(x)
        batched = x.ndim == 5
        c_axis = 1 if batched else 0
        if x.ndim not in (4, 5) or x.shape[c_axis] != spec.in_channels:
            raise ModelError(f"input channels: expected {spec.in_channels}, got "
                             f"{x.shape[c_axis] if x.ndim in (4, 5) else x.shape}")
        want = (spec.model_levels, spec.n_lat, spec.n_lon)
        if x.shape[-3:] != want:
            raise ModelError(f"input grid {x.shape[-3:]} != {want}")
        if not batched:
            x = ad.reshape(x, (1,) + x.shape)
        convs = dict(self.plan)
        run = lambda n, h: self._block(n, convs[n], h, mode, update_running, norm_groups)
        skips = []
        h = x
        for s in range(spec.depth):
            h = run(f"enc{s}.conv2", run(f"enc{s}.conv1", h))
            skips.append(h)
            h = maxpool3d(h, (1, 2, 2))
        h = run("mid.conv2", run("mid.conv1", h))
        for s in reversed(range(spec.depth)):
            h = ad.concat([upsample3d(h, (1, 2, 2)), skips[s]], axis=1)
            h = run(f"dec{s}.conv2", run(f"dec{s}.conv1", h))
        t = self.params.tensors
        y = conv3d(h, t["head.weight"], t["head.bias"])
        return y if batched else ad.reshape(y, y.shape[1:])

    __call__ = forward


def build_unet(spec: ModelSpec) -> UNet:
    """Deterministically initialized U-Net for ``spec``."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    params = ModelParams()
    for name, cs in _conv_plan(spec):
        for k, arr in init_conv(cs, spec.model_levels, rng).items():
            params.tensors[f"{name}.{k}"] = Tensor(arr, requires_grad=True, name=f"{name}.{k}")
        norm = name.replace("conv", "norm")
        co = cs.out_channels
        params.tensors[f"{norm}.gamma"] = Tensor(np.ones(co), requires_grad=True, name=f"{norm}.gamma")
        params.tensors[f"{norm}.beta"] = Tensor(np.zeros(co), requires_grad=True, name=f"{norm}.beta")
        params.running[norm] = RunningStats.zeros(co)
    b, co = spec.base_channels, spec.out_channels
    params.tensors["head.weight"] = Tensor(
        rng.uniform(-np.sqrt(6.0 / b), np.sqrt(6.0 / b), (co, b, 1, 1, 1)), requires_grad=True,
        name="head.weight")
    params.tensors["head.bias"] = Tensor(np.zeros(co), requires_grad=True, name="head.bias")
    if params.count() != expected_param_count(spec):
        raise ModelError(f"parameter count {params.count()} != expected {expected_param_count(spec)}")
    return UNet(spec, params)


def forward_model(model: UNet, x, mode: str = "eval") -> Tensor:
    return model.forward(x, mode=mode)


# ------------------------------------------------------------ linear baseline

def fit_linear_baseline(pairs) -> np.ndarray:
    """Per-level least squares ``target ~ a * spread_t0 + b``.

    ``pairs`` holds (spread_t0, target) arrays shaped [P][H][W].  Returns an
    array [P][2] of (a, b).  A level with a constant predictor falls back to
    a = 0, b = mean(target).
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ModelError(f"linear baseline needs >= 2 pairs, got {len(pairs)}")
    xs = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    ys = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    if xs.shape != ys.shape or xs.ndim != 4:
        raise ModelError(f"predictor {xs.shape} / target {ys.shape} mismatch")
    n_levels = xs.shape[1]
    coef = np.empty((n_levels, 2))
    for p in range(n_levels):
        x, y = xs[:, p].ravel(), ys[:, p].ravel()
        xm, ym = x.mean(), y.mean()
        sxx = np.dot(x - xm, x - xm)
        if sxx <= 1e-300 * max(1.0, xm * xm) * x.size:
            coef[p] = (0.0, ym)
            continue
        a = np.dot(x - xm, y - ym) / sxx
        coef[p] = (a, ym - a * xm)
    return coef


def predict_linear_baseline(coef: np.ndarray, spread_t0: np.ndarray) -> np.ndarray:
    spread_t0 = np.asarray(spread_t0, dtype=np.float64)
    if spread_t0.shape[-3] != coef.shape[0]:
        raise ModelError(f"{coef.shape[0]} fitted levels for input {spread_t0.shape}")
    return coef[:, 0, None, None] * spread_t0 + coef[:, 1, None, None]
