"""Synthetic chaotic ensembles on the same tensor geometry as the real data.

Every (parameter, level) channel is a Lorenz-96 ring of length n_lat * n_lon,
reshaped row-major onto the lat/lon grid.  Levels of one parameter are weakly
coupled so that vertical structure carries information.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import SplitManifest, split_dataset, write_esg, write_manifest
from .grids import EnsembleSample, GridSpec

log = logging.getLogger(__name__)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    spec: GridSpec = field(default_factory=GridSpec)
    forcing: float = 8.0
    dt: float = 0.01
    steps_per_time_unit: int = 10
    ic_perturbation_sigma: float = 1e-4
    n_members: int = 10
    perturbed_control: bool = False
    seed: int = 0
    spinup_steps: int = 500
    level_coupling: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise SynthError(f"dt must be positive, got {self.dt}")
        if not np.isfinite(self.forcing):
            raise SynthError("forcing must be finite")
        if self.n_members < 2:
            raise SynthError(f"n_members must be >= 2, got {self.n_members}")
        if self.ic_perturbation_sigma < 0:
            raise SynthError("ic_perturbation_sigma must be >= 0")
        if self.steps_per_time_unit < 1 or self.spinup_steps < 0:
            raise SynthError("step counts must be non-negative (steps_per_time_unit >= 1)")
        if self.spec.n_lat * self.spec.n_lon < 4:
            raise SynthError("ring length n_lat * n_lon must be >= 4")


def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz96_tendency(x: np.ndarray, forcing: float, coupling: float = 0.0) -> np.ndarray:
    """dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F on the last axis (cyclic).

    With ``coupling`` != 0 the second-to-last axis is a level axis and level l
    gains ``coupling * (x^{l-1}_i - x^{l+1}_i)`` where those neighbours exist.
    """
    xp = np.concatenate([x[..., -2:], x, x[..., :1]], axis=-1)
    d = (xp[..., 3:] - xp[..., :-3]) * xp[..., 1:-2] - x + forcing
    if coupling:
        d[..., 1:, :] += coupling * x[..., :-1, :]
        d[..., :-1, :] -= coupling * x[..., 1:, :]
    return d


def lorenz96_step(state: np.ndarray, forcing: float = 8.0, dt: float = 0.01,
                  coupling: float = 0.0) -> np.ndarray:
    """One RK4 step of (optionally level-coupled) Lorenz-96."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] < 4:
        raise SynthError(f"Lorenz-96 ring needs N >= 4, got {state.shape[-1]}")
    if not np.all(np.isfinite(state)):
        raise SynthError("non-finite Lorenz-96 state")
    return rk4_step(lambda x: lorenz96_tendency(x, forcing, coupling), state, dt)


def _rng(cfg: GenConfig, sample_seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, sample_seed])))


def spun_up_base(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Base state [param][level][ring] after spin-up from a random start."""
    spec = cfg.spec
    x = cfg.forcing + rng.standard_normal((spec.n_params, spec.n_levels, spec.n_lat * spec.n_lon))
    for _ in range(cfg.spinup_steps):
        x = lorenz96_step(x, cfg.forcing, cfg.dt, cfg.level_coupling)
    return x


def draw_perturbations(cfg: GenConfig, rng: np.random.Generator, base_shape) -> np.ndarray:
    pert = cfg.ic_perturbation_sigma * rng.standard_normal((cfg.n_members,) + tuple(base_shape))
    if not cfg.perturbed_control:
        pert[0] = 0.0
    return pert


def integrate_members(cfg: GenConfig, base: np.ndarray, perturbations: np.ndarray) -> np.ndarray:
    """Run base + perturbation per member; returns [member][time][param][level][lat][lon]."""
    spec = cfg.spec
    x = base[None] + perturbations
    out = np.empty((x.shape[0], spec.n_times) + spec.field_shape)
    step = 0
    for ti, t in enumerate(spec.forecast_times):
        target = t * cfg.steps_per_time_unit
        while step < target:
            x = lorenz96_step(x, cfg.forcing, cfg.dt, cfg.level_coupling)
            step += 1
        out[:, ti] = x.reshape((x.shape[0],) + spec.field_shape)
    return out


def generate_ensemble(cfg: GenConfig, sample_seed: int, epoch_tag: int = 0,
                      sample_id: str | None = None) -> EnsembleSample:
    """One ensemble sample, a pure function of (cfg.seed, sample_seed)."""
    rng = _rng(cfg, sample_seed)
    base = spun_up_base(cfg, rng)
    pert = draw_perturbations(cfg, rng, base.shape)
    data = integrate_members(cfg, base, pert)
    return EnsembleSample(
        spec=cfg.spec, data=data,
        control_index=None if cfg.perturbed_control else 0,
        sample_id=sample_id if sample_id is not None else f"s{sample_seed:05d}",
        epoch_tag=epoch_tag,
    )


def generate_dataset(cfg: GenConfig, n_samples: int, out_dir, n_epochs: int = 10,
                     test_epoch_tags=(8, 9), split_seed: int | None = None,
                     train_frac: float = 0.8) -> tuple[list[Path], SplitManifest]:
    """Write ``n_samples`` ESG files plus ``manifest.txt`` into ``out_dir``.

    Sample i gets epoch tag ``i * n_epochs // n_samples`` so tags group samples
    chronologically; samples in ``test_epoch_tags`` form the test split.
    """
    if n_samples < 1:
        raise SynthError(f"n_samples must be >= 1, got {n_samples}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, ids, tags = [], [], []
    for i in range(n_samples):
        tag = i * n_epochs // n_samples
        sample = generate_ensemble(cfg, i, epoch_tag=tag)
        path = out / f"{sample.sample_id}.esg"
        write_esg(sample, path)
        paths.append(path)
        ids.append(sample.sample_id)
        tags.append(tag)
        log.debug("wrote %s (epoch %d)", path, tag)
    manifest = split_dataset(ids, cfg.seed if split_seed is None else split_seed,
                             train_frac=train_frac, test_epoch_tags=test_epoch_tags,
                             epoch_tags=tags)
    write_manifest(manifest, out / "manifest.txt")
    return paths, manifest


def with_grid(cfg: GenConfig, **grid) -> GenConfig:
    """Copy of ``cfg`` with a new grid built by :meth:`GridSpec.make`."""
    return replace(cfg, spec=GridSpec.make(**grid))
