"""Grid geometry, ensemble statistics, standardization and channel packing.

Channel packing order is member-major: for each member, for each time, for each
parameter one channel; extra channels are appended last.  Channel ``k`` of a
pack built from ``members``, ``times``, ``params`` therefore maps to::

    m = k // (len(times) * len(params))
    t = (k // len(params)) % len(times)
    c = k % len(params)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_PARAMS = ("u", "v", "z", "t", "r", "cc")
DEFAULT_LEVELS = (200.0, 300.0, 500.0, 700.0, 850.0, 925.0, 1000.0)
STD_FLOOR = 1e-6


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    n_params: int = 6
    n_levels: int = 7
    n_lat: int = 20
    n_lon: int = 32
    level_values: tuple = DEFAULT_LEVELS
    param_names: tuple = DEFAULT_PARAMS
    forecast_times: tuple = (0, 3, 6)

    def __post_init__(self):
        object.__setattr__(self, "level_values", tuple(float(v) for v in self.level_values))
        object.__setattr__(self, "param_names", tuple(str(p) for p in self.param_names))
        object.__setattr__(self, "forecast_times", tuple(int(t) for t in self.forecast_times))
        if min(self.n_params, self.n_levels, self.n_lat, self.n_lon) < 1:
            raise GridError("grid counts must be >= 1")
        if len(self.level_values) != self.n_levels:
            raise GridError(f"{len(self.level_values)} level values for {self.n_levels} levels")
        if len(self.param_names) != self.n_params:
            raise GridError(f"{len(self.param_names)} parameter names for {self.n_params} params")
        ts = self.forecast_times
        if not ts or ts[0] != 0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise GridError(f"forecast_times must start at 0 and increase strictly: {ts}")

    @classmethod
    def make(cls, n_params=6, n_levels=7, n_lat=20, n_lon=32, forecast_times=(0, 3, 6),
             param_names=None, level_values=None) -> "GridSpec":
        """Build a spec filling names/levels with defaults (or placeholders) of the right length."""
        if param_names is None:
            param_names = (DEFAULT_PARAMS if n_params == len(DEFAULT_PARAMS)
                           else tuple(f"p{i}" for i in range(n_params)))
        if level_values is None:
            level_values = (DEFAULT_LEVELS if n_levels == len(DEFAULT_LEVELS)
                            else tuple(float(i) for i in range(n_levels)))
        return cls(n_params, n_levels, n_lat, n_lon, tuple(level_values),
                   tuple(param_names), tuple(forecast_times))

    @property
    def field_shape(self) -> tuple[int, int, int, int]:
        return (self.n_params, self.n_levels, self.n_lat, self.n_lon)

    @property
    def n_times(self) -> int:
        return len(self.forecast_times)

    def param_index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise GridError(f"unknown parameter {name!r}; have {self.param_names}") from None


@dataclass
class Field:
    """One trajectory at one time: data [n_params][n_levels][n_lat][n_lon]."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.spec.field_shape:
            raise GridError(f"field data shape {self.data.shape} != {self.spec.field_shape}")
        if not np.all(np.isfinite(self.data)):
            raise GridError("field contains non-finite values")


@dataclass
class EnsembleSample:
    """All members at all forecast times for one initial condition.

    ``data`` is [member][time][param][level][lat][lon].
    """

    spec: GridSpec
    data: np.ndarray
    control_index: int | None = 0
    sample_id: str = ""
    epoch_tag: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 6 or self.data.shape[1:] != (self.spec.n_times,) + self.spec.field_shape:
            raise GridError(f"sample data shape {self.data.shape} does not match grid "
                            f"{(self.spec.n_times,) + self.spec.field_shape}")
        if self.control_index is not None and not 0 <= self.control_index < self.n_members:
            raise GridError(f"control_index {self.control_index} out of range")

    @property
    def n_members(self) -> int:
        return self.data.shape[0]

    def field(self, member: int, time_index: int) -> Field:
        return Field(self.spec, self.data[member, time_index])

    @property
    def members(self) -> list[list[Field]]:
        return [[self.field(m, t) for t in range(self.spec.n_times)] for m in range(self.n_members)]

    def spread(self, time_index: int, members: Sequence[int] | None = None) -> np.ndarray:
        """Sample spread [param][level][lat][lon] over ``members`` (default all)."""
        idx = list(range(self.n_members)) if members is None else list(members)
        if len(idx) < 2:
            raise GridError(f"spread needs >= 2 members, got {len(idx)}")
        return member_std(self.data[idx, time_index])


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    std_floor: float = STD_FLOOR

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), self.std_floor)
        if self.mean.shape != self.std.shape or self.mean.ndim != 2:
            raise GridError(f"norm stats shapes {self.mean.shape} / {self.std.shape}")
        if self.std_floor <= 0:
            raise GridError("std_floor must be positive")


def _stack(members: Sequence[Field]) -> tuple[GridSpec, np.ndarray]:
    if len(members) == 0:
        raise GridError("empty member list")
    spec = members[0].spec
    for f in members[1:]:
        if f.spec != spec:
            raise GridError("members do not share one GridSpec")
    return spec, np.stack([f.data for f in members])


def member_std(arr: np.ndarray) -> np.ndarray:
    """Sample std (divisor M - 1) along axis 0.

    Values are shifted by the first member before the two-pass computation;
    this is exact for identical members (spread exactly 0) and reduces
    cancellation when the spread is tiny relative to the values.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[0] < 2:
        raise GridError(f"spread needs >= 2 members, got {arr.shape[0]}")
    d = arr - arr[0]
    return d.std(axis=0, ddof=1)


def ensemble_mean(members: Sequence[Field]) -> Field:
    spec, arr = _stack(members)
    return Field(spec, arr.mean(axis=0))


def ensemble_spread(members: Sequence[Field]) -> Field:
    """Pointwise sample standard deviation (divisor M - 1)."""
    if len(members) < 2:
        raise GridError(f"spread needs >= 2 members, got {len(members)}")
    spec, arr = _stack(members)
    return Field(spec, member_std(arr))


def compute_norm_stats(fields: Iterable[Field | np.ndarray], std_floor: float = STD_FLOOR) -> NormStats:
    """Population mean/std per (param, level), pooled over fields and lat/lon.

    Accepts Fields or raw [C][P][H][W] arrays; partial moments are merged with
    Chan's update so the stream is consumed in one pass.
    """
    count = 0
    mean = m2 = None
    for f in fields:
        arr = f.data if isinstance(f, Field) else np.asarray(f, dtype=np.float64)
        if arr.ndim != 4:
            raise GridError(f"expected [param][level][lat][lon], got shape {arr.shape}")
        n = arr.shape[2] * arr.shape[3]
        fm = arr.mean(axis=(2, 3))
        fm2 = ((arr - fm[:, :, None, None]) ** 2).sum(axis=(2, 3))
        if mean is None:
            count, mean, m2 = n, fm, fm2
            continue
        if fm.shape != mean.shape:
            raise GridError("fields with differing shapes in norm-stats stream")
        total = count + n
        delta = fm - mean
        mean = mean + delta * (n / total)
        m2 = m2 + fm2 + delta ** 2 * (count * n / total)
        count = total
    if mean is None:
        raise GridError("cannot compute norm stats of an empty stream")
    return NormStats(mean, np.sqrt(m2 / count), std_floor)


def _check_stats(arr: np.ndarray, s: NormStats) -> None:
    if arr.ndim != 4 or arr.shape[:2] != s.mean.shape:
        raise GridError(f"data shape {arr.shape} inconsistent with norm stats {s.mean.shape}")


def standardize_array(arr: np.ndarray, s: NormStats) -> np.ndarray:
    _check_stats(arr, s)
    return (arr - s.mean[:, :, None, None]) / s.std[:, :, None, None]


def destandardize_array(arr: np.ndarray, s: NormStats) -> np.ndarray:
    _check_stats(arr, s)
    return arr * s.std[:, :, None, None] + s.mean[:, :, None, None]


def standardize(f: Field, s: NormStats) -> Field:
    return Field(f.spec, standardize_array(f.data, s))


def destandardize(f: Field, s: NormStats) -> Field:
    return Field(f.spec, destandardize_array(f.data, s))


def _check_indices(name: str, idx: Sequence[int], bound: int) -> list[int]:
    idx = [int(i) for i in idx]
    for i in idx:
        if not 0 <= i < bound:
            raise GridError(f"{name} index {i} out of range [0, {bound})")
    return idx


def channel_pack(sample: EnsembleSample, member_subset: Sequence[int], time_subset: Sequence[int],
                 param_subset: Sequence[int], extra_channels: Sequence[np.ndarray] | None = None,
                 levels: Sequence[int] | None = None) -> np.ndarray:
    """Stack selected member/time/param slices into [C][P][H][W].

    ``levels`` optionally restricts the level axis (used by the per-level
    temporal models); extra channels must already have that level extent.
    """
    spec = sample.spec
    ms = _check_indices("member", member_subset, sample.n_members)
    ts = _check_indices("time", time_subset, spec.n_times)
    cs = _check_indices("param", param_subset, spec.n_params)
    ls = (list(range(spec.n_levels)) if levels is None
          else _check_indices("level", levels, spec.n_levels))
    block = sample.data[np.ix_(ms, ts, cs)]                # [m][t][c][P][H][W]
    block = block[:, :, :, ls]
    packed = block.reshape((-1,) + block.shape[3:])
    extras = list(extra_channels or [])
    if extras:
        want = (len(ls), spec.n_lat, spec.n_lon)
        for e in extras:
            if np.shape(e) != want:
                raise GridError(f"extra channel shape {np.shape(e)} != {want}")
        packed = np.concatenate([packed, np.stack(extras)], axis=0)
    return np.ascontiguousarray(packed, dtype=np.float64)


def pack_index(k: int, n_members: int, n_times: int, n_params: int) -> tuple[str, tuple]:
    """Source of channel ``k`` under the member-major ordering."""
    per_member = n_times * n_params
    if k < n_members * per_member:
        return "field", (k // per_member, (k // n_params) % n_times, k % n_params)
    return "extra", (k - n_members * per_member,)
