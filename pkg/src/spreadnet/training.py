"""Losses, Adam, data-parallel training and evaluation against the full-ensemble spread."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dataio import read_esg, read_esg_array, write_esg_array, write_heatmap
from .grids import (EnsembleSample, GridSpec, NormStats, compute_norm_stats, member_std,
                    standardize_array)
from .models import (ModelSpec, UNet, build_unet, fit_linear_baseline,
                     predict_linear_baseline)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ metrics

def mse_loss(pred, target) -> Tensor:
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise TrainingError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return ad.mean(d * d)


def rmse_metric(pred, target) -> float:
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise TrainingError(f"rmse_metric: shape mismatch {pred.shape} vs {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


# -------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, t: int, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """In-place Adam update with bias correction; ``t`` is the 1-based step index."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise TrainingError(f"adam_step: parameter/gradient keys differ: {missing[:5]}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p = params[name]
        arr = p.data if isinstance(p, Tensor) else p
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return params, state


# ------------------------------------------------------------------ tasks

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 1000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_workers: int = 1
    seed: int = 0
    checkpoint_every: int = 50
    m_trajectories: int = 1
    norm_group_size: int = 2
    target_param: str = "t"
    target_time: int = -1
    input_times: tuple = ()
    heatmap_level: int = -1
    heatmap_samples: int = 2
    stop_loss: float = 0.0      # stop once the training minibatch MSE drops below this (0: never)

    def __post_init__(self):
        object.__setattr__(self, "input_times", tuple(int(t) for t in self.input_times))
        if self.steps < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise TrainingError("steps, batch_size must be >= 1 and learning_rate > 0")
        if self.n_workers < 1 or self.batch_size % self.n_workers:
            raise TrainingError(f"batch_size {self.batch_size} not divisible by n_workers {self.n_workers}")
        if (self.batch_size // self.n_workers) % self.norm_group_size:
            raise TrainingError(f"worker shard {self.batch_size // self.n_workers} not divisible by "
                                f"norm_group_size {self.norm_group_size}")
        if self.m_trajectories < 1 or self.checkpoint_every < 1:
            raise TrainingError("m_trajectories and checkpoint_every must be >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class SampleFeatures:
    """The slices of one ensemble sample that training and evaluation use (raw units)."""

    sample_id: str
    inputs: np.ndarray      # [m][n_input_times][C][P][H][W]
    ip: np.ndarray          # [C][P][H][W] unperturbed (or first) member at t0
    spreads: np.ndarray     # [T][P][H][W] full-ensemble spread of the target parameter
    ladder: np.ndarray      # [M-1][P][H][W] spread of members {0..m-1}, m = 1..M-1, at target time


def _time_index(spec: GridSpec, t: int) -> int:
    n = spec.n_times
    if not -n <= t < n:
        raise TrainingError(f"time index {t} out of range for {n} forecast times")
    return t % n


def extract_features(sample: EnsembleSample, cfg: TrainConfig) -> SampleFeatures:
    spec = sample.spec
    ti = _time_index(spec, cfg.target_time)
    times = [_time_index(spec, t) for t in (cfg.input_times or (ti,))]
    c = spec.param_index(cfg.target_param)
    m = cfg.m_trajectories
    if m > sample.n_members:
        raise TrainingError(f"m_trajectories {m} exceeds {sample.n_members} members")
    order = list(range(sample.n_members))
    if sample.control_index is not None:
        order.remove(sample.control_index)
        order.insert(0, sample.control_index)
    members = sample.data[order]
    spreads = member_std(sample.data[:, :, c])
    target = sample.data[:, ti, c]
    ladder = np.empty((sample.n_members - 1,) + target.shape[1:])
    ladder[0] = 0.0
    for k in range(2, sample.n_members):
        ladder[k - 1] = member_std(target[:k])
    return SampleFeatures(sample.sample_id, members[:m][:, times].copy(), members[0, 0].copy(),
                          spreads, ladder)


@dataclass
class DatasetStats:
    fields: NormStats           # raw parameter fields
    spreads: list               # NormStats per forecast time, spread fields of all params

    def as_dict(self) -> dict[str, NormStats]:
        d = {"fields": self.fields}
        d.update({f"spread_t{i}": s for i, s in enumerate(self.spreads)})
        return d

    @classmethod
    def from_dict(cls, d: dict[str, NormStats]) -> "DatasetStats":
        n = len([k for k in d if k.startswith("spread_t")])
        return cls(d["fields"], [d[f"spread_t{i}"] for i in range(n)])


def dataset_stats(samples: Iterable[EnsembleSample]) -> DatasetStats:
    """Field stats over every member/time and spread stats per time, in one pass."""
    samples = list(samples)
    if not samples:
        raise TrainingError("no samples for statistics")
    fstats = compute_norm_stats(f for s in samples for f in s.data.reshape((-1,) + s.spec.field_shape))
    n_times = samples[0].spec.n_times
    sstats = [compute_norm_stats(member_std(s.data[:, t]) for s in samples)
              for t in range(n_times)]
    return DatasetStats(fstats, sstats)


class SampleStore:
    """Reads ESG samples from a directory by id."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        if not self.data_dir.is_dir():
            raise FileNotFoundError(f"data directory not found: {self.data_dir}")

    def path(self, sample_id: str) -> Path:
        return self.data_dir / f"{sample_id}.esg"

    def load(self, sample_id: str) -> EnsembleSample:
        return read_esg(self.path(sample_id))

    def iter(self, ids: Sequence[str]):
        for i in ids:
            yield self.load(i)


def stats_from_store(store: SampleStore, ids: Sequence[str]) -> DatasetStats:
    """Streaming version of :func:`dataset_stats` (one sample in memory at a time)."""
    if not ids:
        raise TrainingError("no training ids for statistics")
    fstats = compute_norm_stats(f for s in store.iter(ids)
                                for f in s.data.reshape((-1,) + s.spec.field_shape))
    n_times = store.load(ids[0]).spec.n_times
    sstats = [compute_norm_stats(member_std(s.data[:, t]) for s in store.iter(ids))
              for t in range(n_times)]
    return DatasetStats(fstats, sstats)


# -------------------------------------------------------------- model inputs

def model_spec_for(grid: GridSpec, cfg: TrainConfig, conv_variant: str = "standard",
                   temporal_mode: str = "none", base_channels: int = 32, depth: int = 2,
                   seed: int = 0) -> ModelSpec:
    if temporal_mode == "none":
        n_times = len(cfg.input_times) or 1
        cin = cfg.m_trajectories * n_times * grid.n_params
    else:
        cin = 2 + (grid.n_params if temporal_mode == "spread_channels_plus_ip" else 0)
    return ModelSpec(in_channels=cin, out_channels=1, base_channels=base_channels, depth=depth,
                     conv_variant=conv_variant, temporal_mode=temporal_mode, seed=seed,
                     n_levels=grid.n_levels, n_lat=grid.n_lat, n_lon=grid.n_lon)


def _spread_row(stats: DatasetStats, t: int, c: int) -> NormStats:
    s = stats.spreads[t]
    return NormStats(s.mean[c:c + 1], s.std[c:c + 1], s.std_floor)


def build_arrays(feats: Sequence[SampleFeatures], stats: DatasetStats, spec: ModelSpec,
                 cfg: TrainConfig, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Standardized model inputs and targets.

    Raw mode: X [n][m*Ti*C][P][H][W], Y [n][1][P][H][W] (member-major packing).
    Temporal modes: one example per (sample, level): X [n*P][2(+C)][1][H][W],
    Y [n*P][1][1][H][W]; channels are spread(t0), spread(t3) then the IP fields.
    """
    ti = _time_index(grid, cfg.target_time)
    c = grid.param_index(cfg.target_param)
    ystat = _spread_row(stats, ti, c)
    ys = np.stack([standardize_array(f.spreads[ti][None], ystat) for f in feats])
    if spec.temporal_mode == "none":
        xs = []
        for f in feats:
            std = np.stack([standardize_array(fld, stats.fields)
                            for fld in f.inputs.reshape((-1,) + grid.field_shape)])
            xs.append(std.reshape((-1,) + grid.field_shape[1:]))
        return np.stack(xs), ys
    t_in = [0, max(ti - 1, 0)]
    xs = []
    for f in feats:
        chans = [standardize_array(f.spreads[t][None], _spread_row(stats, t, c))[0] for t in t_in]
        block = np.stack(chans)                                    # [2][P][H][W]
        if spec.temporal_mode == "spread_channels_plus_ip":
            block = np.concatenate([block, standardize_array(f.ip, stats.fields)])
        xs.append(block)
    x = np.stack(xs)                                               # [n][Cin][P][H][W]
    n, cin, p, h, w = x.shape
    x = x.transpose(0, 2, 1, 3, 4).reshape(n * p, cin, 1, h, w)
    y = ys.transpose(0, 2, 1, 3, 4).reshape(n * p, 1, 1, h, w)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def predict(model: UNet, x: np.ndarray, batch: int = 8) -> np.ndarray:
    """Eval-mode predictions for a stacked input array."""
    out = [model.forward(x[i:i + batch], mode="eval").data for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.empty((0,))


def unpack_levels(y: np.ndarray, spec: ModelSpec, n_samples: int) -> np.ndarray:
    """Temporal-mode per-level outputs back to [n][1][P][H][W]."""
    if spec.temporal_mode == "none":
        return y
    p = spec.n_levels
    return y.reshape(n_samples, p, 1, spec.n_lat, spec.n_lon).transpose(0, 2, 1, 3, 4)


# ------------------------------------------------------------------ training

def data_parallel_gradients(model: UNet, x: np.ndarray, y: np.ndarray, n_workers: int,
                            norm_group_size: int, update_running: bool = False
                            ) -> tuple[dict[str, np.ndarray], float]:
    """Average of per-shard gradients of the shard MSE, reduced in worker order.

    Every worker differentiates against the same parameter snapshot.  Batch
    norm statistics come from fixed-size groups inside each shard, so the
    result does not depend on ``n_workers``.  Only worker 0 may update the
    running statistics.
    """
    n = len(x)
    if n % n_workers or (n // n_workers) % norm_group_size:
        raise TrainingError(f"batch {n} cannot be sharded over {n_workers} workers "
                            f"in groups of {norm_group_size}")
    params = model.params.tensors
    shard = n // n_workers
    total = None
    losses = []
    for w in range(n_workers):
        sl = slice(w * shard, (w + 1) * shard)
        with Tape() as tape:
            pred = model.forward(x[sl], mode="train", update_running=update_running and w == 0,
                                 norm_groups=shard // norm_group_size)
            loss = mse_loss(pred, y[sl])
        g = ad.backward(tape, loss, wrt=params.values())
        losses.append(loss.item())
        if total is None:
            total = {k: g[t].copy() for k, t in params.items()}
        else:
            for k, t in params.items():
                total[k] += g[t]
    for k in total:
        total[k] /= n_workers
    return total, float(np.mean(losses))


@dataclass
class TrainResult:
    model: UNet
    curve: list                 # (step, train_mse, val_rmse or nan)
    best_step: int
    best_val: float

    def write_curve(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,train_mse,val_rmse\n")
            for step, tr, va in self.curve:
                fh.write(f"{step},{tr!r},{'' if np.isnan(va) else repr(va)}\n")


def train(spec: ModelSpec, x_train: np.ndarray, y_train: np.ndarray, cfg: TrainConfig,
          x_val: np.ndarray | None = None, y_val: np.ndarray | None = None,
          model: UNet | None = None) -> TrainResult:
    """Fixed-budget Adam training; keeps the parameters with the best validation RMSE."""
    if len(x_train) == 0:
        raise TrainingError("empty training split")
    model = model or build_unet(spec)
    params = model.params.tensors
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    state = AdamState()
    order, pos = rng.permutation(len(x_train)), 0
    curve = []
    best = (float("inf"), 0, None)
    for step in range(1, cfg.steps + 1):
        if len(x_train) >= cfg.batch_size:
            if pos + cfg.batch_size > len(order):
                order, pos = rng.permutation(len(x_train)), 0
            idx = np.sort(order[pos:pos + cfg.batch_size])
            pos += cfg.batch_size
        else:
            idx = np.sort(rng.choice(len(x_train), cfg.batch_size, replace=True))
        grads, loss = data_parallel_gradients(model, x_train[idx], y_train[idx], cfg.n_workers,
                                              cfg.norm_group_size, update_running=True)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"diverged at step {step}")
        adam_step(params, grads, state, step, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        val = float("nan")
        stop = loss < cfg.stop_loss
        if step % cfg.checkpoint_every == 0 or step == cfg.steps or stop:
            if x_val is not None and len(x_val):
                val = rmse_metric(predict(model, x_val, cfg.batch_size), y_val)
            else:
                val = loss ** 0.5
            if val < best[0]:
                best = (val, step, model.params.copy())
            log.info("step %d train_mse %.5f val_rmse %.5f", step, loss, val)
        curve.append((step, loss, val))
        if stop:
            log.info("train_mse %.3g below stop_loss %.3g; stopping at step %d", loss, cfg.stop_loss, step)
            break
    if best[2] is not None:
        model = UNet(spec, best[2])
    return TrainResult(model, curve, best[1], best[0])


# ------------------------------------------------------------- checkpoints

def save_checkpoint(model: UNet, path) -> None:
    """Parameters flattened into one ESG payload (float32) with a name->shape sidecar."""
    arrays = model.params.arrays()
    flat = np.concatenate([a.reshape(-1) for a in arrays.values()])
    meta = {"kind": "checkpoint"}
    for k, v in model.spec.to_dict().items():
        meta[f"spec.{k}"] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    for name, a in arrays.items():
        meta[f"param.{name}"] = "x".join(str(n) for n in a.shape) or "scalar"
    write_esg_array(path, flat.reshape(1, 1, 1, 1, 1, -1), meta)


def load_checkpoint(path) -> UNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data, meta = read_esg_array(path)
    if meta.get("kind") != "checkpoint":
        raise TrainingError(f"{path}: not a model checkpoint")
    kw = {}
    for f in fields(ModelSpec):
        raw = meta[f"spec.{f.name}"]
        if f.name == "kernel":
            kw[f.name] = tuple(int(k) for k in raw.split(","))
        elif f.name in ("conv_variant", "temporal_mode"):
            kw[f.name] = raw
        else:
            kw[f.name] = int(raw)
    model = build_unet(ModelSpec(**kw))
    flat = data.reshape(-1)
    arrays, pos = {}, 0
    for key, shape_s in meta.items():
        if not key.startswith("param."):
            continue
        shape = () if shape_s == "scalar" else tuple(int(n) for n in shape_s.split("x"))
        size = int(np.prod(shape))
        arrays[key[6:]] = flat[pos:pos + size].reshape(shape)
        pos += size
    if pos != flat.size:
        raise TrainingError(f"{path}: checkpoint payload size mismatch")
    model.params.load_arrays(arrays)
    return model


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    model_rmse: dict = field(default_factory=dict)     # configuration name -> RMSE
    member_rmse: dict = field(default_factory=dict)    # m -> RMSE of the m-member spread
    linear_rmse: float = float("nan")
    heatmaps: list = field(default_factory=list)
    n_test: int = 0

    def rows(self) -> list[tuple[str, float]]:
        rows = [(f"model:{k}", v) for k, v in self.model_rmse.items()]
        rows.append(("linear_regression_t0", self.linear_rmse))
        rows += [(f"spread_{m}_members", v) for m, v in sorted(self.member_rmse.items())]
        return rows

    def to_table(self) -> str:
        lines = [f"{'estimator':<28} {'rmse':>12}", "-" * 41]
        lines += [f"{name:<28} {v:>12.6g}" for name, v in self.rows()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table, csv = out / "report.txt", out / "report.csv"
        table.write_text(self.to_table(), encoding="utf-8")
        with open(csv, "w", encoding="utf-8") as fh:
            fh.write("estimator,rmse\n")
            for name, v in self.rows():
                fh.write(f"{name},{v!r}\n")
        return table, csv


def member_spread_rmse(feats: Sequence[SampleFeatures], target_time: int) -> dict[int, float]:
    """RMSE of the m-member spread (members 0..m-1) against the full spread, per m."""
    truth = np.stack([f.spreads[target_time] for f in feats])
    est = np.stack([f.ladder for f in feats])          # [n][M-1][P][H][W]
    return {m: rmse_metric(est[:, m - 1], truth) for m in range(1, est.shape[1] + 1)}


def destandardized_predictions(model: UNet, feats: Sequence[SampleFeatures], stats: DatasetStats,
                               cfg: TrainConfig, grid: GridSpec) -> np.ndarray:
    """Model spread predictions in raw units, [n][P][H][W]."""
    x, _ = build_arrays(feats, stats, model.spec, cfg, grid)
    y = unpack_levels(predict(model, x, cfg.batch_size), model.spec, len(feats))
    ti = _time_index(grid, cfg.target_time)
    c = grid.param_index(cfg.target_param)
    s = stats.spreads[ti]
    return y[:, 0] * s.std[c][None, :, None, None] + s.mean[c][None, :, None, None]


def evaluate(models: dict, test: Sequence[SampleFeatures], train_feats: Sequence[SampleFeatures],
             stats: DatasetStats, cfg: TrainConfig, grid: GridSpec,
             heatmap_dir=None, predictors: dict | None = None) -> EvalReport:
    """RMSE of each model, the linear baseline and the m-member spreads vs the full spread.

    ``predictors`` maps extra configuration names to callables returning raw-unit
    predictions [n][P][H][W] for ``test`` (used to inject oracles).
    """
    if not test:
        raise TrainingError("empty test split")
    ti = _time_index(grid, cfg.target_time)
    truth = np.stack([f.spreads[ti] for f in test])
    report = EvalReport(n_test=len(test))
    preds = {}
    for name, model in models.items():
        preds[name] = destandardized_predictions(model, test, stats, cfg, grid)
    for name, fn in (predictors or {}).items():
        preds[name] = np.asarray(fn(test))
    for name, p in preds.items():
        report.model_rmse[name] = rmse_metric(p, truth)
    coef = fit_linear_baseline([(f.spreads[0], f.spreads[ti]) for f in train_feats])
    linear = np.stack([predict_linear_baseline(coef, f.spreads[0]) for f in test])
    report.linear_rmse = rmse_metric(linear, truth)
    report.member_rmse = member_spread_rmse(test, ti)
    if heatmap_dir is not None:
        out = Path(heatmap_dir)
        out.mkdir(parents=True, exist_ok=True)
        lev = cfg.heatmap_level % grid.n_levels if cfg.heatmap_level >= 0 else _default_level(grid)
        for k in range(min(cfg.heatmap_samples, len(test))):
            sid = test[k].sample_id
            for name, p in list(preds.items()) + [("linear", linear)]:
                diff = (p[k, lev] - truth[k, lev]) ** 2
                report.heatmaps += list(write_heatmap(diff, out / f"{sid}_{name}_L{lev}"))
    return report


def _default_level(grid: GridSpec) -> int:
    """Index of the 850 hPa level when present, else the middle level."""
    if 850.0 in grid.level_values:
        return grid.level_values.index(850.0)
    return grid.n_levels // 2
