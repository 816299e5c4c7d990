"""Glue between on-disk datasets and the training/evaluation functions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path

from .dataio import SplitManifest, read_manifest, read_norm_stats, write_norm_stats
from .grids import GridSpec
from .training import (DatasetStats, SampleFeatures, SampleStore, TrainConfig, TrainResult,
                       TrainingError, build_arrays, extract_features, model_spec_for,
                       stats_from_store, train)

log = logging.getLogger(__name__)


@dataclass
class SplitData:
    grid: GridSpec
    stats: DatasetStats
    train: list
    val: list
    test: list


def compute_stats(data_dir, manifest) -> DatasetStats:
    """Normalization statistics over the training split only."""
    if not isinstance(manifest, SplitManifest):
        manifest = read_manifest(manifest)
    if not manifest.train_ids:
        raise TrainingError("empty training split")
    return stats_from_store(SampleStore(data_dir), manifest.train_ids)


def save_stats(stats: DatasetStats, path) -> None:
    write_norm_stats(stats.as_dict(), path)


def load_stats(path) -> DatasetStats:
    return DatasetStats.from_dict(read_norm_stats(path))


def load_features(store: SampleStore, ids, cfg: TrainConfig) -> list[SampleFeatures]:
    return [extract_features(s, cfg) for s in store.iter(ids)]


def load_split(data_dir, manifest, cfg: TrainConfig, stats: DatasetStats | None = None) -> SplitData:
    """Features for every split (one sample in memory at a time) plus stats."""
    if not isinstance(manifest, SplitManifest):
        manifest = read_manifest(manifest)
    store = SampleStore(data_dir)
    if not manifest.train_ids:
        raise TrainingError("empty training split")
    grid = store.load(manifest.train_ids[0]).spec
    if stats is None:
        stats = compute_stats(data_dir, manifest)
    parts = [load_features(store, ids, cfg)
             for ids in (manifest.train_ids, manifest.val_ids, manifest.test_ids)]
    log.info("loaded %d/%d/%d samples", *(len(p) for p in parts))
    return SplitData(grid, stats, *parts)


def fit_model(data: SplitData, cfg: TrainConfig, conv_variant: str = "standard",
              temporal_mode: str = "none", base_channels: int = 8, depth: int = 2,
              seed: int | None = None) -> TrainResult:
    """Build, train and return the best-validation model for one configuration."""
    spec = model_spec_for(data.grid, cfg, conv_variant, temporal_mode, base_channels, depth,
                          cfg.seed if seed is None else seed)
    x, y = build_arrays(data.train, data.stats, spec, cfg, data.grid)
    xv = yv = None
    if data.val:
        xv, yv = build_arrays(data.val, data.stats, spec, cfg, data.grid)
    return train(spec, x, y, cfg, xv, yv)


# ----------------------------------------------------- config persistence

def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={','.join(str(t) for t in v) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


def parse_train_value(name: str, raw: str):
    """Convert a key=value string to the type of the TrainConfig field ``name``."""
    default = getattr(TrainConfig(), name)
    if isinstance(default, tuple):
        return tuple(int(t) for t in raw.split(",") if t.strip())
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes")
    return type(default)(raw)


def config_from_text(text: str) -> TrainConfig:
    kw = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        if key not in TrainConfig.field_names():
            raise TrainingError(f"unknown training key {key!r}")
        kw[key] = parse_train_value(key, raw)
    return TrainConfig(**kw)


def read_train_config(path) -> TrainConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))
