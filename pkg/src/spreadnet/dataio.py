"""On-disk formats: ESG ensemble files, split manifests, norm stats, heatmaps.

ESG layout (all little-endian)::

    0   4   magic  b"ESG1"
    4   4   u32 version = 1
    8  24   u32 counts M, T, C, P, H, W
    32  8   reserved, zero
    40  ..  float32 payload [member][time][param][level][lat][lon]

A UTF-8 sidecar ``<path>.meta`` holds ``key=value`` lines with the grid
labels and sample metadata.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .grids import EnsembleSample, GridSpec, NormStats

MAGIC = b"ESG1"
VERSION = 1
HEADER = struct.Struct("<4sI6I8s")
HEADER_SIZE = HEADER.size  # 40
PRNG_NAME = "numpy.PCG64.permutation"


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------ raw ESG

def write_esg_array(path, data: np.ndarray, meta: Mapping[str, str]) -> None:
    """Write a 6-axis array plus sidecar metadata."""
    data = np.asarray(data)
    if data.ndim != 6 or min(data.shape) < 1:
        raise FormatError(f"ESG payload must be 6-D with counts >= 1, got {data.shape}")
    path = Path(path)
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, *data.shape, b"\0" * 8))
        fh.write(payload.tobytes())
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def read_esg_array(path) -> tuple[np.ndarray, dict[str, str]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an ESG file")
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated file")
    magic, version, *counts, _reserved = HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if min(counts) < 1:
        raise FormatError(f"{path}: corrupt data (zero count in header)")
    expected = HEADER_SIZE + 4 * int(np.prod(counts))
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated file")
    if len(raw) > expected:
        raise FormatError(f"{path}: corrupt data ({len(raw) - expected} trailing bytes)")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(counts)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: corrupt data (non-finite value)")
    mp = meta_path(path)
    meta = read_meta(mp) if mp.exists() else {}
    return data.astype(np.float64), meta


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed meta line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def _join(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


# ------------------------------------------------------------- samples

def write_esg(sample: EnsembleSample, path) -> None:
    spec = sample.spec
    meta = {
        "param_names": _join(spec.param_names),
        "level_values": _join(spec.level_values),
        "forecast_times": _join(spec.forecast_times),
        "sample_id": sample.sample_id,
        "epoch_tag": str(sample.epoch_tag),
        "control_index": "none" if sample.control_index is None else str(sample.control_index),
    }
    write_esg_array(path, sample.data, meta)


def read_esg(path) -> EnsembleSample:
    data, meta = read_esg_array(path)
    m, t, c, p, h, w = data.shape
    try:
        spec = GridSpec(
            n_params=c, n_levels=p, n_lat=h, n_lon=w,
            param_names=tuple(meta["param_names"].split(",")) if "param_names" in meta else
            tuple(f"p{i}" for i in range(c)),
            level_values=tuple(float(v) for v in meta["level_values"].split(","))
            if "level_values" in meta else tuple(float(i) for i in range(p)),
            forecast_times=tuple(int(v) for v in meta["forecast_times"].split(","))
            if "forecast_times" in meta else tuple(range(t)),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: inconsistent metadata ({exc})") from None
    ctrl = meta.get("control_index", "none")
    return EnsembleSample(
        spec=spec, data=data,
        control_index=None if ctrl == "none" else int(ctrl),
        sample_id=meta.get("sample_id", Path(path).stem),
        epoch_tag=int(meta.get("epoch_tag", "0")),
    )


# ------------------------------------------------------------- manifests

@dataclass
class SplitManifest:
    seed: int
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def all_ids(self) -> list:
        return self.train_ids + self.val_ids + self.test_ids


def split_dataset(ids: Sequence[str], seed: int, train_frac: float = 0.8,
                  test_epoch_tags=(), epoch_tags: Mapping[str, int] | Sequence[int] | None = None
                  ) -> SplitManifest:
    """Hold out ids whose epoch tag is in ``test_epoch_tags``; shuffle and split the rest.

    The first ``floor(train_frac * n)`` shuffled ids go to training, the
    remainder to validation.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("split_dataset: no ids")
    if len(set(ids)) != len(ids):
        raise ValueError("split_dataset: duplicate ids")
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"split_dataset: train_frac {train_frac} outside (0, 1)")
    if epoch_tags is None:
        tags = {i: 0 for i in ids}
    elif isinstance(epoch_tags, Mapping):
        tags = dict(epoch_tags)
    else:
        tags = dict(zip(ids, epoch_tags))
    held = set(test_epoch_tags)
    test = [i for i in ids if tags.get(i) in held]
    rest = [i for i in ids if tags.get(i) not in held]
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(rest))
    shuffled = [rest[k] for k in order]
    n_train = int(np.floor(train_frac * len(rest)))
    if n_train == 0:
        raise ValueError("split_dataset: empty training set")
    return SplitManifest(seed, shuffled[:n_train], shuffled[n_train:], test)


def write_manifest(m: SplitManifest, path) -> None:
    lines = [f"seed={m.seed}", f"prng={PRNG_NAME}"]
    for name, ids in (("train", m.train_ids), ("val", m.val_ids), ("test", m.test_ids)):
        lines.append(f"[{name}]")
        lines.extend(str(i) for i in ids)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> SplitManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("seed="):
        raise FormatError(f"{path}: manifest must start with seed=<n>")
    m = SplitManifest(int(lines[0][5:]))
    section = None
    for line in lines[1:]:
        line = line.strip()
        if not line or line.startswith("prng="):
            continue
        if line in ("[train]", "[val]", "[test]"):
            section = {"[train]": m.train_ids, "[val]": m.val_ids, "[test]": m.test_ids}[line]
        elif section is None:
            raise FormatError(f"{path}: id {line!r} outside a section")
        else:
            section.append(line)
    return m


# ------------------------------------------------------------- norm stats

def write_norm_stats(stats: Mapping[str, NormStats], path) -> None:
    """Named NormStats (e.g. ``inputs`` and ``spread``) as JSON; floats round-trip exactly."""
    blob = {name: {"mean": s.mean.tolist(), "std": s.std.tolist(), "std_floor": s.std_floor}
            for name, s in stats.items()}
    Path(path).write_text(json.dumps(blob, indent=1), encoding="utf-8")


def read_norm_stats(path) -> dict[str, NormStats]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"stats file not found: {path}")
    blob = json.loads(path.read_text(encoding="utf-8"))
    return {name: NormStats(np.array(v["mean"]), np.array(v["std"]), v["std_floor"])
            for name, v in blob.items()}


# ------------------------------------------------------------- heatmaps

LOG_FLOOR = 1e-8


def write_heatmap(diff: np.ndarray, path) -> tuple[Path, Path]:
    """Write log10 squared differences as ``<stem>.csv`` and an ASCII ``<stem>.pgm``."""
    diff = np.asarray(diff, dtype=np.float64)
    if diff.ndim != 2:
        raise ValueError(f"heatmap needs a 2-D array, got shape {diff.shape}")
    if np.any(diff < 0) or not np.all(np.isfinite(diff)):
        raise ValueError("heatmap values must be finite and non-negative")
    stem = Path(path)
    if stem.suffix in (".csv", ".pgm"):
        stem = stem.with_suffix("")
    csv_path, pgm_path = stem.with_name(stem.name + ".csv"), stem.with_name(stem.name + ".pgm")
    logs = np.log10(np.maximum(diff, LOG_FLOOR))
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in logs:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
    lo, hi = np.log10(LOG_FLOOR), float(logs.max())
    if hi > lo:
        grey = np.rint((logs - lo) / (hi - lo) * 255).astype(int)
    else:
        grey = np.zeros(logs.shape, dtype=int)
    h, w = logs.shape
    with open(pgm_path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in grey:
            fh.write(" ".join(str(v) for v in row) + "\n")
    return csv_path, pgm_path


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
