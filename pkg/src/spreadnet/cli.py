"""Command-line driver: ``spreadnet <gen|stats|split|train|eval|baseline|gradcheck>``.

Every option can also be given in a ``--config`` file of ``key=value`` lines
(keys are the long option names, with ``-`` or ``_``); flags override file
values.  Exit codes: 0 success, 1 usage error (bad option, unknown config
key, missing input file), 2 runtime failure.  Error messages name the stage
that failed.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

log = logging.getLogger("spreadnet")


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except (UsageError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc


def _bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _ints(raw) -> tuple:
    if isinstance(raw, tuple):
        return raw
    return tuple(int(t) for t in str(raw).split(",") if t.strip())


def _strs(raw) -> tuple:
    if isinstance(raw, tuple):
        return raw
    return tuple(t.strip() for t in str(raw).split(",") if t.strip())


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable = str
    default: Any = None
    help: str = ""


SEED = Opt("seed", int, 0, "seed for every random choice of this command")
DATA = Opt("data", str, None, "dataset directory (ESG files)")
MANIFEST = Opt("manifest", str, None, "split manifest (default: <data>/manifest.txt)")
STATS = Opt("stats", str, None, "normalization stats JSON (default: <data>/stats.json)")
TARGET = [Opt("target-param", str, "t", "parameter whose spread is predicted"),
          Opt("target-time", int, -1, "forecast-time index of the target spread")]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen": ("generate a synthetic Lorenz-96 ensemble dataset", [
        Opt("out", str, None, "output directory"),
        Opt("samples", int, 10, "number of ensemble samples"),
        SEED,
        Opt("members", int, 10, "ensemble members per sample"),
        Opt("n-params", int, 6), Opt("n-levels", int, 7), Opt("n-lat", int, 20), Opt("n-lon", int, 32),
        Opt("forecast-times", _ints, (0, 3, 6), "comma-separated forecast times"),
        Opt("forcing", float, 8.0), Opt("dt", float, 0.01),
        Opt("steps-per-time-unit", int, 10), Opt("sigma", float, 1e-4, "initial perturbation std"),
        Opt("spinup-steps", int, 500), Opt("level-coupling", float, 0.1),
        Opt("perturbed-control", _bool, False, "perturb every member (no control)"),
        Opt("n-epochs", int, 10, "number of chronological epoch tags"),
        Opt("test-epochs", _ints, (8, 9), "epoch tags held out for testing"),
        Opt("train-frac", float, 0.8),
    ]),
    "stats": ("compute normalization stats over the training split", [
        DATA, MANIFEST, Opt("out", str, None, "output JSON (default: <data>/stats.json)"),
    ]),
    "split": ("write a train/val/test manifest for a dataset directory", [
        DATA, SEED, Opt("out", str, None, "manifest path (default: <data>/manifest.txt)"),
        Opt("train-frac", float, 0.8), Opt("test-epochs", _ints, (8, 9)),
    ]),
    "train": ("train a U-Net spread predictor", [
        DATA, MANIFEST, STATS, SEED, Opt("out", str, None, "run directory"),
        Opt("variant", str, "standard", "standard|full|affine|separable"),
        Opt("temporal-mode", str, "none", "none|spread_channels|spread_channels_plus_ip"),
        Opt("base-channels", int, 8), Opt("depth", int, 2),
        Opt("steps", int, 1000), Opt("batch-size", int, 8), Opt("learning-rate", float, 1e-3),
        Opt("n-workers", int, 1), Opt("norm-group-size", int, 2), Opt("checkpoint-every", int, 50),
        Opt("m-trajectories", int, 1), Opt("input-times", _ints, (), "input time indices (default: target)"),
        Opt("stop-loss", float, 0.0, "stop once the training MSE drops below this (0: run all steps)"),
        *TARGET,
    ]),
    "eval": ("evaluate checkpoints against the full-ensemble spread", [
        DATA, MANIFEST, STATS, SEED,
        Opt("checkpoints", _strs, (), "comma-separated [name=]path list of checkpoints"),
        Opt("out", str, None, "report directory"),
        Opt("heatmap-level", int, -1, "level index for heatmaps (default: 850 hPa)"),
        Opt("heatmap-samples", int, 2),
    ]),
    "baseline": ("fit and evaluate the linear and m-member spread baselines", [
        DATA, MANIFEST, STATS, SEED, Opt("out", str, None, "report directory"), *TARGET,
        Opt("heatmap-level", int, -1), Opt("heatmap-samples", int, 2),
    ]),
    "gradcheck": ("finite-difference gradient check of every layer", [SEED]),
}


def _key(name: str) -> str:
    return name.replace("-", "_")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spreadnet", description="Ensemble spread prediction pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, (help_text, opts) in COMMANDS.items():
        sp = sub.add_parser(cmd, help=help_text, description=help_text)
        sp.add_argument("--config", help="key=value file; flags override its values")
        for o in opts:
            extra = {}
            if o.type is _bool:
                extra = dict(nargs="?", const=True)
            dflt = "" if o.default is None else f" (default: {o.default})"
            sp.add_argument(f"--{o.name}", dest=_key(o.name), default=argparse.SUPPRESS,
                            type=o.type, help=o.help + dflt, **extra)
    return p


def read_config_file(path, opts: list[Opt]) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    valid = {_key(o.name): o for o in opts}
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _key(key)
        if key not in valid:
            raise UsageError(f"{path}:{n}: unknown key {key!r}; valid keys: {', '.join(sorted(valid))}")
        try:
            out[key] = valid[key].type(raw)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def resolve(cmd: str, ns: argparse.Namespace) -> dict:
    """Defaults, then config-file values, then flags."""
    opts = COMMANDS[cmd][1]
    conf = {_key(o.name): o.default for o in opts}
    if getattr(ns, "config", None):
        conf.update(read_config_file(ns.config, opts))
    for o in opts:
        if hasattr(ns, _key(o.name)):
            conf[_key(o.name)] = getattr(ns, _key(o.name))
    return conf


def _need(conf: dict, *keys):
    for k in keys:
        if conf.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _data_paths(conf: dict) -> tuple[Path, Path]:
    _need(conf, "data")
    data = _existing(conf["data"], "data directory")
    manifest = _existing(conf.get("manifest") or data / "manifest.txt", "manifest")
    return data, manifest


def _stats(conf: dict, data: Path, manifest) -> Any:
    from .pipeline import compute_stats, load_stats
    if conf.get("stats"):
        path = _existing(conf["stats"], "stats file")
    else:
        path = data / "stats.json"
    if path.exists():
        with stage("stats (reading)"):
            return load_stats(path)
    log.info("no stats file at %s; computing from the training split", path)
    with stage("stats (computing)"):
        return compute_stats(data, manifest)


# ----------------------------------------------------------------- commands

def cmd_gen(conf: dict) -> int:
    from .synth import GenConfig, generate_dataset
    _need(conf, "out")
    with stage("gen (config)"):
        from .grids import GridSpec
        grid = GridSpec.make(conf["n_params"], conf["n_levels"], conf["n_lat"], conf["n_lon"],
                             forecast_times=conf["forecast_times"])
        cfg = GenConfig(spec=grid, forcing=conf["forcing"], dt=conf["dt"],
                        steps_per_time_unit=conf["steps_per_time_unit"],
                        ic_perturbation_sigma=conf["sigma"], n_members=conf["members"],
                        perturbed_control=conf["perturbed_control"], seed=conf["seed"],
                        spinup_steps=conf["spinup_steps"], level_coupling=conf["level_coupling"])
    with stage("gen (generating)"):
        paths, man = generate_dataset(cfg, conf["samples"], conf["out"], n_epochs=conf["n_epochs"],
                                      test_epoch_tags=conf["test_epochs"], train_frac=conf["train_frac"])
    print(f"wrote {len(paths)} samples to {conf['out']} "
          f"(train {len(man.train_ids)}, val {len(man.val_ids)}, test {len(man.test_ids)})")
    return 0


def cmd_split(conf: dict) -> int:
    from .dataio import meta_path, read_meta, split_dataset, write_manifest
    _need(conf, "data")
    data = _existing(conf["data"], "data directory")
    with stage("split (scanning)"):
        files = sorted(data.glob("*.esg"))
        if not files:
            raise UsageError(f"no .esg files in {data}")
        ids = [f.stem for f in files]
        tags = [int(read_meta(meta_path(f)).get("epoch_tag", 0)) for f in files]
    with stage("split (partitioning)"):
        man = split_dataset(ids, conf["seed"], conf["train_frac"], conf["test_epochs"], tags)
        out = Path(conf.get("out") or data / "manifest.txt")
        write_manifest(man, out)
    print(f"wrote {out}: train {len(man.train_ids)}, val {len(man.val_ids)}, test {len(man.test_ids)}")
    return 0


def cmd_stats(conf: dict) -> int:
    from .dataio import read_manifest
    from .pipeline import compute_stats, save_stats
    data, manifest = _data_paths(conf)
    with stage("stats (computing)"):
        stats = compute_stats(data, read_manifest(manifest))
        out = Path(conf.get("out") or data / "stats.json")
        save_stats(stats, out)
    print(f"wrote {out}")
    return 0


def _train_config(conf: dict, **over):
    from .pipeline import parse_train_value
    from .training import TrainConfig
    kw = {k: conf[k] for k in TrainConfig.field_names() if k in conf}
    kw.update(over)
    kw = {k: parse_train_value(k, v) if isinstance(v, str) and k != "target_param" else v
          for k, v in kw.items()}
    return TrainConfig(**kw)


def _checked_config(conf: dict, **over):
    from .training import TrainingError
    try:
        return _train_config(conf, **over)
    except (ValueError, TrainingError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def cmd_train(conf: dict) -> int:
    from .dataio import read_manifest
    from .pipeline import config_to_text, fit_model, load_split
    from .training import save_checkpoint
    data, manifest = _data_paths(conf)
    _need(conf, "out")
    cfg = _checked_config(conf)
    stats = _stats(conf, data, manifest)
    with stage("train (loading data)"):
        split = load_split(data, read_manifest(manifest), cfg, stats)
    with stage("train (fitting)"):
        res = fit_model(split, cfg, conf["variant"], conf["temporal_mode"], conf["base_channels"],
                        conf["depth"], conf["seed"])
    with stage("train (writing outputs)"):
        out = Path(conf["out"])
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(res.model, out / "checkpoint.esg")
        res.write_curve(out / "curve.csv")
        (out / "train_config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    print(f"best val RMSE {res.best_val:.6g} at step {res.best_step}; checkpoint {out / 'checkpoint.esg'}")
    return 0


def _checkpoint_list(conf: dict) -> list[tuple[str, Path]]:
    out = []
    for item in conf["checkpoints"]:
        name, _, path = item.rpartition("=")
        p = _existing(path, "checkpoint")
        out.append((name or p.parent.name or p.stem, p))
    if not out:
        raise UsageError("--checkpoints is required")
    return out


def _report(conf: dict, models: list) -> int:
    from .dataio import read_manifest
    from .pipeline import load_features, read_train_config
    from .training import SampleStore, destandardized_predictions, evaluate, load_checkpoint
    data, manifest = _data_paths(conf)
    _need(conf, "out")
    stats = _stats(conf, data, manifest)
    with stage(f"{conf['_cmd']} (loading data)"):
        man = read_manifest(manifest)
        store = SampleStore(data)
        loaded = []
        for name, path in models:
            side = path.parent / "train_config.txt"
            mcfg = read_train_config(side) if side.exists() else _train_config(conf)
            loaded.append((name, load_checkpoint(path), mcfg))
        base = loaded[0][2] if loaded else _train_config(conf)
        cfg = _train_config(conf, target_param=base.target_param, target_time=base.target_time,
                            heatmap_level=conf["heatmap_level"], heatmap_samples=conf["heatmap_samples"]) \
            if loaded else _train_config(conf)
        grid = store.load(man.train_ids[0]).spec
        train_f = load_features(store, man.train_ids, cfg)
        test_f = load_features(store, man.test_ids, cfg)
        if not test_f:
            raise ValueError("empty test split")
    with stage(f"{conf['_cmd']} (evaluating)"):
        predictors = {}
        for name, model, mcfg in loaded:
            if (mcfg.target_param, mcfg.target_time) != (cfg.target_param, cfg.target_time):
                raise ValueError(f"checkpoint {name} predicts a different target")
            feats = test_f if mcfg == cfg else load_features(store, man.test_ids, mcfg)
            pred = destandardized_predictions(model, feats, stats, mcfg, grid)
            predictors[name] = lambda _f, p=pred: p
        out = Path(conf["out"])
        report = evaluate({}, test_f, train_f, stats, cfg, grid, out / "heatmaps", predictors)
        table, csv = report.write(out)
    print(report.to_table(), end="")
    print(f"wrote {table} and {csv}")
    return 0


def cmd_eval(conf: dict) -> int:
    return _report(conf, _checkpoint_list(conf))


def cmd_baseline(conf: dict) -> int:
    return _report(conf, [])


def cmd_gradcheck(conf: dict) -> int:
    from .checks import gradient_suite
    with stage("gradcheck"):
        results = gradient_suite(conf["seed"])
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 2


HANDLERS = {"gen": cmd_gen, "stats": cmd_stats, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "baseline": cmd_baseline, "gradcheck": cmd_gradcheck}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help()
            return 1
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        conf = resolve(ns.command, ns)
        conf["_cmd"] = ns.command
        np.seterr(all="ignore")
        return HANDLERS[ns.command](conf)
    except UsageError as exc:
        cmd = getattr(locals().get("ns"), "command", None) or "spreadnet"
        print(f"usage error [{cmd}]: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error [{exc}]", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - anything not tagged with a stage
        print(f"error [{getattr(locals().get('ns'), 'command', 'spreadnet')}]: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
