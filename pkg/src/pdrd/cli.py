"""Command-line entry point: ``pdrd {synth,train,detect,eval,diag,bench}``.

Every option may also come from a TOML file given with ``--config``; the
precedence is built-in defaults < ``--preset`` < config file < ``PDRD_SEED``
< explicit flags. ``PDRD_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

from . import __version__
from .detector import (
    LRX_PRESETS,
    PRESETS,
    PdrdConfig,
    grx_detect,
    load_map,
    lrx_detect,
    normalize_map,
    pdrd_detect,
    save_heatmap,
    save_map,
    score_field,
)
from .evaluation import latent_correlation, roc_curve, summary, write_roc_csv
from .hsi_io import (
    FORMATS,
    HsiCube,
    default_scene_spec,
    flatten,
    load_cube,
    load_mask,
    normalize_bands,
    save_cube,
    save_mask,
    synth_scene,
)
from .vae import latent_field, load_model, save_model, train

_MODEL_KEYS = {f.name: f.type for f in fields(PdrdConfig)}
_CASTS: Dict[str, Callable] = {
    "beta": float, "k": int, "epsilon": int, "gamma": float, "learning_rate": float,
    "batch_size": int, "epochs": int, "patience": int, "seed": int,
    "include_center": bool, "epsilon_convention": str, "normalize": bool,
}

SCENE_DEFAULTS = dict(height=64, width=64, bands=30, anomalies=10, anomaly_size=4, classes=2,
                      noise_std=0.02, background_std=0.02, scene_seed=7)


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _model_options(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("model")
    g.add_argument("--preset", choices=sorted(PRESETS), help="per-dataset parameter optima")
    g.add_argument("--beta", type=float, help="KL weight (>= 1)")
    g.add_argument("--k", type=int, help="latent dimensionality")
    g.add_argument("--epsilon", type=int, help="neighborhood size (see --epsilon-convention)")
    g.add_argument("--epsilon-convention", choices=["radius", "window-side"])
    g.add_argument("--gamma", type=float, help="weight of the std-deviation term (>= 0)")
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int, help="early-stop patience in epochs")
    g.add_argument("--seed", type=int, help="training seed")
    g.add_argument("--include-center", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None,
                   help="per-band min-max scaling before training")


def _scene_options(parser: argparse.ArgumentParser, seed_flag: str) -> None:
    g = parser.add_argument_group("scene")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--bands", type=int)
    g.add_argument("--anomalies", type=int, help="number of square anomaly blocks")
    g.add_argument("--anomaly-size", type=int, help="pixels per anomaly (a perfect square)")
    g.add_argument("--classes", type=int, help="background classes (vertical strips)")
    g.add_argument("--noise-std", type=float, help="noise std of anomaly pixels")
    g.add_argument("--background-std", type=float, help="per-band std of background pixels")
    g.add_argument(seed_flag, dest="scene_seed", type=int, help="scene seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdrd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pdrd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="TOML file with option values")
        p.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")
        return p

    p = add("synth", "write a synthetic scene and its anomaly mask")
    _scene_options(p, "--seed")
    p.add_argument("--out", type=Path, help="cube path (flat-binary unless --format)")
    p.add_argument("--mask", type=Path, help="ground-truth PGM path")
    p.add_argument("--format", choices=FORMATS)

    p = add("train", "train the VAE on every pixel of a cube")
    p.add_argument("--cube", type=Path)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--model", type=Path, help="checkpoint output path")
    p.add_argument("--report", type=Path, help="training report CSV output path")
    _model_options(p)

    p = add("detect", "produce an anomaly detection map")
    p.add_argument("--cube", type=Path)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--detector", choices=["pdrd", "grx", "lrx"])
    p.add_argument("--model", type=Path, help="reuse a trained checkpoint instead of training")
    p.add_argument("--w-out", type=int, help="LRX outer window side (odd)")
    p.add_argument("--w-in", type=int, help="LRX inner window side (odd)")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--png", action=argparse.BooleanOptionalAction, default=None, help="also write heatmap.png")
    _model_options(p)

    p = add("eval", "ROC curve and AUC summary for a map and a mask")
    p.add_argument("--map", type=Path)
    p.add_argument("--mask", type=Path)
    p.add_argument("--out-dir", type=Path)

    p = add("diag", "latent correlation diagnostics and parameter sweeps")
    p.add_argument("--model", type=Path, help="trained checkpoint")
    p.add_argument("--cube", type=Path)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--mask", type=Path, help="ground truth, enables AUC columns in sweeps")
    p.add_argument("--sweep", help="NAME=v1,v2,... retrain per value, e.g. beta=1,10,50")
    p.add_argument("--out-dir", type=Path)
    _model_options(p)

    p = add("bench", "synthetic benchmark: PDRD against global RX")
    _scene_options(p, "--scene-seed")
    _model_options(p)
    p.add_argument("--lrx", action=argparse.BooleanOptionalAction, default=None, help="also run dual-window RX")
    p.add_argument("--w-out", type=int)
    p.add_argument("--w-in", type=int)
    p.add_argument("--out-dir", type=Path)
    return parser


# --------------------------------------------------------------------------
# Option resolution
# --------------------------------------------------------------------------

_COMMAND_DEFAULTS = {
    "synth": dict(SCENE_DEFAULTS, format="flat-binary"),
    "train": dict(format=None),
    "detect": dict(format=None, detector="pdrd", w_out=19, w_in=17, png=False),
    "eval": dict(),
    "diag": dict(format=None),
    "bench": dict(SCENE_DEFAULTS, batch_size=64, lrx=False, w_out=19, w_in=17),
}
_NOT_CONFIGURABLE = {"command", "config", "quiet"}


def resolve(args: argparse.Namespace, environ=os.environ) -> dict:
    """Merge defaults, preset, config file, environment and flags into one dict."""
    command = args.command
    allowed = set(vars(args)) - _NOT_CONFIGURABLE
    has_model = "beta" in allowed
    values: dict = {}
    if has_model:
        values.update({k: v for k, v in PdrdConfig().to_dict().items()})
    values.update(_COMMAND_DEFAULTS[command])

    file_values: dict = {}
    if args.config is not None:
        try:
            import tomllib as tomli
        except ImportError:  # Python < 3.11
            import tomli

        if not args.config.is_file():
            raise CliError(f"config file not found: {args.config}")
        with open(args.config, "rb") as fh:
            raw = tomli.load(fh)
        for key, val in raw.items():
            norm = key.replace("-", "_")
            if norm == "seed" and command == "synth":
                norm = "scene_seed"
            if norm not in allowed:
                raise CliError(f"unknown key {key!r} in {args.config} for command {command!r}")
            file_values[norm] = val

    preset = args.preset if getattr(args, "preset", None) else file_values.get("preset")
    if preset:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}")
        values.update(PRESETS[preset])
        if command in ("detect", "bench") and preset in LRX_PRESETS:
            values["w_out"], values["w_in"] = LRX_PRESETS[preset]
        values["preset"] = preset
    for key, val in file_values.items():
        if key in _CASTS and val is not None:
            val = _CASTS[key](val)
        values[key] = val

    env_seed = environ.get("PDRD_SEED")
    if env_seed and has_model:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise CliError(f"PDRD_SEED must be an integer, got {env_seed!r}")

    for key in allowed:
        val = getattr(args, key)
        if val is not None:
            values[key] = val
    return values


def model_config(values: dict) -> PdrdConfig:
    try:
        return PdrdConfig(**{k: values[k] for k in _MODEL_KEYS if k in values})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid model configuration: {exc}")


def _require(values: dict, *keys: str) -> None:
    missing = [k for k in keys if values.get(k) is None]
    if missing:
        raise CliError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _check_input(path: Path) -> None:
    if not Path(path).is_file():
        raise CliError(f"input file not found: {path}")


def _check_output(path: Path) -> None:
    parent = Path(path).parent
    parent.mkdir(parents=True, exist_ok=True)
    if not os.access(parent, os.W_OK):
        raise CliError(f"output directory is not writable: {parent}")


def _jsonable(values: dict) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(values.items())}


def _sidecar(path: Path, command: str, values: dict, **extra) -> None:
    meta = {"artifact": "pdrd", "version": __version__, "command": command, "file": Path(path).name,
            "config": _jsonable(values)}
    meta.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


class _Reporter:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, msg: str) -> None:
        if not self.quiet:
            print(msg, flush=True)

    def stage(self, name: str, seconds: float) -> None:
        self(f"[time] {name}: {seconds:.3f} s")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _scene_from(values: dict):
    spec = default_scene_spec(
        height=values["height"], width=values["width"], bands=values["bands"],
        anomaly_count=values["anomalies"], anomaly_size=values["anomaly_size"], seed=values["scene_seed"],
        n_classes=values["classes"], background_std=values["background_std"], noise_std=values["noise_std"],
    )
    try:
        return synth_scene(spec)
    except (ValueError, RuntimeError) as exc:
        raise CliError(f"invalid scene: {exc}")


def cmd_synth(values: dict, out: _Reporter) -> None:
    _require(values, "out", "mask")
    _check_output(values["out"])
    _check_output(values["mask"])
    cube, gt = _scene_from(values)
    save_cube(cube, values["out"], values["format"])
    save_mask(gt, values["mask"])
    _sidecar(values["out"], "synth", values)
    _sidecar(values["mask"], "synth", values)
    blocks = gt.n_anomaly // values["anomaly_size"]
    print(f"seed {values['scene_seed']}  anomalies {blocks}  anomaly pixels {gt.n_anomaly}")
    out(f"wrote {values['out']} and {values['mask']}")


def _load_input_cube(values: dict) -> HsiCube:
    _require(values, "cube")
    _check_input(values["cube"])
    return load_cube(values["cube"], values.get("format"))


def cmd_train(values: dict, out: _Reporter) -> None:
    _require(values, "cube", "model")
    config = model_config(values)
    cube = _load_input_cube(values)
    _check_output(values["model"])
    report_path = values.get("report") or Path(str(values["model"]) + ".report.csv")
    t0 = time.perf_counter()
    work = normalize_bands(cube) if config.normalize else cube
    samples, _ = flatten(work)
    model, report = train(samples, config.train_config(), log=None if out.quiet else out)
    out.stage("train", time.perf_counter() - t0)
    save_model(model, values["model"])
    report.write_csv(report_path)
    _sidecar(values["model"], "train", values, epochs_run=report.epochs)
    _sidecar(report_path, "train", values, epochs_run=report.epochs)


def cmd_detect(values: dict, out: _Reporter) -> None:
    _require(values, "cube", "out_dir")
    detector = values["detector"]
    config = model_config(values)
    if values.get("model") is not None:
        _check_input(values["model"])
    cube = _load_input_cube(values)
    out_dir = Path(values["out_dir"])
    _check_output(out_dir / "map.bin")

    written = []
    extra = {}
    if detector == "pdrd":
        if values.get("model") is not None:
            t0 = time.perf_counter()
            model = load_model(values["model"], config=config.train_config())
            work = normalize_bands(cube) if config.normalize else cube
            dmap = score_field(latent_field(model, work), config)
            out.stage("encode+score", time.perf_counter() - t0)
        else:
            timings: Dict[str, float] = {}
            dmap, model, report = pdrd_detect(cube, config, log=None if out.quiet else out, timings=timings)
            for name, sec in timings.items():
                out.stage(name, sec)
            save_model(model, out_dir / "model.pdrd")
            report.write_csv(out_dir / "train_report.csv")
            written += [out_dir / "model.pdrd", out_dir / "train_report.csv"]
            extra["epochs_run"] = report.epochs
    elif detector == "grx":
        t0 = time.perf_counter()
        dmap = grx_detect(cube)
        out.stage("grx", time.perf_counter() - t0)
    else:
        t0 = time.perf_counter()
        dmap = lrx_detect(cube, values["w_out"], values["w_in"])
        out.stage("lrx", time.perf_counter() - t0)
        extra["flagged_pixels"] = len(dmap.flagged)

    save_map(dmap, out_dir / "map.bin")
    save_heatmap(dmap, out_dir / "heatmap.pgm")
    written += [out_dir / "map.bin", out_dir / "heatmap.pgm"]
    if values.get("png"):
        save_heatmap(dmap, out_dir / "heatmap.png")
        written.append(out_dir / "heatmap.png")
    for path in written:
        _sidecar(path, "detect", values, **extra)
    # validate what was written
    reread = load_map(out_dir / "map.bin")
    if reread.scores.shape != dmap.scores.shape:
        raise CliError("map file failed validation after writing")
    out(f"wrote {', '.join(str(p) for p in written)}")


def cmd_eval(values: dict, out: _Reporter) -> None:
    _require(values, "map", "mask", "out_dir")
    _check_input(values["map"])
    _check_input(values["mask"])
    dmap = load_map(values["map"])
    gt = load_mask(values["mask"])
    if dmap.scores.shape != gt.mask.shape:
        raise CliError(f"map {dmap.scores.shape} and mask {gt.mask.shape} dimensions differ")
    out_dir = Path(values["out_dir"])
    _check_output(out_dir / "roc.csv")
    try:
        roc = roc_curve(dmap, gt)
        result = summary(dmap, gt)
    except ValueError as exc:
        raise CliError(str(exc))
    write_roc_csv(roc, out_dir / "roc.csv")
    (out_dir / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _sidecar(out_dir / "roc.csv", "eval", values)
    _sidecar(out_dir / "summary.json", "eval", values)
    print(f"AUC(Pd,Pf) = {result['auc_pd_pf']:.6f}   AUC(Pf,tau) = {result['auc_pf_tau']:.6f}")


def _parse_sweep(text: str):
    if "=" not in text:
        raise CliError("--sweep must look like name=v1,v2,...")
    name, raw = text.split("=", 1)
    name = name.strip().replace("-", "_")
    if name not in _CASTS or _CASTS[name] not in (int, float):
        raise CliError(f"cannot sweep {name!r}; numeric model options only")
    try:
        vals = [_CASTS[name](v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"bad sweep values {raw!r}")
    if not vals:
        raise CliError("sweep needs at least one value")
    return name, vals


def cmd_diag(values: dict, out: _Reporter) -> None:
    _require(values, "cube", "out_dir")
    if values.get("model") is None and values.get("sweep") is None:
        raise CliError("diag needs --model and/or --sweep")
    config = model_config(values)
    gt = None
    if values.get("mask") is not None:
        _check_input(values["mask"])
        gt = load_mask(values["mask"])
    if values.get("model") is not None:
        _check_input(values["model"])
    cube = _load_input_cube(values)
    work = normalize_bands(cube) if config.normalize else cube
    out_dir = Path(values["out_dir"])
    _check_output(out_dir / "latent_corr.csv")

    if values.get("model") is not None:
        model = load_model(values["model"], config=config.train_config())
        diag = latent_correlation(latent_field(model, work))
        path = out_dir / "latent_corr.csv"
        np.savetxt(path, diag.corr, delimiter=",", fmt="%.10f")
        note = "k=1: no off-diagonal pairs" if model.k == 1 else ""
        _sidecar(path, "diag", values, mean_abs_offdiag=diag.mean_abs_offdiag,
                 degenerate_dims=list(diag.degenerate), note=note)
        print(f"mean |offdiag| = {diag.mean_abs_offdiag:.6f}  (k={model.k}) {note}".rstrip())

    if values.get("sweep") is not None:
        name, vals = _parse_sweep(values["sweep"])
        rows = []
        for v in vals:
            cfg = model_config(dict(values, **{name: v}))
            dmap, model, report = pdrd_detect(cube, cfg)
            diag = latent_correlation(latent_field(model, work))
            row = {name: v, "mean_abs_offdiag": diag.mean_abs_offdiag, "final_loss": report.total[-1]}
            if gt is not None:
                row["auc_pd_pf"] = roc_curve(dmap, gt).auc_pd_pf
            rows.append(row)
            out("  ".join(f"{k}={val:.6g}" if isinstance(val, float) else f"{k}={val}" for k, val in row.items()))
        path = out_dir / "sweep.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        _sidecar(path, "diag", values)


def cmd_bench(values: dict, out: _Reporter) -> None:
    _require(values, "out_dir")
    config = model_config(values)
    out_dir = Path(values["out_dir"])
    _check_output(out_dir / "bench.json")
    t0 = time.perf_counter()
    cube, gt = _scene_from(values)
    out.stage("synth", time.perf_counter() - t0)
    save_cube(cube, out_dir / "cube.bin")
    save_mask(gt, out_dir / "mask.pgm")

    results = {}
    timings: Dict[str, float] = {}
    t0 = time.perf_counter()
    dmap, model, report = pdrd_detect(cube, config, log=None if out.quiet else out, timings=timings)
    results["pdrd"] = dict(summary(dmap, gt), seconds=time.perf_counter() - t0, epochs_run=report.epochs)
    save_map(dmap, out_dir / "pdrd_map.bin")
    t0 = time.perf_counter()
    gmap = grx_detect(cube)
    results["grx"] = dict(summary(gmap, gt), seconds=time.perf_counter() - t0)
    save_map(gmap, out_dir / "grx_map.bin")
    if values.get("lrx"):
        t0 = time.perf_counter()
        lmap = lrx_detect(cube, values["w_out"], values["w_in"])
        results["lrx"] = dict(summary(lmap, gt), seconds=time.perf_counter() - t0)
        save_map(lmap, out_dir / "lrx_map.bin")
    for name, sec in timings.items():
        out.stage(f"pdrd {name}", sec)
    path = out_dir / "bench.json"
    path.write_text(json.dumps({"config": _jsonable(values), "results": results}, indent=2, sort_keys=True) + "\n")
    print(f"{'detector':<10}{'AUC(Pd,Pf)':>12}{'AUC(Pf,tau)':>13}{'seconds':>10}")
    for name, r in results.items():
        print(f"{name:<10}{r['auc_pd_pf']:>12.4f}{r['auc_pf_tau']:>13.4f}{r['seconds']:>10.1f}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval,
            "diag": cmd_diag, "bench": cmd_bench}


def _thread_limit(environ):
    raw = environ.get("PDRD_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"PDRD_THREADS must be an integer, got {raw!r}")
    return threadpool_limits(limits=max(1, n))


def main(argv: Optional[list] = None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    parser = build_parser()
    args = parser.parse_args(argv)
    reporter = _Reporter(args.quiet)
    try:
        values = resolve(args, environ)
        reporter("config " + json.dumps(_jsonable(values), sort_keys=True))
        with _thread_limit(environ):
            COMMANDS[args.command](values, reporter)
    except CliError as exc:
        print(f"pdrd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"pdrd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
