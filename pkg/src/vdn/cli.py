"""Command-line entry point: ``vdn <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.
Failures print one JSON line ``{"error": ..., "message": ...}`` to stderr.
"""

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
OUTPUT_ROOT_ENV = "VDN_OUTPUT_ROOT"
RUN_MANIFEST = "run_manifest.jsonl"

log = logging.getLogger("vdn")


class ConfigError(ValueError):
    pass


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _out_path(args, default_name):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def _parse_sets(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def train_config_from_args(args):
    """Preset, then config file, then ``--set`` / ``--seed`` flags (flags win)."""
    from .pipeline import TrainConfig

    base = (TrainConfig.desk() if args.preset == "desk" else TrainConfig()).to_dict()
    if args.config:
        d = _read_json(args.config)
        if not isinstance(d, dict):
            raise ConfigError("config must be a flat key-value object")
        base.update(d)
    base.update(_parse_sets(args.set))
    if args.seed is not None:
        base["seed"] = args.seed
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def append_run_manifest(out_dir, record):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / RUN_MANIFEST, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_run_manifest(out_dir):
    lines = (Path(out_dir) / RUN_MANIFEST).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


# ---- subcommands ---------------------------------------------------------------------------


def cmd_simulate(args):
    from .array_store import load_image
    from .noise_sim import MapFamilySpec, build_protocol_data, make_dataset, toy_images, write_dataset

    out = _out_path(args, "data")
    seed = 0 if args.seed is None else args.seed
    if args.protocol:
        build_protocol_data(out, seed=seed, tile=args.tile, channels=args.channels)
        return {"config": {"protocol": args.protocol, "tile": args.tile, "channels": args.channels},
                "seed": seed, "artifacts": [str(out)]}
    if not args.spec:
        raise ConfigError("simulate needs --spec or --protocol")
    d = _read_json(args.spec)
    try:
        spec = MapFamilySpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if args.clean:
        paths = sorted(Path(args.clean).glob("*.png"))
        if not paths:
            raise ConfigError(f"no PNG files in {args.clean}")
        cleans, names = [load_image(p) for p in paths], [p.stem for p in paths]
    else:
        cleans, names = toy_images(d.get("split", "train"), tile=args.tile, channels=args.channels)
    write_dataset(make_dataset(cleans, spec, seed, names=names), out)
    return {"config": spec.to_dict(), "seed": seed, "artifacts": [str(out)]}


def _train_data(path):
    from .noise_sim import read_dataset

    path = Path(path)
    if (path / "manifest").is_file():
        return read_dataset(path)
    if (path / "train" / "manifest").is_file():
        return read_dataset(path / "train")
    raise FileNotFoundError(f"no dataset manifest under {path}")


def cmd_train(args):
    from .pipeline import train

    cfg = train_config_from_args(args)
    out = _out_path(args, "train")
    ds = _train_data(args.data)
    res = train(ds, cfg, out_dir=out, resume=args.resume)
    return {"config": cfg.to_dict(), "seed": cfg.seed,
            "artifacts": [str(res.checkpoint), str(out / "train_log.csv")]}


def _inputs(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no PNG files in {path}")
        return files
    return [path]


def cmd_denoise(args):
    from .array_store import load_image, save_image
    from .networks import load_checkpoint
    from .pipeline import denoise

    model, _ = load_checkpoint(args.ckpt)
    out = _out_path(args, "denoised")
    written = []
    for f in _inputs(args.input):
        y = load_image(f)
        dst = out / f"{f.stem}.png"
        save_image(denoise(y, model), dst, bits=16 if y.shape[0] == 1 else 8)
        written.append(str(dst))
    return {"config": {"ckpt": str(args.ckpt), "in": str(args.input)}, "seed": None, "artifacts": written}


def cmd_estimate_noise(args):
    from .array_store import load_image, save_array, save_image
    from .networks import load_checkpoint
    from .pipeline import estimate_sigma_map

    model, _ = load_checkpoint(args.ckpt)
    sigma = estimate_sigma_map(load_image(args.input), model)
    out = _out_path(args, "sigma.vdna")
    if out.suffix == ".png":
        save_image(sigma / max(float(sigma.max()), 1e-12), out, bits=8)
    else:
        save_array(sigma, out)
    return {"config": {"ckpt": str(args.ckpt), "in": str(args.input)}, "seed": None,
            "artifacts": [str(out)], "sigma_mean": float(sigma.mean())}


def cmd_evaluate(args):
    from .evaluation import run_experiment

    cfg = train_config_from_args(args)
    out = _out_path(args, "eval")
    out_dir, report_name = (out.parent, out.name) if out.suffix == ".csv" else (out, "report.csv")
    run_experiment(args.protocol, args.data, out_dir, cfg=cfg, checkpoint=args.ckpt, report_name=report_name)
    return {"config": {"protocol": args.protocol, **cfg.to_dict()}, "seed": cfg.seed,
            "artifacts": [str(out_dir / report_name), str(out_dir / "table.csv")]}


def cmd_check_elbo(args):
    from .oracles import elbo_audit

    seed = 0 if args.seed is None else args.seed
    rows = elbo_audit(trials=args.trials, n_samples=args.samples, seed=seed)
    out = _out_path(args, "check_elbo.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["trial", "analytic", "mc_mean", "mc_stderr", "z_score"])
        w.writeheader()
        w.writerows(rows)
    worst = max(abs(r["z_score"]) for r in rows)
    print(f"{len(rows)} trials, max |z| = {worst:.3f}")
    return {"config": {"trials": args.trials, "samples": args.samples}, "seed": seed,
            "artifacts": [str(out)], "max_abs_z": worst}


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "estimate-noise": cmd_estimate_noise,
    "evaluate": cmd_evaluate,
    "check-elbo": cmd_check_elbo,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vdn", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help=f"output path (default under ${OUTPUT_ROOT_ENV} or ./runs)")
        if config:
            p.add_argument("--config", default=None, help="flat JSON config file")
            p.add_argument("--preset", choices=["desk", "full"], default="desk")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("simulate", help="generate a synthetic noisy/clean dataset")
    common(p)
    p.add_argument("--spec", help="noise map family spec (JSON)")
    p.add_argument("--protocol", choices=["standard"], help="write train/ plus every held-out test set")
    p.add_argument("--clean", help="directory of clean PNGs (default: built-in toy images)")
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--channels", type=int, choices=[1, 3], default=1)

    p = sub.add_parser("train", help="train D-Net and S-Net")
    common(p, config=True)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("denoise", help="denoise a PNG or a directory of PNGs")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)

    p = sub.add_parser("estimate-noise", help="predict the per-pixel noise std map")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)

    p = sub.add_parser("evaluate", help="run an evaluation protocol")
    common(p, config=True)
    p.add_argument("--protocol", required=True, choices=["cases", "awgn", "eps-sweep", "p-sweep", "mse-baseline"])
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)

    p = sub.add_parser("check-elbo", help="audit the closed-form bound against Monte Carlo")
    common(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--samples", type=int, default=100_000)
    return parser


def _fail(code, exc):
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": msg}), file=sys.stderr)
    return code


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(message)s")
    started = _now()
    try:
        info = COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)
    run_dir = _run_dir(args)
    append_run_manifest(run_dir, {
        "command": args.command,
        "argv": list(argv),
        "config": info.get("config"),
        "seed": info.get("seed"),
        "code_version": __version__,
        "started": started,
        "finished": _now(),
        "artifacts": info.get("artifacts", []),
    })
    return 0


def _run_dir(args):
    out = _out_path(args, {"check-elbo": "check_elbo.csv", "estimate-noise": "sigma.vdna",
                           "evaluate": "eval", "train": "train", "denoise": "denoised",
                           "simulate": "data"}[args.command])
    return out.parent if out.suffix else out


def main(argv=None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
