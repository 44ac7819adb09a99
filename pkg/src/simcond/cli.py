"""Command-line entry point: data generation, training, sampling, evaluation,
parameter sweeps, filter calibration and sampler timing."""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, config, datagen, eval as ev
from .datagen import GENERATED, MotionRecord
from .diffusion import default_schedule
from .errors import ConfigError, DataError, SimCondError, exit_code_for
from .model import CHECKPOINT_SCHEMA, BackboneConfig, load_checkpoint, save_checkpoint
from .physics import SimParams
from .sampling import MotionSampler
from .train import ADAPTER, BACKBONE, TrainConfig, train_adapters, train_backbone, write_loss_csv

log = logging.getLogger("simcond")

OUT_DIR_ENV = "SIMCOND_OUT_DIR"
MODES = {"earth": datagen.FIXED_EARTH, "randomized": datagen.SINGLE_PARAM}
SWEEP_VALUES = {
    ev.GRAVITY: (-2.0, -5.0, -9.81, -15.0, -19.0),
    ev.WIND_X: (-8.0, 0.0, 8.0),
    ev.WIND_Y: (-8.0, 0.0, 8.0),
    ev.ALPHA: (0.1, 0.5, 1.0),
}

_CORES = os.cpu_count() or 1

DEFAULTS = {
    "gen-data": {
        "mode": "earth", "n": 3000, "seed": 0, "out": "corpus.jsonl", "threshold": "auto",
        "jobs": _CORES, "frames": datagen.N_FRAMES,
    },
    "train": {
        "phase": BACKBONE, "data": "corpus.jsonl", "ckpt": "model.ckpt", "backbone": "",
        "iterations": 5000, "batch_size": 32, "lr": 1e-3, "cond_mask_prob": 0.1, "seed": 0,
        "T": 200, "d": 64, "layers": 2, "heads": 4, "ff": 128, "dtype": "float32",
        "loss_csv": "", "checkpoint_every": 0, "lr_schedule": "linear",
    },
    "sample": {
        "ckpt": "model.ckpt", "class": 0, "phi": (-9.81, 0.0, 0.0), "sampler": "ddpm",
        "s_cfg": 2.5, "alpha": 1.0, "project": "", "n": 10, "seed": 0, "out": "samples.jsonl",
        "backbone_only": False,
    },
    "eval": {
        "samples": ("samples.jsonl",), "ref": "corpus.jsonl", "ref_source": "ref", "out": "eval",
        "n_pairs": 0,
    },
    "sweep": {
        "axis": ev.GRAVITY, "values": (), "ckpt": "model.ckpt", "n": 100, "seed": 0,
        "out": "sweep", "sampler": "ddpm", "s_cfg": 2.5, "alpha": 1.0, "phi": (-9.81, 0.0, 0.0),
        "class": datagen.JUMP, "ref": "", "ref_source": "ref",
    },
    "calibrate": {
        "mode": "earth", "n": config.CALIBRATION["n_clips"], "seed": config.CALIBRATION["seed"],
        "quantile": config.CALIBRATION["quantile"], "jobs": _CORES, "out": "",
    },
    "bench": {
        "ckpt": "model.ckpt", "n": 20, "class": datagen.JUMP, "phi": (-9.81, 0.0, 0.0),
        "s_cfg": 2.5, "out": "bench",
    },
}

HELP = {
    "gen-data": "synthesize references, track them and write the filtered corpus",
    "train": "train the backbone or the adapters",
    "sample": "draw motions from a checkpoint",
    "eval": "plausibility, feature-Frechet and diversity report for sample files",
    "sweep": "environment compliance curves or the adapter-scale sweep",
    "calibrate": "recompute the tracking-discrepancy filter threshold",
    "bench": "per-sample wall-clock of the sampler variants",
}


def out_path(p: str) -> Path:
    base = os.environ.get(OUT_DIR_ENV)
    path = Path(p)
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def _read(path) -> list[MotionRecord]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    return datagen.read_corpus(p)


def _choice(cfg, key, options):
    if cfg[key] not in options:
        raise ConfigError(f"{key} must be one of {sorted(options)}, got {cfg[key]!r}")


def _phi(cfg, key="phi") -> SimParams:
    v = cfg[key]
    if len(v) != 3:
        raise ConfigError(f"{key} needs three values g_z,w_x,w_y")
    try:
        return SimParams(*v).validate()
    except SimCondError as exc:
        raise ConfigError(str(exc)) from exc


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    _choice(cfg, "mode", MODES)
    spec = datagen.RandomizationSpec(mode=MODES[cfg["mode"]])
    if cfg["threshold"] == "auto":
        threshold = config.CALIBRATED_THRESHOLDS[cfg["mode"]]
    else:
        threshold = config.coerce("threshold", cfg["threshold"], 0.0)
    cfg = {**cfg, "threshold": repr(float(threshold))}
    records, report = datagen.build_corpus(
        cfg["n"], spec, float(threshold), cfg["seed"], n_frames=cfg["frames"], jobs=cfg["jobs"]
    )
    out = out_path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.write_corpus(records, out)
    datagen.write_report(report, str(out) + ".report.json")
    config.write_resolved(cfg, str(out) + ".config")
    print(f"wrote {out}: {report.n_retained}/{report.n_clips} tracked clips retained "
          f"(threshold {threshold:.4f})")
    return 0


def cmd_train(cfg) -> int:
    _choice(cfg, "phase", (BACKBONE, ADAPTER))
    records = _read(out_path(cfg["data"]))
    tcfg = TrainConfig(
        batch_size=cfg["batch_size"], lr=cfg["lr"], iterations=cfg["iterations"],
        cond_mask_prob=cfg["cond_mask_prob"], phase=cfg["phase"], seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"], lr_schedule=cfg["lr_schedule"],
    )
    ckpt_path = out_path(cfg["ckpt"])
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    sched = default_schedule(cfg["T"])
    if cfg["phase"] == BACKBONE:
        refs = datagen.select(records, datagen.REFERENCE)
        if not refs:
            raise DataError("backbone training needs reference records")
        mcfg = BackboneConfig(
            max_frames=refs[0].motion.shape[0], n_classes=datagen.N_CLASSES, d=cfg["d"],
            layers=cfg["layers"], heads=cfg["heads"], ff=cfg["ff"], dtype=cfg["dtype"],
        )
        ckpt, curve = train_backbone(refs, tcfg, mcfg, sched)
    else:
        if not cfg["backbone"]:
            raise ConfigError("adapter phase needs backbone = <checkpoint>")
        base = load_checkpoint(out_path(cfg["backbone"]))
        if base.meta.get("T", sched.T) != sched.T:
            raise ConfigError(f"T={sched.T} differs from the backbone's T={base.meta['T']}")
        tracked = datagen.select(records, datagen.TRACKED)
        if not tracked:
            raise DataError("adapter training needs tracked records")
        ckpt, curve = train_adapters(base, tracked, tcfg, sched)
    save_checkpoint(ckpt_path, ckpt.model, ckpt.codec, ckpt.meta)
    loss_csv = out_path(cfg["loss_csv"]) if cfg["loss_csv"] else Path(str(ckpt_path) + ".loss.csv")
    write_loss_csv([curve], loss_csv)
    config.write_resolved(cfg, str(ckpt_path) + ".config")
    ma = curve.moving_average()
    if ma.size:
        print(f"wrote {ckpt_path}: loss {ma[0]:.4f} -> {ma[-1]:.4f}")
    return 0


def _sampler(ckpt, cfg, *, use_adapters=True, project=False, steps=None, alpha=None, sampler=None):
    sched = default_schedule(int(ckpt.meta.get("T", 200)))
    return MotionSampler(
        ckpt, sched, use_adapters=use_adapters, sampler=sampler or cfg.get("sampler", "ddpm"),
        s_cfg=cfg["s_cfg"], adapter_scale=cfg.get("alpha", 1.0) if alpha is None else alpha,
        project=project, projection_steps=steps,
    )


def _projection_steps(spec: str):
    if spec in ("", "none"):
        return False, None
    if spec == "default":
        return True, None
    try:
        return True, tuple(int(s) for s in spec.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad projection steps {spec!r}") from exc


def cmd_sample(cfg) -> int:
    _choice(cfg, "sampler", ("ddpm", "ddim"))
    if not 0 <= cfg["class"] < datagen.N_CLASSES:
        raise ConfigError(f"class must be in [0, {datagen.N_CLASSES})")
    phi = _phi(cfg)
    ckpt = load_checkpoint(out_path(cfg["ckpt"]))
    project, steps = _projection_steps(cfg["project"])
    # the projection-guided baseline runs on the backbone alone
    use_adapters = not (cfg["backbone_only"] or project)
    s = _sampler(ckpt, cfg, use_adapters=use_adapters, project=project, steps=steps)
    motions = s.sample(cfg["class"], phi, cfg["n"], cfg["seed"])
    records = [
        MotionRecord(f"sample{i:06d}", cfg["class"], phi, motions[i], GENERATED)
        for i in range(cfg["n"])
    ]
    out = out_path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.write_corpus(records, out)
    config.write_resolved(cfg, str(out) + ".config")
    print(f"wrote {out}: {cfg['n']} motions")
    return 0


def _reference(cfg) -> np.ndarray:
    records = datagen.select(_read(out_path(cfg["ref"])), cfg["ref_source"])
    if len(records) < len(ev.FEATURE_NAMES) + 1:
        raise DataError(f"reference set needs at least {len(ev.FEATURE_NAMES) + 1} {cfg['ref_source']} records")
    return np.stack([r.motion for r in records])


def cmd_eval(cfg) -> int:
    ref = _reference(cfg)
    n_pairs = cfg["n_pairs"] or None
    report = ev.EvalReport(metadata={"config_hash": ev.config_hash(cfg), "ref": cfg["ref"]})
    report.rows.append(ev.summarize(f"reference:{cfg['ref_source']}", ref, ref, n_pairs=n_pairs))
    for path in cfg["samples"]:
        recs = _read(out_path(path))
        if not recs:
            raise DataError(f"{path} holds no motions")
        side = Path(str(out_path(path)) + ".config")
        meta = config.load_file(side) if side.exists() else {}
        row = ev.summarize(
            Path(path).stem, np.stack([r.motion for r in recs]), ref,
            sampler=meta.get("sampler", "-"),
            s_cfg=float(meta.get("s_cfg", "nan")), adapter_scale=float(meta.get("alpha", "nan")),
            n_pairs=n_pairs,
        )
        report.rows.append(row)
    out = out_path(cfg["out"])
    ev.emit_report(report, out)
    config.write_resolved(cfg, out / "resolved.config")
    print(f"wrote {out}/report.csv ({len(report.rows)} rows)")
    return 0


def cmd_sweep(cfg) -> int:
    _choice(cfg, "axis", SWEEP_VALUES)
    _choice(cfg, "sampler", ("ddpm", "ddim"))
    values = cfg["values"] or SWEEP_VALUES[cfg["axis"]]
    cfg = {**cfg, "values": tuple(float(v) for v in values)}
    ckpt = load_checkpoint(out_path(cfg["ckpt"]))
    base = _phi(cfg)
    report = ev.EvalReport(metadata={"config_hash": ev.config_hash(cfg), "axis": cfg["axis"]})
    if cfg["axis"] == ev.ALPHA:
        if not cfg["ref"]:
            raise ConfigError("the alpha sweep needs ref = <corpus> for the feature-Frechet column")
        ref = _reference(cfg)
        for a in values:
            if a < 0:
                raise ConfigError("adapter scales must be >= 0")
            s = _sampler(ckpt, cfg, alpha=float(a))
            m = s.sample(np.arange(cfg["n"]) % datagen.N_CLASSES, base, cfg["n"], cfg["seed"])
            report.rows.append(ev.summarize(
                f"alpha={a:g}", m, ref, sampler=cfg["sampler"], s_cfg=cfg["s_cfg"], adapter_scale=float(a)))
    else:
        s = _sampler(ckpt, cfg)

        def generate(phi, n, seed):
            return s.sample(cfg["class"], phi, n, seed)

        curve = ev.compliance_sweep(
            lambda phi, n, seed: generate(_rebase(phi, base, cfg["axis"]), n, seed),
            cfg["axis"], values, cfg["n"], cfg["seed"],
        )
        report.curves.append(curve)
        print(f"{cfg['axis']}: responses {[round(r, 4) for r in curve.responses]} spearman {curve.spearman:.3f}")
    out = out_path(cfg["out"])
    ev.emit_report(report, out)
    config.write_resolved(cfg, out / "resolved.config")
    print(f"wrote {out}")
    return 0


def _rebase(phi: SimParams, base: SimParams, axis: str) -> SimParams:
    return ev.sweep_phi(axis, {ev.GRAVITY: phi.g_z, ev.WIND_X: phi.w_x, ev.WIND_Y: phi.w_y}[axis], base)


def cmd_calibrate(cfg) -> int:
    _choice(cfg, "mode", MODES)
    spec = datagen.RandomizationSpec(mode=MODES[cfg["mode"]])
    value = datagen.calibrate_threshold(spec, cfg["n"], cfg["seed"], cfg["quantile"])
    print(f"{cfg['mode']}: threshold {value!r} (stored {config.CALIBRATED_THRESHOLDS[cfg['mode']]!r})")
    if cfg["out"]:
        out = out_path(cfg["out"])
        out.write_text(json.dumps({"mode": cfg["mode"], "threshold": value}) + "\n")
        config.write_resolved(cfg, str(out) + ".config")
    return 0


def cmd_bench(cfg) -> int:
    ckpt = load_checkpoint(out_path(cfg["ckpt"]))
    phi = _phi(cfg)
    variants = {
        "backbone_ddpm": _sampler(ckpt, cfg, use_adapters=False, sampler="ddpm"),
        "conditioned_ddpm": _sampler(ckpt, cfg, sampler="ddpm"),
        "conditioned_ddim": _sampler(ckpt, cfg, sampler="ddim"),
        "projection_ddpm": _sampler(ckpt, cfg, use_adapters=False, project=True, sampler="ddpm"),
        "projection_ddim": _sampler(ckpt, cfg, use_adapters=False, project=True, sampler="ddim"),
    }
    table = ev.timing_bench(
        {k: (lambda seed, s=s: s.sample(cfg["class"], phi, 1, seed)) for k, s in variants.items()}, cfg["n"]
    )
    out = out_path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "timing.json").write_text(json.dumps(table, indent=2) + "\n")
    config.write_resolved(cfg, out / "resolved.config")
    for row in table:
        print(f"{row['variant']:>18}: {row['median_s']:.4f} s/sample")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
    "sweep": cmd_sweep, "calibrate": cmd_calibrate, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simcond", description=__doc__)
    p.add_argument("--version", action="version", version=(
        f"simcond {__version__} (corpus schema {datagen.SCHEMA_VERSION}, "
        f"checkpoint schema {CHECKPOINT_SCHEMA})"))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", help="flat key = value file; flags override it")
        for key in defaults:
            flag = "--" + key.replace("_", "-")
            if name == "eval" and key == "samples":
                sp.add_argument(flag, dest=key, nargs="+")
            elif name == "sample" and key == "project":
                sp.add_argument(flag, dest=key, nargs="?", const="default",
                                help="projection steps: comma list, or none for the default schedule")
            else:
                sp.add_argument(flag, dest=key)
    return p


_NEGATIVE = re.compile(r"^-\.?\d")


def _attach_negative_values(argv):
    """Rewrite ``--phi -9.81,0,0`` as ``--phi=-9.81,0,0`` so argparse does not
    mistake the value for an option."""
    out = []
    for tok in argv:
        if out and _NEGATIVE.match(tok) and out[-1].startswith("--") and "=" not in out[-1]:
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_attach_negative_values(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    defaults = DEFAULTS[args.command]
    overrides = {k: getattr(args, k) for k in defaults}
    if args.command == "eval" and overrides["samples"] is not None:
        overrides["samples"] = ",".join(overrides["samples"])
    file_values = config.load_file(args.config) if args.config else None
    cfg = config.resolve(defaults, file_values, overrides)
    for key in ("n", "iterations", "jobs"):
        if key in cfg and cfg[key] < (1 if key == "jobs" else 0):
            raise ConfigError(f"{key} must be non-negative")
    return COMMANDS[args.command](cfg)


def main(argv=None) -> int:
    try:
        return run(argv)
    except SimCondError as exc:
        print(f"simcond: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except (SystemExit, KeyboardInterrupt):
        raise


if __name__ == "__main__":
    sys.exit(main())
