"""Command-line entry point.

Subcommands: generate, train, evaluate, gradcheck, sweep-batch. Every run
reads one INI-style config file (flat key = value lines under per-module
sections), writes its artifacts plus a manifest.json into --out, and is
bit-reproducible under a fixed config and seed.

Exit codes: 0 success; 1 usage or config error; 2 numerical failure
(divergence, gradient tolerance, degenerate trials); 3 I/O failure.
"""

import argparse
import configparser
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateTrials,
    DivergenceDetected,
    InvalidSpec,
    IoError,
    ToleranceExceeded,
)
from .evaluate import (
    DcfParams,
    build_trials,
    eer,
    min_dcf,
    save_scored_trials,
    save_trials,
    score_trials,
)
from .geometry import normalize_rows
from .losses import (
    DenominatorConvention,
    LossInputs,
    LossKind,
    grad_check,
)
from .model import load_checkpoint, save_checkpoint
from .synthdata import DatasetSpec, generate, load_dataset, save_dataset, split_holdout
from .training import TrainConfig, end_to_end_grad_check, save_runlog, train

# Published full-scale reference point quoted in sweep reports.
SWEEP_FOOTER = ("full-scale anchor (not reproducible at this scale): "
                "batch 128 -> EER 13.64%, minDCF 0.71")

_LOSS_KINDS = {k.value: k for k in LossKind}
_CONVENTIONS = {c.value: c for c in DenominatorConvention}

# section -> key -> (parser, default); None default means "absent".
_SCHEMA = {
    "dataset": {
        "num_speakers": (int, 16),
        "utterances_per_speaker": (int, 20),
        "d_in": (int, 40),
        "spread": (float, 0.2),
        "seed": (int, 7),
        "holdout_per_speaker": (int, 0),
    },
    "augment": {
        "noise_sigma": (float, 0.1),
        "mask_max": ("int_or_none", None),
    },
    "model": {
        "encoder_hidden": ("int_list", [64, 64]),
        "proj_hidden": (int, 128),
        "embedding_dim": (int, 128),
    },
    "training": {
        "loss": ("loss_kind", "aamsupcon"),
        "temperature": (float, 0.07),
        "margin": (float, 0.2),
        "scale": (float, 30.0),
        "lambda": (float, 1.0),
        "convention": ("convention", "all_non_anchor"),
        "learning_rate": (float, 0.003),
        "momentum": (float, 0.9),
        "steps": (int, 1000),
        "batch_speakers": (int, 8),
        "views_per_speaker": (int, 2),
        "seed": (int, 0),
        "classifier_space": ("space", "projection"),
    },
    "eval": {
        "trials_per_speaker": (int, 40),
        "seed": (int, 100),
        "p_target": (float, 0.01),
        "c_miss": (float, 1.0),
        "c_fa": (float, 1.0),
        "space": ("space", "projection"),
    },
    "gradcheck": {
        "seed": (int, 0),
        "step": (float, 1e-6),
        "tolerance": (float, 1e-5),
        "e2e_tolerance": (float, 1e-4),
    },
}


def _parse_value(section, key, raw, parser):
    where = f"{section}.{key}"
    try:
        if parser is int:
            return int(raw)
        if parser is float:
            return float(raw)
        if parser == "int_or_none":
            return None if raw.strip() == "" else int(raw)
        if parser == "int_list":
            values = [int(tok) for tok in raw.split()]
            if not values:
                raise ValueError("empty list")
            return values
        if parser == "loss_kind":
            if raw not in _LOSS_KINDS:
                raise ValueError(f"expected one of {sorted(_LOSS_KINDS)}")
            return raw
        if parser == "convention":
            if raw not in _CONVENTIONS:
                raise ValueError(f"expected one of {sorted(_CONVENTIONS)}")
            return raw
        if parser == "space":
            if raw not in ("projection", "encoder"):
                raise ValueError("expected projection or encoder")
            return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from exc
    raise AssertionError(f"unknown parser for {where}")


def load_config(path) -> dict:
    """Parse and fully validate a config file against the schema.

    Unknown sections or keys are errors, as are unparsable values. Returns
    {section: {key: value}} with defaults filled in."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    config = {sect: {key: default for key, (_, default) in keys.items()}
              for sect, keys in _SCHEMA.items()}
    for sect in parser.sections():
        if sect not in _SCHEMA:
            raise ConfigError(f"unknown config section [{sect}]")
        for key, raw in parser.items(sect):
            if key not in _SCHEMA[sect]:
                raise ConfigError(f"unknown config key {sect}.{key}")
            config[sect][key] = _parse_value(sect, key, raw, _SCHEMA[sect][key][0])
    return config


def _dataset_spec(config, seed_override=None) -> DatasetSpec:
    d = config["dataset"]
    spec = DatasetSpec(d["num_speakers"], d["utterances_per_speaker"],
                       d["d_in"], d["spread"],
                       d["seed"] if seed_override is None else seed_override)
    try:
        spec.validate()
    except InvalidSpec as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    if d["holdout_per_speaker"] < 0:
        raise ConfigError("dataset.holdout_per_speaker: must be >= 0")
    if d["holdout_per_speaker"] >= d["utterances_per_speaker"]:
        raise ConfigError("dataset.holdout_per_speaker: must leave at least "
                          "one training utterance per speaker")
    return spec


def _train_config(config, seed_override=None) -> TrainConfig:
    t, m, a = config["training"], config["model"], config["augment"]
    cfg = TrainConfig(
        loss_kind=_LOSS_KINDS[t["loss"]],
        temperature=t["temperature"],
        margin=t["margin"],
        scale=t["scale"],
        lam=t["lambda"],
        convention=_CONVENTIONS[t["convention"]],
        learning_rate=t["learning_rate"],
        momentum=t["momentum"],
        steps=t["steps"],
        batch_speakers=t["batch_speakers"],
        views_per_speaker=t["views_per_speaker"],
        seed=t["seed"] if seed_override is None else seed_override,
        encoder_hidden=tuple(m["encoder_hidden"]),
        proj_hidden=m["proj_hidden"],
        embedding_dim=m["embedding_dim"],
        noise_sigma=a["noise_sigma"],
        mask_max=a["mask_max"],
        classifier_space=t["classifier_space"],
    )
    try:
        cfg.validate()
    except Exception as exc:
        raise ConfigError(f"training: {exc}") from exc
    if cfg.steps < 0:
        raise ConfigError("training.steps: must be >= 0")
    return cfg


def _dcf_params(config) -> DcfParams:
    e = config["eval"]
    try:
        return DcfParams(e["p_target"], e["c_miss"], e["c_fa"])
    except ValueError as exc:
        raise ConfigError(f"eval: {exc}") from exc


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, payload) -> None:
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_manifest(out_dir, command, config, seed_override, inputs, outputs,
                    metrics=None) -> str:
    """One manifest per run: config echo, basenames of inputs/outputs,
    sha256 of every output artifact, and metric results. No timestamps, so
    reruns with equal config and seed are byte-identical."""
    manifest = {
        "command": command,
        "config": config,
        "seed_override": seed_override,
        "inputs": {name: os.path.basename(str(p)) for name, p in inputs.items()},
        "outputs": {name: os.path.basename(str(p)) for name, p in outputs.items()},
        "checksums": {os.path.basename(str(p)): _sha256(p) for p in outputs.values()},
        "metrics": metrics,
    }
    path = os.path.join(out_dir, "manifest.json")
    _write_json(path, manifest)
    return path


def _ensure_out(out_dir) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out_dir}: {exc}") from exc


def cmd_generate(args) -> int:
    config = load_config(args.config)
    spec = _dataset_spec(config, args.seed)
    _ensure_out(args.out)
    samples, _ = generate(spec)
    dataset_path = os.path.join(args.out, "dataset.txt")
    save_dataset(dataset_path, spec, samples)
    _write_manifest(args.out, "generate", config, args.seed, {},
                    {"dataset": dataset_path})
    print(f"wrote {dataset_path}: {len(samples)} samples, "
          f"{spec.num_speakers} speakers, d_in={spec.d_in}")
    return 0


def _load_train_split(config, data_path):
    _, samples = load_dataset(data_path)
    holdout = config["dataset"]["holdout_per_speaker"]
    try:
        train_set, heldout = split_holdout(samples, holdout)
    except InvalidSpec as exc:
        raise ConfigError(f"dataset.holdout_per_speaker: {exc}") from exc
    return samples, train_set, heldout


def cmd_train(args) -> int:
    config = load_config(args.config)
    cfg = _train_config(config, args.seed)
    _, train_set, _ = _load_train_split(config, args.data)
    _ensure_out(args.out)
    params, log = train(cfg, train_set)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    runlog_path = os.path.join(args.out, "runlog.txt")
    save_checkpoint(ckpt_path, params)
    save_runlog(runlog_path, log)
    _write_manifest(args.out, "train", config, args.seed, {"dataset": args.data},
                    {"checkpoint": ckpt_path, "runlog": runlog_path})
    if log.records:
        print(f"trained {cfg.steps} steps: loss {log.records[0].loss:.6g} -> "
              f"{log.records[-1].loss:.6g}")
    else:
        print("trained 0 steps: checkpoint is the seeded initialization")
    print(f"wrote {ckpt_path}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    dcf = _dcf_params(config)
    eval_cfg = config["eval"]
    trial_seed = eval_cfg["seed"] if args.seed is None else args.seed
    params = load_checkpoint(args.checkpoint)
    samples, _, heldout = _load_train_split(config, args.data)
    eval_set = heldout if heldout else samples
    _ensure_out(args.out)

    trials = build_trials(eval_set, eval_cfg["trials_per_speaker"], trial_seed)
    scored = score_trials(params, eval_set, trials, eval_cfg["space"])
    eer_value, eer_thr = eer(scored)
    dcf_value, dcf_thr = min_dcf(scored, dcf)
    metrics = {
        "eer": eer_value,
        "eer_percent": 100.0 * eer_value,
        "threshold": eer_thr,
        "min_dcf": dcf_value,
        "min_dcf_threshold": dcf_thr,
        "num_target": int(np.sum(scored.is_target)),
        "num_nontarget": int(np.sum(~scored.is_target)),
        "num_trials": len(trials),
        "evaluated_samples": len(eval_set),
    }
    trials_path = os.path.join(args.out, "trials.txt")
    scores_path = os.path.join(args.out, "scores.txt")
    metrics_path = os.path.join(args.out, "metrics.json")
    save_trials(trials_path, trials)
    save_scored_trials(scores_path, trials, scored)
    _write_json(metrics_path, metrics)
    _write_manifest(args.out, "evaluate", config, args.seed,
                    {"checkpoint": args.checkpoint, "dataset": args.data},
                    {"trials": trials_path, "scores": scores_path,
                     "metrics": metrics_path},
                    metrics)
    print(f"EER = {metrics['eer_percent']:.3f}% (threshold {eer_thr:.4f})")
    print(f"minDCF(p_target={dcf.p_target}) = {dcf_value:.4f} "
          f"(threshold {dcf_thr:.4f})")
    print(f"{metrics['num_target']} target / {metrics['num_nontarget']} "
          f"non-target trials")
    return 0


def _gradcheck_batch(rng, n_per_class, num_classes, dim):
    labels = np.repeat(np.arange(num_classes), n_per_class)
    z = normalize_rows(rng.standard_normal((labels.size, dim)))
    w = normalize_rows(rng.standard_normal((num_classes, dim)))
    return LossInputs(z, labels, w)


def cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    g = config["gradcheck"]
    corrupt = 0.05 if args.corrupt else 0.0
    rng = np.random.default_rng(g["seed"])
    rows = []
    for kind in LossKind:
        worst = 0.0
        for n_per_class, num_classes, dim in ((2, 2, 4), (4, 3, 8), (2, 5, 16)):
            report = grad_check(kind, _gradcheck_batch(rng, n_per_class,
                                                       num_classes, dim),
                                step=g["step"], corrupt=corrupt)
            worst = max(worst, report.max_rel_error)
        rows.append({"check": kind.value, "max_rel_error": worst,
                     "tolerance": g["tolerance"],
                     "passed": worst < g["tolerance"]})

    e2e_cfg = TrainConfig(loss_kind=LossKind.AAMSUPCON, encoder_hidden=(16,),
                          proj_hidden=16, embedding_dim=8, batch_speakers=3,
                          views_per_speaker=2, seed=g["seed"])
    e2e_data, _ = generate(DatasetSpec(4, 4, 10, 0.3, seed=g["seed"] + 1))
    e2e = end_to_end_grad_check(e2e_cfg, e2e_data, step=g["step"],
                                batch_seed=g["seed"])
    rows.append({"check": "end_to_end", "max_rel_error": e2e.max_rel_error,
                 "tolerance": g["e2e_tolerance"],
                 "passed": e2e.max_rel_error < g["e2e_tolerance"]})

    for row in rows:
        print(f"{row['check']:12s} max rel error {row['max_rel_error']:.3e} "
              f"(tolerance {row['tolerance']:.0e}) "
              f"{'ok' if row['passed'] else 'FAIL'}")
    if args.out:
        _ensure_out(args.out)
        report_path = os.path.join(args.out, "gradcheck.json")
        _write_json(report_path, {"rows": rows})
        _write_manifest(args.out, "gradcheck", config, args.seed, {},
                        {"report": report_path})
    failed = [row["check"] for row in rows if not row["passed"]]
    if failed:
        raise ToleranceExceeded(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_sweep_batch(args) -> int:
    config = load_config(args.config)
    if not args.sizes:
        raise ConfigError("sweep-batch: at least one --sizes value required")
    base = _train_config(config, args.seed)
    dcf = _dcf_params(config)
    eval_cfg = config["eval"]
    samples, train_set, heldout = _load_train_split(config, args.data)
    eval_set = heldout if heldout else samples
    _ensure_out(args.out)

    rows = []
    for size in args.sizes:
        if size < 1:
            raise ConfigError(f"sweep-batch: invalid batch size {size}")
        cfg = TrainConfig(**{**vars(base), "batch_speakers": size})
        params, _ = train(cfg, train_set)
        trials = build_trials(eval_set, eval_cfg["trials_per_speaker"],
                              eval_cfg["seed"])
        scored = score_trials(params, eval_set, trials, eval_cfg["space"])
        eer_value, _ = eer(scored)
        dcf_value, _ = min_dcf(scored, dcf)
        rows.append({"batch_speakers": size,
                     "batch_size": 2 * size * cfg.views_per_speaker,
                     "eer_percent": 100.0 * eer_value,
                     "min_dcf": dcf_value})

    print(f"{'speakers':>8s} {'batch':>6s} {'EER(%)':>8s} {'minDCF':>8s}")
    for row in rows:
        print(f"{row['batch_speakers']:8d} {row['batch_size']:6d} "
              f"{row['eer_percent']:8.2f} {row['min_dcf']:8.3f}")
    print(SWEEP_FOOTER)

    sweep_path = os.path.join(args.out, "sweep.json")
    _write_json(sweep_path, {"rows": rows, "footer": SWEEP_FOOTER,
                             "steps": base.steps, "seed": base.seed})
    _write_manifest(args.out, "sweep-batch", config, args.seed,
                    {"dataset": args.data}, {"sweep": sweep_path},
                    {"rows": rows})
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aamsupcon",
                     description="margin-contrastive embedding trainer and "
                                 "speaker-verification evaluator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False, out_required=True):
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the command-relevant seed")
        if data:
            p.add_argument("--data", required=True, help="dataset file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    common(sub.add_parser("train", help="train a model"), data=True)
    common(sub.add_parser("evaluate", help="score trials and report EER/minDCF"),
           data=True, checkpoint=True)
    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p, out_required=False)
    p.add_argument("--out", default=None, help="optional report directory")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p = sub.add_parser("sweep-batch", help="train/evaluate across batch sizes")
    common(p, data=True)
    p.add_argument("--sizes", type=int, nargs="+", required=True,
                   help="batch sizes in speakers per batch")
    return parser


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "sweep-batch": cmd_sweep_batch,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DivergenceDetected as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ToleranceExceeded, DegenerateTrials) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (IoError, CheckpointError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 3


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
