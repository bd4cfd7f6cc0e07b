"""Command-line entry point.

Every subcommand reads one JSON config (``--config``) with optional
``--set section.key=value`` overrides and writes into ``--out``. Exit codes:
0 success, 1 validation error, 2 runtime error.

Config sections: ``synth``, ``model``, ``plan`` (with nested ``ablation``),
``loss``, ``augment``, ``data`` (input paths and ``fps``) and ``checks``.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import formats

log = logging.getLogger("amr")

DATA_KEYS = ("train", "val", "data", "negatives", "checkpoint", "base", "predictions", "fps")
CHECK_KEYS = ("seeds", "trials")
COMMANDS = ("gen-synth", "mine-negatives", "augment", "train-cold", "train-distill", "run-pipeline",
            "predict", "eval", "grad-check", "oracle-check")


class ConfigValidationError(ValueError):
    pass


class LockedError(RuntimeError):
    pass


def _sections():
    from .augment import AugmentConfig
    from .losses import LossWeights
    from .model import ModelConfig
    from .synth import SynthConfig
    from .train import StagePlan

    return {"synth": SynthConfig, "model": ModelConfig, "plan": StagePlan, "loss": LossWeights,
            "augment": AugmentConfig}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigValidationError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def validate_config(cfg: dict) -> dict:
    """Reject unknown sections and keys, naming the offending field."""
    from .train import AblationFlags

    if not isinstance(cfg, dict):
        raise ConfigValidationError("config must be a JSON object")
    sections = _sections()
    for name, body in cfg.items():
        if name in ("data", "checks"):
            allowed = set(DATA_KEYS if name == "data" else CHECK_KEYS)
        elif name in sections:
            allowed = _field_names(sections[name])
        else:
            raise ConfigValidationError(f"unknown config section {name!r}")
        if not isinstance(body, dict):
            raise ConfigValidationError(f"config section {name!r} must be an object")
        for key in body:
            if key not in allowed:
                raise ConfigValidationError(f"unknown config key {name}.{key}")
        if name == "plan" and "ablation" in body:
            if not isinstance(body["ablation"], dict):
                raise ConfigValidationError("plan.ablation must be an object")
            for key in body["ablation"]:
                if key not in _field_names(AblationFlags):
                    raise ConfigValidationError(f"unknown config key plan.ablation.{key}")
    return cfg


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    cfg: dict = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigValidationError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(f"config file {path} is malformed JSON ({exc.msg})") from exc
    cfg = copy.deepcopy(validate_config(cfg))
    for text in overrides:
        keys, value = parse_override(text)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigValidationError(f"override {text!r} descends into a non-object")
        node[keys[-1]] = value
    if seed is not None:
        for section in ("synth", "plan", "augment"):
            cfg.setdefault(section, {})["seed"] = seed
    return validate_config(cfg)


def build(cfg: dict, section: str):
    cls = _sections()[section]
    body = dict(cfg.get(section, {}))
    try:
        if section == "synth":
            for k in ("events_per_sample", "event_length", "distractors_per_sample", "other_events_per_sample"):
                if k in body:
                    body[k] = tuple(body[k])
        if section == "augment" and "rate_range" in body:
            body["rate_range"] = tuple(body["rate_range"])
        return cls(**body)
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(f"section {section!r}: {exc}") from exc


def _data_path(cfg: dict, key: str, required: bool = True) -> Path | None:
    value = cfg.get("data", {}).get(key)
    if value is None:
        if required:
            raise ConfigValidationError(f"missing input path data.{key}")
        return None
    p = Path(value)
    if not p.exists():
        raise ConfigValidationError(f"data.{key}: file {p} does not exist")
    return p


def _fps(cfg: dict) -> float | None:
    fps = cfg.get("data", {}).get("fps")
    if fps is not None and (not isinstance(fps, (int, float)) or fps <= 0):
        raise ConfigValidationError("data.fps must be a positive number")
    return fps


def _model_config(cfg: dict, dataset):
    """Model config with input widths taken from the data unless set explicitly."""
    model_cfg = build(cfg, "model")
    if len(dataset):
        first = dataset[0]
        explicit = cfg.get("model", {})
        if "video_dim" not in explicit:
            model_cfg.video_dim = first.features.shape[1]
        if "text_dim" not in explicit:
            model_cfg.text_dim = first.query_tokens.shape[1]
    return model_cfg


def _read(cfg: dict, key: str, split: str):
    return formats.read_annotations(_data_path(cfg, key), split, fps=_fps(cfg))


def _negatives(cfg: dict):
    p = _data_path(cfg, "negatives", required=False)
    return formats.records_to_negatives(formats.read_jsonl(p)) if p else None


@contextmanager
def run_lock(out: Path):
    """Exclusive ownership of a run directory for the lifetime of the command."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise LockedError(f"run directory {out} is locked by another process ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


# subcommands

def cmd_gen_synth(cfg: dict, out: Path) -> int:
    from .synth import generate, planted_oracle

    synth = build(cfg, "synth")
    for split in ("train", "val"):
        ds = generate(synth, split)
        formats.write_dataset(out, ds, split)
        planted = {q: [s.as_list() for s in v] for q, v in sorted(planted_oracle(ds).items())}
        (out / f"{split}_planted.json").write_text(json.dumps(planted, sort_keys=True) + "\n")
    (out / "synth_config.json").write_text(json.dumps(synth.to_dict(), sort_keys=True, indent=2) + "\n")
    log.info("wrote %d train and %d val samples to %s", synth.num_samples, synth.num_val, out)
    return 0


def _planted_beside(path: Path):
    from .domain import TemporalSpan

    p = path.with_name(path.stem + "_planted.json")
    if not p.exists():
        return None
    raw = json.loads(p.read_text())
    return {q: [TemporalSpan(*s) for s in v] for q, v in raw.items()}


def cmd_mine_negatives(cfg: dict, out: Path) -> int:
    from .augment import mining_precision
    from .train import run_mining

    train = _read(cfg, "train", "train")
    plan = build(cfg, "plan")
    negatives = run_mining(train, plan, _model_config(cfg, train), build(cfg, "loss"))
    formats.write_jsonl(out / "negatives.jsonl", formats.negatives_to_records(negatives))
    summary = {"count": len(negatives), "samples_with_negatives": len({n.query_id for n in negatives})}
    oracle = _planted_beside(_data_path(cfg, "train"))
    if oracle is not None:
        summary["precision_vs_planted"] = mining_precision(negatives, oracle)
    formats.write_report(out / "mining.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_augment(cfg: dict, out: Path) -> int:
    from .augment import build_augmented_dataset

    train = _read(cfg, "train", "train")
    aug_cfg = build(cfg, "augment")
    ds = build_augmented_dataset(train, _negatives(cfg) or [], aug_cfg)
    formats.write_dataset(out, ds, "augmented")
    print(json.dumps({"size": len(ds), "skipped": ds.meta.get("skipped", 0)}, sort_keys=True))
    return 0


def cmd_train_cold(cfg: dict, out: Path) -> int:
    from .train import run_cold_start

    train = _read(cfg, "train", "augmented")
    res = run_cold_start(train, build(cfg, "plan"), _model_config(cfg, train), build(cfg, "loss"), run_dir=out)
    print(json.dumps({"steps": res.steps, "checkpoint": str(out / "cold_final.ckpt")}))
    return 0


def cmd_train_distill(cfg: dict, out: Path) -> int:
    from .augment import attach_negatives
    from .train import run_distill_stage

    train = _read(cfg, "train", "train")
    negatives = _negatives(cfg)
    if negatives:
        train = attach_negatives(train, negatives)
    res, _ = run_distill_stage(train, _data_path(cfg, "base"), build(cfg, "plan"), build(cfg, "loss"),
                               run_dir=out, model_cfg=_model_config(cfg, train))
    print(json.dumps({"steps": res.steps, "checkpoint": str(out / "distill_final.ckpt")}))
    return 0


def cmd_run_pipeline(cfg: dict, out: Path) -> int:
    from .train import run_full_pipeline

    train = _read(cfg, "train", "train")
    val = _read(cfg, "val", "val")
    report = run_full_pipeline(train, val, build(cfg, "plan"), _model_config(cfg, train), build(cfg, "loss"),
                               build(cfg, "augment"), run_dir=out, negatives=_negatives(cfg))
    print(json.dumps(report.metrics.report(), sort_keys=True))
    return 0


def cmd_predict(cfg: dict, out: Path) -> int:
    from .train import predict

    model = formats.load_checkpoint(_data_path(cfg, "checkpoint"))
    ds = _read(cfg, "data", "val")
    preds = predict(model, ds.samples)
    formats.write_predictions(out / "predictions.jsonl", [s.query_id for s in ds], preds)
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    from .evaluate import evaluate

    gts = formats.read_gt_spans(_data_path(cfg, "data"), fps=_fps(cfg))
    preds = formats.read_predictions(_data_path(cfg, "predictions"))
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise ConfigValidationError(f"predictions missing for {len(missing)} qid(s), e.g. {missing[0]!r}")
    qids = sorted(gts)
    report = evaluate([preds[q] for q in qids], [gts[q] for q in qids]).report()
    formats.write_report(out / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_grad_check(cfg: dict, out: Path | None) -> int:
    from .checks import GRAD_TOLERANCE, grad_check

    seeds = int(cfg.get("checks", {}).get("seeds", 100))
    worst = grad_check(range(seeds))
    for name, err in worst.items():
        print(f"{name:8s} max_rel_err={err:.3e} {'ok' if err < GRAD_TOLERANCE else 'FAIL'}")
    if out is not None:
        formats.write_report(out / "grad_check.json", worst)
    return 0 if all(e < GRAD_TOLERANCE for e in worst.values()) else 2


def cmd_oracle_check(cfg: dict, out: Path | None) -> int:
    from .checks import oracle_check

    trials = int(cfg.get("checks", {}).get("trials", 1000))
    seed = int(cfg.get("plan", {}).get("seed", 0))
    bad = oracle_check(trials, seed=seed)
    for name, count in bad.items():
        print(f"{name:18s} mismatches={count} {'ok' if count == 0 else 'FAIL'}")
    if out is not None:
        formats.write_report(out / "oracle_check.json", bad)
    return 0 if not any(bad.values()) else 2


HANDLERS = {"gen-synth": cmd_gen_synth, "mine-negatives": cmd_mine_negatives, "augment": cmd_augment,
            "train-cold": cmd_train_cold, "train-distill": cmd_train_distill, "run-pipeline": cmd_run_pipeline,
            "predict": cmd_predict, "eval": cmd_eval, "grad-check": cmd_grad_check,
            "oracle-check": cmd_oracle_check}
OUT_OPTIONAL = ("grad-check", "oracle-check")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amr", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. plan.learning_rate=0.001")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed for every random stream")
    for key in ("train", "val", "data", "negatives", "checkpoint", "base", "predictions"):
        parser.add_argument(f"--{key}", help=f"shorthand for --set data.{key}=PATH")
    parser.add_argument("--fps", type=float, help="convert second-based annotation spans to frames")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        data = cfg.setdefault("data", {})
        for key in ("train", "val", "data", "negatives", "checkpoint", "base", "predictions", "fps"):
            value = getattr(args, key)
            if value is not None:
                data[key] = value
        validate_config(cfg)
        handler = HANDLERS[args.command]
        if args.out is None:
            if args.command not in OUT_OPTIONAL:
                raise ConfigValidationError(f"{args.command} needs --out")
            return handler(cfg, None)
        with run_lock(Path(args.out)) as out:
            return handler(cfg, out)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"amr {args.command}: validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"amr {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
