"""The twelve-row ablation grid (rows a to l) at synthetic scale.

Run as ``python -m amr.ablation --rows a,l --seeds 0,1,2 --out runs/ablation``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import AugmentConfig, MinedNegative
from .evaluate import EvalResult
from .losses import LossWeights
from .model import ModelConfig
from .synth import SynthConfig, generate
from .train import AblationFlags, StagePlan, run_full_pipeline, run_mining

# Check-marks as published, columns Splice, Boost, Vanilla, +Dill, +DCL.
PUBLISHED_MARKS = {
    "a": "- - - - -",
    "b": "x - - - -",
    "c": "x x - - -",
    "d": "- - x - -",
    "e": "x - x - -",
    "f": "x x x - -",
    "g": "x - - x -",
    "h": "x x - x -",
    "i": "x - - - x",
    "j": "x x - - x",
    "k": "x - - x x",
    "l": "x x - x x",
}
FLAG_ORDER = ("use_splice", "use_boost", "two_stage_vanilla", "use_dill", "use_dcl")
METRICS = ("r1@0.5", "r1@0.7", "map_avg")
HARD_MARGIN = 0.03  # row (l) must beat row (a) by this much R1@0.7


class AblationError(ValueError):
    pass


def _flags_from_marks(marks: str) -> AblationFlags:
    cells = marks.split()
    if len(cells) != len(FLAG_ORDER) or any(c not in "x-" for c in cells):
        raise AblationError(f"malformed check-mark row {marks!r}")
    return AblationFlags(**{name: c == "x" for name, c in zip(FLAG_ORDER, cells)})


ROW_FLAGS: dict[str, AblationFlags] = {
    "a": AblationFlags(False, False, False, False, False),
    "b": AblationFlags(True, False, False, False, False),
    "c": AblationFlags(True, True, False, False, False),
    "d": AblationFlags(False, False, True, False, False),
    "e": AblationFlags(True, False, True, False, False),
    "f": AblationFlags(True, True, True, False, False),
    "g": AblationFlags(True, False, False, True, False),
    "h": AblationFlags(True, True, False, True, False),
    "i": AblationFlags(True, False, False, False, True),
    "j": AblationFlags(True, True, False, False, True),
    "k": AblationFlags(True, False, False, True, True),
    "l": AblationFlags(True, True, False, True, True),
}


def validate_row_table() -> None:
    """The flag table must reproduce the published check-marks one-to-one."""
    if set(ROW_FLAGS) != set(PUBLISHED_MARKS):
        raise AblationError("row ids differ between the flag table and the check-mark table")
    for row, marks in PUBLISHED_MARKS.items():
        if ROW_FLAGS[row] != _flags_from_marks(marks):
            raise AblationError(f"row ({row}) flags {ROW_FLAGS[row]} do not match check-marks {marks!r}")


validate_row_table()


@dataclass
class AblationRow:
    row_id: str
    flags: AblationFlags
    metrics: list[EvalResult] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.row_id not in ROW_FLAGS:
            raise AblationError(f"unknown ablation row {self.row_id!r}")
        if self.flags != ROW_FLAGS[self.row_id]:
            raise AblationError(f"row ({self.row_id}) must use flags {ROW_FLAGS[self.row_id]}")

    def values(self, key: str) -> np.ndarray:
        return np.array([m.report()[key] for m in self.metrics])

    def mean(self, key: str) -> float:
        return float(self.values(key).mean())

    def spread(self, key: str) -> float:
        """Half the min-max range across seeds."""
        v = self.values(key)
        return float((v.max() - v.min()) / 2) if v.size else 0.0

    def record(self) -> dict:
        rec = {"row": self.row_id, "seeds": self.seeds,
               "flags": {k: getattr(self.flags, k) for k in FLAG_ORDER}}
        for key in METRICS:
            rec[key] = {"mean": self.mean(key), "spread": self.spread(key),
                        "per_seed": self.values(key).tolist()}
        return rec


@dataclass
class ComparisonTable:
    rows: list[AblationRow]

    def row(self, row_id: str) -> AblationRow:
        for r in self.rows:
            if r.row_id == row_id:
                return r
        raise KeyError(row_id)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.record(), sort_keys=True) + "\n" for r in self.rows)

    def format(self) -> str:
        head = ["row", "Splice", "Boost", "Vanilla", "+Dill", "+DCL"] + [f"{k} (x100)" for k in METRICS]
        lines = []
        for r in self.rows:
            marks = ["x" if getattr(r.flags, k) else "-" for k in FLAG_ORDER]
            stats = [f"{100 * r.mean(k):.2f}±{100 * r.spread(k):.2f}" for k in METRICS]
            lines.append([f"({r.row_id})"] + marks + stats)
        widths = [max(len(head[i]), *(len(line[i]) for line in lines)) for i in range(len(head))]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        return "\n".join([fmt.format(*head)] + [fmt.format(*line) for line in lines]) + "\n"

    def trend_checks(self) -> list[dict]:
        """Hard gate (l) > (a) by the margin; soft expectation (c) <= (a)."""
        out = []
        ids = {r.row_id for r in self.rows}
        if {"a", "l"} <= ids:
            delta = self.row("l").mean("r1@0.7") - self.row("a").mean("r1@0.7")
            out.append({"check": "(l) - (a) r1@0.7", "kind": "hard", "delta": delta,
                        "required": HARD_MARGIN, "passed": delta >= HARD_MARGIN})
        if {"a", "c"} <= ids:
            delta = self.row("c").mean("r1@0.7") - self.row("a").mean("r1@0.7")
            out.append({"check": "(c) - (a) r1@0.7", "kind": "soft", "delta": delta,
                        "required": 0.0, "passed": delta <= 0.0})
        return out


def config_hash(plan: StagePlan) -> str:
    """Hash of a plan with the seed blanked, so runs in one row can be compared."""
    d = plan.to_dict()
    d.pop("seed")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def run_table4(plan_base: StagePlan, rows: Iterable[str], seeds: Sequence[int],
               synth: SynthConfig | None = None, model_cfg: ModelConfig | None = None,
               weights: LossWeights | None = None, augment_cfg: AugmentConfig | None = None,
               out_dir: Path | str | None = None, log=None) -> ComparisonTable:
    """Run every requested row for every seed; seed s also seeds the synthetic data."""
    synth = synth or SynthConfig()
    rows = [r.strip() for r in rows]
    for r in rows:
        if r not in ROW_FLAGS:
            raise AblationError(f"unknown ablation row {r!r}")
    out_dir = Path(out_dir) if out_dir is not None else None
    mined: dict[int, list[MinedNegative]] = {}
    data = {}
    table = ComparisonTable([AblationRow(r, ROW_FLAGS[r]) for r in rows])
    for row in table.rows:
        hashes = set()
        for seed in seeds:
            plan = replace(copy.deepcopy(plan_base), seed=seed, ablation=row.flags)
            hashes.add(config_hash(plan))
            if seed not in data:
                cfg = replace(synth, seed=seed)
                data[seed] = (generate(cfg, "train"), generate(cfg, "val"))
            train, val = data[seed]
            negatives = None
            if row.flags.needs_mining:
                # mining depends only on the data and the seed, never on the row
                if seed not in mined:
                    mined[seed] = run_mining(train, plan, model_cfg or ModelConfig(), weights or LossWeights())
                negatives = mined[seed]
            run_dir = out_dir / f"row_{row.row_id}" / f"seed_{seed}" if out_dir is not None else None
            report = run_full_pipeline(train, val, plan, model_cfg, weights, augment_cfg, run_dir, negatives)
            row.metrics.append(report.metrics)
            row.seeds.append(seed)
            if log is not None:
                log(f"row ({row.row_id}) seed {seed}: {json.dumps(report.metrics.report(), sort_keys=True)}")
        if len(hashes) != 1:
            raise AblationError(f"row ({row.row_id}) runs differ by more than the seed")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.jsonl").write_text(table.to_jsonl())
        (out_dir / "ablation.txt").write_text(table.format())
        (out_dir / "trends.json").write_text(json.dumps(table.trend_checks(), indent=2) + "\n")
    return table


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m amr.ablation", description="ablation grid on synthetic data")
    parser.add_argument("--rows", default="a,l", help="comma-separated row ids a..l")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
        table = run_table4(StagePlan(), args.rows.split(","), seeds, out_dir=args.out,
                           log=lambda m: print(m, file=sys.stderr))
    except (AblationError, ValueError) as exc:
        print(f"ablation: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(table.to_jsonl())
    sys.stdout.write(table.format())
    for check in table.trend_checks():
        print(f"{check['kind']:4s} {check['check']}: delta={100 * check['delta']:+.2f} points "
              f"{'PASS' if check['passed'] else 'FAIL'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
