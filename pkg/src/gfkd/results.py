"""CSV metric logs and the JSON summary with seed-level statistics."""
from __future__ import annotations

import itertools
import json
import os
from collections import OrderedDict
from typing import Dict, List, Mapping, Sequence

import numpy as np

from gfkd.metrics import wilcoxon_signed_rank

FIELDS = (
    "run_id", "phase", "seed", "arm", "labeled_fraction", "patch", "epoch", "split",
    "acc", "miou", "dsc_mean", "hd_mean", "params", "flops",
)
HEADER = ",".join(FIELDS)
METRIC_FIELDS = ("acc", "miou", "dsc_mean", "hd_mean")
_INT_FIELDS = {"seed", "epoch", "params", "flops"}


def format_value(name: str, value) -> str:
    if name in _INT_FIELDS:
        return str(int(value))
    if isinstance(value, str):
        if "," in value or "\n" in value:
            raise ValueError(f"{name}: CSV values may not contain commas or newlines: {value!r}")
        return value
    return format(float(value), ".9g")


def format_row(row: Mapping) -> str:
    missing = [f for f in FIELDS if f not in row]
    if missing:
        raise ValueError(f"result row lacks fields {missing}")
    return ",".join(format_value(f, row[f]) for f in FIELDS)


def check_unique(rows: Sequence[Mapping]) -> None:
    seen = set()
    for r in rows:
        key = (r["run_id"], r["seed"], r["arm"], r["epoch"], r["split"])
        if key in seen:
            raise ValueError(f"duplicate result row {key}")
        seen.add(key)


def write_csv(path: str, rows: Sequence[Mapping]) -> None:
    check_unique(rows)
    text = "".join(line + "\n" for line in [HEADER] + [format_row(r) for r in rows])
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        lines = fh.read().split("\n")
    if lines[0] != HEADER:
        raise ValueError(f"unexpected header in {path}")
    return [dict(zip(FIELDS, ln.split(","))) for ln in lines[1:] if ln]


def final_rows(rows: Sequence[Mapping]) -> List[Mapping]:
    """Last validation row of every run."""
    last: "OrderedDict[str, Mapping]" = OrderedDict()
    for r in rows:
        if r["split"] == "val" and (r["run_id"] not in last or r["epoch"] >= last[r["run_id"]]["epoch"]):
            last[r["run_id"]] = r
    return list(last.values())


def _stats(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def summarize(rows: Sequence[Mapping], metric: str = "miou") -> Dict:
    """Per-arm mean and std, plus paired (by seed) Wilcoxon tests between arms.

    Arms are compared within the same labeled fraction, pairing the seeds both
    arms share. ``p_greater`` tests whether arm ``a`` beats ``b``.
    """
    finals = final_rows(rows)
    groups: "OrderedDict[tuple, List[Mapping]]" = OrderedDict()
    for r in finals:
        groups.setdefault((r["arm"], float(r["labeled_fraction"]), str(r["patch"])), []).append(r)
    arms = []
    for (arm, frac, patch), members in groups.items():
        entry = {"arm": arm, "labeled_fraction": frac, "patch": patch, "seeds": [int(m["seed"]) for m in members]}
        for f in METRIC_FIELDS:
            entry[f] = _stats([float(m[f]) for m in members])
        arms.append(entry)
    comparisons = []
    for (ka, ra), (kb, rb) in itertools.combinations(groups.items(), 2):
        if ka[1] != kb[1]:
            continue
        by_seed_b = {int(m["seed"]): float(m[metric]) for m in rb}
        pairs = [(float(m[metric]), by_seed_b[int(m["seed"])]) for m in ra if int(m["seed"]) in by_seed_b]
        if not pairs:
            continue
        deltas = [a - b for a, b in pairs]
        comparisons.append({
            "a": ka[0], "b": kb[0], "labeled_fraction": ka[1], "patch_a": ka[2], "patch_b": kb[2], "metric": metric,
            "n": len(pairs), "deltas": deltas, "mean_delta": float(np.mean(deltas)),
            "p_two_sided": wilcoxon_signed_rank(pairs),
            "p_greater": wilcoxon_signed_rank(pairs, alternative="greater"),
        })
    return {"metric": metric, "arms": arms, "comparisons": comparisons}


def write_summary(path: str, rows: Sequence[Mapping], metric: str = "miou") -> Dict:
    doc = summarize(rows, metric)
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def write_all(out_dir: str, rows: Sequence[Mapping]) -> Dict:
    """metrics.csv (every epoch), results.csv (final rows) and summary.json."""
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "metrics.csv"), rows)
    write_csv(os.path.join(out_dir, "results.csv"), final_rows(rows))
    return write_summary(os.path.join(out_dir, "summary.json"), rows)


def load_rows(path: str) -> List[Dict]:
    """Read a metrics CSV back into typed rows."""
    out = []
    for r in read_csv(path):
        typed: Dict = {}
        for f in FIELDS:
            v = r[f]
            typed[f] = int(v) if f in _INT_FIELDS else (v if f in ("run_id", "phase", "arm", "patch", "split") else float(v))
        out.append(typed)
    return out
