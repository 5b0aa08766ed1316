"""Report tables: Table-2 layout, per-word metrics, feature aggregates, confusions."""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURES = ("brightness", "color", "texture", "lines", "shape", "form")
TABLE2_TASKS = ("WC", "MWC", "SL", "CBshape", "CBcolor", "SOMOfar", "SOMOclose")
CONFUSION_TASKS = ("SL", "CBshape", "CBcolor", "SOMOfar", "SOMOclose")


class ReportError(ValueError):
    pass


def fmt(value) -> str:
    """Shortest round-tripping text for a float; empty for missing values."""
    if value is None:
        return ""
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def finite_or_none(value):
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) or math.isinf(value) else value


def read_annotation(path: str | Path) -> dict[int, frozenset[str]]:
    """``word_id,feature`` rows; a word may appear on several rows."""
    out: dict[int, set[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"word_id", "feature"} <= set(reader.fieldnames):
            raise ReportError(f"{path}: expected header word_id,feature")
        for line, row in enumerate(reader, start=2):
            feature = row["feature"].strip().lower()
            if feature not in FEATURES:
                raise ReportError(f"{path}:{line}: unknown feature {feature!r}, expected one of {FEATURES}")
            out.setdefault(int(row["word_id"]), set()).add(feature)
    return {w: frozenset(f) for w, f in out.items()}


def aggregate_by_feature(per_word: Mapping[int, float | None],
                         annotation: Mapping[int, frozenset[str] | set[str]],
                         features: Sequence[str] = FEATURES,
                         warnings: list[str] | None = None) -> dict[str, dict]:
    """Unweighted mean of a per-word metric over the words annotated with each feature.

    Words without a finite metric are ignored. Features left without any word
    are omitted and a warning is recorded.
    """
    out: dict[str, dict] = {}
    for feature in features:
        values = [float(per_word[w]) for w, feats in sorted(annotation.items())
                  if feature in feats and finite_or_none(per_word.get(w)) is not None]
        if not values:
            msg = f"feature {feature!r} has no annotated word with a metric; omitted"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        out[feature] = {"value": float(np.mean(values)), "n_words": len(values)}
    return out


def table2(results: Mapping[str, Mapping[str, Mapping]],
           target: Mapping[str, float] | None = None) -> tuple[list[str], list[list[str]]]:
    """Header and rows: one row per representation, mean validation AUC per task."""
    target = dict(target or {})
    header = ["representation"] + (["Target"] if target else []) + list(TABLE2_TASKS)
    rows = []
    for rep, tasks in results.items():
        row = [rep]
        if target:
            row.append(fmt(target.get(rep)))
        row += [fmt(tasks[t].get("auc")) if t in tasks else "" for t in TABLE2_TASKS]
        rows.append(row)
    return header, rows


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_confusion(matrix, path: str | Path) -> Path:
    m = np.asarray(matrix, dtype=np.float64)
    header = ["true\\pred"] + [str(j) for j in range(m.shape[1])]
    return _write_csv(Path(path), header, [[i, *map(fmt, m[i])] for i in range(m.shape[0])])


def emit_report_tables(results: Mapping[str, Mapping[str, Mapping]], out_dir: str | Path, *,
                       annotation: Mapping[int, frozenset[str]] | None = None,
                       target: Mapping[str, float] | None = None,
                       extra: Mapping | None = None) -> list[Path]:
    """Write every report file under ``out_dir``.

    ``results`` maps representation name to task name to the metrics record
    produced by the probe stage.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not any(results.values()):
        raise ReportError("no probe results to report")
    written = []
    header, rows = table2(results, target)
    written.append(_write_csv(out / "table2.csv", header, rows))

    wc_rows, mwc_rows, bin_rows, base_rows = [], [], [], []
    n_bins = 0
    for rep, tasks in results.items():
        for entry in tasks.get("WC", {}).get("per_word", []):
            wc_rows.append([rep, entry["word"], fmt(entry["auc"]), entry["n_val_pos"]])
        for entry in tasks.get("MWC", {}).get("per_word", []):
            bins = entry.get("bin_auc", [])
            n_bins = max(n_bins, len(bins))
            mwc_rows.append([rep, entry["word"], fmt(entry["auc"]), fmt(entry["attraction"]),
                             *map(fmt, bins)])
            bin_rows += [[rep, entry["word"], i, fmt(v)] for i, v in enumerate(bins)]
        for task in TABLE2_TASKS:
            if task in tasks and "permutation_auc" in tasks[task]:
                base_rows.append([rep, task, fmt(tasks[task]["auc"]),
                                  fmt(tasks[task]["permutation_auc"])])
    written.append(_write_csv(out / "wc_per_word.csv",
                              ["representation", "word_id", "auc", "n_val_pos"], wc_rows))
    written.append(_write_csv(out / "mwc_per_word.csv",
                              ["representation", "word_id", "auc", "attraction",
                               *[f"bin_{i}" for i in range(n_bins)]], mwc_rows))
    written.append(_write_csv(out / "mwc_bins.csv",
                              ["representation", "word_id", "bin", "auc"], bin_rows))
    written.append(_write_csv(out / "baselines.csv",
                              ["representation", "task", "auc", "permutation_auc"], base_rows))

    for rep, tasks in results.items():
        for task in CONFUSION_TASKS:
            if task in tasks and tasks[task].get("confusion") is not None:
                written.append(write_confusion(tasks[task]["confusion"],
                                               out / f"confusion_{rep}_{task}.csv"))

    warnings: list[str] = []
    features: dict[str, dict] = {}
    if annotation is not None:
        feat_rows = []
        for rep, tasks in results.items():
            features[rep] = {}
            for task, metric in (("WC", "auc"), ("MWC", "attraction")):
                if task not in tasks:
                    continue
                per_word = {e["word"]: e[metric] for e in tasks[task]["per_word"]}
                agg = aggregate_by_feature(per_word, annotation, warnings=warnings)
                features[rep][f"{task}_{metric}"] = agg
                feat_rows += [[rep, f"{task}_{metric}", f, fmt(v["value"]), v["n_words"]]
                              for f, v in agg.items()]
        written.append(_write_csv(out / "features.csv",
                                  ["representation", "metric", "feature", "value", "n_words"],
                                  feat_rows))

    summary = {
        "table2": {"header": header, "rows": rows},
        "results": json_safe(results),
        "features": json_safe(features),
        "warnings": warnings,
    }
    if extra:
        summary.update(json_safe(dict(extra)))
    path = out / "report.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)
    return written


def json_safe(obj):
    """JSON-safe copy: NaN and infinities become null, numpy scalars become Python."""
    if isinstance(obj, Mapping):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return finite_or_none(obj)
    return obj
