"""Config-driven, resumable pipeline over a dataset manifest.

Stages run in the fixed order segment, stats, encode, dict, sentences, tasks,
probes, report. Each stage writes into ``<out>/<stage>/`` and finishes by
writing ``stamp.json`` holding a hash of every parameter and upstream hash
that influences it. A stage whose stamp matches is skipped, so re-running an
unchanged config rewrites nothing.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import platform
import re
import shutil
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from . import __version__
from .dictionary import (
    CooccurrenceMatrix, VisualSentence, build_concepts, build_dictionary, build_sentence,
    cooccurrence_matrix, filter_concepts, load_dictionary, read_importance_scores,
    read_sentences, save_dictionary, write_sentences,
)
from .embedding import (
    EmbeddingStore, full_image_patch, read_embedding_store, superpixel_id, toy_encode,
    toy_encode_segmentation, write_embedding_store, TOY_DIM,
)
from .imaging import (
    all_superpixel_stats, load_image, load_label_map, read_stats_csv, save_image,
    save_label_map, slic_segment, write_stats_csv,
)
from .probes import (
    attraction_coefficient, binary_auc, confusion_matrix, ovo_auc, predict_labels,
    predict_scores, save_probe, train_logistic_probe,
)
from .report import emit_report_tables, json_safe, read_annotation
from .tasks import (
    TABLE3_BINS, TASKS, BinSpec, Candidate, SomoInstance, SomoSkip, balance_somo,
    equal_frequency_bins, mwc_build_pairs, mwc_distance_bins, somo_generate, somo_split_plan,
    wc_labels,
)

log = logging.getLogger(__name__)

STAGES = ("segment", "stats", "encode", "dict", "sentences", "tasks", "probes", "report")
DEPENDS = {
    "segment": (),
    "stats": ("segment",),
    "encode": ("segment",),
    "dict": ("encode",),
    "sentences": ("dict",),
    "tasks": ("sentences", "stats"),
    "probes": ("tasks",),
    "report": ("probes",),
}
ENCODERS = ("toy", "bow-oracle", "ingest")
ORACLE_FEATURES = ("presence", "counts", "log-counts")
SPLITS = ("train", "val")

DEFAULT_CONFIG = {
    "seed": 0,
    "workers": 1,
    "out": "out",
    "stages": list(STAGES),
    "data": {"manifest": "manifest.tsv", "image_size": 224},
    "segment": {
        "resolutions": {"coarse": 15, "medium": 50, "fine": 80},
        "compactness_m": 10.0,
        "max_iter": 10,
        "min_size_fraction": 0.25,
    },
    "encode": {
        "dictionary_encoder": "toy",
        "dictionary_store": None,
        "patch_size": 224,
        "fill_policy": "mean-gray",
    },
    "representations": [
        {"name": "toy", "encoder": "toy", "images": None, "superpixels": None,
         "noise_sigma": 0.1, "oracle_features": "presence"},
    ],
    "dictionary": {
        "k_per_class": 25,
        "min_frequency": 10,
        "keep_fraction": 1.0 / 3.0,
        "keep_count": None,
        "importance_scores": None,
        "n_words": 50,
        "max_iter": 300,
        "tol": 1e-8,
        "n_init": 10,
    },
    "sentences": {"length_resolution": "union"},
    "tasks": {
        "enabled": list(TASKS),
        "sl_bins": {"source": "table3", "n_bins": 6, "edges": None},
        "cb_bins": {"source": "table3", "n_bins": 6, "shape_edges": None, "color_edges": None},
        "cb_resolutions": ["coarse", "medium", "fine"],
        "somo": {"resolution": "medium", "quantile": 0.25, "shape_tolerance": 2.0,
                 "sigma_frac": 0.25},
        "mwc": {"n_pairs_train": 4000, "n_pairs_val": 2000, "n_bins": 10},
    },
    "probes": {"C": 1.0, "tol": 1e-6, "max_iter": 1000, "oversample": True,
               "permutation_baseline": True, "permutation_rounds": 10},
    "report": {"annotation": None, "target_accuracy": {}},
}
REPRESENTATION_DEFAULTS = DEFAULT_CONFIG["representations"][0]
# mappings whose keys are user data rather than fixed option names
_FREE_KEYS = {"segment.resolutions", "report.target_accuracy"}
_PATH_KEYS = ("data.manifest", "encode.dictionary_store", "dictionary.importance_scores",
              "report.annotation")
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class PipelineError(RuntimeError):
    pass


class ConfigError(PipelineError):
    pass


class DependencyError(PipelineError):
    pass


# -- config -----------------------------------------------------------------------

def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and path not in _FREE_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _set(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults merged with a YAML file and explicit overrides.

    Relative paths in the file are resolved against the file's directory.
    """
    user: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        user = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base_dir = path.resolve().parent
    reps = user.pop("representations", None)
    cfg = _merge(DEFAULT_CONFIG, user)
    if reps is not None:
        if not isinstance(reps, list) or not reps:
            raise ConfigError("'representations' must be a non-empty list")
        cfg["representations"] = [_merge(REPRESENTATION_DEFAULTS, r, "representations.")
                                  for r in reps]
    for key, value in (overrides or {}).items():
        if value is not None:
            _set(cfg, key, value)

    def resolve(p):
        return None if p is None else str((base_dir / p).resolve())

    for key in _PATH_KEYS:
        _set(cfg, key, resolve(_get(cfg, key)))
    for rep in cfg["representations"]:
        rep["images"] = resolve(rep["images"])
        rep["superpixels"] = resolve(rep["superpixels"])
    if not Path(cfg["out"]).is_absolute():
        cfg["out"] = str((base_dir / cfg["out"]).resolve()) if path is not None else cfg["out"]
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for stage in cfg["stages"]:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; stages are {STAGES}")
    names = [r["name"] for r in cfg["representations"]]
    if len(set(names)) != len(names):
        raise ConfigError(f"representation names must be unique: {names}")
    for rep in cfg["representations"]:
        if not _NAME_RE.match(str(rep["name"])):
            raise ConfigError(f"representation name {rep['name']!r} must match {_NAME_RE.pattern}")
        if rep["encoder"] not in ENCODERS:
            raise ConfigError(f"{rep['name']}: encoder must be one of {ENCODERS}")
        if rep["oracle_features"] not in ORACLE_FEATURES:
            raise ConfigError(f"{rep['name']}: oracle_features must be one of {ORACLE_FEATURES}")
        if rep["encoder"] == "ingest" and not rep["images"]:
            raise ConfigError(f"{rep['name']}: an ingest representation needs an 'images' store")
    if cfg["encode"]["dictionary_encoder"] not in ("toy", "ingest"):
        raise ConfigError("encode.dictionary_encoder must be 'toy' or 'ingest'")
    if cfg["encode"]["dictionary_encoder"] == "ingest" and not cfg["encode"]["dictionary_store"]:
        raise ConfigError("encode.dictionary_store is required when dictionary_encoder is 'ingest'")
    if cfg["encode"]["fill_policy"] not in ("mean-gray", "dataset-mean"):
        raise ConfigError("encode.fill_policy must be 'mean-gray' or 'dataset-mean'")
    res = cfg["segment"]["resolutions"]
    if not res:
        raise ConfigError("segment.resolutions must not be empty")
    for tag in res:
        if not _NAME_RE.match(str(tag)):
            raise ConfigError(f"resolution tag {tag!r} must match {_NAME_RE.pattern}")
    if cfg["tasks"]["somo"]["resolution"] not in res:
        raise ConfigError("tasks.somo.resolution must be one of segment.resolutions")
    for tag in cfg["tasks"]["cb_resolutions"]:
        if tag not in res:
            raise ConfigError(f"tasks.cb_resolutions entry {tag!r} is not a configured resolution")
    lr = cfg["sentences"]["length_resolution"]
    if lr != "union" and lr not in res:
        raise ConfigError("sentences.length_resolution must be 'union' or a resolution tag")
    for task in cfg["tasks"]["enabled"]:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; tasks are {TASKS}")
    for key in ("sl_bins", "cb_bins"):
        if cfg["tasks"][key]["source"] not in ("table3", "equal-frequency", "edges"):
            raise ConfigError(f"tasks.{key}.source must be table3, equal-frequency or edges")


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)


# -- manifest ---------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    path: Path
    class_label: str
    split: str


def read_manifest(path: str | Path, check_paths: bool = True) -> list[ManifestRecord]:
    """Tab-separated ``image_id, path, class, split``; paths relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"manifest {path} does not exist")
    records, seen = [], set()
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        fields = raw.split("\t")
        if len(fields) != 4:
            raise PipelineError(f"{path}:{n}: expected 4 tab-separated fields, got {len(fields)}")
        image_id, rel, cls, split = (f.strip() for f in fields)
        if image_id in seen:
            raise PipelineError(f"{path}:{n}: duplicate image id {image_id!r}")
        if split not in SPLITS:
            raise PipelineError(f"{path}:{n}: split must be train or val, got {split!r}")
        if "/" in image_id or "|" in image_id:
            raise PipelineError(f"{path}:{n}: image id {image_id!r} may not contain '/' or '|'")
        file = (path.parent / rel).resolve()
        if check_paths and not file.exists():
            raise PipelineError(f"{path}:{n}: image file {file} not found")
        seen.add(image_id)
        records.append(ManifestRecord(image_id, file, cls, split))
    for split in SPLITS:
        if not any(r.split == split for r in records):
            raise PipelineError(f"{path}: the {split} split is empty")
    return records


# -- helpers ------------------------------------------------------------------------

def stage_seed(seed: int, *parts) -> int:
    """Deterministic sub-seed for one purpose, independent of call order."""
    return zlib.crc32(":".join(str(p) for p in (seed, *parts)).encode("utf-8"))


def params_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def file_digest(path: str | Path | None) -> str | None:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
    return [fn(item) for item in items]


def _segment_job(args) -> dict[str, np.ndarray]:
    pixels, resolutions, seg_cfg = args
    out = {}
    for tag, n in resolutions.items():
        step2 = pixels.shape[0] * pixels.shape[1] / n
        seg = slic_segment(pixels, int(n), seg_cfg["compactness_m"], seg_cfg["max_iter"],
                           min_size=max(1, int(step2 * seg_cfg["min_size_fraction"])),
                           resolution_tag=tag)
        out[tag] = seg.labels
    return out


def _encode_job(args) -> dict[str, np.ndarray]:
    pixels, label_maps, patch_size, fill_policy, fill = args
    return {tag: toy_encode_segmentation(pixels, labels, patch_size, fill_policy, fill)
            for tag, labels in label_maps.items()}


def word_counts(words: Iterable[int], n_words: int) -> np.ndarray:
    counts = np.zeros(n_words)
    for w in words:
        counts[w] += 1
    return counts


def oracle_vector(words: Iterable[int], n_words: int, sigma: float, seed: int,
                  entity_id: str, features: str = "presence") -> np.ndarray:
    """Bag-of-words vector plus N(0, sigma^2) noise seeded by the entity id.

    ``features`` picks the term weighting: ``presence`` (1 if the word occurs),
    ``counts`` (superpixels per word) or ``log-counts`` (log(1 + count)).
    """
    counts = word_counts(words, n_words)
    if features == "presence":
        counts = (counts > 0).astype(np.float64)
    elif features == "log-counts":
        counts = np.log1p(counts)
    elif features != "counts":
        raise ValueError(f"unknown oracle features {features!r}")
    rng = np.random.default_rng([seed, zlib.crc32(entity_id.encode("utf-8"))])
    return counts + rng.normal(0.0, sigma, n_words)


# -- pipeline -----------------------------------------------------------------------

class Pipeline:
    """One output directory driven by one config."""

    def __init__(self, config: dict, out_dir: str | Path | None = None):
        self.cfg = config
        self.out = Path(out_dir if out_dir is not None else config["out"])
        self.seed = int(config["seed"])
        self.workers = int(config["workers"])
        self._records: list[ManifestRecord] | None = None
        self._stats = None

    # -- inputs ----------------------------------------------------------------
    @property
    def records(self) -> list[ManifestRecord]:
        if self._records is None:
            self._records = read_manifest(self.cfg["data"]["manifest"])
        return self._records

    @property
    def resolutions(self) -> dict[str, int]:
        return dict(self.cfg["segment"]["resolutions"])

    def ids(self, split: str | None = None) -> list[str]:
        return [r.image_id for r in self.records if split is None or r.split == split]

    def split_of(self) -> dict[str, str]:
        return {r.image_id: r.split for r in self.records}

    def image(self, image_id: str) -> np.ndarray:
        rec = next(r for r in self.records if r.image_id == image_id)
        return self._load(rec)

    def _load(self, rec: ManifestRecord) -> np.ndarray:
        return load_image(rec.path, self.cfg["data"]["image_size"])

    def label_map(self, image_id: str, tag: str) -> np.ndarray:
        return load_label_map(self.out / "segment" / "labels" / f"{image_id}.{tag}.png")

    def rep_images_path(self, rep: dict) -> Path:
        stage = "sentences" if rep["encoder"] == "bow-oracle" else "encode"
        return self.out / stage / f"{rep['name']}.images.vpeb"

    def rep_superpixels_path(self, rep: dict) -> Path:
        return self.out / "encode" / f"{rep['name']}.superpixels.vpeb"

    # -- hashing and stamps ----------------------------------------------------------
    def _own_params(self, stage: str, task: str | None = None):
        c = self.cfg
        if stage == "segment":
            return {"data": {"image_size": c["data"]["image_size"],
                             "manifest": file_digest(c["data"]["manifest"])},
                    "segment": c["segment"], "seed": self.seed}
        if stage == "stats":
            return {}
        if stage == "encode":
            reps = [{**r, "images": file_digest(r["images"]),
                     "superpixels": file_digest(r["superpixels"])}
                    for r in c["representations"]]
            return {"encode": {**c["encode"],
                               "dictionary_store": file_digest(c["encode"]["dictionary_store"])},
                    "representations": reps}
        if stage == "dict":
            return {"dictionary": {**c["dictionary"], "importance_scores":
                                   file_digest(c["dictionary"]["importance_scores"])},
                    "seed": self.seed}
        if stage == "sentences":
            return {"sentences": c["sentences"], "seed": self.seed}
        if stage == "tasks":
            return {"tasks": c["tasks"], "task": task, "seed": self.seed}
        if stage == "probes":
            return {"probes": c["probes"], "task": task, "seed": self.seed}
        if stage == "report":
            return {"report": {**c["report"], "annotation": file_digest(c["report"]["annotation"])},
                    "tasks": c["tasks"]["enabled"]}
        raise PipelineError(f"unknown stage {stage!r}")

    def stage_hash(self, stage: str, task: str | None = None) -> str:
        if stage in ("tasks", "probes") and task is None:
            return params_hash([self.stage_hash(stage, t) for t in self.cfg["tasks"]["enabled"]])
        if stage == "probes":
            upstream = [self.stage_hash("tasks", task)]
        elif stage == "tasks":
            upstream = [self.stage_hash(d) for d in DEPENDS["tasks"]]
        else:
            upstream = [self.stage_hash(d) for d in DEPENDS[stage]]
        return params_hash({"stage": stage, "own": self._own_params(stage, task),
                            "upstream": upstream, "version": __version__})

    def _stamp_path(self, stage: str, task: str | None = None) -> Path:
        if task is not None:
            return self.out / stage / task / "stamp.json"
        return self.out / stage / "stamp.json"

    def is_fresh(self, stage: str, task: str | None = None) -> bool:
        if stage in ("tasks", "probes") and task is None:
            return all(self.is_fresh(stage, t) for t in self.cfg["tasks"]["enabled"])
        path = self._stamp_path(stage, task)
        if not path.exists():
            return False
        return _read_json(path).get("hash") == self.stage_hash(stage, task)

    def _write_stamp(self, stage: str, task: str | None = None, **extra) -> None:
        stamp = {"stage": stage, "hash": self.stage_hash(stage, task), **extra}
        if task is not None:
            stamp["task"] = task
        _write_json(self._stamp_path(stage, task), stamp)

    def _upstream_missing(self, stage: str, task: str | None = None) -> str | None:
        """Earliest stage in the dependency chain that is missing or stale."""
        if stage == "probes" and task is not None:
            needed = ["tasks"]
        else:
            needed = list(DEPENDS[stage])
        for dep in needed:
            dep_task = task if (stage == "probes" and dep == "tasks") else None
            if not self.is_fresh(dep, dep_task):
                deeper = self._upstream_missing(dep, dep_task)
                if deeper is not None:
                    return deeper
                return dep if dep_task is None else f"tasks {dep_task}"
        return None

    def require(self, stage: str, task: str | None = None) -> None:
        missing = self._upstream_missing(stage, task)
        if missing is not None:
            what = stage if task is None else f"{stage} {task}"
            raise DependencyError(
                f"stage '{what}' needs stage '{missing}' (missing or out of date); run it first")

    # -- running ------------------------------------------------------------------
    def run(self, stages: Sequence[str] | None = None, tasks: Sequence[str] | None = None,
            force: bool = False) -> dict[str, str]:
        """Run the requested stages in dependency order; returns stage -> ran/cached."""
        requested = list(self.cfg["stages"] if stages is None else stages)
        for s in requested:
            if s not in STAGES:
                raise PipelineError(f"unknown stage {s!r}")
        status = {}
        self.out.mkdir(parents=True, exist_ok=True)
        for stage in STAGES:
            if stage not in requested:
                continue
            if stage in ("tasks", "probes"):
                names = list(self.cfg["tasks"]["enabled"] if tasks is None else tasks)
                for t in names:
                    if t not in self.cfg["tasks"]["enabled"]:
                        raise PipelineError(f"task {t!r} is not enabled in the config")
                    key = f"{stage} {t}"
                    if not force and self.is_fresh(stage, t):
                        status[key] = "cached"
                        continue
                    self.require(stage, t)
                    log.info("running %s", key)
                    getattr(self, f"_stage_{stage}")(t)
                    self._write_stamp(stage, t)
                    status[key] = "ran"
                continue
            if not force and self.is_fresh(stage):
                status[stage] = "cached"
                continue
            self.require(stage)
            log.info("running %s", stage)
            stage_dir = self.out / stage
            if stage_dir.exists():
                shutil.rmtree(stage_dir)
            stage_dir.mkdir(parents=True)
            getattr(self, f"_stage_{stage}")()
            self._write_stamp(stage)
            status[stage] = "ran"
        self.write_run_log()
        return status

    def write_run_log(self) -> Path:
        import PIL
        import scipy
        stages = {}
        for stage in STAGES:
            if stage in ("tasks", "probes"):
                for t in self.cfg["tasks"]["enabled"]:
                    p = self._stamp_path(stage, t)
                    if p.exists():
                        stages[f"{stage} {t}"] = _read_json(p)["hash"]
            elif self._stamp_path(stage).exists():
                stages[stage] = _read_json(self._stamp_path(stage))["hash"]
        warnings = []
        wpath = self.out / "dict" / "warnings.txt"
        if wpath.exists():
            warnings = [w for w in wpath.read_text(encoding="utf-8").splitlines() if w]
        log_obj = {
            "seed": self.seed,
            "seeds": {"concepts": stage_seed(self.seed, "concepts"),
                      "words": stage_seed(self.seed, "words")},
            "config_hash": params_hash({k: v for k, v in self.cfg.items()
                                        if k not in ("out", "workers", "stages")}),
            "stages": stages,
            "versions": {"visprobe": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "pillow": PIL.__version__, "pyyaml": yaml.__version__},
            "warnings": warnings,
        }
        path = self.out / "run_log.json"
        _write_json(path, log_obj)
        return path

    # -- segment / stats ---------------------------------------------------------------
    def _stage_segment(self) -> None:
        d = self.out / "segment" / "labels"
        d.mkdir(parents=True)
        jobs = [(self._load(r), self.resolutions, self.cfg["segment"]) for r in self.records]
        rows = []
        for rec, maps in zip(self.records, _map(_segment_job, jobs, self.workers)):
            for tag, labels in maps.items():
                save_label_map(labels, d / f"{rec.image_id}.{tag}.png")
                rows.append([rec.image_id, tag, self.resolutions[tag], int(labels.max()) + 1])
        _write_rows(self.out / "segment" / "counts.csv",
                    ["image_id", "resolution", "requested", "actual"], rows)

    def _stage_stats(self) -> None:
        rows = []
        for rec in self.records:
            pixels = self._load(rec)
            for tag in self.resolutions:
                for st in all_superpixel_stats(pixels, self.label_map(rec.image_id, tag)):
                    rows.append((rec.image_id, tag, st))
        write_stats_csv(rows, self.out / "stats" / "stats.csv")

    def stats(self):
        if self._stats is None:
            self._stats = read_stats_csv(self.out / "stats" / "stats.csv")
        return self._stats

    # -- encode ------------------------------------------------------------------------
    def fill_colour(self) -> tuple[int, int, int] | None:
        path = self.out / "encode" / "fill.json"
        if path.exists():
            fill = _read_json(path)["fill"]
            return None if fill is None else tuple(fill)
        return None

    def superpixel_ids(self) -> list[str]:
        ids = []
        for rec in self.records:
            for tag in self.resolutions:
                n = int(self.label_map(rec.image_id, tag).max()) + 1
                ids += [superpixel_id(rec.image_id, tag, lab) for lab in range(n)]
        return ids

    def _toy_superpixel_codes(self) -> dict[str, np.ndarray]:
        enc = self.cfg["encode"]
        fill = self.fill_colour()
        jobs = []
        for rec in self.records:
            maps = {tag: self.label_map(rec.image_id, tag) for tag in self.resolutions}
            jobs.append((self._load(rec), maps, enc["patch_size"], enc["fill_policy"], fill))
        codes = {}
        for rec, per_tag in zip(self.records, _map(_encode_job, jobs, self.workers)):
            for tag, mat in per_tag.items():
                for lab, vec in enumerate(mat):
                    codes[superpixel_id(rec.image_id, tag, lab)] = vec
        return codes

    def _ingest(self, path: str, role: str, ids: Sequence[str], what: str) -> EmbeddingStore:
        store = read_embedding_store(path, expected_role=role)
        missing = [i for i in ids if i not in store]
        if missing:
            raise PipelineError(f"{what} store {path} lacks {len(missing)} of {len(ids)} ids "
                                f"(first: {missing[:3]})")
        return store

    def _stage_encode(self) -> None:
        enc = self.cfg["encode"]
        d = self.out / "encode"
        fill = None
        if enc["fill_policy"] == "dataset-mean":
            total = np.zeros(3)
            count = 0
            for rec in self.records:
                if rec.split == "train":
                    px = self._load(rec).reshape(-1, 3)
                    total += px.sum(axis=0)
                    count += len(px)
            fill = [int(v) for v in np.rint(total / count)]
        _write_json(d / "fill.json", {"fill": fill})

        sp_ids = self.superpixel_ids()
        codes = None
        needs_toy = enc["dictionary_encoder"] == "toy" or any(
            r["encoder"] in ("toy", "bow-oracle") and not r["superpixels"]
            for r in self.cfg["representations"])
        if needs_toy:
            codes = self._toy_superpixel_codes()
        if enc["dictionary_encoder"] == "toy":
            store = EmbeddingStore("dictionary", TOY_DIM, {i: codes[i] for i in sp_ids}, "toy-37")
        else:
            src = self._ingest(enc["dictionary_store"], "dictionary", sp_ids, "dictionary")
            store = EmbeddingStore("dictionary", src.dim, {i: src[i] for i in sp_ids})
        write_embedding_store(store, d / "dictionary.vpeb")

        for rep in self.cfg["representations"]:
            name = rep["name"]
            if rep["superpixels"]:
                src = self._ingest(rep["superpixels"], "representation", sp_ids,
                                   f"{name} superpixel")
                sp = EmbeddingStore("representation", src.dim, {i: src[i] for i in sp_ids})
            elif rep["encoder"] in ("toy", "bow-oracle"):
                sp = EmbeddingStore("representation", TOY_DIM, {i: codes[i] for i in sp_ids})
            else:
                sp = None
            if sp is not None:
                write_embedding_store(sp, self.rep_superpixels_path(rep))
            if rep["encoder"] == "toy":
                images = EmbeddingStore("representation", TOY_DIM)
                for rec in self.records:
                    images.add(rec.image_id, toy_encode(full_image_patch(self._load(rec),
                                                                         enc["patch_size"])))
                write_embedding_store(images, self.rep_images_path(rep))
            elif rep["encoder"] == "ingest":
                src = self._ingest(rep["images"], "representation", self.ids(), f"{name} image")
                # keep every entry so externally encoded altered SOMO images stay available
                write_embedding_store(EmbeddingStore("representation", src.dim, dict(src.entries)),
                                      self.rep_images_path(rep))

    # -- dictionary ---------------------------------------------------------------------
    def _stage_dict(self) -> None:
        dc = self.cfg["dictionary"]
        store = read_embedding_store(self.out / "encode" / "dictionary.vpeb",
                                     expected_role="dictionary")
        train = set(self.ids("train"))
        train_store = EmbeddingStore("dictionary", store.dim,
                                     {k: v for k, v in store.entries.items()
                                      if k.split("/", 1)[0] in train})
        class_of = {r.image_id: r.class_label for r in self.records}
        warnings: list[str] = []
        concepts = build_concepts(train_store, class_of, dc["k_per_class"],
                                  seed=stage_seed(self.seed, "concepts"), max_iter=dc["max_iter"],
                                  tol=dc["tol"], n_init=dc["n_init"], warnings=warnings)
        scores = None
        if dc["importance_scores"]:
            scores = read_importance_scores(dc["importance_scores"])
        survivors = filter_concepts(concepts, dc["min_frequency"], scores)
        keep = dc["keep_count"]
        if keep is None:
            keep = min(len(survivors), max(dc["n_words"], math.ceil(dc["keep_fraction"] * len(survivors))))
        kept = filter_concepts(concepts, dc["min_frequency"], scores, keep_count=keep)
        dictionary = build_dictionary(kept, dc["n_words"], seed=stage_seed(self.seed, "words"),
                                      max_iter=dc["max_iter"], tol=dc["tol"], n_init=dc["n_init"])
        save_dictionary(dictionary, self.out / "dict")
        (self.out / "dict" / "warnings.txt").write_text("".join(w + "\n" for w in warnings),
                                                        encoding="utf-8")
        _write_json(self.out / "dict" / "summary.json",
                    {"n_concepts": len(concepts), "n_survivors": len(survivors),
                     "keep_count": keep, "n_words": dictionary.n_words})

    def dictionary(self):
        return load_dictionary(self.out / "dict")

    # -- sentences ----------------------------------------------------------------------
    def _stage_sentences(self) -> None:
        dictionary = self.dictionary()
        store = read_embedding_store(self.out / "encode" / "dictionary.vpeb",
                                     expected_role="dictionary")
        ids = store.ids()
        words = dictionary.assign(store.matrix(ids))
        per_image: dict[str, dict[tuple[str, int], int]] = {}
        for entity, w in zip(ids, words):
            image_id, tag, lab = entity.rsplit("/", 2)
            per_image.setdefault(image_id, {})[(tag, int(lab))] = int(w)
        sentences = [build_sentence(r.image_id, per_image.get(r.image_id, {})) for r in self.records]
        write_sentences(sentences, self.out / "sentences" / "sentences.csv")
        n_words = dictionary.n_words
        cooc = cooccurrence_matrix([s for s, r in zip(sentences, self.records)
                                    if r.split == "train"], n_words)
        np.savetxt(self.out / "sentences" / "cooccurrence.csv", cooc.counts, fmt="%d",
                   delimiter=",", header=f"n_images={cooc.n_images}")
        for rep in self.cfg["representations"]:
            if rep["encoder"] != "bow-oracle":
                continue
            oracle = EmbeddingStore("representation", n_words, encoder_name="bow-oracle")
            for s in sentences:
                oracle.add(s.image_id, oracle_vector(s.assignments.values(), n_words,
                                                     rep["noise_sigma"],
                                                     stage_seed(self.seed, "oracle", rep["name"]),
                                                     s.image_id, rep["oracle_features"]))
            write_embedding_store(oracle, self.rep_images_path(rep))

    def sentences(self) -> dict[str, VisualSentence]:
        return read_sentences(self.out / "sentences" / "sentences.csv")

    def cooccurrence(self) -> CooccurrenceMatrix:
        path = self.out / "sentences" / "cooccurrence.csv"
        with open(path, encoding="utf-8") as fh:
            n_images = int(fh.readline().split("=", 1)[1])
        counts = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
        return CooccurrenceMatrix(counts, n_images)

    # -- tasks -----------------------------------------------------------------------------
    def _stage_tasks(self, task: str) -> None:
        d = self.out / "tasks" / task
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        if task == "WC":
            self._task_wc(d)
        elif task == "SL":
            self._task_sl(d)
        elif task in ("CBshape", "CBcolor"):
            self._task_cb(d, task)
        elif task in ("SOMOfar", "SOMOclose"):
            self._task_somo(d, task, "far" if task == "SOMOfar" else "close")
        elif task == "MWC":
            self._task_mwc(d)
        else:
            raise PipelineError(f"unknown task {task!r}")

    def _write_dataset(self, d: Path, task: str, inputs: EmbeddingStore,
                       targets: list[tuple], split: dict[str, str]) -> None:
        d.mkdir(parents=True, exist_ok=True)
        write_embedding_store(inputs, d / "inputs.vpeb")
        has_index = any(len(t) == 3 for t in targets)
        header = ["entity_id", "task", "label"] + (["label_index"] if has_index else [])
        _write_rows(d / "targets.csv", header,
                    [(t[0], task, *t[1:]) for t in targets])
        _write_rows(d / "split.csv", ["entity_id", "split"], sorted(split.items()))

    def _skip(self, d: Path, reason: str) -> None:
        d.mkdir(parents=True, exist_ok=True)
        (d / "skipped.txt").write_text(reason + "\n", encoding="utf-8")
        log.warning("%s: %s", d, reason)

    def _image_store(self, rep: dict) -> EmbeddingStore:
        return read_embedding_store(self.rep_images_path(rep), expected_role="representation")

    def _subset(self, store: EmbeddingStore, ids: Sequence[str]) -> EmbeddingStore:
        return EmbeddingStore("representation", store.dim, {i: store[i] for i in ids})

    def _task_wc(self, d: Path) -> None:
        sentences = self.sentences()
        n_words = self.dictionary().n_words
        split = self.split_of()
        targets = []
        for image_id in self.ids():
            flags = wc_labels(sentences[image_id], n_words)
            targets += [(image_id, int(f), w) for w, f in enumerate(flags)]
        for rep in self.cfg["representations"]:
            self._write_dataset(d / rep["name"], "WC", self._subset(self._image_store(rep), self.ids()),
                                targets, split)

    def _bins(self, spec: dict, key: str, train_values: Sequence[float], table3: BinSpec) -> BinSpec:
        if spec["source"] == "table3":
            return table3
        if spec["source"] == "edges":
            edges = spec[key]
            if not edges:
                raise PipelineError(f"bin source 'edges' needs explicit '{key}'")
            return BinSpec(tuple(float(e) for e in edges), "edges")
        return equal_frequency_bins(train_values, spec["n_bins"])

    def _task_sl(self, d: Path) -> None:
        sentences = self.sentences()
        res = self.cfg["sentences"]["length_resolution"]
        res = None if res == "union" else res
        lengths = {i: sentences[i].length_at(res) for i in self.ids()}
        bins = self._bins(self.cfg["tasks"]["sl_bins"], "edges",
                          [lengths[i] for i in self.ids("train")], TABLE3_BINS["SL"])
        _write_json(d / "bins.json", {"edges": list(bins.edges), "source": bins.source})
        targets = [(i, int(bins(lengths[i]))) for i in self.ids()]
        split = self.split_of()
        for rep in self.cfg["representations"]:
            self._write_dataset(d / rep["name"], "SL", self._subset(self._image_store(rep), self.ids()),
                                targets, split)

    def _task_cb(self, d: Path, task: str) -> None:
        stats = self.stats()
        split_of = self.split_of()
        tags = self.cfg["tasks"]["cb_resolutions"]
        order = {i: n for n, i in enumerate(self.ids())}
        keys = sorted((k for k in stats if k[1] in tags),
                      key=lambda k: (order[k[0]], tags.index(k[1]), k[2]))
        attr = "co" if task == "CBshape" else "icv"
        values = {k: getattr(stats[k], attr) for k in keys}
        spec = self.cfg["tasks"]["cb_bins"]
        bins = self._bins(spec, "shape_edges" if task == "CBshape" else "color_edges",
                          [values[k] for k in keys if split_of[k[0]] == "train"],
                          TABLE3_BINS[task])
        _write_json(d / "bins.json", {"edges": list(bins.edges), "source": bins.source})
        ids = [superpixel_id(*k) for k in keys]
        targets = [(superpixel_id(*k), int(bins(values[k]))) for k in keys]
        split = {superpixel_id(*k): split_of[k[0]] for k in keys}
        for rep in self.cfg["representations"]:
            path = self.rep_superpixels_path(rep)
            if not path.exists():
                self._skip(d / rep["name"], "no superpixel-level representation store")
                continue
            store = read_embedding_store(path, expected_role="representation")
            self._write_dataset(d / rep["name"], task, self._subset(store, ids), targets, split)

    # SOMO ---------------------------------------------------------------------------
    def _candidates(self, image_ids: Sequence[str], tag: str,
                    sentences: dict[str, VisualSentence]) -> list[Candidate]:
        stats = self.stats()
        out = []
        for image_id in image_ids:
            pixels = self.image(image_id)
            n = int(self.label_map(image_id, tag).max()) + 1
            for lab in range(n):
                st = stats[(image_id, tag, lab)]
                x0, y0, x1, y1 = st.bbox
                out.append(Candidate(image_id, tag, lab, sentences[image_id].assignments[(tag, lab)],
                                     st.area, pixels[y0:y1 + 1, x0:x1 + 1].copy()))
        return out

    def _task_somo(self, d: Path, task: str, mode: str) -> None:
        somo = self.cfg["tasks"]["somo"]
        tag = somo["resolution"]
        sentences = self.sentences()
        cooc = self.cooccurrence()
        (d / "images").mkdir()
        instances: list[tuple[SomoInstance, str]] = []
        skipped = []
        for split in SPLITS:
            ids = self.ids(split)
            candidates = self._candidates(ids, tag, sentences)
            alter, intact = somo_split_plan(ids, stage_seed(self.seed, "somo-plan", mode, split))
            altered = []
            for base in alter:
                labels = self.label_map(base, tag)
                words = {lab: w for (t, lab), w in sentences[base].assignments.items() if t == tag}
                inst = somo_generate(self.image(base), labels, words, cooc, candidates, mode,
                                     somo["quantile"], somo["shape_tolerance"], somo["sigma_frac"],
                                     seed=stage_seed(self.seed, "somo-target", mode, base),
                                     image_id=base, resolution=tag)
                if isinstance(inst, SomoSkip):
                    skipped.append((inst.base_image_id, split, inst.reason))
                else:
                    altered.append(inst)
            images = {i: self.image(i) for i in intact}
            for inst in balance_somo(altered, intact, images, mode):
                instances.append((inst, split))
        prov = []
        for inst, split in instances:
            if inst.altered:
                save_image(inst.pixels, d / "images" / f"{inst.instance_id}.png")
                src = inst.replacement_source
                prov.append([inst.instance_id, inst.base_image_id, split, 1, inst.target[0],
                             inst.target[1], inst.target_word, src[0], src[1], src[2],
                             inst.replacement_word])
            else:
                prov.append([inst.instance_id, inst.base_image_id, split, 0, "", "", "", "", "", "", ""])
        _write_rows(d / "provenance.csv",
                    ["instance_id", "base_image_id", "split", "altered", "target_resolution",
                     "target_label", "target_word", "source_image", "source_resolution",
                     "source_label", "replacement_word"], prov)
        _write_rows(d / "skipped.csv", ["base_image_id", "split", "reason"], skipped)

        split = {inst.instance_id: s for inst, s in instances}
        targets = [(inst.instance_id, int(inst.altered)) for inst, _ in instances]
        for rep in self.cfg["representations"]:
            store, reason = self._somo_inputs(rep, [inst for inst, _ in instances])
            if store is None:
                self._skip(d / rep["name"], reason)
                continue
            self._write_dataset(d / rep["name"], task, store, targets, split)

    def _somo_inputs(self, rep: dict, instances: Sequence[SomoInstance]):
        base = self._image_store(rep)
        enc = self.cfg["encode"]
        store = EmbeddingStore("representation", base.dim)
        dictionary = None
        for inst in instances:
            if not inst.altered:
                store.add(inst.instance_id, base[inst.base_image_id])
                continue
            if rep["encoder"] == "ingest":
                if inst.instance_id not in base:
                    return None, (f"ingested store has no entry for altered image "
                                  f"{inst.instance_id!r}; encode the PNGs under tasks/*/images")
                store.add(inst.instance_id, base[inst.instance_id])
            elif rep["encoder"] == "toy":
                store.add(inst.instance_id, toy_encode(full_image_patch(inst.pixels,
                                                                        enc["patch_size"])))
            else:
                if enc["dictionary_encoder"] != "toy":
                    return None, "bow-oracle re-encoding of altered images needs the toy dictionary encoder"
                if dictionary is None:
                    dictionary = self.dictionary()
                maps = _segment_job((inst.pixels, self.resolutions, self.cfg["segment"]))
                codes = _encode_job((inst.pixels, maps, enc["patch_size"], enc["fill_policy"],
                                     self.fill_colour()))
                words = [int(w) for tag in self.resolutions for w in dictionary.assign(codes[tag])]
                store.add(inst.instance_id,
                          oracle_vector(words, dictionary.n_words, rep["noise_sigma"],
                                        stage_seed(self.seed, "oracle", rep["name"]),
                                        inst.instance_id, rep["oracle_features"]))
        return store, ""

    # MWC -----------------------------------------------------------------------------
    def _task_mwc(self, d: Path) -> None:
        mc = self.cfg["tasks"]["mwc"]
        sentences = self.sentences()
        n_words = self.dictionary().n_words
        for rep in self.cfg["representations"]:
            store = self._image_store(rep)
            train = mwc_build_pairs(self.ids("train"), store, sentences, mc["n_pairs_train"],
                                    stage_seed(self.seed, "mwc", "train"), n_words)
            val = mwc_build_pairs(self.ids("val"), store, sentences, mc["n_pairs_val"],
                                  stage_seed(self.seed, "mwc", "val"), n_words)
            val = mwc_distance_bins(val, mc["n_bins"])
            inputs = EmbeddingStore("representation", 2 * store.dim)
            targets, split, rows = [], {}, []
            for p in train:
                for a, b in ((p.image_a, p.image_b), (p.image_b, p.image_a)):
                    eid = f"{a}|{b}"
                    inputs.add(eid, np.concatenate([store[a], store[b]]))
                    targets += [(eid, int(v), w) for w, v in enumerate(p.labels)]
                    split[eid] = "train"
                    rows.append([eid, a, b, "train", repr(p.cosine_distance), -1])
            for p in val:
                inputs.add(p.entity_id, np.concatenate([store[p.image_a], store[p.image_b]]))
                targets += [(p.entity_id, int(v), w) for w, v in enumerate(p.labels)]
                split[p.entity_id] = "val"
                rows.append([p.entity_id, p.image_a, p.image_b, "val", repr(p.cosine_distance),
                             p.distance_bin])
            self._write_dataset(d / rep["name"], "MWC", inputs, targets, split)
            _write_rows(d / rep["name"] / "pairs.csv",
                        ["entity_id", "image_a", "image_b", "split", "distance", "bin"], rows)

    # -- probes ---------------------------------------------------------------------------
    def _stage_probes(self, task: str) -> None:
        d = self.out / "probes" / task
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        for rep in self.cfg["representations"]:
            src = self.out / "tasks" / task / rep["name"]
            out = d / rep["name"]
            out.mkdir()
            if (src / "skipped.txt").exists():
                reason = (src / "skipped.txt").read_text(encoding="utf-8").strip()
                _write_json(out / "metrics.json", {"task": task, "skipped": reason, "auc": None})
                continue
            dataset = load_dataset(src)
            metrics = self._probe(task, rep["name"], dataset, out)
            _write_json(out / "metrics.json", json_safe(metrics))

    def _probe_kwargs(self) -> dict:
        pc = self.cfg["probes"]
        return {"C": pc["C"], "tol": pc["tol"], "max_iter": pc["max_iter"],
                "oversample": pc["oversample"]}

    def _probe(self, task: str, rep: str, ds: "ProbingDataset", out: Path) -> dict:
        kw = self._probe_kwargs()
        if task in ("WC", "MWC"):
            bins = None
            if task == "MWC":
                pairs = _read_rows(self.out / "tasks" / task / rep / "pairs.csv")
                bin_of = {r["entity_id"]: int(r["bin"]) for r in pairs}
                bins = np.array([bin_of[e] for e in ds.ids("val")])
            (out / "models").mkdir()
            per_word = per_word_probes(ds, task, kw, lambda w: stage_seed(self.seed, "probe", rep,
                                                                          task, w),
                                       model_dir=out / "models", bins=bins,
                                       n_bins=self.cfg["tasks"]["mwc"]["n_bins"])
            metrics = {"task": task, "auc": mean_auc(per_word), "per_word": per_word}
            if task == "WC" and self.cfg["probes"]["permutation_baseline"]:
                # averaged over rounds: word labels are correlated, one shuffle is noisy
                rounds = []
                for r in range(self.cfg["probes"]["permutation_rounds"]):
                    perm = per_word_probes(ds.permuted(stage_seed(self.seed, "permute", rep, r)),
                                           task, kw, lambda w: stage_seed(self.seed, "probe-perm",
                                                                          rep, task, w, r))
                    rounds.append(mean_auc(perm))
                metrics["permutation_rounds"] = rounds
                metrics["permutation_auc"] = mean_auc([{"auc": v} for v in rounds])
            return metrics
        x_tr, y_tr = ds.arrays("train")
        x_val, y_val = ds.arrays("val")
        model = train_logistic_probe(x_tr, y_tr, seed=stage_seed(self.seed, "probe", rep, task),
                                     task=task, **kw)
        save_probe(model, out / "model.csv")
        n_classes = 2 if task.startswith("SOMO") else self._n_bins(task)
        pred = predict_labels(model, x_val)
        metrics = {"task": task, "confusion": confusion_matrix(pred, y_val, n_classes).tolist(),
                   "converged": model.converged, "iterations": model.iterations,
                   "n_train": int(len(y_tr)), "n_val": int(len(y_val))}
        scores = predict_scores(model, x_val)
        if task.startswith("SOMO"):
            metrics["auc"] = binary_auc(scores[:, 1], y_val == model.classes[1])
        else:
            keep = np.isin(y_val, model.classes)
            metrics["auc"] = ovo_auc(scores[keep], y_val[keep], model.classes)
            metrics["classes"] = [int(c) for c in model.classes]
        return metrics

    def _n_bins(self, task: str) -> int:
        return len(_read_json(self.out / "tasks" / task / "bins.json")["edges"]) + 1

    # -- report ----------------------------------------------------------------------------
    def collect_results(self) -> dict[str, dict[str, dict]]:
        results = {}
        for rep in self.cfg["representations"]:
            results[rep["name"]] = {}
            for task in self.cfg["tasks"]["enabled"]:
                path = self.out / "probes" / task / rep["name"] / "metrics.json"
                if path.exists():
                    m = _read_json(path)
                    if "skipped" not in m:
                        results[rep["name"]][task] = m
        return results

    def _stage_report(self) -> None:
        rc = self.cfg["report"]
        annotation = read_annotation(rc["annotation"]) if rc["annotation"] else None
        skipped = {}
        for rep in self.cfg["representations"]:
            for task in self.cfg["tasks"]["enabled"]:
                path = self.out / "probes" / task / rep["name"] / "metrics.json"
                if path.exists() and "skipped" in _read_json(path):
                    skipped[f"{rep['name']} {task}"] = _read_json(path)["skipped"]
        emit_report_tables(self.collect_results(), self.out / "report", annotation=annotation,
                           target=rc["target_accuracy"] or None, extra={"skipped": skipped})


# -- datasets and probe loops --------------------------------------------------------------

@dataclass
class ProbingDataset:
    """Inputs, targets and split of one persisted task for one representation."""

    task: str
    inputs: EmbeddingStore
    targets: dict[str, dict[int, int]]  # entity -> label_index -> label (index -1 if single)
    split: dict[str, str]

    def ids(self, split: str) -> list[str]:
        return [e for e in self.targets if self.split[e] == split]

    def arrays(self, split: str, label_index: int = -1) -> tuple[np.ndarray, np.ndarray]:
        ids = self.ids(split)
        x = self.inputs.matrix(ids)
        y = np.array([self.targets[e][label_index] for e in ids], dtype=np.int64)
        return x, y

    @property
    def label_indices(self) -> list[int]:
        first = next(iter(self.targets.values()))
        return sorted(first)

    def permuted(self, seed: int) -> "ProbingDataset":
        """Same labels, inputs shuffled among the entities of each split."""
        rng = np.random.default_rng(seed)
        entries = {}
        for split in SPLITS:
            ids = self.ids(split)
            perm = rng.permutation(len(ids))
            for i, j in zip(ids, perm):
                entries[i] = self.inputs[ids[j]]
        store = EmbeddingStore(self.inputs.role, self.inputs.dim, entries)
        return ProbingDataset(self.task, store, self.targets, self.split)


def load_dataset(directory: str | Path) -> ProbingDataset:
    directory = Path(directory)
    inputs = read_embedding_store(directory / "inputs.vpeb", expected_role="representation")
    targets: dict[str, dict[int, int]] = {}
    task = ""
    for row in _read_rows(directory / "targets.csv"):
        task = row["task"]
        idx = int(row["label_index"]) if row.get("label_index") not in (None, "") else -1
        targets.setdefault(row["entity_id"], {})[idx] = int(row["label"])
    split = {r["entity_id"]: r["split"] for r in _read_rows(directory / "split.csv")}
    return ProbingDataset(task, inputs, targets, split)


def per_word_probes(ds: ProbingDataset, task: str, probe_kwargs: dict,
                    seed_of: Callable[[int], int], *, model_dir: Path | None = None,
                    bins: np.ndarray | None = None, n_bins: int = 0) -> list[dict]:
    """One binary probe per word; validation AUC overall and, with ``bins``, per bin."""
    x_tr = ds.inputs.matrix(ds.ids("train"))
    x_val = ds.inputs.matrix(ds.ids("val"))
    out = []
    for w in ds.label_indices:
        _, y_tr = ds.arrays("train", w)
        _, y_val = ds.arrays("val", w)
        entry = {"word": w, "n_train_pos": int(y_tr.sum()), "n_val_pos": int(y_val.sum()),
                 "auc": None}
        if bins is not None:
            entry["bin_auc"] = [None] * n_bins
            entry["attraction"] = None
        if len(np.unique(y_tr)) < 2:
            entry["note"] = "single class in train"
            out.append(entry)
            continue
        model = train_logistic_probe(x_tr, y_tr, seed=seed_of(w), task=f"{task}:{w}", **probe_kwargs)
        if model_dir is not None:
            save_probe(model, model_dir / f"word_{w:03d}.csv")
        scores = predict_scores(model, x_val)[:, 1]
        if len(np.unique(y_val)) == 2:
            entry["auc"] = binary_auc(scores, y_val)
        else:
            entry["note"] = "single class in val"
        if bins is not None:
            series = []
            for b in range(n_bins):
                sel = bins == b
                if sel.any() and len(np.unique(y_val[sel])) == 2:
                    series.append(binary_auc(scores[sel], y_val[sel]))
                else:
                    series.append(float("nan"))
            entry["bin_auc"] = series
            if np.isfinite(series).sum() >= 2:
                entry["attraction"] = attraction_coefficient(series)
        out.append(entry)
    return out


def mean_auc(per_word: list[dict]) -> float | None:
    values = [e["auc"] for e in per_word if e["auc"] is not None]
    return float(np.mean(values)) if values else None


__all__ = [
    "DEFAULT_CONFIG", "STAGES", "Pipeline", "PipelineError", "ConfigError", "DependencyError",
    "load_config", "dump_config", "read_manifest", "ManifestRecord", "ProbingDataset",
    "load_dataset", "per_word_probes", "oracle_vector", "stage_seed",
]
