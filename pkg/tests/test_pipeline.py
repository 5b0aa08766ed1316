import csv
import hashlib
import json
import shutil
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import yaml

from visprobe.dictionary import read_sentences
from visprobe.embedding import EmbeddingStore, write_embedding_store
from visprobe.pipeline import (
    ConfigError, DependencyError, Pipeline, PipelineError, load_config, load_dataset,
    oracle_vector, read_manifest, stage_seed,
)
from visprobe.report import TABLE2_TASKS
from visprobe.tasks import TASKS, wc_labels


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_run(small_project):
    directory, config = small_project
    pipe = Pipeline(load_config(config))
    status = pipe.run()
    return pipe, status


class TestRun:
    def test_everything_ran(self, small_run):
        pipe, status = small_run
        assert set(status.values()) == {"ran"}
        assert len(status) == 6 + 2 * len(TASKS)
        for stage in ("segment", "stats", "encode", "dict", "sentences", "report"):
            assert (pipe.out / stage / "stamp.json").exists()
        log = json.loads((pipe.out / "run_log.json").read_text())
        assert log["seed"] == 0 and len(log["stages"]) == len(status)

    def test_report_schema(self, small_run):
        pipe, _ = small_run
        table = rows(pipe.out / "report" / "table2.csv")
        assert list(table[0]) == ["representation", *TABLE2_TASKS] and len(table) == 1
        assert all(0.0 <= float(table[0][t]) <= 1.0 for t in TABLE2_TASKS)
        wc = [float(r["auc"]) for r in rows(pipe.out / "report" / "wc_per_word.csv") if r["auc"]]
        assert abs(np.mean(wc) - float(table[0]["WC"])) < 1e-12
        for t in ("SL", "CBshape", "CBcolor", "SOMOfar", "SOMOclose"):
            assert (pipe.out / "report" / f"confusion_oracle_{t}.csv").exists()

    def test_rerun_is_idempotent(self, small_run):
        pipe, _ = small_run
        before = tree_digest(pipe.out)
        status = Pipeline(pipe.cfg).run()
        assert set(status.values()) == {"cached"}
        assert tree_digest(pipe.out) == before

    def test_wc_labels_regenerate(self, small_run):
        pipe, _ = small_run
        sentences = read_sentences(pipe.out / "sentences" / "sentences.csv")
        ds = load_dataset(pipe.out / "tasks" / "WC" / "oracle")
        n_words = len(ds.label_indices)
        for image_id, labels in ds.targets.items():
            flags = wc_labels(sentences[image_id], n_words)
            assert [labels[w] for w in range(n_words)] == flags.tolist()

    def test_somo_balanced(self, small_run):
        pipe, _ = small_run
        for task in ("SOMOfar", "SOMOclose"):
            prov = rows(pipe.out / "tasks" / task / "provenance.csv")
            counts = Counter((r["split"], r["altered"]) for r in prov)
            for split in ("train", "val"):
                assert counts[(split, "1")] == counts[(split, "0")] > 0
            assert all(r["target_word"] != r["replacement_word"] for r in prov if r["altered"] == "1")

    def test_mwc_pairs(self, small_run):
        pipe, _ = small_run
        pairs = rows(pipe.out / "tasks" / "MWC" / "oracle" / "pairs.csv")
        train = {r["entity_id"] for r in pairs if r["split"] == "train"}
        assert all(f"{r['image_b']}|{r['image_a']}" in train for r in pairs if r["split"] == "train")
        val = [r for r in pairs if r["split"] == "val"]
        assert Counter(r["bin"] for r in val) == Counter({str(b): 5 for b in range(4)})
        metrics = json.loads((pipe.out / "probes" / "MWC" / "oracle" / "metrics.json").read_text())
        assert all(len(e["bin_auc"]) == 4 for e in metrics["per_word"])

    def test_train_only_fit(self, small_run):
        pipe, _ = small_run
        with open(pipe.out / "sentences" / "cooccurrence.csv") as fh:
            assert fh.readline().strip() == f"# n_images={len(pipe.ids('train'))}"

    def test_param_change_reruns_downstream_only(self, small_run, tmp_path):
        pipe, _ = small_run
        out = tmp_path / "out"
        shutil.copytree(pipe.out, out)
        cfg = dict(pipe.cfg, probes={**pipe.cfg["probes"], "C": 0.5})
        status = Pipeline(cfg, out).run()
        assert all(status[s] == "cached" for s in ("segment", "stats", "encode", "dict",
                                                   "sentences", "tasks WC"))
        assert status["probes WC"] == "ran" and status["report"] == "ran"

    def test_dependency_error(self, small_run, tmp_path):
        pipe, _ = small_run
        fresh = Pipeline(pipe.cfg, tmp_path / "out")
        with pytest.raises(DependencyError, match="'segment'"):
            fresh.run(["probes"])
        shutil.copytree(pipe.out / "segment", tmp_path / "out" / "segment")
        shutil.copytree(pipe.out / "stats", tmp_path / "out" / "stats")
        shutil.copytree(pipe.out / "encode", tmp_path / "out" / "encode")
        shutil.copytree(pipe.out / "dict", tmp_path / "out" / "dict")
        with pytest.raises(DependencyError, match="needs stage 'sentences'"):
            fresh.run(["probes"])

    def test_workers_do_not_change_output(self, small_run, tmp_path):
        pipe, _ = small_run
        cfg = dict(pipe.cfg, workers=2)
        Pipeline(cfg, tmp_path / "out").run(["segment"])
        assert tree_digest(tmp_path / "out" / "segment") == tree_digest(pipe.out / "segment")


class TestIngest:
    def test_missing_ids_rejected(self, small_run, tmp_path):
        pipe, _ = small_run
        store = EmbeddingStore("representation", 3, {"img0000": [1, 2, 3]})
        write_embedding_store(store, tmp_path / "ext.vpeb")
        cfg = dict(pipe.cfg, representations=[{
            "name": "ext", "encoder": "ingest", "images": str(tmp_path / "ext.vpeb"),
            "superpixels": None, "noise_sigma": 0.1, "oracle_features": "presence"}])
        out = tmp_path / "out"
        shutil.copytree(pipe.out / "segment", out / "segment")
        with pytest.raises(PipelineError, match="lacks"):
            Pipeline(cfg, out).run(["encode"])

    def test_wrong_role_rejected(self, small_run, tmp_path):
        pipe, _ = small_run
        ids = pipe.ids()
        write_embedding_store(EmbeddingStore("dictionary", 2, {i: [0, 1] for i in ids}),
                              tmp_path / "ext.vpeb")
        cfg = dict(pipe.cfg, representations=[{
            "name": "ext", "encoder": "ingest", "images": str(tmp_path / "ext.vpeb"),
            "superpixels": None, "noise_sigma": 0.1, "oracle_features": "presence"}])
        out = tmp_path / "out"
        shutil.copytree(pipe.out / "segment", out / "segment")
        with pytest.raises(ValueError, match="role"):
            Pipeline(cfg, out).run(["encode"])


class TestConfig:
    def _write(self, tmp_path, obj):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(obj))
        return path

    def test_defaults(self):
        cfg = load_config()
        assert cfg["segment"]["resolutions"] == {"coarse": 15, "medium": 50, "fine": 80}
        assert cfg["dictionary"]["n_words"] == 50 and cfg["probes"]["C"] == 1.0
        assert cfg["tasks"]["mwc"]["n_bins"] == 10 and cfg["tasks"]["somo"]["quantile"] == 0.25

    def test_paths_relative_to_file(self, tmp_path):
        cfg = load_config(self._write(tmp_path, {"data": {"manifest": "m.tsv"}}))
        assert cfg["data"]["manifest"] == str(tmp_path / "m.tsv")
        assert cfg["out"] == str(tmp_path / "out")

    @pytest.mark.parametrize("obj, match", [
        ({"segmnet": {}}, "unknown config key"),
        ({"probes": {"c": 1}}, "probes.c"),
        ({"stages": ["segment", "train"]}, "unknown stage"),
        ({"representations": [{"name": "a", "encoder": "clip"}]}, "encoder"),
        ({"representations": [{"name": "a"}, {"name": "a"}]}, "unique"),
        ({"representations": [{"name": "a/b"}]}, "must match"),
        ({"representations": [{"name": "a", "encoder": "ingest"}]}, "needs an 'images'"),
        ({"tasks": {"enabled": ["WC", "XYZ"]}}, "unknown task"),
        ({"tasks": {"somo": {"resolution": "ultra"}}}, "somo.resolution"),
        ({"encode": {"fill_policy": "black"}}, "fill_policy"),
        ({"probes": 3}, "mapping"),
    ])
    def test_errors(self, tmp_path, obj, match):
        with pytest.raises(ConfigError, match=match):
            load_config(self._write(tmp_path, obj))

    def test_overrides(self):
        assert load_config(overrides={"seed": 7, "workers": None})["seed"] == 7


class TestManifest:
    def _manifest(self, tmp_path, lines, touch=("a.png", "b.png")):
        for name in touch:
            (tmp_path / name).write_bytes(b"")
        path = tmp_path / "m.tsv"
        path.write_text("".join(line + "\n" for line in lines))
        return path

    def test_reads(self, tmp_path):
        path = self._manifest(tmp_path, ["# comment", "a\ta.png\tcat\ttrain", "", "b\tb.png\tdog\tval"])
        recs = read_manifest(path)
        assert [r.image_id for r in recs] == ["a", "b"] and recs[0].path == tmp_path / "a.png"

    @pytest.mark.parametrize("lines, match", [
        (["a\ta.png\tcat"], "4 tab-separated"),
        (["a\ta.png\tcat\ttrain", "a\tb.png\tcat\tval"], "duplicate"),
        (["a\ta.png\tcat\ttest", "b\tb.png\tcat\tval"], "train or val"),
        (["a\tz.png\tcat\ttrain", "b\tb.png\tcat\tval"], "not found"),
        (["a\ta.png\tcat\ttrain"], "val split is empty"),
        (["a/x\ta.png\tcat\ttrain", "b\tb.png\tcat\tval"], "may not contain"),
    ])
    def test_errors(self, tmp_path, lines, match):
        with pytest.raises(PipelineError, match=match):
            read_manifest(self._manifest(tmp_path, lines))

    def test_missing_file(self, tmp_path):
        with pytest.raises(PipelineError, match="does not exist"):
            read_manifest(tmp_path / "none.tsv")


class TestHelpers:
    def test_stage_seed(self):
        assert stage_seed(0, "a", 1) == stage_seed(0, "a", 1) != stage_seed(1, "a", 1)

    def test_oracle_vector(self):
        v = oracle_vector([1, 1, 3], 4, 0.0, 0, "x", "counts")
        assert v.tolist() == [0, 2, 0, 1]
        assert oracle_vector([1, 1, 3], 4, 0.0, 0, "x").tolist() == [0, 1, 0, 1]
        assert np.allclose(oracle_vector([1, 1], 2, 0.0, 0, "x", "log-counts"), [0, np.log(3)])
        a = oracle_vector([0], 3, 0.1, 5, "img")
        assert np.array_equal(a, oracle_vector([0], 3, 0.1, 5, "img"))
        assert not np.array_equal(a, oracle_vector([0], 3, 0.1, 5, "img2"))
        with pytest.raises(ValueError):
            oracle_vector([0], 3, 0.1, 5, "img", "tfidf")
