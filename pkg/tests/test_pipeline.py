import json

import numpy as np
import pytest

from apodistill.config import from_dict
from apodistill.errors import ManifestMismatch, MissingStageArtifact
from apodistill.io import RunManifest, load_checkpoint, read_corpus, read_metrics
from apodistill.pipeline import (
    Run,
    build_tuples,
    drift_weights,
    load_ensemble,
    read_tuples,
    run_pipeline,
    save_ensemble,
    write_tuples,
)
from apodistill.apo import PreferenceTuple
from apodistill.core import ContextId
from apodistill.task import build_ensemble, build_task


def small_cfg(run_dir, **over):
    data = {
        "seed": 1,
        "run_dir": str(run_dir),
        "task": {"groups": 2, "contexts": 6},
        "ensemble": {"teachers": 2},
        "corpus": {"per_context": 4, "max_len": 12},
        "spd": {"epochs": 40},
        "selfdistill": {"max_len": 4},
        "apo": {"steps": 10},
        "drift": {"window": 4, "permutations": 100},
    }
    for k, v in over.items():
        data.setdefault(k, {})
        if isinstance(v, dict):
            data[k].update(v)
        else:
            data[k] = v
    return from_dict(data)


def test_full_run_writes_expected_layout(tmp_path):
    res = run_pipeline(small_cfg(tmp_path / "r"))
    root = res.run_dir
    assert [r["ablation"] for r in res.rows] == ["SPD", "SPD+MT", "SPD+MT+APO"]
    for rel in ["vocab.json", "task.json", "corpus.jsonl", "tuples.jsonl", "teachers.csv", "metrics.csv", "manifest.json",
                "checkpoints/spd_single.json", "checkpoints/spd_mt.json", "checkpoints/apo.json", "curves/apo.csv"]:
        assert (root / rel).exists(), rel
    rows = read_metrics(root / "metrics.csv")
    assert len(rows) == 3 and rows[2]["heldout_pref_acc"] != ""
    assert [s["stage"] for s in res.manifest.stages] == ["generate", "spd", "selfdistill", "apo", "report"]
    assert len(read_corpus(root / "corpus.jsonl")) == 2 * 6 * 4
    RunManifest.load(root / "manifest.json").verify(root)


def test_single_teacher_yields_one_row(tmp_path):
    res = run_pipeline(small_cfg(tmp_path / "r", ensemble={"teachers": 1}), ["spd"])
    assert [r["ablation"] for r in res.rows] == ["SPD"]
    res = run_pipeline(small_cfg(tmp_path / "r", ensemble={"teachers": 1}))
    assert [r["ablation"] for r in res.rows] == ["SPD", "SPD+APO"]


def test_stages_are_cached_and_invalidated(tmp_path):
    cfg = small_cfg(tmp_path / "r")
    first = run_pipeline(cfg)
    assert first.ran[:4] == ["generate", "spd", "selfdistill", "apo"]
    again = run_pipeline(cfg)
    assert again.ran == ["report"]
    cfg.apo.steps = 12
    third = run_pipeline(cfg)
    assert third.ran == ["apo", "report"]


def test_apo_without_tuples_is_refused(tmp_path):
    cfg = small_cfg(tmp_path / "r")
    with pytest.raises(MissingStageArtifact):
        run_pipeline(cfg, ["apo"])
    run_pipeline(cfg, ["spd"])
    with pytest.raises(MissingStageArtifact):
        run_pipeline(cfg, ["apo"])
    run_pipeline(cfg, ["selfdistill"])
    res = run_pipeline(cfg, ["apo"])
    assert res.rows[-1]["ablation"] == "SPD+MT+APO"


def test_corrupted_artifact_is_detected(tmp_path):
    cfg = small_cfg(tmp_path / "r")
    run_pipeline(cfg, ["spd"])
    p = tmp_path / "r" / "corpus.jsonl"
    raw = bytearray(p.read_bytes())
    raw[10] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(ManifestMismatch):
        run_pipeline(cfg, ["spd"])


def test_runs_are_bitwise_reproducible(tmp_path):
    a = run_pipeline(small_cfg(tmp_path / "a"))
    b = run_pipeline(small_cfg(tmp_path / "b", threads=3))
    assert a.manifest.digest() == b.manifest.digest()
    assert a.manifest.hashes == b.manifest.hashes
    c = run_pipeline(small_cfg(tmp_path / "c", seed=2))
    assert c.manifest.hashes["corpus.jsonl"] != a.manifest.hashes["corpus.jsonl"]


def test_drift_weighted_tuples(tmp_path):
    cfg = small_cfg(tmp_path / "r", apo={"weights": "drift"}, corpus={"rounds": 2})
    res = run_pipeline(cfg)
    tuples = read_tuples(res.run_dir / "tuples.jsonl")
    w = np.array([x for t in tuples for x in t.weights])
    assert np.all(w > 0)
    assert (res.run_dir / "drift.csv").exists()


def test_tuple_file_round_trip(tmp_path):
    tups = [PreferenceTuple(ContextId((1,)), (2, 3), ((4,), (5, 6)), (0.5, 2.0)), PreferenceTuple(ContextId((0, 2)), (1,), ((2,),))]
    write_tuples(tups, tmp_path / "t.jsonl")
    assert read_tuples(tmp_path / "t.jsonl") == tups


def test_ensemble_round_trip(tmp_path):
    task = build_task(2, 4, 3, 2, 0)
    ens = build_ensemble(task, 2, 1, n_steps=10)
    save_ensemble(ens, tmp_path / "t")
    back = load_ensemble(tmp_path / "t")
    assert back.names == ens.names and back.seed == ens.seed
    for s in (0, 5, 9):
        for u in range(2):
            np.testing.assert_array_equal(back.teacher_at(u, s).logits, ens.teacher_at(u, s).logits)


def test_build_tuples_shape(tmp_path):
    cfg = small_cfg(tmp_path / "r")
    run_pipeline(cfg, ["spd"])
    run = Run(cfg)
    corpus = read_corpus(run.path("corpus.jsonl"))
    ref = load_checkpoint(run.path("checkpoints/spd_mt.json")).snapshot()
    tuples = build_tuples(corpus, ref, 2, cfg, 0)
    # one tuple per (step, repeat): the teachers' samples are the negatives
    assert len(tuples) == 6 * 4
    assert all(len(t.negatives) == 2 for t in tuples)



def test_drift_weights_favour_the_drifted_teacher(tmp_path):
    cfg = small_cfg(tmp_path / "r", corpus={"rounds": 2, "per_context": 30}, ensemble={"drift_magnitude": 4.0})
    run = Run(cfg)
    run.generate()
    corpus = read_corpus(run.path("corpus.jsonl"))
    steps = max(r.corpus_step for r in corpus) + 1
    w, report = drift_weights(corpus, steps, 14, cfg)
    assert len(w) == 2 and np.mean(w) == pytest.approx(1.0)
    assert report["step"] == steps and json.dumps(report)
    stats = [report["T0_statistic"], report["T1_statistic"]]
    assert (w[0] > w[1]) == (stats[0] > stats[1])
