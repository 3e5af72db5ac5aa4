"""Staged learn / compare / critique pipeline over the synthetic concept task.

Run directory layout::

    manifest.json          seed, config snapshot, stage provenance, hashes
    vocab.json task.json   vocabulary sidecar and eval task
    corpus.jsonl           teacher trajectories
    teachers/              base teacher checkpoints and drift events
    checkpoints/           spd_single, spd_mt, apo
    tuples.jsonl           (context, t+, negatives, weights) for APO
    curves/                per-iteration losses
    teachers.csv           per-teacher eval at the end of the corpus
    metrics.csv            one ablation row per trained configuration

A stage is skipped when the manifest holds an entry whose cache key (stage
parameters plus input hashes) matches and whose outputs verify.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .apo import ApoConfig, PreferenceTuple, preference_accuracy, train_apo
from .config import PipelineConfig
from .core import ContextId
from .distill import StudentPolicy, self_distill, train_spd
from .drift import detect_drift, group_by_teacher
from .errors import MissingStageArtifact
from .io import (
    RunManifest,
    TrajectoryRecord,
    _npy_bytes,
    atomic_write_bytes,
    atomic_write_text,
    export_metrics,
    load_checkpoint,
    read_corpus,
    save_checkpoint,
    sha256_file,
    write_corpus,
    write_vocab,
)
from .task import ConceptTask, build_ensemble, build_task, evaluate
from .teachers import DriftEvent, DriftSchedule, TeacherEnsemble, apply_drift, generate_corpus

STAGES = ("spd", "selfdistill", "apo")
_ORDER = ("generate",) + STAGES + ("report",)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _sub_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


# ensemble persistence


def save_ensemble(ens: TeacherEnsemble, root: Path) -> list[Path]:
    out = []
    for name, t in zip(ens.names, ens.teachers):
        out += save_checkpoint(t, root / f"{name}.json")
    events = []
    for i, e in enumerate(ens.schedule.events):
        delta = root / f"event{i}.npy"
        atomic_write_bytes(delta, _npy_bytes(np.ascontiguousarray(e.delta, dtype="<f8")))
        out.append(delta)
        entry = {"step": e.step, "teacher": e.teacher, "mode": e.mode, "span": e.span, "delta": delta.name}
        if e.mask is not None:
            mask = root / f"event{i}_mask.npy"
            atomic_write_bytes(mask, _npy_bytes(np.ascontiguousarray(e.mask)))
            out.append(mask)
            entry["mask"] = mask.name
        events.append(entry)
    meta = {"names": list(ens.names), "seed": ens.seed, "events": events}
    atomic_write_text(root / "ensemble.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out + [root / "ensemble.json"]


def load_ensemble(root: Path) -> TeacherEnsemble:
    meta = json.loads((root / "ensemble.json").read_text(encoding="utf-8"))
    teachers = tuple(load_checkpoint(root / f"{n}.json") for n in meta["names"])
    events = []
    for e in meta["events"]:
        mask = np.load(root / e["mask"]) if "mask" in e else None
        events.append(DriftEvent(e["step"], e["teacher"], np.load(root / e["delta"]), e["mode"], e["span"], mask))
    return TeacherEnsemble(teachers, DriftSchedule(tuple(events)), meta["seed"], tuple(meta["names"]))


# preference tuples


def write_tuples(tuples: Sequence[PreferenceTuple], path) -> None:
    lines = []
    for t in tuples:
        obj = {
            "context": t.context.render(),
            "positive": list(t.positive),
            "negatives": [list(n) for n in t.negatives],
            "weights": list(t.weights),
        }
        lines.append(json.dumps(obj, separators=(",", ":")) + "\n")
    atomic_write_text(path, "".join(lines))


def read_tuples(path) -> list[PreferenceTuple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(
                    PreferenceTuple(ContextId(tuple(d["context"])), tuple(d["positive"]), tuple(map(tuple, d["negatives"])), tuple(d["weights"]))
                )
    return out


def build_tuples(corpus, reference, n_teachers: int, cfg: PipelineConfig, salt: int, weights=None) -> list[PreferenceTuple]:
    """One tuple per (corpus step, repeat): negatives are all teachers'
    trajectories in teacher order, t+ is sampled from ``reference``."""
    groups: dict[tuple[int, str], list[TrajectoryRecord]] = {}
    for r in corpus:
        groups.setdefault((r.corpus_step, r.id.rsplit("-", 1)[1]), []).append(r)
    sd = cfg.selfdistill
    tuples = []
    for i, key in enumerate(sorted(groups)):
        recs = groups[key]
        if len(recs) != n_teachers:
            continue
        trajs = [r.tokens for r in recs]
        tplus = self_distill(
            reference, recs[0].context, trajs, sd.max_len, _sub_seed(cfg.seed, salt, i), sd.cap, sd.decoding == "greedy"
        )
        tuples.append(PreferenceTuple(recs[0].context, tplus, tuple(trajs), tuple(weights) if weights is not None else ()))
    return tuples


def drift_weights(corpus, n_steps: int, vocab_size: int, cfg: PipelineConfig) -> tuple[list[float], dict]:
    """Negative weights proportional to 1 + per-teacher drift statistic,
    scaled to mean 1, so drifted teachers are pushed away harder.

    Each teacher's stream is split in half (older vs newer), which with
    rounds >= 2 makes both windows visit the same contexts."""
    hist = group_by_teacher(corpus)
    window = min(len(v) for v in hist.values()) // 2
    report = detect_drift(
        hist, n_steps, window, vocab_size, cfg.drift.alpha, cfg.drift.permutations, cfg.seed, correction=cfg.drift.correction
    )
    raw = np.array([1.0 + r.statistic for r in report.per_teacher])
    return list(raw / raw.mean()), report.flat()


# stages


@dataclass
class PipelineResult:
    run_dir: Path
    rows: list[dict]
    manifest: RunManifest
    ran: list[str]


class Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.run_dir).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        mpath = self.root / "manifest.json"
        snap = cfg.snapshot()
        self.manifest = RunManifest.load(mpath) if mpath.exists() else RunManifest(cfg.seed, snap)
        self.manifest.seed, self.manifest.config = cfg.seed, snap
        self.ran: list[str] = []

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _cached(self, stage: str, key: str) -> bool:
        entry = self.manifest.stage(stage)
        if entry is None or entry.get("key") != key:
            return False
        for rel in entry["outputs"]:
            p = self.root / rel
            if not p.exists() or sha256_file(p) != self.manifest.hashes.get(rel):
                return False
        return True

    def _input_hashes(self, rels: Sequence[str]) -> dict:
        return {r: sha256_file(self.root / r) for r in rels}

    def _finish(self, stage: str, inputs, outputs, key: str) -> None:
        self.manifest.record(self.root, stage, inputs, outputs, key)
        rank = {s: i for i, s in enumerate(_ORDER)}
        self.manifest.stages.sort(key=lambda s: rank.get(s["stage"], len(rank)))
        self.manifest.save(self.root / "manifest.json")
        self.ran.append(stage)

    # generate

    def generate(self) -> None:
        c = self.cfg
        key = _digest({"seed": c.seed, "task": c.snapshot()["task"], "ensemble": c.snapshot()["ensemble"], "corpus": c.snapshot()["corpus"]})
        if self._cached("generate", key):
            return
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0]))
        task = build_task(c.task.groups, c.task.contexts, c.task.answers, c.task.fillers, rng)
        contexts = list(task.contexts) * c.corpus.rounds
        e = c.ensemble
        ens = build_ensemble(
            task, e.teachers, rng, e.order, e.temperatures, e.accuracy, e.off_group_tv, e.drift, e.drift_magnitude,
            e.drift_span, n_steps=len(contexts),
        )
        corpus = generate_corpus(ens, contexts, c.corpus.per_context, c.corpus.max_len, _sub_seed(c.seed, 1), c.threads)
        outputs = [self.path("vocab.json"), self.path("task.json"), self.path("corpus.jsonl")]
        write_vocab(task.vocab, outputs[0])
        task.save(outputs[1])
        write_corpus(corpus, outputs[2])
        outputs += save_ensemble(ens, self.path("teachers"))
        self._finish("generate", [], outputs, key)

    def _load_generated(self):
        if self.manifest.stage("generate") is None:
            raise MissingStageArtifact("generate: no corpus in this run directory")
        task = ConceptTask.load(self.path("task.json"))
        ens = load_ensemble(self.path("teachers"))
        corpus = read_corpus(self.path("corpus.jsonl"))
        return task, ens, corpus

    # spd

    def spd(self) -> None:
        c = self.cfg
        gen_out = self.manifest.stage("generate")["outputs"]
        key = _digest({"spd": c.snapshot()["spd"], "inputs": self._input_hashes(gen_out)})
        if self._cached("spd", key):
            return
        task, ens, corpus = self._load_generated()
        final = apply_drift(ens, max(r.corpus_step for r in corpus))
        teacher_rows = []
        for name, t in zip(final.names, final.teachers):
            teacher_rows.append({"teacher": name, **evaluate(t, task)})
        best = max(range(len(ens)), key=lambda u: (teacher_rows[u]["macro_acc"], -u))
        outputs = [self.path("teachers.csv")]
        export_metrics(teacher_rows, outputs[0])

        s = c.spd
        student = StudentPolicy.init(task.vocab, task.contexts, s.order)
        kw = dict(epochs=s.epochs, lr=s.lr, seed=_sub_seed(c.seed, 3), momentum=s.momentum, mode=s.mode, subsample=s.subsample_fraction)
        variants = [("spd_single", [r for r in corpus if r.teacher_id == ens.names[best]], ens.subset([best]))]
        if len(ens) > 1:
            variants.append(("spd_mt", corpus, ens))
        for name, recs, teachers in variants:
            curve: list = []
            trained, _ = train_spd(student, recs, teachers, history=curve, **kw)
            outputs += save_checkpoint(trained, self.path(f"checkpoints/{name}.json"), {"best_teacher": ens.names[best]})
            curve_path = self.path(f"curves/{name}.csv")
            export_metrics([{"epoch": i, "loss": v} for i, v in enumerate(curve)], curve_path, keys=["epoch", "loss"])
            outputs.append(curve_path)
        self._finish("spd", gen_out, outputs, key)

    def _reference_path(self) -> Path:
        entry = self.manifest.stage("spd")
        if entry is None:
            raise MissingStageArtifact("spd: stage output required but absent (run the spd stage first)")
        mt = "checkpoints/spd_mt.json"
        return self.path(mt if mt in entry["outputs"] else "checkpoints/spd_single.json")

    # self-distillation

    def selfdistill(self) -> None:
        c = self.cfg
        ref_path = self._reference_path()
        inputs = ["corpus.jsonl", ref_path.relative_to(self.root).as_posix(), ref_path.with_suffix(".npy").relative_to(self.root).as_posix()]
        key = _digest({"selfdistill": c.snapshot()["selfdistill"], "apo_weights": c.apo.weights, "drift": c.snapshot()["drift"], "inputs": self._input_hashes(inputs)})
        if self._cached("selfdistill", key):
            return
        task, ens, corpus = self._load_generated()
        reference = load_checkpoint(ref_path).snapshot()
        weights = None
        outputs = [self.path("tuples.jsonl")]
        if c.apo.weights == "drift":
            n_steps = max(r.corpus_step for r in corpus) + 1
            weights, report = drift_weights(corpus, n_steps, task.vocab.size, c)
            export_metrics([report], self.path("drift.csv"))
            outputs.append(self.path("drift.csv"))
        tuples = build_tuples(corpus, reference, len(ens), c, 2, weights)
        write_tuples(tuples, outputs[0])
        self._finish("selfdistill", inputs, outputs, key)

    # apo

    def apo(self) -> None:
        c = self.cfg
        if self.manifest.stage("selfdistill") is None:
            raise MissingStageArtifact("selfdistill: t+ tuples required by apo are absent (run the selfdistill stage first)")
        ref_path = self._reference_path()
        inputs = ["tuples.jsonl", ref_path.relative_to(self.root).as_posix(), ref_path.with_suffix(".npy").relative_to(self.root).as_posix()]
        key = _digest({"apo": c.snapshot()["apo"], "inputs": self._input_hashes(inputs)})
        if self._cached("apo", key):
            return
        student = load_checkpoint(ref_path)
        reference = student.snapshot()
        tuples = read_tuples(self.path("tuples.jsonl"))
        a = c.apo
        cfg = ApoConfig(
            beta=a.beta, weights_mode="supplied" if a.weights == "drift" else "uniform", lr=a.lr, steps=a.steps,
            seed=c.seed, length_normalize=a.length_normalize, momentum=a.momentum,
        )
        curve: list = []
        trained = train_apo(student, reference, tuples, cfg, curve)
        outputs = save_checkpoint(trained, self.path("checkpoints/apo.json"))
        curve_path = self.path("curves/apo.csv")
        export_metrics([{"step": i, "loss": v} for i, v in enumerate(curve)], curve_path, keys=["step", "loss"])
        outputs.append(curve_path)
        self._finish("apo", inputs, outputs, key)

    def heldout_preference_accuracy(self) -> float:
        """Preference accuracy of the APO student on tuples built from a fresh
        teacher sample (same contexts, new seed)."""
        task, ens, _ = self._load_generated()
        c = self.cfg
        contexts = list(task.contexts) * c.corpus.rounds
        held = generate_corpus(ens, contexts, max(1, c.corpus.per_context // 4), c.corpus.max_len, _sub_seed(c.seed, 4), c.threads)
        ref_path = self._reference_path()
        reference = load_checkpoint(ref_path).snapshot()
        tuples = build_tuples(held, reference, len(ens), c, 5)
        apo = load_checkpoint(self.path("checkpoints/apo.json"))
        return preference_accuracy(tuples, apo, reference, c.apo.beta, c.apo.length_normalize)

    # report

    def report(self, stages: Sequence[str]) -> list[dict]:
        task = ConceptTask.load(self.path("task.json"))
        n = self.cfg.ensemble.teachers
        plan = []
        if "spd" in stages:
            plan.append(("SPD", "spd", "checkpoints/spd_single.json", 1))
            if n > 1:
                plan.append(("SPD+MT", "spd", "checkpoints/spd_mt.json", n))
        if "apo" in stages:
            plan.append(("SPD+MT+APO" if n > 1 else "SPD+APO", "spd+selfdistill+apo", "checkpoints/apo.json", n))
        pref = self.heldout_preference_accuracy() if "apo" in stages else None
        rows = []
        for label, used, ckpt, n_used in plan:
            row = {"ablation": label, "stages": used, "teachers": n_used, "seed": self.cfg.seed}
            row.update(evaluate(load_checkpoint(self.path(ckpt)), task))
            row["heldout_pref_acc"] = pref if label.endswith("APO") else ""
            rows.append(row)
        path = self.path("metrics.csv")
        keys = ["ablation", "stages", "teachers", "seed", "macro_acc", "heldout_pref_acc"] + [f"acc_g{g}" for g in range(task.n_groups)]
        export_metrics(rows, path, keys=keys)
        inputs = [self.root / p for s in self.manifest.stages if s["stage"] in STAGES for p in s["outputs"] if p.endswith(".npy")]
        self._finish("report", inputs, [path], _digest(sorted(stages)))
        return rows


def generate(cfg: PipelineConfig) -> RunManifest:
    run = Run(cfg)
    run.generate()
    run.manifest.save(run.root / "manifest.json")
    return run.manifest


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] = STAGES) -> PipelineResult:
    """Run the requested subset of {spd, selfdistill, apo} (corpus generation
    is implicit).  A stage that is not requested must already be cached when
    a later requested stage depends on it."""
    stages = [s for s in STAGES if s in set(stages)]
    unknown = set(stages) - set(STAGES)
    if unknown or not stages:
        raise ValueError(f"stages must be a non-empty subset of {STAGES}")
    run = Run(cfg)
    run.manifest.verify(run.root)
    run.generate()
    if "selfdistill" in stages and "spd" not in stages and run.manifest.stage("spd") is None:
        raise MissingStageArtifact("spd: selfdistill needs the SPD reference checkpoint; request spd too")
    if "apo" in stages and "selfdistill" not in stages and run.manifest.stage("selfdistill") is None:
        raise MissingStageArtifact("selfdistill: apo needs t+ tuples; request selfdistill too")
    if "apo" in stages and "spd" not in stages and run.manifest.stage("spd") is None:
        raise MissingStageArtifact("spd: apo needs the SPD reference checkpoint; request spd too")
    for s in stages:
        getattr(run, s)()
    rows = run.report(stages)
    return PipelineResult(run.root, rows, run.manifest, run.ran)
