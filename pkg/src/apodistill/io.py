"""Corpus, checkpoint, metrics and manifest persistence.

Corpus files are JSON Lines, one :class:`TrajectoryRecord` per line, with a
fixed field order::

    {"id":"s000000-T0-r0","context":[3],"teacher_id":"T0","tokens":[2,7,11],"step_logprobs":[-0.35,-1.2,-0.51],"corpus_step":0,"meta":{}}

Tokens are integer indices into the vocabulary sidecar (``vocab.json``).
Unknown top-level fields are kept and written back after the known ones.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import math
import os
import tempfile
from contextlib import contextmanager
from io import BytesIO, StringIO
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import ContextId, Vocab
from .errors import HeterogeneousRows, ManifestMismatch, ParseError, SchemaError

REQUIRED_FIELDS = ("id", "context", "teacher_id", "tokens")
KNOWN_FIELDS = REQUIRED_FIELDS + ("step_logprobs", "corpus_step", "meta")


@dataclass(frozen=True)
class TrajectoryRecord:
    id: str
    context: ContextId
    teacher_id: str
    tokens: tuple[int, ...]
    step_logprobs: tuple[float, ...] | None = None
    corpus_step: int = 0
    meta: Mapping[str, Any] = field(default_factory=dict)
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError("record tokens must be non-empty")
        if self.step_logprobs is not None:
            lp = tuple(float(x) for x in self.step_logprobs)
            if len(lp) != len(self.tokens):
                raise ValueError("step_logprobs length differs from tokens length")
            if any(x > 0 or math.isnan(x) for x in lp):
                raise ValueError("step_logprobs must be <= 0")
            object.__setattr__(self, "step_logprobs", lp)

    def to_json(self) -> str:
        d: dict[str, Any] = {
            "id": self.id,
            "context": self.context.render(),
            "teacher_id": self.teacher_id,
            "tokens": list(self.tokens),
        }
        if self.step_logprobs is not None:
            d["step_logprobs"] = list(self.step_logprobs)
        d["corpus_step"] = self.corpus_step
        d["meta"] = dict(self.meta)
        for k in sorted(self.extra):
            d[k] = self.extra[k]
        return json.dumps(d, ensure_ascii=False, separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_obj(cls, obj: Any, line: int | None = None) -> "TrajectoryRecord":
        if not isinstance(obj, dict):
            raise SchemaError("record is not an object", line)
        missing = [k for k in REQUIRED_FIELDS if k not in obj]
        if missing:
            raise SchemaError(f"missing required fields: {', '.join(missing)}", line, missing)
        ctx = obj["context"]
        if isinstance(ctx, int):
            ctx = [ctx]
        try:
            context = ContextId(tuple(int(t) for t in ctx))
            tokens = obj["tokens"]
            if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
                raise ValueError("tokens must be a list of integers")
            meta = obj.get("meta", {})
            if not isinstance(meta, dict):
                raise ValueError("meta must be an object")
            return cls(
                id=str(obj["id"]),
                context=context,
                teacher_id=str(obj["teacher_id"]),
                tokens=tuple(tokens),
                step_logprobs=obj.get("step_logprobs"),
                corpus_step=int(obj.get("corpus_step", 0)),
                meta=meta,
                extra={k: v for k, v in obj.items() if k not in KNOWN_FIELDS},
            )
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc), line) from exc


@contextmanager
def _locked(path: Path):
    lock = path.with_name(f".{path.name}.lock")
    with open(lock, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp file + rename under an exclusive per-path lock."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with _locked(path):
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_corpus(records: Iterable[TrajectoryRecord], path) -> None:
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in records))


def read_corpus(path) -> list[TrajectoryRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, lineno) from exc
            records.append(TrajectoryRecord.from_obj(obj, lineno))
    return records


def write_vocab(vocab: Vocab, path) -> None:
    atomic_write_text(path, json.dumps(vocab.to_dict(), indent=2) + "\n")


def read_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        return Vocab.from_dict(json.load(fh))


def export_metrics(rows: Sequence[Mapping[str, Any]], path, keys: Sequence[str] | None = None) -> None:
    """CSV with lexicographically sorted header; every row must share the key set."""
    keysets = {frozenset(r) for r in rows}
    if len(keysets) > 1:
        raise HeterogeneousRows("metric rows have different key sets")
    if rows:
        header = sorted(next(iter(keysets)))
    else:
        header = sorted(keys or [])
    buf = StringIO()
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(r[k]) for k in header])
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# checkpoints: <name>.json (metadata) + <name>.npy (logit table)


def save_checkpoint(policy, path, extra: Mapping[str, Any] | None = None) -> list[Path]:
    path = Path(path)
    table = path.with_suffix(".npy")
    buf = _npy_bytes(np.ascontiguousarray(policy.logits, dtype="<f8"))
    atomic_write_bytes(table, buf)
    meta = {
        "kind": type(policy).__name__,
        "vocab": policy.vocab.to_dict(),
        "order": policy.order,
        "temperature": policy.temperature,
        "contexts": [c.render() for c in policy.contexts],
        "table": table.name,
        "table_sha256": hashlib.sha256(buf).hexdigest(),
    }
    if getattr(policy, "reference", False):
        meta["reference"] = True
    if extra:
        meta["extra"] = dict(extra)
    atomic_write_text(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [path, table]


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def load_checkpoint(path):
    from .distill import StudentPolicy
    from .teachers import TabularPolicy

    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    table_path = path.parent / meta["table"]
    if sha256_file(table_path) != meta["table_sha256"]:
        raise ManifestMismatch(f"{table_path}: logit table hash mismatch")
    logits = np.load(table_path, allow_pickle=False)
    kwargs = dict(
        vocab=Vocab.from_dict(meta["vocab"]),
        contexts=tuple(ContextId(tuple(c)) for c in meta["contexts"]),
        logits=logits,
        order=int(meta["order"]),
        temperature=float(meta["temperature"]),
    )
    if meta.get("kind") == "StudentPolicy":
        return StudentPolicy(**kwargs, reference=bool(meta.get("reference", False)))
    return TabularPolicy(**kwargs)


@dataclass
class RunManifest:
    """Seed, config snapshot, stage provenance and content hashes of a run.

    Paths are stored relative to the run directory so manifests from two
    machines compare equal.
    """

    seed: int
    config: dict
    stages: list[dict] = field(default_factory=list)
    hashes: dict[str, str] = field(default_factory=dict)

    def record(self, root, stage: str, inputs: Sequence, outputs: Sequence, key: str | None = None) -> None:
        """Hash ``outputs`` and (re)place the provenance entry of ``stage``.

        ``key`` is an optional cache key (e.g. a digest of the stage's
        parameters and input hashes).
        """
        root = Path(root)
        old = self.stage(stage)
        if old is not None:
            for p in old["outputs"]:
                self.hashes.pop(p, None)
        rel_out = [_rel(root, p) for p in outputs]
        for p in rel_out:
            self.hashes[p] = sha256_file(root / p)
        entry = {"stage": stage, "inputs": sorted(_rel(root, p) for p in inputs), "outputs": sorted(rel_out)}
        if key is not None:
            entry["key"] = key
        self.stages = [s for s in self.stages if s["stage"] != stage] + [entry]

    def verify(self, root) -> None:
        root = Path(root)
        for rel, digest in sorted(self.hashes.items()):
            p = root / rel
            if not p.exists():
                raise ManifestMismatch(f"{rel}: referenced artifact is missing")
            if sha256_file(p) != digest:
                raise ManifestMismatch(f"{rel}: content hash mismatch")

    def stage(self, name: str) -> dict | None:
        for s in self.stages:
            if s["stage"] == name:
                return s
        return None

    def to_json(self) -> str:
        d = {"seed": self.seed, "config": self.config, "stages": self.stages, "hashes": dict(sorted(self.hashes.items()))}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(seed=d["seed"], config=d["config"], stages=d["stages"], hashes=d["hashes"])

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def _rel(root: Path, p) -> str:
    p = Path(p)
    if p.is_absolute():
        p = p.resolve().relative_to(root.resolve())
    return p.as_posix()
