"""T3D Caption-Question-Answer records: generation, JSONL I/O, validation,
statistics and splits."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import SHAPE_WORDS, USAGE, ObjectSpec, describe_parts
from .instructions import BRIEF_INSTRUCTIONS, DETAIL_INSTRUCTIONS

TYPES = ("brief", "detail", "single_conv", "multi_conv")
STAGE_TYPES = {
    1: frozenset({"brief"}),
    2: frozenset({"detail", "single_conv", "multi_conv"}),
    3: frozenset(TYPES),
}


class DatasetError(ValueError):
    pass


@dataclass
class T3DRecord:
    id: str
    category: str
    caption: str
    type: str
    qa: list[tuple[str, str]]
    cloud: str | None = None  # relative path of the paired point cloud

    def to_json(self) -> dict:
        d = {"id": self.id, "category": self.category, "caption": self.caption,
             "type": self.type, "qa": [{"q": q, "a": a} for q, a in self.qa]}
        if self.cloud is not None:
            d["cloud"] = self.cloud
        return d

    @classmethod
    def from_json(cls, d: dict) -> "T3DRecord":
        return cls(id=d["id"], category=d["category"], caption=d["caption"], type=d["type"],
                   qa=[(t["q"], t["a"]) for t in d["qa"]], cloud=d.get("cloud"))


@dataclass(frozen=True)
class InstructionPool:
    brief_list: tuple[str, ...] = BRIEF_INSTRUCTIONS
    detail_list: tuple[str, ...] = DETAIL_INSTRUCTIONS


def load_instruction_pool() -> InstructionPool:
    pool = InstructionPool()
    if len(pool.brief_list) != 30 or len(pool.detail_list) != 30:
        raise DatasetError("instruction pools must hold exactly 30 entries each")
    return pool


# -- templates --------------------------------------------------------------------

_BRIEF_ANSWERS = (
    "The 3D object is a {size} {color} {category}.",
    "This is a {color} {category}.",
    "A {size} {color} {category}{parts}.",
    "It is a {color} {category} of {size} size.",
)

_DETAIL_ANSWER = (
    "This 3D model depicts a {size} {color} {category}{parts}. "
    "The {category} is {shape_words}. Its surface is mostly {color}, "
    "and the object is {size} compared with similar models. "
    "It could be used as {usage}."
)

_CONV_QUESTIONS = {
    "category": ("What kind of object is this?", "It is a {category}."),
    "color": ("What color is this object?", "The object is {color}."),
    "shape": ("Can you describe the shape of this object?", "It is {shape_words}."),
    "usage": ("What could this object be used for?", "It could be used as {usage}."),
    "size": ("How big is this object?", "It is a {size} {category}."),
    "complete": ("This is an object of", "the {category} kind."),
}


def _fields(spec: ObjectSpec) -> dict:
    return {"size": spec.size_name, "color": spec.color_name, "category": spec.category,
            "parts": describe_parts(spec.parts), "shape_words": SHAPE_WORDS[spec.category],
            "usage": USAGE[spec.category]}


def make_record(spec: ObjectSpec, caption: str, rtype: str, rng: np.random.Generator,
                rid: str, pool: InstructionPool | None = None) -> T3DRecord:
    pool = pool or InstructionPool()
    f = _fields(spec)
    if rtype == "brief":
        q = pool.brief_list[int(rng.integers(len(pool.brief_list)))]
        a = _BRIEF_ANSWERS[int(rng.integers(len(_BRIEF_ANSWERS)))].format(**f)
        qa = [(q, a)]
    elif rtype == "detail":
        q = pool.detail_list[int(rng.integers(len(pool.detail_list)))]
        qa = [(q, _DETAIL_ANSWER.format(**f))]
    elif rtype in ("single_conv", "multi_conv"):
        keys = list(_CONV_QUESTIONS)
        n = 1 if rtype == "single_conv" else int(rng.integers(2, 4))
        picks = rng.choice(len(keys), size=n, replace=False)
        qa = [(_CONV_QUESTIONS[keys[i]][0], _CONV_QUESTIONS[keys[i]][1].format(**f)) for i in picks]
    else:
        raise DatasetError(f"unknown record type {rtype!r}")
    return T3DRecord(id=rid, category=spec.category, caption=caption, type=rtype, qa=qa)


def gen_t3d(world: Sequence[tuple[ObjectSpec, str]], counts: dict[str, int] | Sequence[int],
            seed: int = 0, prefix: str = "t3d") -> list[T3DRecord]:
    """Template-driven records; ``counts`` per type (dict or 4-tuple in TYPES order).

    Record ``i`` of type ``t`` draws from its own RNG stream keyed by
    (seed, type index, i), so output is reproducible and order-independent.
    """
    if not isinstance(counts, dict):
        counts = dict(zip(TYPES, counts))
    if any(v < 0 for v in counts.values()):
        raise DatasetError("counts must be non-negative")
    total = sum(counts.values())
    if total and not world:
        raise DatasetError("cannot generate records from an empty world")
    pool = load_instruction_pool()
    out = []
    for ti, rtype in enumerate(TYPES):
        for i in range(counts.get(rtype, 0)):
            rng = np.random.default_rng([seed, ti, i])
            spec, caption = world[int(rng.integers(len(world)))]
            out.append(make_record(spec, caption, rtype, rng, f"{prefix}-{rtype}-{i:06d}-{spec.id}", pool))
    return out


# -- JSONL -------------------------------------------------------------------------

def dumps_records(records: Iterable[T3DRecord]) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=False) + "\n" for r in records)


def write_jsonl(path: str | Path, records: Iterable[T3DRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_records(records), encoding="utf-8")


def read_jsonl(path: str | Path) -> list[T3DRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(T3DRecord.from_json(json.loads(line)))
    return out


# -- validation --------------------------------------------------------------------

@dataclass
class Violation:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


def check_record(d: dict, base_dir: Path | None = None) -> list[str]:
    problems = []
    for key in ("id", "category", "caption", "type", "qa"):
        if key not in d:
            problems.append(f"missing field {key!r}")
    if problems:
        return problems
    if not isinstance(d["caption"], str) or not d["caption"].strip():
        problems.append("empty caption")
    if d["type"] not in TYPES:
        problems.append(f"unknown type {d['type']!r}")
    qa = d["qa"]
    if not isinstance(qa, list) or not all(isinstance(t, dict) and "q" in t and "a" in t for t in qa):
        return problems + ["qa must be a list of {q, a} objects"]
    n = len(qa)
    if d["type"] in ("brief", "detail", "single_conv") and n != 1:
        problems.append(f"turn count {n} != 1 for type {d['type']}")
    elif d["type"] == "multi_conv" and n < 2:
        problems.append(f"turn count {n} < 2 for multi_conv")
    for i, t in enumerate(qa):
        if not str(t["q"]).strip():
            problems.append(f"empty question in turn {i + 1}")
        if not str(t["a"]).strip():
            problems.append(f"empty answer in turn {i + 1}")
    cloud = d.get("cloud")
    if cloud is not None and base_dir is not None:
        cpath = base_dir / cloud
        side = Path(str(cpath) + ".json")
        if not cpath.exists() or not side.exists():
            problems.append(f"missing point cloud {cloud}")
        else:
            meta = json.loads(side.read_text())
            if meta.get("category") != d["category"]:
                problems.append(f"cloud category {meta.get('category')!r} != record {d['category']!r}")
    return problems


def validate(path: str | Path) -> list[Violation]:
    """Check every record; malformed lines are collected, not fatal."""
    path = Path(path)
    out: list[Violation] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                out.append(Violation(lineno, f"malformed JSON: {exc.msg}"))
                continue
            if not isinstance(d, dict):
                out.append(Violation(lineno, "record is not a JSON object"))
                continue
            out.extend(Violation(lineno, p) for p in check_record(d, path.parent))
    return out


def check_stage_types(records: Iterable[T3DRecord], stage: int) -> None:
    allowed = STAGE_TYPES[stage]
    for r in records:
        if r.type not in allowed:
            raise DatasetError(f"stage {stage} does not accept {r.type!r} records (id {r.id})")
        if stage == 3 and r.cloud is None:
            raise DatasetError(f"stage 3 needs paired records; {r.id} has no point cloud")


# -- statistics --------------------------------------------------------------------

@dataclass
class Stats:
    hist: dict[str, Counter] = field(default_factory=dict)
    counts: Counter = field(default_factory=Counter)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["type", "words", "count"])
        for t in TYPES:
            for length in sorted(self.hist.get(t, {})):
                w.writerow([t, length, self.hist[t][length]])
        return buf.getvalue()

    def counts_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["type", "records"])
        for t in TYPES:
            w.writerow([t, self.counts.get(t, 0)])
        return buf.getvalue()

    def checksum(self) -> str:
        return hashlib.sha256((self.to_csv() + self.counts_csv()).encode()).hexdigest()


def stats(records: Sequence[T3DRecord]) -> Stats:
    """Per-type word-length histograms of answers, and record counts."""
    if not records:
        raise DatasetError("stats needs at least one record")
    hist: dict[str, Counter] = defaultdict(Counter)
    counts: Counter = Counter()
    for r in records:
        counts[r.type] += 1
        for _, a in r.qa:
            hist[r.type][len(a.split())] += 1
    return Stats(hist=dict(hist), counts=counts)


# -- splits ------------------------------------------------------------------------

def split(records: Sequence, fractions: Sequence[float] = (0.9, 0.1), seed: int = 0) -> list[list]:
    """Deterministic disjoint partition by shuffled index."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise DatasetError(f"fractions must be non-negative and sum to 1, got {fractions}")
    n = len(records)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum([0.0, *fractions]) * n).astype(int)
    bounds[-1] = n
    return [[records[i] for i in sorted(perm[bounds[k]:bounds[k + 1]])] for k in range(len(fractions))]
