"""Generative classification (closed-set and open-vocabulary), caption
similarity, the A3DR efficiency score, judge backends and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import httpx
import numpy as np

from .encoders import CATEGORIES, FrozenEncoders, parse_caption

log = logging.getLogger(__name__)

EPSILON = 1e-5


@dataclass(frozen=True)
class PromptSpec:
    kind: str
    text: str


PROMPTS = {
    "I": PromptSpec("I", "What is this?"),
    "C": PromptSpec("C", "This is an object of"),
    "caption": PromptSpec("caption", "Caption this 3D model in detail."),
}


def a3dr(acc: float, size_k: float, eps: float = EPSILON) -> float:
    """1 / (1 + exp(-2 * acc / (size_k + eps))); ``acc`` in percent, size in thousands."""
    if acc < 0 or size_k < 0:
        raise ValueError(f"a3dr needs acc >= 0 and size_k >= 0, got ({acc}, {size_k})")
    z = 2.0 * acc / (size_k + eps)
    return 1.0 / (1.0 + math.exp(-z)) if z < 700 else 1.0


# -- local judge ---------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def caption_score(encoders: FrozenEncoders, generation: str, gt: str) -> float:
    """Cosine between the frozen text encoder's class tokens of two strings."""
    if not generation.strip() or not gt.strip():
        raise ValueError("caption_score needs non-empty strings")
    a = _unit(encoders.class_token_text(generation))
    b = _unit(encoders.class_token_text(gt))
    return float(np.clip(a @ b, -1.0, 1.0))


@dataclass
class Judgement:
    label: str | None = None
    index: int | None = None
    correct: bool | None = None
    failed: bool = False
    warning: str | None = None


class LocalJudge:
    """Embedding judge: argmax cosine against label embeddings."""

    variant = "local-embedding"

    def __init__(self, encoders: FrozenEncoders, tau: float = 0.8):
        self.encoders = encoders
        self.tau = tau
        self._label_cache: dict[tuple[str, ...], np.ndarray] = {}

    def _label_matrix(self, labels: Sequence[str]) -> np.ndarray:
        key = tuple(labels)
        if key not in self._label_cache:
            self._label_cache[key] = np.stack([_unit(self.encoders.class_token_text(l)) for l in labels])
        return self._label_cache[key]

    def closed(self, generation: str, labels: Sequence[str], prompt: str = "") -> Judgement:
        if not labels:
            raise ValueError("labels must be non-empty")
        if not generation.strip():
            return Judgement(label=labels[0], index=0, warning="empty generation")
        sims = self._label_matrix(labels) @ _unit(self.encoders.class_token_text(generation))
        i = int(np.argmax(sims))  # first maximum: ties go to the lowest index
        return Judgement(label=labels[i], index=i)

    def open(self, generation: str, gt: str, category: str | None = None, prompt: str = "") -> Judgement:
        if not gt.strip():
            raise ValueError("ground truth must be non-empty")
        category = category or parse_caption(gt)["category"]
        if category and category.casefold() in generation.casefold():
            return Judgement(correct=True)
        if not generation.strip():
            return Judgement(correct=False, warning="empty generation")
        return Judgement(correct=caption_score(self.encoders, generation, gt) >= self.tau)


# -- external judge ------------------------------------------------------------------

class JudgeError(RuntimeError):
    pass


class ExternalJudge:
    """Posts ``{task, prompt, generation, labels | gt}`` and reads ``{verdict}``.

    Closed-set verdicts are label strings; open-vocabulary verdicts are
    booleans. Timeouts, transport errors and 5xx responses are retried with
    exponential backoff; a sample that still fails is marked failed.
    """

    variant = "external-endpoint"

    def __init__(self, base_url: str, timeout: float = 10.0, retries: int = 3, backoff: float = 0.5,
                 max_in_flight: int = 4, client: httpx.Client | None = None, sleep=time.sleep):
        self.base_url = base_url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep

    def request(self, payload: dict):
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.base_url, json=payload, timeout=self.timeout)
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise JudgeError(f"HTTP {resp.status_code}")
            try:
                return resp.json()["verdict"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                log.warning("judge returned a malformed response: %s", exc)
                raise JudgeError(f"malformed response: {exc}") from None
        raise JudgeError(f"judge failed after {self.retries + 1} attempts ({last})")

    def closed(self, generation: str, labels: Sequence[str], prompt: str = "") -> Judgement:
        if not labels:
            raise ValueError("labels must be non-empty")
        try:
            verdict = self.request({"task": "cls-closed", "prompt": prompt, "generation": generation,
                                    "labels": list(labels)})
        except JudgeError as exc:
            return Judgement(failed=True, warning=str(exc))
        if verdict not in labels:
            return Judgement(failed=True, warning=f"verdict {verdict!r} is not a label")
        return Judgement(label=verdict, index=list(labels).index(verdict))

    def open(self, generation: str, gt: str, category: str | None = None, prompt: str = "") -> Judgement:
        try:
            verdict = self.request({"task": "cls-open", "prompt": prompt, "generation": generation, "gt": gt})
        except JudgeError as exc:
            return Judgement(failed=True, warning=str(exc))
        if not isinstance(verdict, bool):
            return Judgement(failed=True, warning=f"verdict {verdict!r} is not a boolean")
        return Judgement(correct=verdict)


def classify_closed(generation: str, labels: Sequence[str], judge, prompt: str = "") -> Judgement:
    return judge.closed(generation, labels, prompt)


def classify_open(generation: str, gt: str, judge, category: str | None = None, prompt: str = "") -> Judgement:
    return judge.open(generation, gt, category, prompt)


def _judge_all(judge, fn: str, args: list[tuple]) -> list[Judgement]:
    call = getattr(judge, fn)
    workers = getattr(judge, "max_in_flight", 1)
    if workers <= 1:
        return [call(*a) for a in args]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda a: call(*a), args))


# -- running a model over the eval split ---------------------------------------------

@dataclass
class TaskScore:
    accuracy: float      # percent over judged samples
    judged: int
    failed: int
    warnings: int


def score_closed(generations: Sequence[str], categories: Sequence[str], judge,
                 labels: Sequence[str] = CATEGORIES, prompt: str = "") -> TaskScore:
    js = _judge_all(judge, "closed", [(g, labels, prompt) for g in generations])
    ok = [j.label == c for j, c in zip(js, categories) if not j.failed]
    return _score(ok, js)


def score_open(generations: Sequence[str], captions: Sequence[str], categories: Sequence[str], judge,
               prompt: str = "") -> TaskScore:
    js = _judge_all(judge, "open", [(g, gt, c, prompt) for g, gt, c in zip(generations, captions, categories)])
    ok = [bool(j.correct) for j in js if not j.failed]
    return _score(ok, js)


def _score(ok: list[bool], js: list[Judgement]) -> TaskScore:
    failed = sum(j.failed for j in js)
    warnings = sum(1 for j in js if j.warning and not j.failed)
    acc = 100.0 * sum(ok) / len(ok) if ok else 0.0
    return TaskScore(accuracy=acc, judged=len(ok), failed=failed, warnings=warnings)


def model_inputs(model, corpus, records, mode: str, fusion=("class", "mix", "pooled"),
                 pool_mode: str = "0m") -> np.ndarray:
    """Projector inputs for eval records: ``swap`` feeds the point class token
    where the text class token was; ``point`` feeds the fused point tokens;
    ``text`` feeds the ground-truth caption's class token (an upper bound)."""
    if mode == "text":
        return np.stack([corpus.encoders.class_token_text(r.caption)[None, :] for r in records])
    rels = [r.cloud for r in records]
    if mode == "swap":
        return corpus.swap_inputs(rels)
    if mode == "point":
        return np.stack([corpus.point_inputs(r, model.pool_cfg, fusion, pool_mode) for r in rels])
    raise ValueError(f"unknown input mode {mode!r}")


def generate_all(model, inputs: np.ndarray, prompt: str, max_len: int, batch: int = 100) -> list[str]:
    out: list[str] = []
    for s in range(0, len(inputs), batch):
        out.extend(model.generate(inputs[s:s + batch], prompt, max_len))
    return out


@dataclass
class EvalResult:
    model: str
    stage: str
    i_acc: float | None = None
    c_acc: float | None = None
    caption_cos: float | None = None
    size_k: float = 0.0
    failed: int = 0
    warnings: int = 0
    run_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> list[float]:
        return [a for a in (self.i_acc, self.c_acc) if a is not None]

    @property
    def avg(self) -> float | None:
        accs = self.accuracies
        return sum(accs) / len(accs) if accs else None

    @property
    def a3dr(self) -> float | None:
        return None if self.avg is None else a3dr(self.avg, self.size_k)


def evaluate(model, corpus, mode: str, task: str = "cls-closed", prompts: Sequence[str] = ("I", "C"),
             judge=None, limit: int | None = None, name: str = "model", stage: str = "",
             size_k: float = 0.0, fusion=("class", "mix", "pooled"), pool_mode: str = "0m",
             max_len: int = 16) -> EvalResult:
    """Run one model over the eval split and score it."""
    records = corpus.records("eval")[:limit]
    if not records:
        raise ValueError("eval split is empty")
    judge = judge or LocalJudge(corpus.encoders)
    x = model_inputs(model, corpus, records, mode, fusion, pool_mode)
    cats = [r.category for r in records]
    res = EvalResult(model=name, stage=stage, size_k=size_k)
    h = hashlib.sha256()
    if task == "caption":
        gens = generate_all(model, x, PROMPTS["caption"].text, max(max_len, 40))
        scores = [caption_score(corpus.encoders, g, r.caption) if g.strip() else 0.0
                  for g, r in zip(gens, records)]
        res.caption_cos = float(np.mean(scores))
        h.update("\n".join(gens).encode())
    else:
        for kind in prompts:
            p = PROMPTS[kind]
            gens = generate_all(model, x, p.text, max_len)
            h.update("\n".join(gens).encode())
            if task == "cls-closed":
                s = score_closed(gens, cats, judge, prompt=p.text)
            elif task == "cls-open":
                s = score_open(gens, [r.caption for r in records], cats, judge, prompt=p.text)
            else:
                raise ValueError(f"unknown task {task!r}")
            setattr(res, "i_acc" if kind == "I" else "c_acc", s.accuracy)
            res.failed += s.failed
            res.warnings += s.warnings
            res.extra[f"{kind}_samples"] = gens[:3]
    res.run_hash = h.hexdigest()[:16]
    return res


# -- reports ----------------------------------------------------------------------------

REPORT_COLUMNS = ("model", "stage", "I-acc", "C-acc", "avg", "caption-cos", "size_k", "a3dr")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report_csv(results: Sequence[EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in results:
        w.writerow([_fmt(v) for v in (r.model, r.stage, r.i_acc, r.c_acc, r.avg, r.caption_cos,
                                      float(r.size_k), r.a3dr)])
    return buf.getvalue()


def report_svg(results: Sequence[EvalResult], x: Sequence[float] | None = None, x_label: str = "run",
               title: str = "") -> str:
    """Static SVG line chart: one polyline per accuracy metric."""
    W, H, pad = 480, 300, 48
    xs = list(x) if x is not None else list(range(len(results)))
    metrics = [("I-acc", "i_acc", "#1f77b4"), ("C-acc", "c_acc", "#ff7f0e"), ("avg", "avg", "#2ca02c")]
    lo, hi = min(xs), max(xs)
    span = (hi - lo) or 1.0

    def px(v):
        return pad + (v - lo) / span * (W - 2 * pad) if len(xs) > 1 else W / 2

    def py(v):
        return H - pad - v / 100.0 * (H - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
           f'<text x="{W / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(x_label)}</text>',
           f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for tick in (0, 25, 50, 75, 100):
        out.append(f'<text x="{pad - 6}" y="{py(tick) + 4:.1f}" text-anchor="end" font-size="10">{tick}</text>')
    for xv in xs:
        out.append(f'<text x="{px(xv):.1f}" y="{H - pad + 14}" text-anchor="middle" font-size="10">{xv:g}</text>')
    for i, (label, attr, colour) in enumerate(metrics):
        pts = [(px(xv), py(getattr(r, attr))) for xv, r in zip(xs, results) if getattr(r, attr) is not None]
        if not pts:
            continue
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="2">'
                   f'<title>{label}</title></polyline>')
        out.append(f'<text x="{W - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{colour}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(results: Sequence[EvalResult], out_dir: str | Path, name: str = "report",
                x: Sequence[float] | None = None, x_label: str = "run", title: str = "") -> list[Path]:
    """Write ``<name>.csv`` and ``<name>.svg`` under ``out_dir``."""
    if not results:
        raise ValueError("emit_report needs at least one result")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out_dir / f"{name}.csv", out_dir / f"{name}.svg"
    csv_path.write_text(report_csv(results))
    svg_path.write_text(report_svg(results, x, x_label, title))
    return [csv_path, svg_path]
