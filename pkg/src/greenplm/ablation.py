"""Stage chains and ablation suites (stage subsets, token fusion, noise
level, pooling operator).

Chains that share a trained prefix (same stages, seed and settings) reuse it,
so a suite trains each distinct prefix once.
"""

from __future__ import annotations

import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .eval import EvalResult, emit_report, evaluate
from .training import FUSION_PARTS, TrainState, default_stage, run_stage, transfer_weights

log = logging.getLogger(__name__)

STAGE_ROWS = ((1,), (2,), (3,), (1, 3), (2, 3), (1, 2), (1, 2, 3))
FUSION_ROWS = (("class",), ("class", "mix"), ("class", "mix", "pooled"))
NOISE_GRID = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06)
POOL_ROWS = ("0m", "max", "mean")
SUITES = ("stages", "fusion", "noise", "pool")


@dataclass(frozen=True)
class ChainSpec:
    stages: tuple[int, ...] = (1, 2, 3)
    seed: int = 0
    fusion: tuple[str, ...] = FUSION_PARTS
    pool_mode: str = "0m"
    noise_std: float | None = None   # overrides the Stage I/II default
    carry_lora: bool = True

    def stage_configs(self):
        out = []
        for s in self.stages:
            kw = {}
            if s in (1, 2) and self.noise_std is not None:
                kw["noise_std"] = self.noise_std
            if s == 3:
                kw.update(fusion=self.fusion, pool_mode=self.pool_mode)
            out.append(default_stage(s, self.seed, **kw))
        return out

    @property
    def eval_mode(self) -> str:
        return "point" if 3 in self.stages else "swap"

    def label(self) -> str:
        names = {1: "I", 2: "II", 3: "III"}
        return "+".join(names[s] for s in self.stages)


class ChainRunner:
    """Trains chains against one corpus, memoising shared prefixes."""

    def __init__(self, corpus, eval_limit: int | None = None):
        self.corpus = corpus
        self.eval_limit = eval_limit
        self._states: dict[tuple, TrainState] = {}
        self._data: dict[tuple, list] = {}

    def _stage_data(self, cfg):
        key = (cfg.stage, cfg.data_types, cfg.fusion, cfg.pool_mode)
        if key not in self._data:
            self._data[key] = self.corpus.stage_data(cfg)
        return self._data[key]

    def train(self, spec: ChainSpec) -> TrainState:
        cfgs = spec.stage_configs()
        if not cfgs:
            raise ValueError("a chain needs at least one stage")
        state = None
        for i, cfg in enumerate(cfgs):
            key = (spec.seed, spec.carry_lora, tuple(c.config_hash() for c in cfgs[:i + 1]))
            if key in self._states:
                state = self._states[key]
                continue
            model = self.corpus.fresh_model(spec.seed) if state is None else \
                transfer_weights(state, cfg, carry_lora=spec.carry_lora)
            state, metrics = run_stage(model, cfg, self._stage_data(cfg))
            log.info("seed %d %s: stage %d loss %.4f -> %.4f (%.1fs)", spec.seed, spec.label(), cfg.stage,
                     metrics.losses[0], metrics.losses[-1], metrics.wall_time)
            self._states[key] = state
        return state

    def evaluate(self, spec: ChainSpec, name: str = "") -> EvalResult:
        state = self.train(spec)
        size_k = self.corpus.cfg.paired_objects / 1000 if 3 in spec.stages else 0.0
        return evaluate(state.model, self.corpus, spec.eval_mode, limit=self.eval_limit,
                        name=name or spec.label(), stage=spec.label(), size_k=size_k,
                        fusion=spec.fusion, pool_mode=spec.pool_mode)


def suite_specs(suite: str, seed: int) -> list[tuple[str, ChainSpec]]:
    if suite == "stages":
        return [(ChainSpec(stages=s, seed=seed).label(), ChainSpec(stages=s, seed=seed)) for s in STAGE_ROWS]
    if suite == "fusion":
        return [("+".join(f), ChainSpec(seed=seed, fusion=f)) for f in FUSION_ROWS]
    if suite == "noise":
        return [(f"noise={n:g}", ChainSpec(stages=(1, 2), seed=seed, noise_std=n)) for n in NOISE_GRID]
    if suite == "pool":
        return [(p, ChainSpec(seed=seed, pool_mode=p)) for p in POOL_ROWS]
    raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")


@dataclass
class CellResult:
    suite: str
    cell: str
    seed: int
    result: EvalResult | None = None
    error: str | None = None


def run_seed(corpus_root: str, suite: str, seed: int, eval_limit: int | None = None) -> list[CellResult]:
    """All cells of ``suite`` for one seed; a failing cell is recorded, not raised."""
    from .pipeline import Corpus

    runner = ChainRunner(Corpus(corpus_root), eval_limit)
    out = []
    for name, spec in suite_specs(suite, seed):
        try:
            out.append(CellResult(suite, name, seed, runner.evaluate(spec, name)))
        except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the sweep
            log.error("cell %s seed %d failed: %s", name, seed, exc)
            out.append(CellResult(suite, name, seed, error=f"{type(exc).__name__}: {exc}"))
    return out


def workers() -> int:
    try:
        return max(1, int(os.environ.get("GREENPLM_THREADS", "1")))
    except ValueError:
        return 1


def run_suite(corpus_root: str | Path, suite: str, seeds: Sequence[int] = (0, 1, 2, 3, 4),
              eval_limit: int | None = None) -> list[CellResult]:
    suite_specs(suite, 0)  # validate the name early
    n = min(workers(), len(seeds))
    if n <= 1:
        cells = [c for s in seeds for c in run_seed(str(corpus_root), suite, s, eval_limit)]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            futures = [pool.submit(run_seed, str(corpus_root), suite, s, eval_limit) for s in seeds]
            cells = [c for f in futures for c in f.result()]
    return cells


def median_results(cells: Sequence[CellResult]) -> list[EvalResult]:
    """Per-cell medians across seeds, in first-seen cell order."""
    order: list[str] = []
    by_cell: dict[str, list[EvalResult]] = {}
    for c in cells:
        if c.cell not in by_cell:
            order.append(c.cell)
            by_cell[c.cell] = []
        if c.result is not None:
            by_cell[c.cell].append(c.result)
    out = []
    for name in order:
        rs = by_cell[name]
        if not rs:
            continue

        def med(attr):
            vals = [getattr(r, attr) for r in rs if getattr(r, attr) is not None]
            return statistics.median(vals) if vals else None

        out.append(EvalResult(model=name, stage=rs[0].stage, i_acc=med("i_acc"), c_acc=med("c_acc"),
                              caption_cos=med("caption_cos"), size_k=rs[0].size_k))
    return out


def write_suite(cells: Sequence[CellResult], suite: str, out_dir: str | Path) -> list[Path]:
    """Per-seed CSV, failures file, and a median report (CSV + SVG)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["cell,seed,I-acc,C-acc,avg,error"]
    for c in cells:
        r = c.result
        if r is None:
            lines.append(f"{c.cell},{c.seed},,,,{(c.error or '').replace(',', ';')}")
        else:
            lines.append(f"{c.cell},{c.seed},{r.i_acc:.4f},{r.c_acc:.4f},{r.avg:.4f},")
    per_seed = out_dir / f"{suite}_cells.csv"
    per_seed.write_text("\n".join(lines) + "\n")
    med = median_results(cells)
    if not med:
        return [per_seed]
    x, x_label = None, "cell"
    if suite == "noise":
        x = [float(r.model.split("=")[1]) for r in med]
        x_label = "noise std"
    return [per_seed, *emit_report(med, out_dir, name=f"{suite}_median", x=x, x_label=x_label,
                                   title=f"{suite} ablation (median over seeds)")]
