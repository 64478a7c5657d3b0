"""Acceptance criteria, one test each, every one printing a PASS/FAIL line.

The end-to-end and ablation criteria share one five-seed sweep over the
default corpus; it takes roughly ten minutes on one core.
"""

import filecmp
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from greenplm import autograd as ag
from greenplm import pooling
from greenplm.ablation import ChainRunner, ChainSpec
from greenplm.autograd import Tensor, grad_check
from greenplm.dataset import validate
from greenplm.eval import a3dr
from greenplm.instructions import BRIEF_INSTRUCTIONS, DETAIL_INSTRUCTIONS
from greenplm.model import DecoderConfig, LoraAdapter, Projector, ToyDecoder, build_batch, llm_forward, lora_forward
from greenplm.pipeline import Corpus, CorpusConfig, build_corpus
from greenplm.pooling import PoolingConfig, fps_tokens, knn_tokens, zero_param_pool
from greenplm.training import (default_stage, load_checkpoint, run_stage, save_checkpoint, transfer_weights)

from conftest import ACCEPTANCE_LINES
from oracles import A3DR_TABLE, fps_oracle, knn_oracle, pool_reference

SEEDS = (0, 1, 2, 3, 4)


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1. A3DR ------------------------------------------------------------------------

def test_a3dr_exactness():
    errs = [abs(a3dr(acc, size) - want) for acc, size, want in A3DR_TABLE]
    report("A3DR exactness", max(errs) <= 0.0005, f"{len(errs)} pairs, max abs error {max(errs):.2e}")


# -- 2. pooling oracle --------------------------------------------------------------

def test_pooling_oracle_equivalence():
    t0 = time.perf_counter()
    worst, fps_ok, knn_ok = 0.0, 0, 0
    for case in range(200):
        rng = np.random.default_rng(case)
        N = int(rng.integers(1, 17))
        M, K = int(rng.integers(1, min(4, N) + 1)), int(rng.integers(1, min(4, N) + 1))
        C = int(rng.integers(1, 9))
        T = rng.normal(size=(N, C))
        rule = ("first", "max_norm")[case % 2]
        scale = bool(case % 3 == 0)
        got = zero_param_pool(T, PoolingConfig(M, K, rule, scale))
        ref, centers, groups = pool_reference(T, M, K, rule, scale)
        worst = max(worst, float(np.abs(got.pooled - ref).max()))
        fps = fps_tokens(T, M, rule)
        fps_ok += list(fps) == fps_oracle(T, M, rule)
        knn_ok += np.array_equal(knn_tokens(fps, T, K), knn_oracle(fps, T, K))
    took = time.perf_counter() - t0
    ok = worst <= 1e-6 and fps_ok == 200 and knn_ok == 200 and took < 5
    report("0M-Pooling oracle equivalence", ok,
           f"max abs {worst:.1e}, FPS {fps_ok}/200, KNN {knn_ok}/200, {took:.2f}s")


# -- 3. gradients -------------------------------------------------------------------

def _subset(t: Tensor, n: int, seed: int):
    size = t.data.size
    return None if size <= n else list(np.random.default_rng(seed).choice(size, n, replace=False))


def _max_rel(f, tensors, n=25):
    return max(grad_check(f, t, coords=_subset(t, n, i)) for i, t in enumerate(tensors))


def test_gradient_fidelity(pinned_corpus_dir):
    t0 = time.perf_counter()
    errs = {}
    with ag.default_dtype(np.float64):
        rng = np.random.default_rng(0)
        # (a) projector feeding a frozen decoder, CE loss on the answer tokens
        dec = ToyDecoder(DecoderConfig(13, 8, 1, 2, 16, seed=1))
        proj = Projector(6, 8, seed=2)
        x = rng.normal(size=(2, 3, 6))
        batch = build_batch([[([4, 5], False), ([6, 7, 8], True)], [([4], False), ([9, 2], True)]], prefix_len=3)
        errs["projector+CE"] = _max_rel(lambda: llm_forward(dec, proj(x), batch)[1],
                                        list(proj.parameters().values()))

        # (b) attention with LoRA on q and v, random non-zero B
        dec = ToyDecoder(DecoderConfig(11, 8, 1, 2, 16, seed=3))
        dec.attach_lora(rank=2, alpha=4.0)
        for ad in dec.lora.values():
            ad.B.data = rng.normal(0, 0.3, ad.B.shape)
        h = Tensor(rng.normal(size=(2, 5, 8)))
        w = Tensor(rng.normal(size=(2, 5, 11)))
        errs["LoRA attention"] = _max_rel(lambda: (dec.forward_embeds(h) * w).sum(),
                                          list(dec.lora_parameters().values()) + [h])

        # (c) Stage III loss of the desk-scale model on two paired samples
        corpus = Corpus(pinned_corpus_dir)
        cfg = default_stage(3)
        data = corpus.stage_data(cfg)[:2]
        model = corpus.fresh_model(0)
        for t in model.decoder.parameters().values():
            t.data = t.data.astype(np.float64)
        model.ensure_lora(seed=0)
        for ad in model.decoder.lora.values():
            ad.B.data = rng.normal(0, 0.02, ad.B.shape)
        xs = np.stack([e.inputs for e in data]).astype(np.float64)
        b3 = build_batch([e.segments for e in data], prefix_len=xs.shape[1], pad_id=model.tokenizer.pad_id)
        errs["Stage III loss"] = _max_rel(lambda: llm_forward(model.decoder, model.projector(Tensor(xs)), b3)[1],
                                          [*model.projector.parameters().values(),
                                           *model.decoder.lora_parameters().values()], n=8)
    took = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and took < 60
    report("Gradient fidelity", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {took:.1f}s")


# -- 4. architecture invariants -----------------------------------------------------

def test_architecture_invariants(tiny_corpus):
    checks = {}
    with ag.default_dtype(np.float64):
        dec = ToyDecoder(DecoderConfig(17, 16, 2, 4, 12, seed=5))
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 12, 16))
        base = dec.forward_embeds(Tensor(x)).data
        causal = True
        for t in range(11):
            y = x.copy()
            y[:, t + 1:] = rng.normal(size=y[:, t + 1:].shape)
            causal &= bool(np.allclose(dec.forward_embeds(Tensor(y)).data[:, :t + 1], base[:, :t + 1],
                                       rtol=0, atol=1e-10))
        checks["causality"] = causal

        dec.attach_lora(rank=4, alpha=8.0)
        checks["LoRA zero-init"] = np.abs(dec.forward_embeds(Tensor(x)).data - base).max() <= 1e-6
        W, xv = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
        ad = LoraAdapter(5, 6, rank=3, alpha=6.0)
        ad.B.data = rng.normal(size=(6, 3))
        checks["LoRA merge"] = np.abs(lora_forward(xv, W, ad).data - xv @ ad.merged(W).T).max() <= 1e-6
    checks["pooling registry empty"] = pooling.parameters() == {}

    model = tiny_corpus.fresh_model(0)
    before = model.frozen_hashes()
    same = True
    state = None
    for s in (1, 2, 3):
        cfg = default_stage(s)
        start = model if state is None else transfer_weights(state, cfg)
        state, _ = run_stage(start, cfg, tiny_corpus.stage_data(cfg))
        same &= state.model.frozen_hashes() == before
    checks["frozen hashes across stages"] = same
    report("Architecture invariants", all(checks.values()),
           ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))


# -- 5. checkpoints -----------------------------------------------------------------

def test_checkpoint_integrity(tiny_corpus, tmp_path):
    cfg = default_stage(2)
    data = tiny_corpus.stage_data(cfg)
    full, m_full = run_stage(tiny_corpus.fresh_model(0), cfg, data)
    save_checkpoint(full, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a", tiny_corpus.encoders), tmp_path / "b")
    identical = all(filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
                    for f in ("manifest.json", "tensors.bin"))
    part, _ = run_stage(tiny_corpus.fresh_model(0), cfg, data, max_steps=1)
    save_checkpoint(part, tmp_path / "p")
    _, m_res = run_stage(load_checkpoint(tmp_path / "p", tiny_corpus.encoders), None, data)
    same = m_res.losses == m_full.losses
    report("Checkpoint integrity", identical and same,
           f"save-load-save identical {identical}, resumed losses equal {same} ({len(m_full.losses)} steps)")


# -- 6 / 7. end-to-end transfer and ablations ---------------------------------------

@dataclass
class SeedRun:
    seed: int
    avg: dict = field(default_factory=dict)
    e2e_seconds: float = 0.0


E2E_CELLS = {"I+II swap": ChainSpec((1, 2)), "I+II+III": ChainSpec((1, 2, 3))}
OTHER_CELLS = {
    "class": ChainSpec(fusion=("class",)),
    "class+mix": ChainSpec(fusion=("class", "mix")),
    "I+III": ChainSpec((1, 3)),
    "II+III": ChainSpec((2, 3)),
}


@pytest.fixture(scope="module")
def regenerated(pinned_corpus_dir, tmp_path_factory):
    """A second build of the default corpus, timed."""
    t0 = time.perf_counter()
    out = build_corpus(tmp_path_factory.mktemp("regen") / "corpus", CorpusConfig())
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def sweep(pinned_corpus_dir):
    corpus = Corpus(pinned_corpus_dir)
    runs = []
    for seed in SEEDS:
        runner = ChainRunner(corpus)
        run = SeedRun(seed)
        t0 = time.perf_counter()
        for name, spec in E2E_CELLS.items():
            run.avg[name] = runner.evaluate(ChainSpec(spec.stages, seed, spec.fusion)).avg
        run.e2e_seconds = time.perf_counter() - t0
        for name, spec in OTHER_CELLS.items():
            run.avg[name] = runner.evaluate(ChainSpec(spec.stages, seed, spec.fusion)).avg
        print(f"seed {seed}: " + ", ".join(f"{k} {v:.2f}" for k, v in run.avg.items()))
        runs.append(run)
    return runs


def _median(runs, cell):
    return statistics.median(r.avg[cell] for r in runs)


def test_end_to_end_transfer(sweep, regenerated):
    _, build_seconds = regenerated
    seed0 = sweep[0].avg["I+II swap"]
    gains = [r.avg["I+II+III"] - r.avg["I+II swap"] for r in sweep]
    wins = sum(g > 0 for g in gains)
    total = build_seconds + sum(r.e2e_seconds for r in sweep)
    ok = seed0 >= 30 and wins >= 4 and statistics.median(gains) > 0 and total < 600
    report("End-to-end transfer", ok,
           f"(a) I+II swap avg {seed0:.2f}% (seed 0); (b) Stage III gains "
           f"{', '.join(f'{g:+.2f}' for g in gains)} -> {wins}/5 positive, median {statistics.median(gains):+.2f}; "
           f"corpus build + chains {total:.0f}s")


def test_ablation_orderings(sweep):
    fus = [_median(sweep, c) for c in ("class", "class+mix", "I+II+III")]
    fusion_ok = fus[0] < fus[1] < fus[2]
    full = _median(sweep, "I+II+III")
    drops = {"I": full - _median(sweep, "II+III"), "II": full - _median(sweep, "I+III"),
             "III": full - _median(sweep, "I+II swap")}
    stage_ok = max(drops, key=drops.get) == "I" and list(drops.values()).count(drops["I"]) == 1
    report("Ablation orderings", fusion_ok and stage_ok,
           f"fusion medians class {fus[0]:.2f} / class+mix {fus[1]:.2f} / full {fus[2]:.2f} "
           f"({'holds' if fusion_ok else 'does not hold'}); stage-removal drops "
           + ", ".join(f"-{k} {v:.2f}" for k, v in drops.items())
           + f" ({'Stage I largest' if stage_ok else 'Stage I not largest'})")


# -- 8. dataset discipline ----------------------------------------------------------

def test_dataset_discipline(pinned_corpus_dir, regenerated):
    regen, _ = regenerated
    names = ("stage1.jsonl", "stage2.jsonl", "stage3.jsonl", "eval.jsonl")
    violations = sum(len(validate(Path(pinned_corpus_dir) / n)) for n in names)
    files = sorted(p.relative_to(pinned_corpus_dir) for p in Path(pinned_corpus_dir).rglob("*") if p.is_file())
    regen_files = sorted(p.relative_to(regen) for p in Path(regen).rglob("*") if p.is_file())
    identical = files == regen_files and all(
        (Path(pinned_corpus_dir) / f).read_bytes() == (regen / f).read_bytes() for f in files)
    pools = (len(BRIEF_INSTRUCTIONS), len(DETAIL_INSTRUCTIONS))
    report("Dataset discipline", violations == 0 and identical and pools == (30, 30),
           f"{violations} violations, regeneration byte-identical over {len(files)} files {identical}, "
           f"instruction pools {pools[0]}/{pools[1]}")
