"""Measured behaviour on the default desk-scale corpus (seed 0).

Thresholds were fixed before measuring; the measured values are noted
beside each check.
"""

import numpy as np
import pytest

from greenplm.eval import evaluate
from greenplm.pipeline import Corpus
from greenplm.training import default_stage, run_stage, text_inputs, transfer_weights


@pytest.fixture(scope="module")
def corpus(pinned_corpus_dir):
    return Corpus(pinned_corpus_dir)


@pytest.fixture(scope="module")
def stage_one(corpus):
    cfg = default_stage(1)
    state, _ = run_stage(corpus.fresh_model(0), cfg, corpus.stage_data(cfg))
    return state


def test_fixed_batch_loss_halves(corpus):
    # measured: 1.458 -> 0.214
    data = corpus.stage_data(default_stage(1))[:32]
    cfg = default_stage(1, batch_size=32, epochs=50)
    _, metrics = run_stage(corpus.fresh_model(0), cfg, data)
    assert len(metrics.losses) == 50
    assert metrics.losses[-1] <= 0.5 * metrics.losses[0]


def test_stage_one_names_the_category(corpus, stage_one):
    # measured: 94 of 100
    recs = corpus.records("stage1")[:100]
    hits = 0
    for r in recs:
        gen = stage_one.model.generate(text_inputs(corpus.encoders, r.caption)[None], r.qa[0][0])[0]
        hits += r.category in gen.lower()
    assert hits >= 80


def test_stage_three_eval_is_bit_reproducible(corpus, stage_one):
    state = stage_one
    for s in (2, 3):
        cfg = default_stage(s)
        state, _ = run_stage(transfer_weights(state, cfg), cfg, corpus.stage_data(cfg))
    a = evaluate(state.model, corpus, "point")
    b = evaluate(state.model.copy(), corpus, "point")
    assert len(corpus.records("eval")) == 200 and a.failed == 0
    assert (a.i_acc, a.c_acc, a.run_hash) == (b.i_acc, b.c_acc, b.run_hash)
    assert np.isfinite(a.avg)
