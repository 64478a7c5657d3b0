from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import pytest

from greenplm.encoders import EncoderConfig
from greenplm.pipeline import Corpus, CorpusConfig, build_corpus

TINY = CorpusConfig(
    seed=0, text_objects=60, paired_objects=12, eval_objects=10,
    stage1_brief=64, stage2_detail=12, stage2_single=12, stage2_multi=8,
    points=256, pretrain_steps=15, pretrain_batch=8, E=32, layers=1, heads=2, context=160,
    encoder=EncoderConfig(C=32, n_patches=64, group_size=16),
)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory) -> Path:
    return build_corpus(tmp_path_factory.mktemp("tiny") / "corpus", TINY)


@pytest.fixture()
def tiny_corpus(tiny_corpus_dir) -> Corpus:
    return Corpus(tiny_corpus_dir)


@pytest.fixture(scope="session")
def pinned_corpus_dir(tmp_path_factory) -> Path:
    """The default desk-scale corpus (seed 0). Built once per session."""
    cached = os.environ.get("GREENPLM_PINNED_CORPUS")
    if cached and (Path(cached) / "base" / "manifest.json").exists():
        meta = json.loads((Path(cached) / "corpus.json").read_text())
        if meta == CorpusConfig().to_dict():
            return Path(cached)
    return build_corpus(tmp_path_factory.mktemp("pinned") / "corpus", CorpusConfig())


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
