"""Desk-scale corpus on disk and the glue that turns records into training
examples.

Corpus layout::

    corpus.json        generation settings
    tokenizer.json
    stage1.jsonl       brief records (text only)
    stage2.jsonl       detail / conversation records (text only)
    stage3.jsonl       records paired with a point cloud
    eval.jsonl         held-out objects with clouds
    clouds/            <id>.bin + <id>.bin.json
    base/              pretrained base decoder (checkpoint format)
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .dataset import TYPES, T3DRecord, check_stage_types, gen_t3d, make_record, read_jsonl, write_jsonl
from .encoders import (EncoderConfig, FrozenEncoders, PointCloud, read_cloud, sample_point_cloud,
                       synth_world, write_cloud)
from .instructions import BRIEF_INSTRUCTIONS, DETAIL_INSTRUCTIONS
from .model import DecoderConfig, Projector, ToyDecoder, conversation_segments
from .pooling import PoolingConfig
from .tokenizer import Tokenizer
from .training import PLM, Example, LoraConfig, StageConfig, pretrain_base, text_inputs

log = logging.getLogger(__name__)

PROMPT_TEXTS = ("What is this?", "This is an object of", "Caption this 3D model in detail.")


@dataclass
class CorpusConfig:
    seed: int = 0
    text_objects: int = 1000
    paired_objects: int = 200
    eval_objects: int = 200
    stage1_brief: int = 2000
    stage2_detail: int = 160
    stage2_single: int = 160
    stage2_multi: int = 80
    points: int = 1024
    pretrain_steps: int = 250
    pretrain_batch: int = 24
    pretrain_lr: float = 2e-3
    E: int = 128
    layers: int = 4
    heads: int = 4
    context: int = 160
    pos: str = "learned"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        for k in ("text_objects", "paired_objects", "eval_objects", "stage1_brief", "stage2_detail",
                  "stage2_single", "stage2_multi", "pretrain_steps"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.text_objects == 0 and self.stage1_brief + self.stage2_detail + self.stage2_single + self.stage2_multi:
            raise ValueError("text records requested from an empty world")
        if self.points < self.encoder.n_patches:
            raise ValueError(f"points ({self.points}) must be >= patches ({self.encoder.n_patches})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        return cls(encoder=enc, **d)


# paired records rotate through the four types in this proportion
_PAIRED_TYPE_P = (0.4, 0.2, 0.2, 0.2)


def _paired_records(world, seed: int, clouds_rel: str, prefix: str, types: Sequence[str] | None) -> list[T3DRecord]:
    out = []
    for i, (spec, caption) in enumerate(world):
        rng = np.random.default_rng([seed, 31, i])
        rtype = types[i % len(types)] if types else TYPES[int(rng.choice(4, p=_PAIRED_TYPE_P))]
        rec = make_record(spec, caption, rtype, rng, f"{prefix}-{spec.id}")
        rec.cloud = f"{clouds_rel}/{spec.id}.bin"
        out.append(rec)
    return out


def build_corpus(out: str | Path, cfg: CorpusConfig = CorpusConfig()) -> Path:
    """Generate every corpus file under ``out`` (deterministic for fixed cfg)."""
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n_total = cfg.text_objects + cfg.paired_objects + cfg.eval_objects
    world = synth_world(n_total, cfg.seed) if n_total else []
    text_w = world[:cfg.text_objects]
    paired_w = world[cfg.text_objects:cfg.text_objects + cfg.paired_objects]
    eval_w = world[cfg.text_objects + cfg.paired_objects:]

    s1 = gen_t3d(text_w, {"brief": cfg.stage1_brief}, seed=cfg.seed, prefix="s1")
    s2 = gen_t3d(text_w, {"detail": cfg.stage2_detail, "single_conv": cfg.stage2_single,
                          "multi_conv": cfg.stage2_multi}, seed=cfg.seed + 1, prefix="s2")
    s3 = _paired_records(paired_w, cfg.seed, "clouds", "s3", None)
    ev = _paired_records(eval_w, cfg.seed + 1, "clouds", "ev", ("brief",))
    for spec, _ in paired_w + eval_w:
        cloud = sample_point_cloud(spec, cfg.points, seed=cfg.seed)
        write_cloud(out / "clouds" / f"{spec.id}.bin", cloud, spec.id, spec.category)
    write_jsonl(out / "stage1.jsonl", s1)
    write_jsonl(out / "stage2.jsonl", s2)
    write_jsonl(out / "stage3.jsonl", s3)
    write_jsonl(out / "eval.jsonl", ev)

    texts = [r.caption for r in s1 + s2 + s3 + ev]
    texts += [x for r in s1 + s2 + s3 for qa in r.qa for x in qa]
    texts += list(PROMPT_TEXTS) + list(BRIEF_INSTRUCTIONS) + list(DETAIL_INSTRUCTIONS)
    tok = Tokenizer.build(texts)
    tok.save(out / "tokenizer.json")
    (out / "corpus.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    if cfg.pretrain_steps > 0 and (s1 or s2):
        dcfg = DecoderConfig(tok.vocab_size, cfg.E, cfg.layers, cfg.heads, cfg.context, seed=cfg.seed, pos=cfg.pos)
        base = pretrain_base(tok, [(r.caption, r.qa) for r in s1 + s2], dcfg, steps=cfg.pretrain_steps,
                             batch_size=cfg.pretrain_batch, lr=cfg.pretrain_lr, seed=cfg.seed)
        save_tensors(out / "base", {k: t.data for k, t in base.parameters().items()},
                     {"decoder": asdict(dcfg)})
    return out


class Corpus:
    """Read-only view of a corpus directory with in-memory caches."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        meta = self.root / "corpus.json"
        if not meta.exists():
            raise FileNotFoundError(f"{self.root} is not a corpus directory (no corpus.json)")
        self.cfg = CorpusConfig.from_dict(json.loads(meta.read_text()))
        self.tokenizer = Tokenizer.load(self.root / "tokenizer.json")
        self._records: dict[str, list[T3DRecord]] = {}
        self._clouds: dict[str, PointCloud] = {}
        self._encoded: dict[str, object] = {}
        self._inputs: dict[tuple, np.ndarray] = {}
        self.encoders = FrozenEncoders(self.cfg.encoder)

    def records(self, name: str) -> list[T3DRecord]:
        if name not in self._records:
            self._records[name] = read_jsonl(self.root / f"{name}.jsonl")
        return self._records[name]

    def cloud(self, rel: str) -> PointCloud:
        if rel not in self._clouds:
            self._clouds[rel] = read_cloud(self.root / rel)[0]
        return self._clouds[rel]

    def encoded(self, rel: str):
        if rel not in self._encoded:
            self._encoded[rel] = self.encoders.point_encode(self.cloud(rel))
        return self._encoded[rel]

    def point_inputs(self, rel: str, pool_cfg: PoolingConfig, fusion: Sequence[str], pool_mode: str) -> np.ndarray:
        from .pooling import fuse_tokens, mix_pool, zero_param_pool

        key = (rel, pool_cfg, tuple(fusion), pool_mode)
        if key not in self._inputs:
            seq = self.encoded(rel)
            mix = mix_pool(seq.tokens) if "mix" in fusion else None
            pooled = zero_param_pool(seq.tokens, pool_cfg, mode=pool_mode).pooled if "pooled" in fusion else None
            self._inputs[key] = fuse_tokens(seq.class_token, mix, pooled)
        return self._inputs[key]

    def swap_inputs(self, rels: Sequence[str]) -> np.ndarray:
        return np.stack([self.encoded(r).class_token[None, :] for r in rels])

    def base_decoder(self) -> ToyDecoder:
        tensors, meta = load_tensors(self.root / "base")
        dec = ToyDecoder(DecoderConfig(**meta["decoder"]))
        for name, t in dec.parameters().items():
            t.data = np.array(tensors[name])
        return dec

    def fresh_model(self, seed: int = 0, lora_cfg: LoraConfig = LoraConfig(),
                    pool_cfg: PoolingConfig = PoolingConfig()) -> PLM:
        C = self.cfg.encoder.C
        proj = Projector(C, self.cfg.E, seed=seed)
        return PLM(self.tokenizer, self.base_decoder(), self.encoders, proj, lora_cfg, pool_cfg)

    def stage_data(self, cfg: StageConfig, pool_cfg: PoolingConfig = PoolingConfig()) -> list[Example]:
        recs = self.records({1: "stage1", 2: "stage2", 3: "stage3"}[cfg.stage])
        recs = [r for r in recs if r.type in cfg.data_types]
        check_stage_types(recs, cfg.stage)
        tok = self.tokenizer
        out = []
        for r in recs:
            if cfg.encoder == "text":
                x = text_inputs(self.encoders, r.caption)
            else:
                x = self.point_inputs(r.cloud, pool_cfg, cfg.fusion, cfg.pool_mode)
            out.append(Example(inputs=x, segments=conversation_segments(tok, r.qa), record_id=r.id, rtype=r.type))
        return out


def check_paired(corpus: Corpus) -> None:
    recs = corpus.records("stage3")
    if not recs:
        raise FileNotFoundError("stage 3 needs paired records; stage3.jsonl is empty")
    for r in recs:
        if r.cloud is None or not (corpus.root / r.cloud).exists():
            raise FileNotFoundError(f"paired point cloud missing for {r.id}")
