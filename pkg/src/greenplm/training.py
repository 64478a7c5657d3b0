"""Three-stage training: text-only projector alignment, text-only
projector + LoRA alignment with feature noise, then point-cloud alignment on
a small paired set. Also base-decoder pretraining, weight transfer between
stages, the encoder-swap inference path and checkpoint I/O."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import AdamW, Tensor
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .encoders import EncoderConfig, FrozenEncoders, PointCloud
from .model import Batch, DecoderConfig, Projector, ToyDecoder, build_batch, generate, llm_forward
from .pooling import PoolingConfig, fuse_tokens, mix_pool, zero_param_pool
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

STAGE_TRAINABLE = {1: ("projector",), 2: ("projector", "lora"), 3: ("projector", "lora")}
STAGE_ENCODER = {1: "text", 2: "text", 3: "point"}
STAGE_DATA = {1: ("brief",), 2: ("detail", "single_conv", "multi_conv"),
              3: ("brief", "detail", "single_conv", "multi_conv")}
FUSION_PARTS = ("class", "mix", "pooled")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int
    lr: float
    epochs: int
    batch_size: int
    noise_std: float = 0.0
    seed: int = 0
    trainable: tuple[str, ...] = ()
    encoder: str = ""
    data_types: tuple[str, ...] = ()
    fusion: tuple[str, ...] = FUSION_PARTS
    pool_mode: str = "0m"

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLE:
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not self.trainable:
            object.__setattr__(self, "trainable", STAGE_TRAINABLE[self.stage])
        if not self.encoder:
            object.__setattr__(self, "encoder", STAGE_ENCODER[self.stage])
        if not self.data_types:
            object.__setattr__(self, "data_types", STAGE_DATA[self.stage])
        object.__setattr__(self, "trainable", tuple(self.trainable))
        object.__setattr__(self, "data_types", tuple(self.data_types))
        object.__setattr__(self, "fusion", tuple(self.fusion))
        self.validate()

    def validate(self) -> None:
        if tuple(sorted(self.trainable)) != tuple(sorted(STAGE_TRAINABLE[self.stage])):
            raise ValueError(f"stage {self.stage} trains {STAGE_TRAINABLE[self.stage]}, got {self.trainable}")
        if self.encoder != STAGE_ENCODER[self.stage]:
            raise ValueError(f"stage {self.stage} uses the {STAGE_ENCODER[self.stage]} encoder")
        if any(t not in STAGE_DATA[self.stage] for t in self.data_types):
            raise ValueError(f"stage {self.stage} does not accept data types {self.data_types}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.stage == 3 and self.noise_std != 0:
            raise ValueError("stage 3 uses no feature noise")
        if "class" not in self.fusion or any(p not in FUSION_PARTS for p in self.fusion):
            raise ValueError(f"fusion must include 'class' and only {FUSION_PARTS}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr/epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("trainable", "data_types", "fusion"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# Desk-scale defaults. Batch size, epochs and noise match the full-scale
# recipe below; learning rates are raised because each desk stage runs only
# tens to about a hundred steps.
DESK_STAGES = {
    1: dict(lr=1e-2, epochs=1, batch_size=16, noise_std=0.05),
    2: dict(lr=3e-3, epochs=1, batch_size=14, noise_std=0.05),
    3: dict(lr=3e-3, epochs=3, batch_size=25, noise_std=0.0),
}
FULL_SCALE_STAGES = {
    1: dict(lr=1e-3, epochs=1, batch_size=16, noise_std=0.05),
    2: dict(lr=2e-4, epochs=1, batch_size=14, noise_std=0.05),
    3: dict(lr=5e-5, epochs=3, batch_size=25, noise_std=0.0),
}


def default_stage(stage: int, seed: int = 0, **overrides) -> StageConfig:
    return StageConfig(stage=stage, seed=seed, **{**DESK_STAGES[stage], **overrides})


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    alpha: float = 64.0
    targets: tuple[str, ...] = ("q", "v")


# -- model container ------------------------------------------------------------

class PLM:
    """Frozen encoders + frozen base decoder + trainable projector / LoRA."""

    def __init__(self, tokenizer: Tokenizer, decoder: ToyDecoder, encoders: FrozenEncoders,
                 projector: Projector, lora_cfg: LoraConfig = LoraConfig(),
                 pool_cfg: PoolingConfig = PoolingConfig()):
        self.tokenizer = tokenizer
        self.decoder = decoder
        self.encoders = encoders
        self.projector = projector
        self.lora_cfg = lora_cfg
        self.pool_cfg = pool_cfg

    @property
    def has_lora(self) -> bool:
        return bool(self.decoder.lora)

    def ensure_lora(self, seed: int) -> None:
        if not self.has_lora:
            c = self.lora_cfg
            self.decoder.attach_lora(c.rank, c.alpha, c.targets, seed=seed)

    def trainable_parameters(self, groups: Sequence[str]) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if "projector" in groups:
            out.update(self.projector.parameters())
        if "lora" in groups:
            out.update(self.decoder.lora_parameters())
        return out

    def all_parameters(self) -> dict[str, Tensor]:
        return {**self.projector.parameters(), **self.decoder.lora_parameters(), **self.decoder.parameters()}

    def frozen_hashes(self) -> dict[str, str]:
        return {"decoder": self.decoder.base_hash(), "encoders": self.encoders.parameter_hash()}

    def set_trainable(self, groups: Sequence[str]) -> None:
        for t in self.projector.parameters().values():
            t.requires_grad = "projector" in groups
        for t in self.decoder.lora_parameters().values():
            t.requires_grad = "lora" in groups
        self.decoder.set_base_trainable(False)

    def project(self, inputs: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self.projector(inputs.astype(ag.get_default_dtype())).data

    def generate(self, inputs: np.ndarray, instruction: str, max_len: int = 24) -> list[str]:
        """Greedy generation for encoder-token inputs of shape (B, P, C)."""
        return generate(self.decoder, self.tokenizer, self.project(inputs), instruction, max_len)

    def copy(self) -> "PLM":
        proj = Projector(self.projector.C, self.projector.H)
        copy_tensors(self.projector.parameters(), proj.parameters())
        dec = copy.copy(self.decoder)  # shares the frozen base tensors
        dec.lora = {}
        if self.has_lora:
            c = self.lora_cfg
            dec.attach_lora(c.rank, c.alpha, c.targets, seed=0)
            copy_tensors(self.decoder.lora_parameters(), dec.lora_parameters())
        return PLM(self.tokenizer, dec, self.encoders, proj, self.lora_cfg, self.pool_cfg)


def copy_tensors(src: dict[str, Tensor], dst: dict[str, Tensor]) -> None:
    for name, t in dst.items():
        if name not in src:
            raise ValueError(f"tensor {name!r} missing from source")
        if src[name].shape != t.shape:
            raise ValueError(f"tensor {name!r}: shape {src[name].shape} does not match {t.shape}")
        t.data = np.array(src[name].data, dtype=t.data.dtype)


# -- encoder inputs ---------------------------------------------------------------

def text_inputs(encoders: FrozenEncoders, caption: str) -> np.ndarray:
    return encoders.class_token_text(caption)[None, :]


def point_inputs(encoders: FrozenEncoders, cloud: PointCloud, pool_cfg: PoolingConfig,
                 fusion: Sequence[str] = FUSION_PARTS, pool_mode: str = "0m") -> np.ndarray:
    """Fused projector input for one cloud: [class; mix; pooled] (subset per ``fusion``)."""
    seq = encoders.point_encode(cloud)
    mix = mix_pool(seq.tokens) if "mix" in fusion else None
    pooled = zero_param_pool(seq.tokens, pool_cfg, mode=pool_mode).pooled if "pooled" in fusion else None
    return fuse_tokens(seq.class_token, mix, pooled)


def add_noise(tokens: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian feature noise on encoder outputs (before the projector)."""
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0:
        return tokens
    return tokens + rng.normal(0.0, std, tokens.shape)


@dataclass
class Example:
    inputs: np.ndarray                         # P x C encoder tokens
    segments: list[tuple[list[int], bool]]     # text after the prefix
    record_id: str = ""
    rtype: str = ""                            # T3D record type, checked against the stage


# -- training state -----------------------------------------------------------------

@dataclass
class RunMetrics:
    losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    eval_snapshot: dict = field(default_factory=dict)

    def to_csv(self, stage: int) -> str:
        lines = ["stage,step,loss"]
        lines += [f"{stage},{i},{v!r}" for i, v in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


@dataclass
class TrainState:
    model: PLM
    cfg: StageConfig
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)


def new_state(model: PLM, cfg: StageConfig) -> TrainState:
    if "lora" in cfg.trainable:
        model.ensure_lora(seed=cfg.seed)
    model.set_trainable(cfg.trainable)
    opt = AdamW(model.trainable_parameters(cfg.trainable), lr=cfg.lr)
    return TrainState(model=model, cfg=cfg, optimizer=opt, rng=np.random.default_rng([cfg.seed, 99]))


def _epoch_order(cfg: StageConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, 7, epoch]).permutation(n)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def run_stage(model_or_state, cfg: StageConfig | None, data: Sequence[Example], *,
              max_steps: int | None = None, on_step: Callable[[TrainState], None] | None = None
              ) -> tuple[TrainState, RunMetrics]:
    """Train one stage; pass a TrainState (from a checkpoint) to resume.

    Only ``cfg.trainable`` parameters are updated. Raises TrainingError on a
    non-finite loss. ``max_steps`` stops early (used to simulate interruption).
    """
    if isinstance(model_or_state, TrainState):
        state = model_or_state
        cfg = state.cfg
    else:
        state = new_state(model_or_state, cfg)
    if not data:
        raise TrainingError(f"stage {cfg.stage}: no training examples")
    bad = [e.record_id for e in data if e.rtype and e.rtype not in cfg.data_types]
    if bad:
        raise TrainingError(f"stage {cfg.stage} got records of the wrong type (first: {bad[0]})")
    model = state.model
    frozen_before = model.frozen_hashes()
    spe = steps_per_epoch(len(data), cfg.batch_size)
    total = spe * cfg.epochs
    metrics = RunMetrics(losses=list(state.losses))
    t0 = time.perf_counter()
    tok = model.tokenizer
    frozen = model.decoder.parameters()
    while state.step < total:
        if max_steps is not None and state.step >= max_steps:
            break
        epoch, b = divmod(state.step, spe)
        order = _epoch_order(cfg, epoch, len(data))
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        batch_ex = [data[i] for i in idx]
        x = np.stack([e.inputs for e in batch_ex])
        x = add_noise(x, cfg.noise_std, state.rng)
        batch = build_batch([e.segments for e in batch_ex], prefix_len=x.shape[1], pad_id=tok.pad_id)
        prefix = model.projector(Tensor(x, dtype=ag.get_default_dtype()))
        _, loss = llm_forward(model.decoder, prefix, batch)
        lv = loss.item()
        if not math.isfinite(lv):
            raise TrainingError(f"stage {cfg.stage}: non-finite loss at step {state.step}")
        state.optimizer.zero_grad()
        loss.backward()
        for name, t in frozen.items():
            if t.grad is not None:
                raise TrainingError(f"frozen tensor {name} received a gradient")
        state.optimizer.step()
        state.step += 1
        state.losses.append(lv)
        metrics.losses.append(lv)
        if on_step is not None:
            on_step(state)
    metrics.wall_time = time.perf_counter() - t0
    if model.frozen_hashes() != frozen_before:
        raise TrainingError("frozen parameters changed during training")
    return state, metrics


# -- transfer / swap -----------------------------------------------------------------

def transfer_weights(prev, next_cfg: StageConfig, carry_lora: bool = True,
                     lora_cfg: LoraConfig | None = None) -> PLM:
    """Model for ``next_cfg`` initialised from a previous stage.

    The projector is copied verbatim; LoRA is carried over when present and
    ``carry_lora`` is set, otherwise freshly initialised (B = 0). Optimizer
    state and RNG are not carried: ``run_stage`` builds them from ``next_cfg``.
    """
    prev_stage = prev.cfg.stage if isinstance(prev, TrainState) else None
    model = prev.model if isinstance(prev, TrainState) else prev
    if prev_stage is not None and prev_stage >= next_cfg.stage:
        raise ValueError(f"cannot transfer from stage {prev_stage} to stage {next_cfg.stage}")
    new = model.copy()
    if not carry_lora:
        new.decoder.detach_lora()
    if lora_cfg is not None and not new.has_lora:
        new.lora_cfg = lora_cfg
    if "lora" in next_cfg.trainable:
        new.ensure_lora(seed=next_cfg.seed)
    return new


def swap_inference(model: PLM, clouds: Sequence[PointCloud], instruction: str,
                   max_len: int = 24) -> list[str]:
    """Text-trained model reading point clouds: the point encoder's class
    token takes the text class token's place. No weights change."""
    x = np.stack([model.encoders.point_encode(c).class_token[None, :] for c in clouds])
    return model.generate(x, instruction, max_len)


# -- base decoder pretraining ---------------------------------------------------------

def pretrain_segments(tok: Tokenizer, caption: str, qa: Sequence[tuple[str, str]]):
    from .model import conversation_segments

    segs = [([tok.bos_id] + tok.encode(caption), True)]
    segs += conversation_segments(tok, list(qa))
    return [(ids, True) for ids, _ in segs]


def pretrain_base(tok: Tokenizer, texts: Sequence[tuple[str, Sequence[tuple[str, str]]]],
                  dcfg: DecoderConfig, steps: int = 250, batch_size: int = 24, lr: float = 2e-3,
                  seed: int = 0) -> ToyDecoder:
    """Language-model pretraining of the base decoder on caption + QA text.

    Stands in for the pre-trained LLM: the result is frozen for all stages.
    """
    dec = ToyDecoder(dcfg)
    dec.set_base_trainable(True)
    opt = AdamW(dec.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 5])
    segs = [pretrain_segments(tok, c, qa) for c, qa in texts]
    for step in range(steps):
        idx = rng.choice(len(segs), size=min(batch_size, len(segs)), replace=False)
        batch = build_batch([segs[i] for i in idx], prefix_len=0, pad_id=tok.pad_id)
        _, loss = llm_forward(dec, None, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    dec.set_base_trainable(False)
    return dec


# -- checkpoints ------------------------------------------------------------------------

def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    m = state.model
    out = {k: t.data for k, t in m.projector.parameters().items()}
    out.update({k: t.data for k, t in m.decoder.lora_parameters().items()})
    out.update({k: t.data for k, t in m.decoder.parameters().items()})
    out.update(state.optimizer.state_tensors())
    return out


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    m = state.model
    meta = {
        "stage": state.cfg.stage,
        "step": state.step,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.config_hash(),
        "rng_state": state.rng.bit_generator.state,
        "optimizer_step": state.optimizer.step_count,
        "losses": state.losses,
        "lora": asdict(m.lora_cfg) | {"attached": m.has_lora},
        "pooling": asdict(m.pool_cfg),
        "decoder": asdict(m.decoder.cfg),
        "encoders": asdict(m.encoders.cfg),
        "projector": {"C": m.projector.C, "H": m.projector.H},
        "tokenizer": m.tokenizer.words,
        "frozen_hashes": m.frozen_hashes(),
    }
    meta["lora"]["targets"] = list(meta["lora"]["targets"])
    save_tensors(path, _state_tensors(state), meta)


def load_checkpoint(path: str | Path, encoders: FrozenEncoders | None = None) -> TrainState:
    tensors, meta = load_tensors(path)
    try:
        cfg = StageConfig.from_dict(meta["config"])
        tok = Tokenizer(meta["tokenizer"])
        dec = ToyDecoder(DecoderConfig(**meta["decoder"]))
        lc = meta["lora"]
        lora_cfg = LoraConfig(rank=lc["rank"], alpha=lc["alpha"], targets=tuple(lc["targets"]))
        if lc["attached"]:
            dec.attach_lora(lora_cfg.rank, lora_cfg.alpha, lora_cfg.targets)
        proj = Projector(meta["projector"]["C"], meta["projector"]["H"])
        enc = encoders or FrozenEncoders(EncoderConfig(**meta["encoders"]))
        model = PLM(tok, dec, enc, proj, lora_cfg, PoolingConfig(**meta["pooling"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint metadata incomplete: {exc}") from None
    for group in (proj.parameters(), dec.lora_parameters(), dec.parameters()):
        for name, t in group.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            if tensors[name].shape != t.shape:
                raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {t.shape}")
            t.data = np.array(tensors[name])
    model.set_trainable(cfg.trainable)
    opt = AdamW(model.trainable_parameters(cfg.trainable), lr=cfg.lr)
    try:
        opt.load_state_tensors(tensors, meta["optimizer_step"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing optimizer tensor {exc}") from None
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(model=model, cfg=cfg, optimizer=opt, rng=rng, step=meta["step"],
                      losses=list(meta["losses"]))


def load_model(path: str | Path, encoders: FrozenEncoders | None = None) -> PLM:
    return load_checkpoint(path, encoders).model
