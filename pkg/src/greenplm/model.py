"""Projector, LoRA adapters and the toy causal decoder.

Linear weights follow the (d_out, d_in) convention: ``y = x @ W.T``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .tokenizer import Tokenizer


def _param(arr: np.ndarray, trainable: bool, name: str) -> Tensor:
    return Tensor(arr, requires_grad=trainable, dtype=ag.get_default_dtype(), name=name)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ag.matmul(x, ag.transpose(w, (1, 0)) if w.requires_grad else Tensor(w.data.T, dtype=w.dtype))
    return y if b is None else y + b


# -- projector ------------------------------------------------------------------

class Projector:
    """Token-wise two-layer MLP: layer2(GeLU(layer1(x)))."""

    def __init__(self, C: int, H: int, seed: int = 0):
        rng = np.random.default_rng([seed, 101])
        self.C, self.H = C, H
        self.w1 = _param(rng.normal(0, 1 / math.sqrt(C), (H, C)), True, "projector.w1")
        self.b1 = _param(np.zeros(H), True, "projector.b1")
        self.w2 = _param(rng.normal(0, 1 / math.sqrt(H), (H, H)), True, "projector.w2")
        self.b2 = _param(np.zeros(H), True, "projector.b2")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.w1, self.b1, self.w2, self.b2)}

    def __call__(self, tokens) -> Tensor:
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        if x.shape[-1] != self.C:
            raise ag.DimensionError("projector", x.shape, (self.C,))
        return linear(ag.gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)


def projector_forward(projector: Projector, tokens) -> Tensor:
    return projector(tokens)


# -- LoRA ----------------------------------------------------------------------

class LoraAdapter:
    """Low-rank update (alpha / r) * B @ A on a frozen (d_out, d_in) weight."""

    def __init__(self, d_in: int, d_out: int, rank: int = 32, alpha: float = 64.0,
                 seed: int = 0, name: str = "lora"):
        if rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} exceeds min(d_in={d_in}, d_out={d_out})")
        rng = np.random.default_rng([seed, _name_seed(name)])
        self.rank, self.alpha, self.name = rank, alpha, name
        self.A = _param(rng.normal(0, 1 / math.sqrt(d_in), (rank, d_in)), True, f"{name}.A")
        self.B = _param(np.zeros((d_out, rank)), True, f"{name}.B")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> dict[str, Tensor]:
        return {self.A.name: self.A, self.B.name: self.B}

    def delta(self, x: Tensor) -> Tensor:
        return linear(linear(x, self.A), self.B) * self.scale

    def merged(self, base_w: np.ndarray) -> np.ndarray:
        return base_w + self.scale * (self.B.data @ self.A.data)


def _name_seed(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=4).digest(), "little")


def lora_forward(x, base_w, adapter: LoraAdapter | None) -> Tensor:
    """y = x @ W.T + (alpha / r) * x @ A.T @ B.T."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = base_w if isinstance(base_w, Tensor) else Tensor(base_w)
    if adapter is not None and adapter.A.shape[1] != w.shape[1]:
        raise ag.DimensionError("lora_forward", tuple(w.shape), tuple(adapter.A.shape))
    y = linear(x, w)
    return y if adapter is None else y + adapter.delta(x)


# -- decoder ---------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    E: int = 128
    layers: int = 4
    heads: int = 4
    context: int = 160
    seed: int = 0
    pos: str = "learned"  # "learned" (absolute embeddings), "rope" (rotary) or "none"


class ToyDecoder:
    """Pre-LN causal transformer with a tied output head.

    Base weights are frozen (``requires_grad=False``) unless ``trainable_base``
    is set, which only the base pretraining routine does.
    """

    def __init__(self, cfg: DecoderConfig):
        if cfg.E % cfg.heads:
            raise ValueError("E must be divisible by heads")
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 202])
        E, V = cfg.E, cfg.vocab_size
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0, 0.1, (V, E)),
            "ln_f.g": np.ones(E), "ln_f.b": np.zeros(E),
        }
        pos = rng.normal(0, 0.02, (cfg.context, E))
        if cfg.pos not in ("rope", "learned", "none"):
            raise ValueError(f"unknown position scheme {cfg.pos!r}")
        if cfg.pos == "learned":
            p["pos_emb"] = pos
        res_scale = 1 / math.sqrt(2 * cfg.layers)
        for i in range(cfg.layers):
            pre = f"h{i}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(E), np.zeros(E)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(E), np.zeros(E)
            for k in ("q", "k", "v"):
                p[pre + f"attn.{k}"] = rng.normal(0, 1 / math.sqrt(E), (E, E))
            p[pre + "attn.o"] = rng.normal(0, res_scale / math.sqrt(E), (E, E))
            p[pre + "mlp.fc"] = rng.normal(0, 1 / math.sqrt(E), (4 * E, E))
            p[pre + "mlp.fc_b"] = np.zeros(4 * E)
            p[pre + "mlp.proj"] = rng.normal(0, res_scale / math.sqrt(4 * E), (E, 4 * E))
            p[pre + "mlp.proj_b"] = np.zeros(E)
        self.params = {k: _param(v, False, f"decoder.{k}") for k, v in p.items()}
        self.lora: dict[str, LoraAdapter] = {}
        mask = np.triu(np.full((cfg.context, cfg.context), -1e9), k=1)
        self._mask = mask
        self._rope = _rope_tables(cfg.context, E // cfg.heads) if cfg.pos == "rope" else None

    # -- parameter management --
    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.params.values()}

    def lora_parameters(self) -> dict[str, Tensor]:
        out = {}
        for ad in self.lora.values():
            out.update(ad.parameters())
        return out

    def set_base_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def attach_lora(self, rank: int = 32, alpha: float = 64.0, targets=("q", "v"), seed: int = 0) -> None:
        E = self.cfg.E
        self.lora = {}
        for i in range(self.cfg.layers):
            for t in targets:
                name = f"lora.h{i}.{t}"
                self.lora[f"h{i}.attn.{t}"] = LoraAdapter(E, E, rank, alpha, seed=seed, name=name)

    def detach_lora(self) -> None:
        self.lora = {}

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # -- forward --
    def embed(self, ids: np.ndarray) -> Tensor:
        return ag.gather(self.params["tok_emb"], ids)

    def _proj(self, x: Tensor, key: str) -> Tensor:
        return lora_forward(x, self.params[key], self.lora.get(key))

    def forward_embeds(self, x: Tensor) -> Tensor:
        """Logits (B, T, V) for input embeddings (B, T, E)."""
        cfg = self.cfg
        B, T, E = x.shape
        if T > cfg.context:
            raise ValueError(f"sequence length {T} exceeds context window {cfg.context}")
        P = self.params
        h = x
        if cfg.pos == "rope":
            cos, sin = (Tensor(t[:T], dtype=x.dtype) for t in self._rope)
        elif cfg.pos == "learned":
            pe = P["pos_emb"]
            h = x + (pe[:T] if pe.requires_grad else Tensor(pe.data[:T], dtype=x.dtype))
        nh, hd = cfg.heads, E // cfg.heads
        mask = Tensor(self._mask[:T, :T], dtype=x.dtype)
        for i in range(cfg.layers):
            pre = f"h{i}."
            a = ag.layer_norm(h, P[pre + "ln1.g"], P[pre + "ln1.b"])
            q = self._proj(a, pre + "attn.q").reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
            k = self._proj(a, pre + "attn.k").reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
            v = self._proj(a, pre + "attn.v").reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
            if cfg.pos == "rope":
                q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
            k = k.transpose(0, 1, 3, 2)
            att = ag.softmax(ag.matmul(q, k) * (1.0 / math.sqrt(hd)) + mask, axis=-1)
            o = ag.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, E)
            h = h + self._proj(o, pre + "attn.o")
            m = ag.layer_norm(h, P[pre + "ln2.g"], P[pre + "ln2.b"])
            m = ag.gelu(linear(m, P[pre + "mlp.fc"], P[pre + "mlp.fc_b"]))
            h = h + linear(m, P[pre + "mlp.proj"], P[pre + "mlp.proj_b"])
        h = ag.layer_norm(h, P["ln_f.g"], P["ln_f.b"])
        emb = P["tok_emb"]
        head = ag.transpose(emb, (1, 0)) if emb.requires_grad else Tensor(emb.data.T, dtype=emb.dtype)
        return ag.matmul(h, head)


def _rope_tables(context: int, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    inv = base ** (-np.arange(0, head_dim, 2) / head_dim)
    ang = np.arange(context)[:, None] * inv[None, :]
    return np.concatenate([np.cos(ang)] * 2, axis=1), np.concatenate([np.sin(ang)] * 2, axis=1)


def _rotate(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotary position embedding on (B, heads, T, head_dim)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return x * cos + ag.concat([-x2, x1], axis=-1) * sin


# -- sequence assembly ----------------------------------------------------------

@dataclass
class Batch:
    """Token ids after the prefix, plus next-token targets and loss mask.

    ``ids``: (B, S) text ids following the prefix; ``targets``/``mask`` are
    aligned with the full sequence (B, P + S) for next-token prediction.
    """

    ids: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    prefix_len: int


def build_batch(segments_list: list[list[tuple[list[int], bool]]], prefix_len: int,
                pad_id: int = 0) -> Batch:
    """Assemble padded id arrays from per-sample segment lists.

    Each segment is ``(ids, is_target)``; target segments contribute to the
    loss, everything else (including the prefix) is masked out.
    """
    seqs, flags = [], []
    for segs in segments_list:
        ids, fl = [], []
        for toks, is_target in segs:
            ids.extend(toks)
            fl.extend([is_target] * len(toks))
        seqs.append(ids)
        flags.append(fl)
    S = max(len(s) for s in seqs)
    Bn = len(seqs)
    ids = np.full((Bn, S), pad_id, dtype=np.int64)
    T = prefix_len + S
    targets = np.zeros((Bn, T), dtype=np.int64)
    mask = np.zeros((Bn, T), dtype=bool)
    for b, (s, fl) in enumerate(zip(seqs, flags)):
        ids[b, : len(s)] = s
        for j, (tok, is_t) in enumerate(zip(s, fl)):
            pos = prefix_len + j - 1  # logits at pos predict token j
            if pos >= 0:
                targets[b, pos] = tok
                mask[b, pos] = is_t
    return Batch(ids=ids, targets=targets, mask=mask, prefix_len=prefix_len)


def llm_forward(decoder: ToyDecoder, prefix_embeds: Tensor | None, batch: Batch):
    """Logits over the full sequence and the masked causal-LM loss."""
    text = decoder.embed(batch.ids)
    x = text if prefix_embeds is None else ag.concat([prefix_embeds, text], axis=1)
    logits = decoder.forward_embeds(x)
    loss = ag.cross_entropy(logits, batch.targets, batch.mask)
    return logits, loss


def single_turn_segments(tok: Tokenizer, instruction: str, answer: str) -> list[tuple[list[int], bool]]:
    return [([tok.sep_id] + tok.encode(instruction) + [tok.sep_id], False),
            (tok.encode(answer) + [tok.eos_id], True)]


def conversation_segments(tok: Tokenizer, qa: list[tuple[str, str]]) -> list[tuple[list[int], bool]]:
    segs: list[tuple[list[int], bool]] = []
    for i, (q, a) in enumerate(qa):
        segs.append(([tok.sep_id] + tok.encode(q) + [tok.sep_id], False))
        end = tok.eos_id if i == len(qa) - 1 else tok.sep_id
        segs.append((tok.encode(a) + [end], True))
    return segs


def generate(decoder: ToyDecoder, tok: Tokenizer, prefix_embeds: np.ndarray | None,
             instruction: str, max_len: int = 24) -> list[str]:
    """Greedy decoding for a batch of prefixes sharing one instruction.

    ``prefix_embeds``: (B, P, E) array, or None for a text-only prompt.
    Stops at EOS/SEP or after ``max_len`` tokens.
    """
    prompt = [tok.sep_id] + tok.encode(instruction) + [tok.sep_id]
    Bn = 1 if prefix_embeds is None else prefix_embeds.shape[0]
    if max_len <= 0:
        return [""] * Bn
    ids = np.tile(np.asarray(prompt, dtype=np.int64), (Bn, 1))
    out = [[] for _ in range(Bn)]
    done = np.zeros(Bn, dtype=bool)
    with ag.no_grad():
        pre = None if prefix_embeds is None else Tensor(prefix_embeds, dtype=ag.get_default_dtype())
        for _ in range(max_len):
            text = decoder.embed(ids)
            x = text if pre is None else ag.concat([pre, text], axis=1)
            if x.shape[1] > decoder.cfg.context:
                break
            logits = decoder.forward_embeds(x).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            for b in range(Bn):
                if done[b]:
                    continue
                if nxt[b] in (tok.eos_id, tok.sep_id, tok.pad_id):
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return [tok.decode(o).strip() for o in out]
