"""Zero-parameter token pooling and token fusion.

Compresses an N x C token sequence to M x C by picking M centres with
farthest-point sampling, grouping each centre with its K nearest tokens,
and attending over the group with the group's elementwise max as the query.
Nothing in this module is learnable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# The pooling path owns no trainable tensors; kept as an explicit registry so
# callers can assert it.
PARAMETERS: dict[str, np.ndarray] = {}

START_RULES = ("first", "max_norm")
POOL_MODES = ("0m", "max", "mean")


def parameters() -> dict[str, np.ndarray]:
    return dict(PARAMETERS)


@dataclass(frozen=True)
class PoolingConfig:
    M: int = 32
    K: int = 8
    start_rule: str = "first"
    scale_scores: bool = False

    def validate(self, n_tokens: int) -> None:
        if not 1 <= self.M <= n_tokens:
            raise ValueError(f"M={self.M} must be in [1, {n_tokens}]")
        if not 1 <= self.K <= n_tokens:
            raise ValueError(f"K={self.K} must be in [1, {n_tokens}]")
        if self.start_rule not in START_RULES:
            raise ValueError(f"unknown start_rule {self.start_rule!r}")


@dataclass
class PooledTokens:
    pooled: np.ndarray       # M x C
    centers_idx: np.ndarray  # M
    groups_idx: np.ndarray   # M x K
    maxpooled: np.ndarray    # M x C
    weights: np.ndarray      # M x K attention weights


def _start_index(T: np.ndarray, start_rule: str) -> int:
    if start_rule == "first":
        return 0
    if start_rule == "max_norm":
        return int(np.argmax(np.einsum("nc,nc->n", T, T)))
    raise ValueError(f"unknown start_rule {start_rule!r}")


def fps_tokens(T: np.ndarray, M: int, start_rule: str = "first") -> np.ndarray:
    """Greedy farthest-point sampling; indices returned in selection order.

    Ties go to the lowest index. Already selected indices are never picked
    again, so M == N yields a permutation.
    """
    T = np.asarray(T, dtype=np.float64)
    N = T.shape[0]
    if M > N:
        raise ValueError(f"cannot sample M={M} centres from N={N} tokens")
    if M <= 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(T)):
        raise ValueError("fps_tokens: non-finite tokens")
    out = np.empty(M, dtype=np.int64)
    cur = _start_index(T, start_rule)
    mind = np.full(N, np.inf)
    for i in range(M):
        out[i] = cur
        diff = T - T[cur]
        mind = np.minimum(mind, np.einsum("nc,nc->n", diff, diff))
        mind[out[: i + 1]] = -np.inf
        cur = int(np.argmax(mind))
    return out


def knn_tokens(centers_idx: np.ndarray, T: np.ndarray, K: int) -> np.ndarray:
    """K nearest tokens for each centre, sorted by (distance, index)."""
    T = np.asarray(T, dtype=np.float64)
    if not 1 <= K <= T.shape[0]:
        raise ValueError(f"K={K} must be in [1, {T.shape[0]}]")
    C = T[np.asarray(centers_idx, dtype=np.int64)]
    # direct differences rather than the |a|^2 - 2ab + |b|^2 expansion keeps
    # exact ties exact
    diff = T[None, :, :] - C[:, None, :]
    d = np.einsum("mnc,mnc->mn", diff, diff)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :K]


def zero_param_pool(T: np.ndarray, cfg: PoolingConfig = PoolingConfig(),
                    mode: str = "0m") -> PooledTokens:
    """Pool N tokens to M with max-query attention over each KNN group.

    ``mode`` selects the group aggregation: ``"0m"`` (attention), or the
    plain ``"max"`` / ``"mean"`` baselines used in ablations.
    """
    T = np.asarray(T)
    if not np.all(np.isfinite(T)):
        raise ValueError("zero_param_pool: non-finite tokens")
    cfg.validate(T.shape[0])
    centers = fps_tokens(T, cfg.M, cfg.start_rule)
    groups = knn_tokens(centers, T, cfg.K)
    Tp = T[groups]                      # M x K x C
    Tm = Tp.max(axis=1)                 # M x C
    if mode == "0m":
        scores = np.einsum("mkc,mc->mk", Tp, Tm)
        if cfg.scale_scores:
            scores = scores / np.sqrt(T.shape[1])
        scores = scores - scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w = w / w.sum(axis=1, keepdims=True)
    elif mode == "mean":
        w = np.full(groups.shape, 1.0 / cfg.K)
    elif mode == "max":
        w = np.full(groups.shape, np.nan)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    pooled = Tm.copy() if mode == "max" else np.einsum("mk,mkc->mc", w, Tp)
    return PooledTokens(pooled=pooled.astype(T.dtype, copy=False), centers_idx=centers,
                        groups_idx=groups, maxpooled=Tm, weights=w)


def mix_pool(T: np.ndarray) -> np.ndarray:
    """Rows: elementwise max, mean and sum over the token axis."""
    T = np.asarray(T)
    if T.shape[0] < 1:
        raise ValueError("mix_pool needs at least one token")
    return np.stack([T.max(axis=0), T.mean(axis=0), T.sum(axis=0)])


def fuse_tokens(class_token: np.ndarray, mix: np.ndarray | None = None,
                pooled: np.ndarray | None = None) -> np.ndarray:
    """Concatenate [class; mix; pooled] along the token axis.

    ``mix`` or ``pooled`` may be None (or have zero rows) for the token-fusion
    ablations; the class token is always present.
    """
    cls = np.atleast_2d(np.asarray(class_token))
    C = cls.shape[1]
    parts = [cls]
    for name, block in (("mix", mix), ("pooled", pooled)):
        if block is None:
            continue
        block = np.asarray(block)
        if block.size == 0:
            continue
        if block.ndim != 2 or block.shape[1] != C:
            raise ValueError(f"fuse_tokens: {name} has shape {block.shape}, expected (*, {C})")
        parts.append(block)
    return np.concatenate(parts, axis=0)
