"""Flat ``key = value`` run configuration.

One file can drive every subcommand; each command reads the keys it needs.
Precedence: defaults < config file < command-line flags. Unknown keys are
rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    corpus: str = "corpus"
    # stage
    stage: int = 1
    seed: int = 0
    lr: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    noise_std: float | None = None
    fusion: str = "class,mix,pooled"
    pool_mode: str = "0m"
    carry_lora: bool = True
    lora_rank: int = 32
    lora_alpha: float = 64.0
    max_steps: int | None = None
    ckpt_every: int = 0
    # pooling
    pool_m: int = 32
    pool_k: int = 8
    start_rule: str = "first"
    scale_scores: bool = False
    # encoders
    C: int = 64
    n_patches: int = 512
    group_size: int = 32
    # dataset
    objects: int = 1000
    paired_objects: int = 200
    eval_objects: int = 200
    stage1_brief: int = 2000
    stage2_detail: int = 160
    stage2_single: int = 160
    stage2_multi: int = 80
    points: int = 1024
    pretrain_steps: int = 250
    # eval
    eval_limit: int | None = None
    judge_url: str | None = None
    judge_timeout: float = 10.0
    judge_retries: int = 3

    def fusion_parts(self) -> tuple[str, ...]:
        return tuple(p.strip() for p in self.fusion.split(",") if p.strip())

    def stage_overrides(self) -> dict[str, Any]:
        out = {k: getattr(self, k) for k in ("lr", "epochs", "batch_size", "noise_std")
               if getattr(self, k) is not None}
        if self.stage == 3:
            out.update(fusion=self.fusion_parts(), pool_mode=self.pool_mode)
        return out

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def echo(self, out_dir: str | Path) -> Path:
        p = Path(out_dir) / "config.txt"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.dumps())
        return p


_HINTS = get_type_hints(RunConfig)


def _convert(key: str, raw: str) -> Any:
    hint = _HINTS[key]
    text = raw.strip()
    optional = "None" in str(hint)
    if optional and text.lower() in ("none", ""):
        return None
    base = hint
    if optional:
        base = next(a for a in hint.__args__ if a is not type(None))
    try:
        if base is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return base(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from None


def parse_pairs(pairs: dict[str, str], source: str = "config") -> dict[str, Any]:
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for k, v in pairs.items():
        if k not in known:
            raise ConfigError(f"{source}: unknown key {k!r}")
        out[k] = _convert(k, v)
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v
    return parse_pairs(pairs, str(path))


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
    for k, v in (overrides or {}).items():
        if k not in _HINTS:
            raise ConfigError(f"unknown key {k!r}")
        if v is not None:
            values[k] = v
    return dataclasses.replace(RunConfig(), **values)
