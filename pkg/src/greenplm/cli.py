"""Command-line entry point: ``greenplm <command> ...``.

Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, parse_pairs
from .dataset import DatasetError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("greenplm")


class ValidationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args, names: list[str]) -> dict:
    out = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    pairs = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    out.update(parse_pairs(pairs, "--set"))
    return out


def _pool_cfg(cfg: RunConfig):
    from .pooling import PoolingConfig

    return PoolingConfig(M=cfg.pool_m, K=cfg.pool_k, start_rule=cfg.start_rule, scale_scores=cfg.scale_scores)


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .dataset import validate
    from .encoders import EncoderConfig
    from .pipeline import CorpusConfig, build_corpus

    cfg = load_config(args.config, _overrides(args, ["seed", "objects", "paired_objects", "eval_objects",
                                                     "stage1_brief", "stage2_detail", "stage2_single",
                                                     "stage2_multi", "points", "pretrain_steps"]))
    ccfg = CorpusConfig(seed=cfg.seed, text_objects=cfg.objects, paired_objects=cfg.paired_objects,
                        eval_objects=cfg.eval_objects, stage1_brief=cfg.stage1_brief,
                        stage2_detail=cfg.stage2_detail, stage2_single=cfg.stage2_single,
                        stage2_multi=cfg.stage2_multi, points=cfg.points, pretrain_steps=cfg.pretrain_steps,
                        encoder=EncoderConfig(C=cfg.C, n_patches=cfg.n_patches, group_size=cfg.group_size))
    try:
        ccfg.validate()
    except ValueError as exc:
        raise ValidationFailed(str(exc)) from None
    out = build_corpus(args.out, ccfg)
    cfg.echo(out)
    bad = 0
    for name in ("stage1", "stage2", "stage3", "eval"):
        for v in validate(out / f"{name}.jsonl"):
            print(f"{name}.jsonl {v}", file=sys.stderr)
            bad += 1
    if bad:
        raise ValidationFailed(f"{bad} validation problem(s) in the generated corpus")
    print(f"corpus written to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .dataset import validate

    bad = 0
    for path in args.files:
        if not Path(path).exists():
            raise ValidationFailed(f"no such file: {path}")
        for v in validate(path):
            print(f"{path}: {v}")
            bad += 1
    print(f"{bad} violation(s)")
    return EXIT_VALIDATION if bad else EXIT_OK


def cmd_stats(args) -> int:
    from .dataset import read_jsonl, stats

    recs = [r for p in args.files for r in read_jsonl(p)]
    s = stats(recs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "lengths.csv").write_text(s.to_csv())
    (out / "counts.csv").write_text(s.counts_csv())
    print(s.counts_csv(), end="")
    print(f"checksum {s.checksum()}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import Corpus, check_paired
    from .training import (LoraConfig, default_stage, load_checkpoint, run_stage, save_checkpoint,
                           transfer_weights)

    cfg = load_config(args.config, _overrides(args, ["stage", "corpus", "seed", "max_steps", "ckpt_every"]))
    out = Path(args.out)
    cfg.echo(out)
    corpus = Corpus(cfg.corpus)
    pool_cfg = _pool_cfg(cfg)
    lora_cfg = LoraConfig(rank=cfg.lora_rank, alpha=cfg.lora_alpha)
    ckpt_dir = out / "checkpoint"

    if args.resume:
        state = load_checkpoint(args.resume, corpus.encoders)
        scfg = state.cfg
        pool_cfg = state.model.pool_cfg
        start = state
        log.info("resuming stage %d at step %d", scfg.stage, state.step)
    else:
        try:
            scfg = default_stage(cfg.stage, cfg.seed, **cfg.stage_overrides())
        except ValueError as exc:
            raise ValidationFailed(str(exc)) from None
        if args.init:
            prev = load_checkpoint(args.init, corpus.encoders)
            if prev.cfg.stage >= scfg.stage:
                raise ValidationFailed(f"--init checkpoint is stage {prev.cfg.stage}; "
                                       f"it must precede stage {scfg.stage}")
            start = transfer_weights(prev, scfg, carry_lora=cfg.carry_lora, lora_cfg=lora_cfg)
            start.pool_cfg = pool_cfg
        else:
            if scfg.stage > 1:
                log.warning("stage %d without --init: fresh initialisation (stage-subset ablation)", scfg.stage)
            start = corpus.fresh_model(cfg.seed, lora_cfg, pool_cfg)
    if scfg.stage == 3:
        try:
            check_paired(corpus)
        except FileNotFoundError as exc:
            raise ValidationFailed(str(exc)) from None
    data = corpus.stage_data(scfg, pool_cfg)

    def on_step(state):
        if cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
            save_checkpoint(state, ckpt_dir)

    state, metrics = run_stage(start, scfg, data, max_steps=cfg.max_steps, on_step=on_step)
    save_checkpoint(state, ckpt_dir)
    (out / "metrics.csv").write_text(metrics.to_csv(scfg.stage))
    print(f"stage {scfg.stage}: {state.step} steps, final loss {metrics.losses[-1]:.4f}, "
          f"{metrics.wall_time:.1f}s; checkpoint at {ckpt_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .eval import ExternalJudge, LocalJudge, emit_report, evaluate
    from .pipeline import Corpus
    from .training import load_checkpoint

    cfg = load_config(args.config, _overrides(args, ["corpus", "eval_limit", "judge_url"]))
    out = Path(args.out)
    corpus = Corpus(cfg.corpus)
    state = load_checkpoint(args.ckpt, corpus.encoders)
    stage = state.cfg.stage
    if args.swap_encoder:
        mode = "swap"
    elif stage == 3:
        mode = "point"
    else:
        raise ValidationFailed(f"stage {stage} checkpoint was trained on text; pass --swap-encoder "
                               "to read point clouds through the text path")
    judge = (ExternalJudge(cfg.judge_url, timeout=cfg.judge_timeout, retries=cfg.judge_retries)
             if cfg.judge_url else LocalJudge(corpus.encoders))
    prompts = ("I", "C") if args.prompt == "both" else (args.prompt,)
    size_k = corpus.cfg.paired_objects / 1000 if stage == 3 else 0.0
    label = {1: "I", 2: "II", 3: "III"}[stage] + ("-swap" if mode == "swap" else "")
    res = evaluate(state.model, corpus, mode, task=args.task, prompts=prompts, judge=judge,
                   limit=cfg.eval_limit, name=Path(args.ckpt).name, stage=label, size_k=size_k,
                   fusion=state.cfg.fusion, pool_mode=state.cfg.pool_mode)
    cfg.echo(out)
    emit_report([res], out, name="report")
    detail = {"model": res.model, "stage": res.stage, "task": args.task, "mode": mode,
              "I_acc": res.i_acc, "C_acc": res.c_acc, "avg": res.avg, "caption_cos": res.caption_cos,
              "size_k": res.size_k, "a3dr": res.a3dr, "failed": res.failed, "warnings": res.warnings,
              "run_hash": res.run_hash, "config_hash": state.cfg.config_hash(), "samples": res.extra}
    (out / "eval.json").write_text(json.dumps(detail, indent=1, sort_keys=True) + "\n")
    print(json.dumps({k: detail[k] for k in ("stage", "I_acc", "C_acc", "avg", "caption_cos", "a3dr",
                                             "failed")}))
    return EXIT_OK


def cmd_a3dr(args) -> int:
    from .eval import a3dr

    try:
        print(f"{a3dr(args.acc, args.size_k):.6f}")
    except ValueError as exc:
        raise ValidationFailed(str(exc)) from None
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_suite, write_suite
    from .pipeline import Corpus

    cfg = load_config(args.config, _overrides(args, ["corpus", "eval_limit"]))
    Corpus(cfg.corpus)  # fail early if the corpus is missing
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    cells = run_suite(cfg.corpus, args.suite, seeds, cfg.eval_limit)
    out = Path(args.out)
    cfg.echo(out)
    for p in write_suite(cells, args.suite, out):
        print(p)
    failed = sum(c.error is not None for c in cells)
    if failed:
        print(f"{failed} cell(s) failed; see {args.suite}_cells.csv", file=sys.stderr)
    return EXIT_RUNTIME if failed == len(cells) else EXIT_OK


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="greenplm", description="Text-first 3D point-cloud language model pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the desk-scale corpus and pretrained base decoder")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--objects", type=int, help="text-only objects")
    g.add_argument("--paired", dest="paired_objects", type=int, help="objects paired with point clouds")
    g.add_argument("--eval-objects", dest="eval_objects", type=int)
    g.add_argument("--brief", dest="stage1_brief", type=int)
    g.add_argument("--detail", dest="stage2_detail", type=int)
    g.add_argument("--single-conv", dest="stage2_single", type=int)
    g.add_argument("--multi-conv", dest="stage2_multi", type=int)
    g.add_argument("--points", type=int)
    g.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("validate", help="check JSONL records")
    v.add_argument("files", nargs="+")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("stats", help="answer-length histograms and record counts")
    s.add_argument("files", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--corpus")
    t.add_argument("--config")
    t.add_argument("--init", help="checkpoint of the preceding stage")
    t.add_argument("--resume", help="checkpoint of an interrupted run of this stage")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out objects")
    e.add_argument("--task", choices=("cls-closed", "cls-open", "caption"), default="cls-closed")
    e.add_argument("--prompt", choices=("I", "C", "both"), default="both")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus")
    e.add_argument("--config")
    e.add_argument("--swap-encoder", action="store_true", help="read point clouds through a text-trained model")
    e.add_argument("--judge-url", dest="judge_url")
    e.add_argument("--limit", dest="eval_limit", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("a3dr", help="accuracy-per-3D-data-size score")
    a.add_argument("--acc", type=float, required=True, help="accuracy in percent")
    a.add_argument("--size-k", dest="size_k", type=float, required=True, help="3D data size in thousands")
    a.set_defaults(func=cmd_a3dr)

    b = sub.add_parser("ablate", help="run an ablation suite over seeds")
    b.add_argument("--suite", choices=("stages", "fusion", "noise", "pool"), required=True)
    b.add_argument("--corpus")
    b.add_argument("--config")
    b.add_argument("--seeds", default="0,1,2,3,4")
    b.add_argument("--limit", dest="eval_limit", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationFailed, ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
