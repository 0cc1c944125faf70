"""Command line: ``rolloutwm <subcommand> [--config FILE] [--seed N] [--steps N] [--out DIR]``.

Exit status is 0 on success, 1 for invalid input (bad flags, config, files)
and 2 when a stage fails at run time.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from . import worldsim as ws
from .config import RunConfig, dump_config, load_config
from .diffusion import SamplerConfig
from .errors import ConfigError, ContractViolation, DegenerateGeometryError, FormatError
from .metrics import drift_report
from .pipeline import distill, train_base, train_srr
from .rng import Rng
from .rollout import PursuitController, ZeroActionController, closed_loop_rollout, rollout_clips

log = logging.getLogger("rolloutwm")

MODELS = ("base", "srr", "student")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--steps", type=int, help="optimizer steps for training stages")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--allow-config-mismatch", action="store_true",
                   help="load checkpoints written for a different model config")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rolloutwm", description="Anti-drift autoregressive world model on a toy driving world.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate train and test datasets")
    _common(p)
    p.add_argument("--print-config", action="store_true", help="also write the resolved config to the output directory")

    p = sub.add_parser("train-base", help="stage 1: conditional flow-matching training")
    _common(p)

    p = sub.add_parser("train-srr", help="stage 2: scheduled rollout recovery")
    _common(p)

    p = sub.add_parser("distill", help="stage 3: teacher rollout distillation")
    _common(p)
    p.add_argument("--teacher", choices=("base", "srr"), default="srr")

    p = sub.add_parser("rollout", help="open-loop rollout of the test clips")
    _common(p)
    p.add_argument("--model", choices=MODELS, default="student")

    p = sub.add_parser("closed-loop", help="closed-loop rollout with a scripted controller")
    _common(p)
    p.add_argument("--model", choices=MODELS, default="student")
    p.add_argument("--clips", type=int, default=None, help="number of test clips to drive")

    p = sub.add_parser("eval", help="drift report of a rollout against ground truth")
    _common(p)
    p.add_argument("--rollout", help="rollout .npz (defaults to the configured path)")
    p.add_argument("--ground-truth", action="store_true", help="score ground truth against itself")
    p.add_argument("--per-chunk", action="store_true", help="per-chunk instead of cumulative statistics")

    p = sub.add_parser("report", help="summarize one or more drift-report CSVs")
    _common(p)
    p.add_argument("inputs", nargs="*", help="CSV files (defaults to the configured report)")
    return parser


def _resolve(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, overrides)


def _sampler_steps(cfg: RunConfig, model: str) -> int:
    return cfg.trd.student_steps if model == "student" else cfg.eval.sampler_steps


def _checkpoint(cfg: RunConfig, model: str) -> Path:
    return cfg.path(f"{model}_checkpoint")


def _load(cfg: RunConfig, model: str, args):
    return fileio.load_checkpoint(_checkpoint(cfg, model), cfg.model, args.allow_config_mismatch)


def _rng(cfg: RunConfig, stage: str) -> Rng:
    return Rng(cfg.seed).child(stage)


def cmd_gen_data(cfg: RunConfig, args) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(cfg.seed)
    train = ws.make_dataset(root.child("train").seed, cfg.data.train_clips, cfg.data.frames, cfg.world)
    test = ws.make_dataset(root.child("test").seed, cfg.data.test_clips, cfg.data.frames, cfg.world)
    fileio.write_dataset(train, cfg.path("dataset"))
    fileio.write_dataset(test, cfg.path("test_dataset"))
    if args.print_config:
        (out / "config.yaml").write_text(dump_config(cfg))
    print(f"wrote {len(train)} train and {len(test)} test clips to {out}")


def cmd_train_base(cfg: RunConfig, args) -> None:
    clips = fileio.read_dataset(cfg.path("dataset"))
    res = train_base(clips, cfg.base, _rng(cfg, "base"), model_config=cfg.model, steps=args.steps)
    fileio.save_checkpoint(res.model, _checkpoint(cfg, "base"))
    tail = f", final loss {np.mean(res.losses[-50:]):.4f}" if res.losses else ""
    print(f"base model trained for {len(res.losses)} steps{tail}")


def cmd_train_srr(cfg: RunConfig, args) -> None:
    clips = fileio.read_dataset(cfg.path("dataset"))
    res = train_srr(_load(cfg, "base", args), clips, cfg.srr, _rng(cfg, "srr"), steps=args.steps)
    fileio.save_checkpoint(res.model, _checkpoint(cfg, "srr"))
    tail = f", final loss {np.mean(res.losses[-50:]):.4f}" if res.losses else ""
    print(f"SRR model trained for {len(res.losses)} steps{tail}")


def cmd_distill(cfg: RunConfig, args) -> None:
    clips = fileio.read_dataset(cfg.path("dataset"))
    res = distill(_load(cfg, args.teacher, args), clips, cfg.trd, _rng(cfg, "trd"), steps=args.steps)
    fileio.save_checkpoint(res.model, _checkpoint(cfg, "student"))
    print(f"student distilled for {len(res.losses)} steps from the {args.teacher} teacher")


def cmd_rollout(cfg: RunConfig, args) -> None:
    model = _load(cfg, args.model, args)
    clips = fileio.read_dataset(cfg.path("test_dataset"))
    e = cfg.eval
    traj = rollout_clips(model, clips, cfg.base.T, e.n_chunks, e.chunk,
                         SamplerConfig(_sampler_steps(cfg, args.model)), _rng(cfg, "rollout"))
    path = cfg.path("rollout")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, latents=traj.latents, T=traj.T, K=traj.K)
    print(f"rolled {len(clips)} clips for {e.n_chunks} chunks of {e.chunk} frames -> {path}")


def cmd_closed_loop(cfg: RunConfig, args) -> None:
    model = _load(cfg, args.model, args)
    clips = fileio.read_dataset(cfg.path("test_dataset"))
    if args.clips is not None:
        clips = clips[:args.clips]
    c = cfg.closed_loop
    make = PursuitController if c.controller == "pursuit" else ZeroActionController
    controller = make(cfg.world)
    sampler = SamplerConfig(_sampler_steps(cfg, args.model))
    latents, actions = [], []
    for i, clip in enumerate(clips):
        res = closed_loop_rollout(model, ws.scene_for(clip, cfg.world), clip, cfg.base.T, controller,
                                  c.n_chunks, c.chunk, sampler, _rng(cfg, "closed-loop").child(i))
        latents.append(res.latents)
        actions.append(np.concatenate(res.actions))
    latents = np.stack(latents)
    path = cfg.path("rollout").with_name("closed_loop.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, latents=latents, actions=np.stack(actions), T=cfg.base.T, K=c.chunk)
    print(f"closed loop: {len(clips)} clips x {c.n_chunks} chunks, max latent norm "
          f"{np.linalg.norm(latents, axis=-1).max():.3f} -> {path}")


def cmd_eval(cfg: RunConfig, args) -> None:
    clips = fileio.read_dataset(cfg.path("test_dataset"))
    T = cfg.base.T
    if args.ground_truth:
        K, n = cfg.eval.chunk, cfg.eval.n_chunks
        generated = np.stack([c.latents[T:T + n * K] for c in clips])
    else:
        path = Path(args.rollout) if args.rollout else cfg.path("rollout")
        try:
            with np.load(path) as data:
                generated, K = data["latents"], int(data["K"])
        except (OSError, KeyError, ValueError) as e:
            raise FormatError(f"{path}: not a rollout file ({e})") from e
        n = generated.shape[1] // K
        if len(generated) != len(clips):
            raise ContractViolation(f"rollout has {len(generated)} clips, test set has {len(clips)}")
    gt = np.stack([c.latents[T:T + n * K] for c in clips])
    scenes = [ws.scene_for(c, cfg.world) for c in clips]
    report = drift_report(generated, gt, scenes, [c.anchor_ids for c in clips], K,
                          cumulative=not args.per_chunk)
    path = cfg.path("report")
    path.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_report(report, path)
    print(f"final-chunk latent Frechet {report.final_lfd:.6g}, ARE {report.are_deg[-1]:.4g} deg, "
          f"DTW {report.dtw[-1]:.4g}; {report.pose_failures} pose failures -> {path}")


def cmd_report(cfg: RunConfig, args) -> None:
    paths = args.inputs or [cfg.path("report")]
    print(f"{'report':40s} {'chunks':>6s} {'final_lfd':>10s} {'slope':>10s} {'final_are':>10s} {'final_dtw':>10s}")
    for p in paths:
        r = fileio.read_report(p)
        print(f"{str(p):40s} {len(r):6d} {r.final_lfd:10.5g} {r.slope():10.4g} "
              f"{r.are_deg[-1]:10.4g} {r.dtw[-1]:10.4g}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-srr": cmd_train_srr,
    "distill": cmd_distill,
    "rollout": cmd_rollout,
    "closed-loop": cmd_closed_loop,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.steps is not None and args.steps < 0:
            raise ConfigError("--steps must be non-negative")
        cfg = _resolve(args)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractViolation, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, DegenerateGeometryError, ArithmeticError, RuntimeError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
