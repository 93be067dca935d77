"""Command-line entry point: ``adtransfer <command> [options]``.

Every command reads an experiment config (``--config``, defaults built in),
writes CSV/JSONL/JSON artifacts under ``--out-dir`` and exits nonzero when a
stage fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from .agent import QAgent
from .config import ExperimentConfig, dump_config, load_config
from .dataset import load, save
from .env import ConfigError
from .evaluation import DEFAULT_METHODS, evaluate, make_datasets, reports_to_csv, run_grid, sweep
from .nsr import load_model, save_model
from .trainer import METHODS, Pretrained, pretrain_nsr, pretrain_source_agent, run_algorithm1, write_log

log = logging.getLogger("adtransfer")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment config JSON (see configs/default.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.add_argument("--tau", type=float, help="similarity threshold for source samples")
    p.add_argument("--beta-min", type=int)
    p.add_argument("--beta-max", type=int)
    p.add_argument("--beta-direction", choices=("shrink", "grow"))
    p.add_argument("--weighted-instances", action="store_true", help="keep all source samples, scale Loss_RL by w")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="adtransfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate NSR-annotated source.jsonl and target.jsonl")

    p = sub.add_parser("train-nsr", parents=[common], help="fit the NSR model of one entrance")
    p.add_argument("--entrance", choices=("source", "target"), required=True)

    sub.add_parser("train-source", parents=[common], help="pre-train the source agent")

    p = sub.add_parser("train-target", parents=[common], help="train the target agent for one method")
    p.add_argument("--method", choices=METHODS, default="shtaa")

    p = sub.add_parser("evaluate", parents=[common], help="roll out a saved agent in the target entrance")
    p.add_argument("--agent", type=Path, required=True)
    p.add_argument("--episodes", type=int, help="defaults to eval_episodes from the config")

    p = sub.add_parser("grid", parents=[common], help="methods x seeds table")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(DEFAULT_METHODS))
    p.add_argument("--n-seeds", type=int, default=5)

    p = sub.add_parser("sweep", parents=[common], help="one method over values of N or tau")
    p.add_argument("--param", choices=("N", "tau"), required=True)
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--method", choices=METHODS, default="shtaa")
    p.add_argument("--n-seeds", type=int, default=5)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    sim = cfg.transfer.similarity
    if args.tau is not None:
        sim.tau = args.tau
    if args.beta_min is not None:
        sim.beta_min = args.beta_min
    if args.beta_max is not None:
        sim.beta_max = args.beta_max
    if args.beta_direction is not None:
        sim.beta_direction = args.beta_direction
    if args.weighted_instances:
        sim.weighted_mode = True
    sim.__post_init__()
    cfg = cfg.with_transfer(seed=args.seed)
    cfg.validate()
    return cfg


def _datasets(out: Path):
    paths = [out / "source.jsonl", out / "target.jsonl"]
    for path in paths:
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run gen-data first")
    return load(paths[0]), load(paths[1])


def cmd_gen_data(cfg, args) -> None:
    D_S, D_T = make_datasets(cfg, args.seed)
    save(D_S, args.out_dir / "source.jsonl")
    save(D_T, args.out_dir / "target.jsonl")
    log.info("wrote %d source and %d target transitions", len(D_S), len(D_T))


def cmd_train_nsr(cfg, args) -> None:
    D_S, D_T = _datasets(args.out_dir)
    D = D_S if args.entrance == "source" else D_T
    stream = 1 if args.entrance == "source" else 2
    model = pretrain_nsr(D, cfg.n_actions, cfg.transfer, stream)
    save_model(model, args.out_dir / f"nsr_{args.entrance}.json")


def cmd_train_source(cfg, args) -> None:
    D_S, _ = _datasets(args.out_dir)
    pretrain_source_agent(D_S, cfg.n_actions, cfg.transfer).save(args.out_dir / "agent_source.json")


def _saved_pretrained(out: Path) -> Optional[Pretrained]:
    paths = [out / "nsr_source.json", out / "nsr_target.json", out / "agent_source.json"]
    if not all(p.exists() for p in paths):
        return None
    return Pretrained(load_model(paths[0]), load_model(paths[1]), QAgent.load(paths[2]).freeze())


def cmd_train_target(cfg, args) -> None:
    D_S, D_T = _datasets(args.out_dir)
    tcfg = cfg.with_transfer(method=args.method).transfer
    pre = None
    if args.method not in ("no_transfer", "all_transfer"):
        pre = _saved_pretrained(args.out_dir)
        if pre is None:
            log.info("no saved NSR models / source agent in %s; pre-training now", args.out_dir)
    result = run_algorithm1(D_S, D_T, tcfg, cfg.n_actions, pre)
    result.agent_T.save(args.out_dir / f"agent_target_{args.method}.json")
    write_log(result.log, args.out_dir / f"train_log_{args.method}.csv")
    save(result.merged, args.out_dir / f"merged_{args.method}.jsonl")


def cmd_evaluate(cfg, args) -> None:
    agent = QAgent.load(args.agent)
    n = args.episodes or cfg.eval_episodes
    r_ad, r_fee = evaluate(agent, cfg.target_profile, n, args.seed, L=cfg.feature_L)
    out = args.out_dir / "evaluation.csv"
    out.write_text(f"agent,episodes,seed,R_ad,R_fee\n{args.agent},{n},{args.seed},{r_ad!r},{r_fee!r}\n")
    print(f"R_ad={r_ad:.6f} R_fee={r_fee:.6f}")


def _report(reports, path: Path) -> None:
    path.write_text(reports_to_csv(reports))
    failed = [r.label or r.method for r in reports if r.status != "ok"]
    for r in reports:
        print(f"{r.label or r.method:<14} R_ad {r.R_ad_mean:.4f} +- {r.R_ad_std:.4f}  "
              f"R_fee {r.R_fee_mean:.4f} +- {r.R_fee_std:.4f}  [{r.status}]")
    if failed:
        raise RuntimeError(f"failed rows: {', '.join(failed)}")


def _seeds(args) -> List[int]:
    return list(range(args.seed, args.seed + args.n_seeds))


def cmd_grid(cfg, args) -> None:
    _report(run_grid(args.methods, cfg, seeds=_seeds(args)), args.out_dir / "grid.csv")


def cmd_sweep(cfg, args) -> None:
    values = [int(v) for v in args.values] if args.param == "N" else args.values
    reports = sweep(args.param, values, cfg, seeds=_seeds(args), method=args.method)
    _report(reports, args.out_dir / f"sweep_{args.param}.csv")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-nsr": cmd_train_nsr,
    "train-source": cmd_train_source,
    "train-target": cmd_train_target,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "sweep": cmd_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    torch.set_num_threads(1)
    try:
        cfg = _config(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "config.json").write_text(dump_config(cfg) + "\n")
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"adtransfer {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
