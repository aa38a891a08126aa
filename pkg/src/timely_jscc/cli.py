"""Command-line entry point.

    timely-jscc simulate  --config c.toml --seed 7 --out-dir out/
    timely-jscc train     --steps 100000
    timely-jscc evaluate  --checkpoint out/agent.ckpt
    timely-jscc sweep     --d-min 22.5 25 27.5 30
    timely-jscc rd-profile --images imgs/
    timely-jscc grad-check

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import cli_io
from .engine import (LinkEnv, build_codec, build_dataset, evaluate, evaluate_fixed, run_episode, sweep_dmin,
                     train)
from .codec import profile_image
from .nn import Mlp, finite_diff_check
from .policy import AgentPolicy, FixedPolicy, PpoAgent, PpoConfig, ThresholdPolicy

GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML file with [sim] and [ppo] sections")
    p.add_argument("--seed", type=int, help="master seed (overrides [sim] seed)")
    p.add_argument("--out-dir", default="out", help="directory for CSV/JSON outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="timely-jscc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="run one episode and export its trace")
    p.add_argument("--policy", default="fixed", choices=["fixed", "threshold", "ppo"])
    p.add_argument("--level", type=int, default=2, help="action index for --policy fixed")
    p.add_argument("--checkpoint", help="agent checkpoint for --policy ppo")
    p.add_argument("--decisions", type=int, help="stop after this many decisions instead of the horizon")

    p = sub.add_parser("train", parents=[common], help="train the PPO allocator")
    p.add_argument("--steps", type=int, default=100_000)

    p = sub.add_parser("evaluate", parents=[common], help="compare a policy against the baselines")
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int, default=4)

    p = sub.add_parser("sweep", parents=[common], help="average VoI against the PSNR constraint")
    p.add_argument("--d-min", type=float, nargs="+", default=[22.5, 25.0, 27.5, 30.0])
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--episodes", type=int, default=4)

    p = sub.add_parser("rd-profile", parents=[common], help="per-image rate-distortion table")
    p.add_argument("--images", help="directory of .pgm/.ppm files (default: synthetic corpus)")
    p.add_argument("--count", type=int, default=20, help="synthetic corpus size")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the networks")
    p.add_argument("--nets", type=int, default=10)
    return parser


def _configs(args):
    if args.config:
        sim, ppo = cli_io.load_config(args.config)
    else:
        from .engine import SimConfig
        sim, ppo = SimConfig(), PpoConfig()
    if args.seed is not None:
        sim = sim.replace(seed=args.seed)
    return sim, ppo


def cmd_simulate(args, sim, ppo, out: Path) -> list:
    if args.policy == "fixed":
        policy = FixedPolicy(args.level, sim.space)
    elif args.policy == "threshold":
        policy = ThresholdPolicy(sim.d_min, sim.space)
    else:
        if not args.checkpoint:
            raise UsageError("--policy ppo needs --checkpoint")
        policy = AgentPolicy(PpoAgent.load(args.checkpoint))
    trace = run_episode(sim, policy, sim.seed, decisions=args.decisions)
    path = out / "trace.csv"
    cli_io.export_trace(trace, path)
    print(f"{len(trace)} decisions -> {path}")
    return [path]


def cmd_train(args, sim, ppo, out: Path) -> list:
    res = train(sim, ppo, args.steps, callback=lambda d: logging.info(
        "step %d  reward %.4f  entropy %.3f  psnr %.2f  lam %.4f",
        d["step"], d["mean_reward"], d["entropy"], d["mean_psnr"], d["lam"]))
    ckpt = out / "agent.ckpt"
    res.agent.save(ckpt, {"final_lam": res.lam})
    curves = out / "curves.csv"
    cols = ["step", "mean_reward", "mean_psnr", "mean_voi", "lam", "policy_loss", "value_loss", "entropy",
            "approx_kl", "clip_frac"]
    cli_io.write_csv(curves, cols, ([d[c] for c in cols] for d in res.curves))
    print(f"trained {args.steps} steps ({len(res.curves)} updates) -> {ckpt}")
    return [ckpt, Path(str(ckpt) + ".json"), curves]


def cmd_evaluate(args, sim, ppo, out: Path) -> list:
    env = LinkEnv(sim)
    rows = []
    if args.checkpoint:
        agent = PpoAgent.load(args.checkpoint)
        for mode in ("sample", "greedy"):
            rows.append(evaluate(sim, AgentPolicy(agent, mode), args.episodes, env=env))
    rows.append(evaluate(sim, ThresholdPolicy(sim.d_min, sim.space), args.episodes, env=env))
    rows += evaluate_fixed(sim, args.episodes, env=env)
    path = out / "evaluate.csv"
    cols = ["policy", "avg_voi", "avg_voi_time", "avg_psnr", "avg_reward", "constraint_ok", "decisions"]
    cli_io.write_csv(path, cols + ["histogram"],
                     ([r[c] for c in cols] + [" ".join(map(str, r["histogram"]))] for r in rows))
    for r in rows:
        print(f"{r['policy']:>18}  voi {r['avg_voi']:.4f}  psnr {r['avg_psnr']:.2f}  ok={r['constraint_ok']}")
    return [path]


def cmd_sweep(args, sim, ppo, out: Path) -> list:
    rows = sweep_dmin(sim, sorted(args.d_min), ppo, args.steps, args.episodes,
                      on_row=lambda r: print(f"d_min {r['d_min']:g}  {r['policy']:>8}  voi {r['avg_voi']:.4f}"
                                             f"  psnr {r['avg_psnr']:.2f}"))
    return cli_io.export_sweep(rows, out)


def cmd_rd_profile(args, sim, ppo, out: Path) -> list:
    codec = build_codec(sim)
    if args.images:
        items = cli_io.load_image_dir(args.images)
    elif sim.codec == "dct":
        from .source import synthetic_corpus
        items = [(img, f"synthetic_{i:03d}") for i, img in
                 enumerate(synthetic_corpus(args.count, sim.image_height, sim.image_width, sim.image_channels,
                                            seed=sim.seed))]
    else:
        items = [(s, f"seed_{s}") for s in build_dataset(sim)[: args.count]]
    rng = np.random.default_rng(sim.seed)
    levels = sim.levels
    rows = []
    for img, name in items:
        prof = profile_image(codec, img, sim.gamma_db, levels, sim.profile_trials, rng)
        rows.append([name] + [prof.per_action[e] for e in levels] + [prof.psnr_min, prof.psnr_max, prof.mu])
    path = out / "rd_profile.csv"
    header = ["image"] + [f"psnr_eta_{cli_io.fmt(e)}" for e in levels] + ["psnr_min", "psnr_max", "mu"]
    cli_io.write_csv(path, header, rows)
    print(f"{len(rows)} images -> {path}")
    return [path]


def grad_check(nets: int, seed: int) -> float:
    """Worst relative error over random actor- and critic-shaped networks."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(nets):
        head = "softmax" if k % 2 == 0 else "linear"
        out_dim = 6 if head == "softmax" else 1
        net = Mlp([4, 64, 64, out_dim], head, rng=rng)
        for p in net.params[1::2]:
            p[...] = rng.normal(0, 0.1, size=p.shape)
        x = rng.normal(size=(3, 4))
        target = rng.normal(size=(3, out_dim))
        if head == "softmax":
            onehot = np.eye(out_dim)[rng.integers(0, out_dim, size=3)]
            loss = lambda o, t=onehot: (float(-np.sum(t * np.log(o))), -t / o)
        else:
            loss = lambda o, t=target: (float(0.5 * np.sum((o - t) ** 2)), o - t)
        worst = max(worst, finite_diff_check(net, x, loss))
    return worst


def cmd_grad_check(args, sim, ppo, out: Path) -> list:
    worst = grad_check(args.nets, sim.seed)
    print(f"max relative error {worst:.3e} over {args.nets} networks")
    if worst >= GRAD_TOL:
        raise RuntimeError(f"gradient check failed: {worst:.3e} >= {GRAD_TOL:g}")
    return []


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "rd-profile": cmd_rd_profile,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    started = time.time()
    try:
        sim, ppo = _configs(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, sim, ppo, out)
        cfg = cli_io.config_dict(sim, ppo)
        cli_io.write_manifest(out, args.command, cfg, sim.seed, outputs, started)
    except UsageError as exc:
        print(f"timely-jscc: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"timely-jscc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
