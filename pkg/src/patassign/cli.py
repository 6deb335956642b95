"""Command line entry point: ``patassign <subcommand> [options]``."""

from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .adp import FeatureScheme, Weights, initial_weights, train
from .config import Config, ConfigError, builtin_config, load_config
from .exact import build_mdp, policy_iteration
from .kernels import BinomialTerm, occupancy_departure_pmf, sum_binomial_pmf
from .model import BoundedTransfer, DimensionError, InfeasibleAssignmentError, InstanceTooLargeError, \
    post_decision_state_count
from .sim import FixedPolicy, GreedyPolicy, compare_policies, run_replications

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_TOO_LARGE = 4


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _nonnegative(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {v}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be a nonnegative integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"seed must be a nonnegative integer, got {v}")
    return v


def _config(args) -> Config:
    if args.config is None:
        raise UsageError("--config is required")
    if args.config.startswith("builtin:"):
        return builtin_config(args.config.split(":", 1)[1])
    return load_config(args.config)


def _header(cfg: Config | None, args, seed: int | None) -> list[str]:
    lines = [f"patassign {__version__}", f"command: {args.command}"]
    if cfg is not None:
        lines.append(f"config: {args.config} sha256:{cfg.digest}")
    if seed is not None:
        lines.append(f"seed: {seed}")
    return lines


def _out(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _pick(value, fallback):
    return fallback if value is None else value


def resolve_policy(spec: str, cfg: Config):
    """``a1``-style label name, ``y<N>`` budget, or ``weights:<file>``."""
    if spec.startswith("weights:"):
        weights, scheme = Weights.load(spec.split(":", 1)[1])
        scheme = scheme or cfg.run.scheme
        weights.check(cfg.params, scheme)
        return GreedyPolicy(weights, scheme, cfg.labels)
    try:
        return FixedPolicy(cfg.label(spec))
    except KeyError:
        pass
    if spec.startswith("y") and spec[1:].isdigit():
        return FixedPolicy(BoundedTransfer(int(spec[1:]), spec))
    known = ", ".join(lab.name for lab in cfg.labels)
    raise UsageError(f"unknown policy {spec!r}; use one of {known}, y<N> or weights:<file>")


def cmd_solve_exact(args) -> int:
    cfg = _config(args)
    try:
        mdp = build_mdp(cfg.params, cfg.labels)
    except InstanceTooLargeError as err:
        size = post_decision_state_count(cfg.params)
        print(f"error: {err}; the post-decision space alone has {size:.4e} states. "
              f"Use `patassign train` for approximate solutions.", file=sys.stderr)
        return EXIT_TOO_LARGE
    sol = policy_iteration(mdp)
    print("\n".join(f"# {line}" for line in _header(cfg, args, None)))
    print(sol.summary())
    if args.out:
        sol.bias_to_csv(_out(args, "bias.csv"), _header(cfg, args, None))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    run = cfg.run
    seed = _pick(args.seed, run.seed)
    iterations = _pick(args.iterations, run.iterations)
    steps = _pick(args.steps, run.steps)
    scheme = FeatureScheme(args.scheme) if args.scheme else run.scheme
    rng = np.random.default_rng(seed)

    def progress(it, gain, diag):
        print(f"iteration {it}: gain {gain:.6f} ({diag})", file=sys.stderr, flush=True)

    report = train(cfg.params, scheme, cfg.labels, initial_weights(cfg.params, scheme), iterations, steps, rng,
                   burn_in=run.burn_in, gain_steps=run.gain_steps, progress=progress)
    head = _header(cfg, args, seed) + [f"iterations: {iterations}", f"steps: {steps}"]
    print("\n".join(f"# {line}" for line in head))
    print(f"scheme: {scheme.value}")
    for it, g in enumerate(report.gains):
        print(f"gain[{it}]: {g:.6f}")
    if args.out:
        report.to_csv(_out(args, "train.csv"), head)
        report.final.save(_out(args, "weights.txt"), head, scheme)
    return EXIT_OK


def _sim_settings(args, cfg):
    run = cfg.run
    return (_pick(args.days, run.days), _pick(args.reps, run.reps), _pick(args.seed, run.seed),
            _pick(args.warmup, run.warmup), _pick(args.threads, run.threads))


def cmd_simulate(args) -> int:
    cfg = _config(args)
    days, reps, seed, warmup, threads = _sim_settings(args, cfg)
    if warmup >= days:
        raise UsageError(f"--warmup {warmup} must be below --days {days}")
    policy = resolve_policy(args.policy or cfg.labels[0].name, cfg)
    rep = run_replications(cfg.params, policy, days, reps, seed, warmup, threads, keep_days=args.day_reps)
    head = _header(cfg, args, seed) + [f"policy: {policy.name}", f"days: {days}", f"reps: {reps}",
                                       f"warmup: {warmup}"]
    print("\n".join(f"# {line}" for line in head))
    print(yaml.safe_dump({"summary": rep.summary(), "label_frequencies": rep.label_frequencies}, sort_keys=False),
          end="")
    if args.out:
        rep.to_csv(_out(args, "replications.csv"), head)
        if args.day_reps:
            rep.days_to_csv(_out(args, "days.csv"), head)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    days, reps, seed, warmup, threads = _sim_settings(args, cfg)
    if warmup >= days:
        raise UsageError(f"--warmup {warmup} must be below --days {days}")
    specs = args.policy or [lab.name for lab in cfg.labels]
    policies = [resolve_policy(s, cfg) for s in specs]
    if len(policies) < 2:
        raise UsageError("compare needs at least two policies")
    table = compare_policies(cfg.params, policies, days, reps, seed, warmup, threads)
    head = _header(cfg, args, seed) + [f"days: {days}", f"reps: {reps}", f"warmup: {warmup}"]
    print("\n".join(f"# {line}" for line in head))
    print(table.table())
    for r in table.reports:
        if len(r.label_names) > 1:
            freqs = ", ".join(f"{k} {v:.4f}" for k, v in r.label_frequencies.items())
            print(f"{r.policy} label frequencies: {freqs}")
    if args.out:
        table.to_csv(_out(args, "compare.csv"), head)
        table.histograms_to_csv(_out(args, "extra_transfers.csv"), head)
        for r in table.reports:
            r.to_csv(_out(args, f"replications_{r.policy}.csv"), head)
    return EXIT_OK


def parse_terms(text: str) -> list[BinomialTerm]:
    terms = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        n, sep, p = chunk.partition(":")
        if not sep:
            raise UsageError(f"term {chunk!r} is not trials:probability")
        try:
            terms.append(BinomialTerm(int(n), float(p)))
        except ValueError as err:
            raise UsageError(f"bad term {chunk!r}: {err}")
    if not terms:
        raise UsageError("no binomial terms given")
    return terms


def cmd_dist(args) -> int:
    if args.terms is not None:
        pmf = sum_binomial_pmf(parse_terms(args.terms))
        cfg = None
    elif args.occupancy is not None:
        cfg = _config(args)
        occ = np.asarray(yaml.safe_load(args.occupancy), dtype=np.int64)
        pmf = occupancy_departure_pmf(occ, cfg.params)
    else:
        raise UsageError("give --terms, or --config with --occupancy")
    head = _header(cfg, args, None) + [f"mean: {pmf.mean!r}", f"variance: {pmf.variance!r}"]
    if args.out:
        pmf.to_csv(_out(args, "pmf.csv"), head)
    print("\n".join(f"# {line}" for line in head))
    print("value,probability")
    for z, pz in zip(pmf.support, pmf.probs):
        print(f"{int(z)},{float(pz)!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patassign", description=__doc__)
    ap.add_argument("--version", action="version", version=f"patassign {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, sim=False):
        p.add_argument("--config", help="instance file, or builtin:example1 / builtin:example2")
        p.add_argument("--out", help="directory for CSV outputs")
        if sim:
            p.add_argument("--seed", type=_seed)
            p.add_argument("--days", type=_positive)
            p.add_argument("--reps", type=_positive)
            p.add_argument("--warmup", type=_nonnegative)
            p.add_argument("--threads", type=_positive)

    p = sub.add_parser("solve-exact", help="policy iteration on the enumerated state space")
    common(p)
    p.set_defaults(func=cmd_solve_exact)

    p = sub.add_parser("train", help="approximate policy iteration with LSTD sweeps")
    common(p)
    p.add_argument("--seed", type=_seed)
    p.add_argument("--iterations", type=_nonnegative)
    p.add_argument("--steps", type=_positive)
    p.add_argument("--scheme", choices=[s.value for s in FeatureScheme])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="replications under one policy")
    common(p, sim=True)
    p.add_argument("--policy", help="a1 | a2 | a3 | y<N> | weights:<file>")
    p.add_argument("--day-reps", type=_nonnegative, default=1,
                   help="replications written to days.csv (default 1)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="several policies on common random numbers")
    common(p, sim=True)
    p.add_argument("--policy", action="append", help="repeat for each policy (default: every config label)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("dist", help="pmf of a sum of independent binomials")
    common(p)
    p.add_argument("--terms", help="comma-separated trials:probability pairs, e.g. 2:0.3,1:0.5")
    p.add_argument("--occupancy", help="post-decision occupancy matrix, e.g. '[[1,0],[0,1]]'")
    p.set_defaults(func=cmd_dist)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DimensionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleAssignmentError as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InstanceTooLargeError as err:
        print(f"too large: {err}", file=sys.stderr)
        return EXIT_TOO_LARGE
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
