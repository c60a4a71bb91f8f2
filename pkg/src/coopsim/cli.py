"""Command-line entry point: collect, train, evaluate, render, bandwidth."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from .channel import REPORTED_BANDWIDTH_MBPS, bandwidth_table
from .config import ConfigError, RunConfig, echo_config, load_config, resolve_seed
from .jobs import default_jobs

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    cfg.training = replace(cfg.training, rng_seed=seed)
    return cfg


# ---------------------------------------------------------------- subcommands

def cmd_collect(args) -> int:
    from .learning import Dataset, collect, training_configs
    from .sim.episode import ExpertPolicy

    cfg = load_config(args.config)
    if args.scenario:
        cfg.scenario = replace(cfg.scenario, kind=args.scenario)
    if args.accident_fraction is not None:
        cfg.training = replace(cfg.training, accident_fraction=args.accident_fraction)
    seed = resolve_seed(args.seed, cfg.training.rng_seed)
    cfg = _with_seed(cfg, seed)
    cfgs = training_configs(cfg.scenario.kind, args.episodes, seed * 1000 + 1, cfg.training.accident_fraction,
                            cfg.scenario.density)
    t0 = time.time()
    traces = collect(ExpertPolicy(), cfgs, cfg.channel, cfg.scenario.time_limit, jobs=args.jobs)
    data = Dataset(cfg.training.frame_stride)
    for c, tr in zip(cfgs, traces):
        data.add(tr, c.accident_enabled)
    data.save(args.out)
    echo_config(cfg, args.out)
    outcomes = [tr.outcome for tr in traces]
    print(f"collected {len(traces)} {cfg.scenario.kind} traces ({sum(c.accident_enabled for c in cfgs)} accident), "
          f"{len(data)} frames, outcomes {dict((o, outcomes.count(o)) for o in sorted(set(outcomes)))} "
          f"in {time.time() - t0:.1f}s -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .learning import (Dataset, bc_configs, collect, dagger_configs, dagger_train, save_checkpoint,
                           train_bc)
    from .model import init_params
    from .sim.episode import ExpertPolicy

    cfg = load_config(args.config)
    if args.mode:
        cfg.training = replace(cfg.training, mode=args.mode)
    if args.scenario:
        cfg.scenario = replace(cfg.scenario, kind=args.scenario)
    seed = resolve_seed(args.seed, cfg.training.rng_seed)
    cfg = _with_seed(cfg, seed)
    tcfg, enc, kind = cfg.training.train_config(), cfg.encoder, cfg.scenario.kind
    t0 = time.time()
    if args.data:
        data = Dataset.load(args.data)
    else:
        cfgs = bc_configs(kind, tcfg, cfg.scenario.density)
        data = Dataset(tcfg.frame_stride)
        for c, tr in zip(cfgs, collect(ExpertPolicy(), cfgs, cfg.channel, cfg.scenario.time_limit, jobs=args.jobs)):
            data.add(tr, c.accident_enabled)
        _log(f"collected {len(cfgs)} expert traces, {len(data)} frames")
    params = init_params(enc, seed)
    _, curve = train_bc(data, params, enc, tcfg, cfg.training.mode, log=_log)
    history = []
    if args.dagger:
        _, history = dagger_train(params, data, dagger_configs(kind, tcfg, cfg.scenario.density), enc, tcfg,
                                  cfg.training.mode, cfg.channel, jobs=args.jobs, log=_log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(mode=cfg.training.mode, scenario=kind, seed=seed, encoder=asdict(enc), run_config=cfg.to_dict(),
                bc_loss=curve, dagger=history)
    save_checkpoint(out, params, meta)
    (out.parent / f"{out.name}.run_config.json").write_text(cfg.to_json())
    (out.parent / f"{out.name}.log.json").write_text(json.dumps(dict(bc_loss=curve, dagger=history), indent=2) + "\n")
    print(f"trained {cfg.training.mode} on {len(data)} frames in {time.time() - t0:.1f}s -> {out}")
    return EXIT_OK


def _load_models(paths):
    """LearnedPolicy per checkpoint, named by mode (or file stem when two share a mode)."""
    from .learning import LearnedPolicy, load_checkpoint
    from .model import EncoderConfig

    loaded = [(p, *load_checkpoint(p)) for p in paths]
    modes = [meta.get("mode", "cooperative") for _, _, meta in loaded]
    out = []
    for (p, params, meta), mode in zip(loaded, modes):
        name = Path(p).stem if modes.count(mode) > 1 else mode
        out.append(LearnedPolicy(params, EncoderConfig(**meta.get("encoder", {})), mode, name=name))
    return out


def cmd_evaluate(args) -> int:
    from .bench.benchmark import density_sweep, run_benchmark
    from .bench.report import format_report, plot_density, report_json, write_report
    from .sim.episode import ExpertPolicy

    cfg = load_config(args.config)
    if args.scenario:
        cfg.scenario = replace(cfg.scenario, kind=args.scenario)
    if args.configs is not None:
        cfg.eval = replace(cfg.eval, n_configs=args.configs)
    if args.repeats is not None:
        cfg.eval = replace(cfg.eval, n_repeats=args.repeats)
    models = _load_models(args.models or [])
    if cfg.eval.include_expert and not args.no_expert:
        models = [ExpertPolicy()] + models
    if not models:
        raise ConfigError("nothing to evaluate: pass --models or keep the expert")
    out = Path(args.out)
    echo_config(cfg, out)
    kw = dict(seed=cfg.eval.manifest_seed, channel=cfg.channel, time_limit=cfg.scenario.time_limit, jobs=args.jobs,
              log=_log)
    if args.densities:
        dens = [int(x) for x in args.densities.split(",") if x.strip()]
        rows = density_sweep(models, cfg.scenario.kind, dens, cfg.eval.n_configs, cfg.eval.n_repeats, **kw)
        for d, rep in rows:
            write_report(rep, out, stem=f"density_{d}")
            print(format_report(rep), end="")
        plot_density(rows, out / "density.png")
        (out / "density.json").write_text(json.dumps([dict(density=d, report=json.loads(report_json(r)))
                                                      for d, r in rows], indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    rep = run_benchmark(models, cfg.scenario.kind, cfg.eval.n_configs, cfg.eval.n_repeats,
                        density=cfg.scenario.density, **kw)
    write_report(rep, out)
    print(format_report(rep), end="")
    return EXIT_OK


def cmd_render(args) -> int:
    from .bench.render import parse_frames, render_bev
    from .sim.episode import load_trace

    try:
        frames = parse_frames(args.frames)
    except ValueError as exc:
        raise ConfigError(f"bad --frames {args.frames!r}; expected A..B or N") from exc
    paths = render_bev(load_trace(args.trace), frames, args.out)
    if paths:
        echo_config(load_config(args.config), args.out)
    print(f"wrote {len(paths)} image(s) to {args.out}")
    return EXIT_OK


def cmd_bandwidth(args) -> int:
    if args.keypoints < 0 or args.dim < 0 or args.rate <= 0:
        raise ConfigError("keypoints and dim must be >= 0 and rate > 0")
    rows = bandwidth_table(args.keypoints, args.dim, args.rate, args.points)
    print(f"{'sharing':<28}{'computed Mbps':>15}{'reported Mbps':>15}")
    for label, mbps, reported in rows:
        print(f"{label:<28}{mbps:>15.2f}{'-' if reported is None else f'{reported:.2f}':>15}")
    if args.keypoints == 128 and args.dim == 128 and args.rate == 10:
        print(f"keypoint messages: {rows[0][1]:.2f} Mbps computed vs {REPORTED_BANDWIDTH_MBPS['keypoint_messages']:.2f} "
              f"Mbps reported")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coopsim", description="Cooperative V2V driving: data collection, training, evaluation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--jobs", type=int, default=default_jobs(), help="parallel episodes (default: cores)")

    c = sub.add_parser("collect", help="record expert demonstrations")
    c.add_argument("--scenario", choices=["overtaking", "left_turn", "red_light_violation"])
    c.add_argument("--episodes", type=int, required=True)
    c.add_argument("--accident-fraction", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    common(c)
    c.set_defaults(fn=cmd_collect)

    t = sub.add_parser("train", help="behaviour cloning, optionally followed by DAgger")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--dagger", action="store_true")
    t.add_argument("--data", help="dataset directory from `collect` (default: collect per config)")
    t.add_argument("--mode", choices=["cooperative", "no_v2v", "early_fusion"])
    t.add_argument("--scenario", choices=["overtaking", "left_turn", "red_light_violation"])
    t.add_argument("--seed", type=int)
    common(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="benchmark checkpoints on the frozen suite")
    e.add_argument("--models", nargs="*", default=[])
    e.add_argument("--scenario", choices=["overtaking", "left_turn", "red_light_violation"])
    e.add_argument("--configs", type=int)
    e.add_argument("--repeats", type=int)
    e.add_argument("--densities", help="comma list, runs a traffic-density sweep")
    e.add_argument("--no-expert", action="store_true", help="leave the expert out of the report")
    e.add_argument("--out", required=True)
    common(e)
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("render", help="BEV images of recorded frames")
    r.add_argument("--trace", required=True)
    r.add_argument("--frames", default="0", help="A..B (half-open) or a single index")
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.set_defaults(fn=cmd_render)

    b = sub.add_parser("bandwidth", help="message bandwidth accounting")
    b.add_argument("--keypoints", type=int, required=True)
    b.add_argument("--dim", type=int, required=True)
    b.add_argument("--rate", type=float, default=10.0)
    b.add_argument("--points", type=int, default=65536, help="raw cloud size for the early-fusion row")
    b.set_defaults(fn=cmd_bandwidth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, KeyError, IndexError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
