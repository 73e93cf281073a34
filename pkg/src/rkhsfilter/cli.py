"""Command-line pipeline: generate, train, run, sweep, report, query.

Every subcommand shares the same configuration resolution (--config file,
--preset name, or the l96-desk default) and the same master-seed derivation as
the library, so artifacts written by one stage line up with what a full run
would have produced internally. Hard errors exit nonzero with a one-line
message on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import embedding, harness
from . import rtm as rtm_mod
from ._util import config_hash, to_jsonable, write_csv, write_json
from .dynamics import CloudModelConfig, save_trajectory, simulate_cloud_column
from .observation import save_training_set


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--preset", choices=sorted(harness.PRESETS),
                   help="named config (ignored when --config is given)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out-dir", default="out", help="output directory (default ./out)")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes for sweeps (default 1)")


def _resolve_config(args) -> harness.ExperimentConfig:
    if args.config:
        if args.preset:
            raise ValueError("pass --config or --preset, not both "
                             "(a config file may set 'preset' itself)")
        return harness.load_config(args.config)
    name = args.preset or "l96-desk"
    if not args.preset:
        print("no --config/--preset given; using preset l96-desk", file=sys.stderr)
    return harness.preset(name)


def _first_point(cfg: harness.ExperimentConfig) -> harness.ExperimentConfig:
    return replace(cfg, r_grid=cfg.r_grid[:1], dt_grid=cfg.dt_grid[:1],
                   seeds=cfg.seeds[:1])


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_generate(args) -> int:
    """Truth trajectory, observation streams, and training pairs for point 0."""
    cfg = _resolve_config(args)
    out = _out(args)
    ss = harness.point_seed_sequence(args.seed, cfg.seeds[0], 0, 0)
    if cfg.testbed == "l96":
        ss_gen, ss_train = ss.spawn(4)[:2]
        r_obs, dt = float(cfg.r_grid[0]), float(cfg.dt_grid[0])
        data = harness.generate_l96_point(cfg, r_obs, dt, ss_gen)
        save_trajectory(out / "truth_l96", data.truth, dt, args.seed, cfg)
        header = (["t"] + [f"y_clear{j}" for j in range(data.y_clear.shape[1])]
                  + [f"y_cloudy{j}" for j in range(data.y_cloudy.shape[1])]
                  + [f"obstructed{j}" for j in range(data.masks.shape[1])])
        rows = ([(t + 1) * dt] + list(data.y_clear[t]) + list(data.y_cloudy[t])
                + [int(v) for v in data.masks[t]] for t in range(data.y_clear.shape[0]))
        write_csv(out / "observations_l96.csv", header, rows)
        from .dynamics import IntegratorConfig
        from .observation import NoiseSpec, ObstructionConfig, generate_training_l96
        integ = IntegratorConfig(dt=cfg.dt_model,
                                 steps_per_obs=harness._steps_per_obs(0.1, cfg.dt_model))
        pairs = generate_training_l96(
            cfg.n_train, integ,
            ObstructionConfig(count_max=cfg.count_max, count_mode=cfg.count_mode),
            NoiseSpec(r_obs), ss_train, spinup_steps=cfg.train_spinup)
        save_training_set(out / "training_l96", pairs)
        names = ["truth_l96.npz", "truth_l96.csv", "observations_l96.csv",
                 "training_l96.csv", "training_l96.json"]
    else:
        from .observation import generate_training_cloud
        ss_train, ss_truth, ss_obs = ss.spawn(5)[:3]
        r_frac = float(cfg.r_grid[0])
        dt_steps = int(cfg.dt_grid[0])
        model_cfg = CloudModelConfig()
        pairs, rtm_cfg, noise, _ = generate_training_cloud(
            cfg.n_train, model_cfg, rtm_mod.RtmConfig(), r_frac, ss_train,
            spinup_steps=cfg.train_spinup)
        save_training_set(out / "training_cloud", pairs)
        rng_truth = np.random.default_rng(ss_truth)
        total = cfg.truth_spinup + cfg.n_steps * dt_steps
        traj = simulate_cloud_column(np.zeros(7), total, model_cfg, rng_truth)
        truth = traj[cfg.truth_spinup::dt_steps][:cfg.n_steps + 1]
        save_trajectory(out / "truth_cloud", truth, dt_steps * model_cfg.dt,
                        args.seed, cfg)
        ro = noise.var(len(rtm_cfg.channels))
        h_true = rtm_mod.brightness_cloudy(truth[1:], truth[1:, 4:7], rtm_cfg)
        y = h_true + np.random.default_rng(ss_obs).normal(
            0.0, np.sqrt(ro), size=h_true.shape)
        header = ["t"] + [f"y{j}" for j in range(y.shape[1])]
        dt_obs = dt_steps * model_cfg.dt
        write_csv(out / "observations_cloud.csv", header,
                  ([(t + 1) * dt_obs] + list(y[t]) for t in range(y.shape[0])))
        names = ["truth_cloud.npz", "truth_cloud.csv", "observations_cloud.csv",
                 "training_cloud.csv", "training_cloud.json"]
    write_json(out / "generate_manifest.json",
               {"config_hash": config_hash(cfg), "config": to_jsonable(cfg),
                "master_seed": args.seed, "files": names})
    print(f"wrote {len(names) + 1} files to {out}")
    return 0


def _cmd_train(args) -> int:
    """Train and persist the error model(s) for grid point 0."""
    cfg = _resolve_config(args)
    out = _out(args)
    ss = harness.point_seed_sequence(args.seed, cfg.seeds[0], 0, 0)
    manifest = {"config_hash": config_hash(cfg), "config": to_jsonable(cfg),
                "master_seed": args.seed, "testbed": cfg.testbed}
    if cfg.testbed == "l96":
        ss_train = ss.spawn(4)[1]
        model = harness.train_l96_model(cfg, float(cfg.r_grid[0]), ss_train)
        embedding.save_model(out / "model_l96", model)
        manifest["models"] = ["model_l96"]
        manifest["clipped_mass"] = model.clipped_mass
    else:
        ss_train = ss.spawn(5)[0]
        trained = harness.train_cloud_models(cfg, float(cfg.r_grid[0]), ss_train)
        names = []
        for i, model in enumerate(trained.models):
            name = f"model_cloud_ch{i:02d}"
            embedding.save_model(out / name, model)
            names.append(name)
        manifest["models"] = names
        manifest["rtm"] = to_jsonable(trained.rtm_cfg)
        manifest["noise_var"] = [float(v) for v in
                                 trained.noise.var(len(trained.rtm_cfg.channels))]
        manifest["clim_std"] = [float(v) for v in trained.clim_std]
    write_json(out / "train_manifest.json", manifest)
    print(f"trained {len(manifest['models'])} model(s) into {out}")
    return 0


def _run_and_report(cfg, args, results) -> int:
    out = _out(args)
    harness.save_results(results, out / "results.json")
    written = harness.report(results, out, cfg=cfg, master_seed=args.seed)
    divergent = sum(r.divergent for r in results)
    print(f"{len(results)} rows ({divergent} divergent) -> "
          f"{', '.join(sorted(str(p) for p in written.values()))}")
    return 0


def _cmd_run(args) -> int:
    """Single experiment point (first grid entries), all configured variants."""
    cfg = _resolve_config(args)
    single = _first_point(cfg)
    if single.testbed == "l96":
        results = harness.run_l96(single, master_seed=args.seed)
    else:
        results = harness.run_cloud(single, master_seed=args.seed)
    return _run_and_report(single, args, results)


def _cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    results = harness.sweep(cfg, master_seed=args.seed, workers=args.workers)
    return _run_and_report(cfg, args, results)


def _cmd_report(args) -> int:
    """Rebuild report tables from a saved results.json."""
    out = _out(args)
    results_path = Path(args.results) if args.results else out / "results.json"
    results = harness.load_results(results_path)
    cfg = None
    if args.config or args.preset:
        cfg = _resolve_config(args)
    written = harness.report(results, out, cfg=cfg, master_seed=args.seed)
    print(f"rebuilt {len(written)} files in {out}")
    return 0


def _cmd_query(args) -> int:
    """Dump one secondary-filter update (prior, likelihood, posterior weights)."""
    model = embedding.load_model(args.model)
    prior_var = args.prior_var if args.prior_var is not None else model.b_var
    prior = embedding.PriorSpec(args.prior_mean, prior_var)
    table = embedding.query_table(model, args.y, args.r, prior, args.z_floor)
    out = _out(args)
    rows = zip(table["b"], table["prior"], table["likelihood"],
               table["posterior_weight"])
    write_csv(out / "query.csv", ["b", "prior", "likelihood", "posterior_weight"], rows)
    summary = dict(table["summary"])
    summary.update({"y": args.y, "r_var": args.r, "prior_mean": args.prior_mean,
                    "prior_var": prior_var, "model": str(args.model)})
    write_json(out / "query.json", summary)
    applied = "applied" if summary["applied"] else "withheld"
    print(f"posterior mean {summary['mean']:.6g} var {summary['var']:.6g} "
          f"({applied}); tables in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rkhsfilter",
        description="Observation-model error correction experiments: data "
                    "generation, training, filtering, sweeps, and reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write truth, observations, training pairs")
    _add_common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train and save the error model(s)")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("run", help="run one experiment point and report it")
    _add_common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run the full sweep grid and report it")
    _add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="rebuild report tables from results.json")
    _add_common(p)
    p.add_argument("--results", help="path to results.json (default <out-dir>/results.json)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("query", help="dump prior/likelihood/posterior for one observation")
    _add_common(p)
    p.add_argument("--model", required=True, help="saved model path prefix")
    p.add_argument("--y", type=float, required=True, help="observed value")
    p.add_argument("--r", type=float, required=True, help="measurement noise variance")
    p.add_argument("--prior-mean", type=float, default=0.0)
    p.add_argument("--prior-var", type=float, default=None,
                   help="default: training error variance")
    p.add_argument("--z-floor", type=float, default=1e-10)
    p.set_defaults(func=_cmd_query)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
