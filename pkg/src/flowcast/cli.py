"""Command-line surface tying the modules into reproducible pipelines.

Verbs: synth | train | forecast | intervene | counterfactual | score |
eval | a3test. Every command is a pure function of (config, inputs, seed):
rerunning writes byte-identical primary outputs. Failures print one
machine-readable ERROR line to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint as ckpt, dataio
from .config import (
    config_dag,
    config_flow,
    config_model,
    config_scm,
    config_train,
    load_config,
)
from .errors import AlignmentError, FlowcastError, InvalidConfigError
from .evaluation import (
    REGIMES,
    EvalSettings,
    RegimeResult,
    aggregate_regime,
    run_protocol,
    training_windows,
)
from .forecaster import (
    counterfactual,
    forecast,
    prediction_bands,
    score_trajectory,
)
from .graph import empty_schedule
from .metrics import a3_independence_mmd
from .model import ForecastModel
from .plots import write_forecast_svg
from .scm import SeriesBatch, make_windows, simulate, split_window_starts
from .forecaster import encode_latents
from .training import train as train_loop


def _seed_override(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg = json.loads(json.dumps(cfg))
        for key in cfg["seeds"]:
            cfg["seeds"][key] = int(args.seed)
    return cfg


def _build_model(cfg: dict) -> ForecastModel:
    return config_model(cfg)


def _load_model(path, eval_steps: int | None = None):
    model, opt, cfg, meta = ckpt.load_model_checkpoint(path, _build_model)
    if eval_steps is not None:
        model.flow = config_flow(cfg, steps=eval_steps)
    return model, opt, cfg, meta


def _window_from_data(args, cfg):
    series, _ = dataio.read_series_csv(args.data)
    window_len = cfg["window"]["total"]
    context_len = cfg["window"]["context"]
    start = args.window_start
    if start is None:
        start = 0
    if start + window_len > series.total_len:
        raise InvalidConfigError(
            f"window at {start} overruns series of length {series.total_len}"
        )
    return make_windows(series, [start], window_len, context_len)


def cmd_synth(args) -> int:
    cfg = _seed_override(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = config_scm(cfg)
    length = cfg["synth"]["length"]
    window_len = cfg["window"]["total"]
    series = simulate(spec, 1, length, seed=cfg["seeds"]["data"],
                      context_len=cfg["window"]["context"])
    boundary = int(length * cfg["synth"]["train_frac"])
    train_part = SeriesBatch(series.values[:, :, :boundary],
                             cfg["window"]["context"], series.start_times)
    test_part = SeriesBatch(series.values[:, :, boundary:],
                            cfg["window"]["context"],
                            series.start_times + boundary)
    n_train, n_test = split_window_starts(length, window_len,
                                          cfg["synth"]["train_frac"])
    echo = {"config": cfg, "seed": cfg["seeds"]["data"],
            "train_windows": len(n_train), "test_windows": len(n_test)}
    dataio.write_series_csv(out / "train.csv", train_part,
                            sidecar={"role": "train"})
    dataio.write_series_csv(out / "test.csv", test_part,
                            sidecar={"role": "test"})
    (out / "config_echo.json").write_text(json.dumps(echo, indent=2,
                                                     sort_keys=True))
    print(f"wrote {out}/train.csv ({len(n_train)} windows), "
          f"{out}/test.csv ({len(n_test)} windows)")
    return 0


def cmd_train(args) -> int:
    cfg = _seed_override(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series, _ = dataio.read_series_csv(args.data)
    windows = training_windows(series, cfg["window"]["total"],
                               cfg["window"]["context"], train_frac=1.0)
    tc = config_train(cfg)
    if args.resume:
        model, opt, cfg_saved, meta = _load_model(args.resume)
        start_epoch = int(meta["epoch"]) + 1
    else:
        model, opt, start_epoch = _build_model(cfg), None, 0

    def on_epoch(epoch, mdl, opt_state, curve):
        ckpt.save_model_checkpoint(
            out / f"epoch_{epoch:03d}.ckpt", mdl, cfg,
            {"epoch": epoch}, opt_state,
        )

    result = train_loop(model, windows, tc, on_epoch=on_epoch,
                        start_epoch=start_epoch, opt=opt)
    ckpt.save_model_checkpoint(out / "final.ckpt", model, cfg,
                               {"epoch": tc.epochs - 1}, result.opt)
    dataio.write_loss_csv(out / "loss.csv", result.curve)
    last = result.curve[-1][2] if result.curve else float("nan")
    print(f"trained {tc.epochs - start_epoch} epochs, "
          f"final loss {last:.4f}; checkpoints in {out}")
    return 0


def _rollout_command(args, with_schedule: bool) -> int:
    cfg = _seed_override(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_model(args.checkpoint,
                                 eval_steps=cfg["eval"]["flow_steps"])
    window = _window_from_data(args, cfg)
    tau, total = window.context_len, window.total_len
    schedule = None
    if with_schedule and args.schedule:
        schedule = dataio.read_schedule_csv(args.schedule, tau, total)
    if schedule is None:
        schedule = empty_schedule(tau, total)
    rollouts = forecast(model, window, schedule, n_samples=args.samples,
                        seed=cfg["seeds"]["eval"])
    values = np.stack([r.values[0] for r in rollouts])
    dataio.write_rollouts_csv(out / "rollouts.csv", values, t_offset=tau)
    if args.plot:
        bands = prediction_bands(rollouts, levels=(0.5, 0.9))
        write_forecast_svg(
            out / "forecast.svg",
            window.context_values()[0],
            {lvl: (lo[0], hi[0]) for lvl, (lo, hi) in bands.items()},
            np.median(values, axis=0),
            truth=window.future_values()[0],
            title=f"{'intervened ' if not schedule.is_empty else ''}forecast",
        )
    print(f"wrote {out}/rollouts.csv ({args.samples} samples)")
    return 0


def cmd_forecast(args) -> int:
    return _rollout_command(args, with_schedule=False)


def cmd_intervene(args) -> int:
    return _rollout_command(args, with_schedule=True)


def cmd_counterfactual(args) -> int:
    cfg = _seed_override(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_model(args.checkpoint,
                                 eval_steps=cfg["eval"]["flow_steps"])
    window = _window_from_data(args, cfg)
    tau, total = window.context_len, window.total_len
    schedule = dataio.read_schedule_csv(args.schedule, tau, total)
    cf = counterfactual(model, window, window, schedule)
    dataio.write_rollouts_csv(out / "rollouts.csv", cf.values[:1], t_offset=tau)
    if args.plot:
        flat = cf.values[0]
        write_forecast_svg(
            out / "counterfactual.svg",
            window.context_values()[0],
            {},
            flat,
            truth=window.future_values()[0],
            title="counterfactual (single trajectory) vs observed future",
        )
    print(f"wrote {out}/rollouts.csv (counterfactual)")
    return 0


def cmd_score(args) -> int:
    cfg = _seed_override(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_model(args.checkpoint,
                                 eval_steps=cfg["eval"]["flow_steps"])
    window = _window_from_data(args, cfg)
    score = score_trajectory(model, window, window.future_values())
    dataio.write_scores_csv(out / "scores.csv", score.per_step[0],
                            t_offset=window.context_len)
    print(f"wrote {out}/scores.csv (total {score.total[0]:.3f})")
    return 0


def _emit_factory(pred_dir: Path, oracle_dir: Path, tau: int):
    pred_dir.mkdir(parents=True, exist_ok=True)
    oracle_dir.mkdir(parents=True, exist_ok=True)

    def emit(regime, run, pred, oracle, windows):
        n, b = pred.shape[0], pred.shape[1]
        name = f"{regime}_run{run:02d}.csv"
        dataio.write_rollouts_csv(
            pred_dir / name, pred.reshape(n * b, *pred.shape[2:]), tau
        )
        dataio.write_rollouts_csv(
            oracle_dir / name, oracle.reshape(n * b, *oracle.shape[2:]), tau
        )
        for d in (pred_dir, oracle_dir):
            meta = {"batch": b, "tau": tau}
            (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))

    return emit


def _eval_from_dirs(cfg, pred_dir: Path, oracle_dir: Path, data_path):
    """Metric report from two aligned directories of rollout files."""
    series, _ = dataio.read_series_csv(data_path)
    window_len = cfg["window"]["total"]
    context_len = cfg["window"]["context"]
    settings = EvalSettings(
        batch=cfg["eval"]["batch"], realizations=cfg["eval"]["realizations"],
        runs=cfg["eval"]["runs"],
        intervention_offset=cfg["eval"]["intervention_offset"],
        seed=cfg["seeds"]["eval"],
    )
    from .evaluation import run_windows

    batches = run_windows(series, window_len, context_len, settings)
    spec = config_scm(cfg)
    non_roots = [i for i in range(spec.dag.node_count)
                 if i not in spec.roots]
    pred_files = sorted(p.name for p in pred_dir.glob("*_run*.csv"))
    oracle_files = sorted(p.name for p in oracle_dir.glob("*_run*.csv"))
    if pred_files != oracle_files or not pred_files:
        raise AlignmentError(
            f"prediction/oracle file sets differ or are empty: "
            f"{len(pred_files)} vs {len(oracle_files)}"
        )
    results = {regime: RegimeResult() for regime in REGIMES}
    for name in pred_files:
        regime, run_part = name.rsplit("_run", 1)
        run = int(run_part.split(".")[0])
        windows = batches[run]
        stats = (windows.context_mean, windows.context_std)
        pred, _ = dataio.read_rollouts_csv(pred_dir / name)
        oracle, _ = dataio.read_rollouts_csv(oracle_dir / name)
        b = windows.batch_size
        pred = pred.reshape(-1, b, *pred.shape[1:])
        oracle = oracle.reshape(-1, b, *oracle.shape[1:])
        nodes = (list(range(spec.dag.node_count))
                 if regime == "observational" else non_roots)
        with_mmd = regime != "counterfactual"
        run_rmse, run_mmd = aggregate_regime(pred, oracle, stats, nodes,
                                             with_mmd)
        results[regime].rmse_runs.append(run_rmse)
        if run_mmd is not None:
            results[regime].mmd_runs.append(run_mmd)
    return results


def cmd_eval(args) -> int:
    cfg = _seed_override(load_config(args.config), args)
    pred_dir, oracle_dir = Path(args.pred_dir), Path(args.oracle_dir)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    have_dirs = (pred_dir.is_dir() and any(pred_dir.glob("*_run*.csv"))
                 and oracle_dir.is_dir()
                 and any(oracle_dir.glob("*_run*.csv")))
    if have_dirs:
        results = _eval_from_dirs(cfg, pred_dir, oracle_dir, args.data)
    else:
        if not args.checkpoint:
            raise InvalidConfigError(
                "rollout directories missing: --checkpoint required to "
                "generate them"
            )
        model, _, _, _ = _load_model(args.checkpoint,
                                     eval_steps=cfg["eval"]["flow_steps"])
        series, _ = dataio.read_series_csv(args.data)
        settings = EvalSettings(
            batch=cfg["eval"]["batch"],
            realizations=cfg["eval"]["realizations"],
            runs=cfg["eval"]["runs"],
            intervention_offset=cfg["eval"]["intervention_offset"],
            seed=cfg["seeds"]["eval"],
        )
        emit = _emit_factory(pred_dir, oracle_dir, cfg["window"]["context"])
        results = run_protocol(model, config_scm(cfg), series,
                               cfg["window"]["total"],
                               cfg["window"]["context"], settings, emit=emit)

    rows = []
    family, mech = cfg["scm"]["family"], cfg["scm"]["mechanism"]
    for regime in REGIMES:
        res = results[regime]
        runs = len(res.rmse_runs)
        if runs == 0:
            continue
        rows.append(("rmse", family, mech, regime,
                     float(np.mean(res.rmse_runs)),
                     float(np.std(res.rmse_runs)), runs))
        if res.mmd_runs:
            rows.append(("mmd", family, mech, regime,
                         float(np.mean(res.mmd_runs)),
                         float(np.std(res.mmd_runs)), runs))
    dataio.write_metrics_csv(out, rows)
    for row in rows:
        print(f"{row[0]:5s} {row[3]:15s} mean={row[4]:.4f} std={row[5]:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_a3test(args) -> int:
    cfg = _seed_override(load_config(args.config), args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_model(args.checkpoint,
                                 eval_steps=cfg["eval"]["flow_steps"])
    series, _ = dataio.read_series_csv(args.data)
    window_len = cfg["window"]["total"]
    n_windows = max(2, min(args.windows,
                           series.total_len - window_len + 1))
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg["seeds"]["eval"], 0xA31))
    )
    starts = rng.choice(series.total_len - window_len + 1, size=n_windows,
                        replace=False)
    windows = make_windows(series, sorted(int(s) for s in starts),
                           window_len, cfg["window"]["context"])
    pairs = encode_latents(model, windows)
    lines = ["node,mmd_model,mmd_baseline,ratio"]
    ratios, models_, bases = [], [], []
    for i, (z, cond) in enumerate(pairs):
        cap = min(len(z), args.max_pairs)
        m, b = a3_independence_mmd(z[:cap], cond[:cap],
                                   seed=cfg["seeds"]["eval"] + i)
        lines.append(f"{i},{m:.6g},{b:.6g},{m / b:.4g}")
        ratios.append(m / b)
        models_.append(m)
        bases.append(b)
    mean_ratio = float(np.mean(models_) / np.mean(bases))
    lines.append(f"mean,{np.mean(models_):.6g},{np.mean(bases):.6g},"
                 f"{mean_ratio:.4g}")
    Path(out).write_text("\n".join(lines) + "\n")
    print(f"latent independence: mean model {np.mean(models_):.4g}, "
          f"baseline {np.mean(bases):.4g}, ratio {mean_ratio:.3g}")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="causal flow forecasting over a DAG",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, data=False, schedule=False):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None,
                       help="override every configured seed")
        p.add_argument("--out", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if data:
            p.add_argument("--data", required=True)
            p.add_argument("--window-start", type=int, default=None)
        if schedule:
            p.add_argument("--schedule", default=None)

    p = sub.add_parser("synth", help="simulate and split a dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a series file")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="observational rollout for one window")
    common(p, checkpoint=True, data=True)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("intervene", help="interventional rollout")
    common(p, checkpoint=True, data=True, schedule=True)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("counterfactual", help="counterfactual generation")
    common(p, checkpoint=True, data=True)
    p.add_argument("--schedule", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("score", help="log-density of a window's future")
    common(p, checkpoint=True, data=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="full RMSE/MMD protocol")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--oracle-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("a3test", help="latent independence diagnostic")
    common(p, checkpoint=True)
    p.add_argument("--data", required=True)
    p.add_argument("--windows", type=int, default=64)
    p.add_argument("--max-pairs", type=int, default=1500)
    p.set_defaults(func=cmd_a3test)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FlowcastError, OSError) as exc:
        kind = "IoError" if isinstance(exc, OSError) else type(exc).__name__
        line = json.dumps({"type": kind, "message": str(exc)}, sort_keys=True)
        print(f"ERROR {line}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
