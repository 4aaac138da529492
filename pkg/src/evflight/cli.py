"""Command-line entry points: train-vision, eval-vision, evolve, fly,
bench, and serve. Every command is reproducible from (config, seed) and
all file writes are atomic."""

from __future__ import annotations

import os
import time

import click
import numpy as np

from .config import ConfigError, RunConfig, default_config_text
from .util import atomic_write_text, write_csv


def _load(ctx_config, seed, out):
    cfg = RunConfig.load(ctx_config)
    if seed is not None:
        cfg.override("run", "seed", int(seed))
    if out is not None:
        cfg.override("run", "out_dir", out)
    os.makedirs(cfg["run"]["out_dir"], exist_ok=True)
    return cfg


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="Config file (key = value with [sections]).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed override.")(fn)
    fn = click.option("--out", type=click.Path(), default=None, help="Output directory.")(fn)
    return fn


@click.group()
def main():
    """Event-camera vision-to-control stack."""


@main.command("init-config")
@click.argument("path", type=click.Path())
def init_config(path):
    """Write the default configuration to PATH."""
    atomic_write_text(path, default_config_text())
    click.echo(f"wrote {path}")


@main.command("train-vision")
@common_options
def cmd_train_vision(config_path, seed, out):
    """Self-supervised training of the corner vision network."""
    from .snn import NetworkConfig
    from .synth import TextureConfig
    from .train import TrainSettings, run_training

    cfg = _load(config_path, seed, out)
    t = cfg["train"]
    settings = TrainSettings(
        config=NetworkConfig(
            encoder_channels=tuple(cfg["snn"]["encoder_channels"]),
            pooling_size=cfg["snn"]["pooling_size"],
        ),
        steps=t["steps"], batch=t["batch"], lr=t["lr"], decode_lr=t["decode_lr"],
        seq_windows=t["seq_windows"], n_sequences=t["n_sequences"],
        val_sequences=t["val_sequences"], flow_max=t["flow_max"],
        margin=t["margin"], eval_every=t["eval_every"], threads=t["threads"],
        texture=TextureConfig(contrast_threshold=t["contrast_threshold"]),
    )
    ckpt, log, rows = run_training(
        settings, cfg["run"]["seed"], cfg["run"]["out_dir"],
        events_path=cfg["events"]["path"], resume=t["resume"],
    )
    click.echo(f"checkpoint: {ckpt}")
    click.echo(f"log: {log}")
    if rows:
        click.echo(f"final: step {rows[-1][0]} total {rows[-1][3]:.6g} epe {rows[-1][4]:.6g}")


@main.command("eval-vision")
@common_options
def cmd_eval_vision(config_path, seed, out):
    """Endpoint error of a checkpoint against pose-derived ground truth."""
    from .snn import load_checkpoint
    from .train import EVAL_TRACE_HEADER, evaluate_epe_files

    cfg = _load(config_path, seed, out)
    ckpt = cfg["snn"]["checkpoint"]
    events = cfg["events"]["path"]
    poses = cfg["events"]["poses"]
    for name, val in (("snn.checkpoint", ckpt), ("events.path", events), ("events.poses", poses)):
        if val is None:
            raise click.ClickException(f"eval-vision requires [{name.split('.')[0]}] {name.split('.')[1]}")
    net, _ = load_checkpoint(ckpt)
    stats, rows = evaluate_epe_files(net, events, poses)
    trace_path = os.path.join(cfg["run"]["out_dir"], "eval_traces.csv")
    write_csv(trace_path, EVAL_TRACE_HEADER, rows)
    for corner, v in stats["per_corner"].items():
        click.echo(f"EPE {corner}: {v:.6g} px/window")
    click.echo(f"EPE mean: {stats['mean']:.6g} px/window")
    click.echo(f"traces: {trace_path} ({len(rows)} windows)")


@main.command("evolve")
@common_options
def cmd_evolve(config_path, seed, out):
    """Evolve the linear controller in the simulator."""
    from .evolve import EVOLUTION_LOG_HEADER, EvolutionConfig, evolve, setpoint_suite

    cfg = _load(config_path, seed, out)
    e = cfg["evolve"]
    if e["setpoint_set"] == "full":
        setpoints = setpoint_suite()
    elif e["setpoint_set"] == "small":
        setpoints = np.array(
            [[0.0, 0.0, 0.0]]
            + [[s * m, 0.0, 0.0] for m in (0.2, 0.5) for s in (1, -1)]
            + [[0.0, s * m, 0.0] for m in (0.2, 0.5) for s in (1, -1)]
            + [[0.0, 0.0, -m] for m in (0.2, 0.5)]
        )
    else:
        raise click.ClickException(f"unknown setpoint_set {e['setpoint_set']!r}")
    config = EvolutionConfig(
        population=e["population"], generations=e["generations"],
        mutation_std=e["mutation_std"], repeats=e["repeats"], n_steps=e["n_steps"],
        setpoints=setpoints, freeze_randomization=e["freeze_randomization"],
    )
    t0 = time.time()
    progress = (lambda g, b, m: click.echo(f"gen {g}: best {b:.4g} median {m:.4g}")) \
        if os.environ.get("EVFLIGHT_VERBOSE") else None
    best, history = evolve(config, cfg["run"]["seed"], progress=progress)
    out_dir = cfg["run"]["out_dir"]
    ctrl_path = os.path.join(out_dir, "controller.json")
    hist_path = os.path.join(out_dir, "evolution_log.csv")
    best.save(ctrl_path)
    write_csv(hist_path, EVOLUTION_LOG_HEADER, history)
    click.echo(f"controller: {ctrl_path}")
    click.echo(f"history: {hist_path}")
    click.echo(f"best fitness: {history[-1][1]:.6g} ({time.time() - t0:.0f}s)")


@main.command("fly")
@common_options
def cmd_fly(config_path, seed, out):
    """Run a closed-loop session and write telemetry."""
    from .control import (
        REPLAY_HEADER, RuntimeCoeffs, SetpointSchedule, TELEMETRY_HEADER,
        closed_loop_replay, closed_loop_sim, merge,
    )
    from .evolve import LinearController

    cfg = _load(config_path, seed, out)
    f = cfg["fly"]
    schedule = SetpointSchedule([(0.0, list(f["setpoint"]), f["omega_z_sp"])])
    out_dir = cfg["run"]["out_dir"]
    tele_path = os.path.join(out_dir, "telemetry.csv")

    controller = None
    if f["controller"] == "evolved":
        if f["controller_path"] is None:
            raise click.ClickException("fly with controller=evolved needs [fly] controller_path")
        controller = LinearController.load(f["controller_path"])

    if f["mode"] == "sim":
        coeffs = RuntimeCoeffs() if (f["use_runtime_coeffs"] or f["controller"] == "pi") else None
        rows, _ = closed_loop_sim(
            controller, schedule, duration=f["duration"], seed=cfg["run"]["seed"],
            mode=f["controller"], coeffs=coeffs, frisbee=f["frisbee"],
            noise_std=f["noise_std"],
        )
        write_csv(tele_path, TELEMETRY_HEADER, rows)
    elif f["mode"] == "replay":
        from .snn import load_checkpoint

        ckpt = cfg["snn"]["checkpoint"]
        events = cfg["events"]["path"]
        if ckpt is None or events is None:
            raise click.ClickException("replay mode needs [snn] checkpoint and [events] path")
        if controller is None:
            raise click.ClickException("replay mode needs an evolved controller (merged decoding)")
        net, _ = load_checkpoint(ckpt)
        merged = merge(controller, net.decode, coeffs=RuntimeCoeffs())
        rows = closed_loop_replay(net, merged, events, schedule)
        write_csv(tele_path, REPLAY_HEADER, rows)
    else:
        raise click.ClickException(f"unknown fly mode {f['mode']!r}")
    click.echo(f"telemetry: {tele_path} ({len(rows)} rows)")


@main.command("bench")
@common_options
def cmd_bench(config_path, seed, out):
    """Inference throughput of the quantized engine on synthetic densities."""
    from .bench import run_bench

    cfg = _load(config_path, seed, out)
    report = run_bench(cfg)
    report_path = os.path.join(cfg["run"]["out_dir"], "bench.csv")
    write_csv(
        report_path,
        ["density_events_per_inference", "corners", "inferences_per_s", "mean_spikes_per_inference"],
        report,
    )
    for row in report:
        click.echo(
            f"density {row[0]:7.1f} ev/inf | {row[1]} corner(s) | "
            f"{row[2]:8.1f} inf/s | {row[3]:8.1f} spikes/inf"
        )
    click.echo(f"report: {report_path}")


@main.command("serve")
@common_options
def cmd_serve(config_path, seed, out):
    """Host the flight-console session endpoint (WebSocket)."""
    import uvicorn

    from .serve import build_app

    cfg = _load(config_path, seed, out)
    app = build_app(cfg)
    uvicorn.run(app, host=cfg["serve"]["host"], port=cfg["serve"]["port"], log_level="warning")


if __name__ == "__main__":
    main()
