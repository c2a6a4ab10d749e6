# -*- coding: utf-8 -*-
"""
Command-line entry point.

    sst [--config FILE] [--seed N] [--preset {tiny,desk,paper}] [-v] COMMAND

Commands:
    simulate        render a scene description to WAVs and a truth CSV
    localize        AoA ablation table (MUSIC variants and model heads)
    separate        separate the target talker of a capture
    init-checkpoint write a freshly initialized (or identity) checkpoint
    dataset         render a synthetic training set
    train           train a separator on a dataset manifest
    bench           stream a capture through the engine and time it
    eval            SiSNR tables per SNR bucket and interferer count

Each command body is a `safe` function; `main` reports an `Err` and
returns the exit code the result carries.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from SST import __version__
from SST.audible import MusicProfile, OracleMask
from SST.audio import CAPTURE_RATE, load_wav, save_wav, stft
from SST.config import GlobalConfig, apply_preset, load_config
from SST.errors import ConfigError, exit_code_for
from SST.inaudible import RangeAoAProfile
from SST.logs import setup_logging
from SST.network import SpatialSeparatorModel
from SST.pipeline import (
    AoATrack,
    frame_times,
    front_end,
    model_track,
    music_track,
    profile_shapes,
    separate_audio,
    tracking_profiles,
)
from SST.presets import PRESETS
from SST.profile_io import export_profiles
from SST.realtime import StreamEngine, benchmark
from SST.safe import Err, safe
from SST.simulate import (
    load_scene_spec,
    read_truth_csv,
    render_scene_spec,
    write_truth_csv,
)
from SST.training import (
    build_dataset,
    evaluate_method,
    get_corpus,
    load_dataset,
    prepare_items,
    sisnr,
    summarize,
    train,
    write_tables,
)

logger = logging.getLogger(__name__)
console = Console()


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _load_model(
    path: str | Path, config: GlobalConfig
) -> tuple[SpatialSeparatorModel, dict[str, Any]]:
    return SpatialSeparatorModel.load(path, config.array, config.stft)


def _new_model(config: GlobalConfig, identity: bool = False) -> SpatialSeparatorModel:
    audible, inaudible = profile_shapes(config.grids)
    build = SpatialSeparatorModel.identity if identity else SpatialSeparatorModel
    return build(
        config.model,
        config.array,
        config.stft,
        audible,
        inaudible,
        seed=config.seeds.init,
    )


def _cell(value: Any) -> str:
    match value:
        case None:
            return ""
        case bool():
            return "yes" if value else "no"
        case float():
            return f"{value:.2f}"
        case _:
            return str(value)


def _print_table(title: str, columns: Sequence[str], rows: list[list[Any]]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(escape(column))
    for row in rows:
        table.add_row(*(escape(_cell(v)) for v in row))
    console.print(table)


def _plot_localization(
    out_dir: Path, tracks: list[AoATrack], errors: dict[str, float | None]
) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
    for track in tracks:
        left.plot(track.times, track.azimuths, label=track.variant)
    left.set_xlabel("time [s]")
    left.set_ylabel("azimuth [deg]")
    left.legend()
    scored = {k: v for k, v in errors.items() if v is not None}
    right.bar(list(scored), list(scored.values()))
    right.set_ylabel("mean AoA error [deg]")
    right.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = out_dir / "localize.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _plot_profiles(
    out_dir: Path,
    audible: MusicProfile | None,
    inaudible: RangeAoAProfile | None,
) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = [
        (profile, rows, label)
        for profile, rows, label in [
            (audible, "freq_axis", "frequency [Hz]"),
            (inaudible, "range_axis", "range [m]"),
        ]
        if profile is not None
    ]
    fig, axes = plt.subplots(1, max(len(panels), 1), figsize=(11, 4), squeeze=False)
    for ax, (profile, rows, label) in zip(axes[0], panels):
        axis = getattr(profile, rows)
        image = ax.imshow(
            profile.values,
            origin="lower",
            aspect="auto",
            extent=(profile.angle_axis[0], profile.angle_axis[-1], axis[0], axis[-1]),
        )
        fig.colorbar(image, ax=ax)
        ax.set_xlabel("azimuth [deg]")
        ax.set_ylabel(label)
        ax.set_title(f"t = {profile.time_s:.2f} s")
    fig.tight_layout()
    path = out_dir / "profiles.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


@safe
def cmd_simulate(args: argparse.Namespace, config: GlobalConfig) -> Path:
    geometry = config.array
    spec = load_scene_spec(args.scene, geometry)
    if args.seed is not None:
        spec = replace(spec, seed=config.seeds.simulate)
    scene = render_scene_spec(spec, geometry, config.chirp)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_wav(scene.mixture, out / "mixture.wav")
    save_wav(scene.truth.target, out / "target.wav")
    if scene.truth.residual is not None:
        save_wav(scene.truth.residual, out / "residual.wav")
    for i, component in enumerate(scene.truth.components):
        save_wav(component, out / f"component_{i}.wav")
    write_truth_csv(scene.truth, out / "truth.csv")
    manifest = {
        "scene": str(args.scene),
        "seed": spec.seed,
        "sources": len(spec.sources),
        "duration_s": spec.duration_s,
        "snr_db": spec.snr_db,
        "sample_rate": CAPTURE_RATE,
        "fmcw": spec.fmcw,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    console.print(f"wrote scene to {out}")
    return out


@safe
def cmd_localize(args: argparse.Namespace, config: GlobalConfig) -> Path:
    geometry = config.array
    front = front_end(load_wav(args.mixture))
    spec = stft(front.speech, config.stft)

    tracks = [music_track(spec, geometry, config.grids, None, "unmasked-music")]
    if args.oracle is not None:
        oracle = Path(args.oracle)
        target = stft(front_end(load_wav(oracle / "target.wav")).speech, config.stft)
        residual = stft(
            front_end(load_wav(oracle / "residual.wav")).speech, config.stft
        )
        mask = OracleMask(target, residual)
        tracks.append(music_track(spec, geometry, config.grids, mask, "masked-music"))
    for entry in args.checkpoint or []:
        label, _, path = entry.rpartition("=")
        model, _ = _load_model(path, config)
        tracks.append(
            model_track(
                front, model, geometry, config.chirp, config.grids, label or path
            )
        )

    truth = read_truth_csv(args.truth) if args.truth else None
    errors = {
        t.variant: None if truth is None else t.mean_error(truth[0], truth[1])
        for t in tracks
    }

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "aoa_estimates.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "time_s", "azimuth_deg"])
        for track in tracks:
            for t, a in zip(track.times, track.azimuths):
                writer.writerow([track.variant, f"{t:.4f}", f"{a:.3f}"])
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "estimates", "mean_abs_error_deg"])
        for track in tracks:
            error = errors[track.variant]
            shown = "" if error is None else f"{error:.3f}"
            writer.writerow([track.variant, len(track.times), shown])
    _print_table(
        "AoA estimation",
        ["variant", "estimates", "mean error [deg]"],
        [[t.variant, len(t.times), errors[t.variant]] for t in tracks],
    )
    inaudible: list[RangeAoAProfile] = []
    if args.export_profiles or args.plot:
        inaudible = tracking_profiles(front, config.chirp, geometry, config.grids)
    if args.export_profiles:
        for track in tracks:
            if track.profiles:
                export_profiles(
                    track.profiles, args.export_profiles, f"audible-{track.variant}"
                )
        export_profiles(inaudible, args.export_profiles, "inaudible")
    if args.plot:
        _plot_localization(out, tracks, errors)
        audible = [p for t in tracks for p in t.profiles if not p.is_empty]
        sensed = [p for p in inaudible if not p.dropped]
        _plot_profiles(
            out, audible[-1] if audible else None, sensed[-1] if sensed else None
        )
    return out


@safe
def cmd_separate(args: argparse.Namespace, config: GlobalConfig) -> Path:
    model, _ = _load_model(args.checkpoint, config)
    mixture = load_wav(args.mixture)
    track = None
    if args.aoa_track is not None:
        times, azimuths, _ = read_truth_csv(args.aoa_track)
        frames = config.stft.frame_count(front_end(mixture).speech.frames)
        track = np.interp(frame_times(config.stft, frames), times, azimuths)
    target, aoa = separate_audio(
        mixture, model, config.array, config.chirp, config.grids, track
    )
    save_wav(target, args.out)
    if aoa is not None:
        logger.info("mean estimated azimuth %.1f deg", float(np.mean(aoa)))

    if args.reference is not None:
        reference = front_end(load_wav(args.reference)).speech.samples[0]
        mixed = front_end(mixture).speech.samples[0]
        n = min(len(reference), len(mixed), target.frames)
        before = sisnr(mixed[:n], reference[:n])
        after = sisnr(target.samples[0][:n], reference[:n])
        _print_table(
            "Separation",
            ["SiSNR in [dB]", "SiSNR out [dB]", "improvement [dB]"],
            [[before, after, after - before]],
        )
    return Path(args.out)


@safe
def cmd_init_checkpoint(args: argparse.Namespace, config: GlobalConfig) -> Path:
    model = _new_model(config, identity=args.identity)
    model.save(args.out, {"identity": bool(args.identity)})
    console.print(f"wrote checkpoint {args.out}")
    return Path(args.out)


@safe
def cmd_dataset(args: argparse.Namespace, config: GlobalConfig) -> Path:
    corpus = get_corpus(args.corpus, config.dataset.talkers)
    return build_dataset(
        args.out_dir,
        corpus,
        config.dataset,
        config.array,
        config.room,
        config.chirp,
        config.seeds.dataset,
    )


@safe
def cmd_train(args: argparse.Namespace, config: GlobalConfig) -> Path:
    examples = load_dataset(args.manifest, "train")
    if len(examples) < 2:
        raise ConfigError("training needs at least two training examples")
    held = max(1, len(examples) // 10)
    model = (
        _load_model(args.init, config)[0] if args.init else _new_model(config)
    )
    train_items = prepare_items(
        examples[:-held], model, config.array, config.chirp, config.grids
    )
    val_items = prepare_items(
        examples[-held:], model, config.array, config.chirp, config.grids
    )
    settings = replace(config.train, seed=config.seeds.train)
    result = train(model, train_items, val_items, settings, args.out_dir, args.resume)
    console.print(
        f"best validation SiSNR {result.best_val_sisnr_db:.2f} dB after "
        f"{result.epochs_run} epochs; checkpoint {result.best_checkpoint}"
    )
    return result.best_checkpoint


@safe
def cmd_bench(args: argparse.Namespace, config: GlobalConfig) -> dict[str, Any]:
    model = _load_model(args.checkpoint, config)[0] if args.checkpoint else None
    telemetry = open(args.telemetry, "w", encoding="utf-8") if args.telemetry else None
    try:
        engine = StreamEngine(
            config.array,
            config.chirp,
            model,
            config.stft,
            config.grids,
            config.realtime,
            telemetry,
        )
        audio = load_wav(args.stream) if args.stream else None
        report = benchmark(engine, args.duration, audio, config.seeds.simulate)
    finally:
        if telemetry is not None:
            telemetry.close()
    if args.out:
        report.write(args.out)
    _print_table(
        "Streaming latency",
        ["p50 [ms]", "p95 [ms]", "max [ms]", "RTF", "overruns", "total [ms]", "ok"],
        [
            [
                report.p50_ms,
                report.p95_ms,
                report.max_ms,
                report.real_time_factor,
                report.overruns,
                report.total_latency_ms,
                report.within_budget,
            ]
        ],
    )
    return report.as_dict()


@safe
def cmd_eval(args: argparse.Namespace, config: GlobalConfig) -> Path:
    examples = load_dataset(args.manifest, "test")
    if not examples:
        raise ConfigError(f"{args.manifest} has no test examples")
    model = _load_model(args.checkpoint, config)[0] if args.checkpoint else None
    reader = model if model is not None else _new_model(config)
    items = prepare_items(
        examples, reader, config.array, config.chirp, config.grids, keep_spectrum=True
    )
    rows = evaluate_method("mixture", items)
    rows += evaluate_method("mvdr", items, geometry=config.array)
    if model is not None:
        rows += evaluate_method("model", items, model)
    summary = summarize(rows)
    json_path, _ = write_tables(summary, args.out_dir)
    _print_table(
        "Evaluation",
        ["method", "count", "SiSNR in", "SiSNR out", "improvement"],
        [
            [
                method,
                table["overall"]["count"],
                table["overall"]["sisnr_in_db"],
                table["overall"]["sisnr_out_db"],
                table["overall"]["improvement_db"],
            ]
            for method, table in summary.items()
        ],
    )
    return json_path


COMMANDS = {
    "simulate": cmd_simulate,
    "localize": cmd_localize,
    "separate": cmd_separate,
    "init-checkpoint": cmd_init_checkpoint,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sst", description="Spatial speech localization and separation"
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--seed", type=int, help="base seed for every stage")
    parser.add_argument("--preset", choices=PRESETS, help="network scale")
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v info, -vv debug"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene description")
    p.add_argument("scene", help="scene TOML file")
    p.add_argument("out_dir")

    p = sub.add_parser("localize", help="AoA ablation table")
    p.add_argument("mixture", help="44.1 kHz multichannel WAV")
    p.add_argument("--truth", help="truth CSV from `simulate`")
    p.add_argument("--oracle", help="simulate output directory for the oracle mask")
    p.add_argument(
        "--checkpoint",
        action="append",
        metavar="LABEL=PATH",
        help="model whose AoA head forms a variant (repeatable)",
    )
    p.add_argument("--out-dir", default="localize")
    p.add_argument(
        "--plot",
        action="store_true",
        help="also write localize.png and profiles.png",
    )
    p.add_argument(
        "--export-profiles",
        metavar="DIR",
        help="write every profile as CSV and binary files",
    )

    p = sub.add_parser("separate", help="separate the target talker")
    p.add_argument("mixture")
    p.add_argument("checkpoint")
    p.add_argument("--out", default="target.wav")
    p.add_argument("--reference", help="clean target WAV for SiSNR metrics")
    p.add_argument("--aoa-track", help="truth CSV for AoA-conditioned models")

    p = sub.add_parser("init-checkpoint", help="write an untrained checkpoint")
    p.add_argument("out")
    p.add_argument("--identity", action="store_true", help="mask of one everywhere")

    p = sub.add_parser("dataset", help="render a training set")
    p.add_argument("out_dir")
    p.add_argument("--corpus", help="WAV corpus directory (default: synthetic)")

    p = sub.add_parser("train", help="train a separator")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from last.sstw")

    p = sub.add_parser("bench", help="streaming latency benchmark")
    p.add_argument("stream", nargs="?", help="44.1 kHz capture (default: noise)")
    p.add_argument("--checkpoint")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--telemetry", help="JSON-lines telemetry file")
    p.add_argument("--out", help="JSON report file")

    p = sub.add_parser("eval", help="evaluation tables")
    p.add_argument("manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", default="eval")
    return parser


def resolve_config(args: argparse.Namespace) -> GlobalConfig:
    config = load_config(args.config)
    if args.preset:
        config = apply_preset(config, args.preset)
    if args.seed is not None:
        config = replace(config, seeds=config.seeds.with_base(args.seed))
    return config


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = resolve_config(args)
    except (ConfigError, ValueError) as err:
        console.print(f"[red]error:[/red] {escape(str(err))}")
        return exit_code_for(err) if isinstance(err, ConfigError) else 2

    result = COMMANDS[args.command](args, config)
    match result:
        case Err(err):
            console.print(f"[red]error:[/red] {escape(str(err))}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
