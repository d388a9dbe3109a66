"""Command-line entry point binding all modules.

Commands: synth-data, train, infer, evaluate, ablate, saliency,
calibrate-weights. Every run writes an effective-config snapshot next to
its outputs; all randomness flows from the single --seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig
from .data import (
    DatasetError,
    load_asmr,
    load_fairplay,
    make_synth_dataset,
    write_binaural,
)
from .dsp import Waveform, mix_mono
from .inference import (
    ABLATION_ROWS,
    AblationConfig,
    BundlePredictor,
    FrameTrack,
    GroundTruthPredictor,
    ZeroDifferencePredictor,
    ablation_suite,
    binauralize,
    evaluate,
    saliency,
)
from .losses import calibrate_bundle_weights
from .models import ModelBundle, load_checkpoint
from .training import train


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"train.seed={args.seed}"])
    if getattr(args, "device", None):
        cfg = cfg.with_overrides([f'train.device="{args.device}"'])
    return cfg


def _snapshot(args, cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    options = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k not in ("func", "config", "set") and v is not None
    }
    payload = {"command": args.command, "options": options, "config": cfg.to_dict()}
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.train.seed


def _load_records(data: Path, kind: str, split: int, cfg: RunConfig):
    data = Path(data)
    if kind == "auto":
        if data.is_file() and data.suffix == ".json":
            kind = "manifest"
        elif (data / "splits").is_dir():
            kind = "fairplay"
        elif (data / "manifest.json").exists():
            kind = "manifest"
        else:
            raise DatasetError(
                f"cannot infer dataset kind from {data}; pass --dataset-kind "
                f"(expected a manifest.json, or a FAIR-Play style root with splits/)"
            )
    if kind == "fairplay":
        return load_fairplay(data, split_id=split)
    root = data.parent if data.is_file() else data
    return load_asmr(root)


def cmd_synth_data(args) -> int:
    cfg = _load_run_config(args)
    seed = _seed(args, cfg)
    out_dir = Path(args.out_dir)
    records, azimuths, manifest = make_synth_dataset(
        args.n,
        out_dir,
        cfg.audio,
        seed=seed,
        source_signal=args.source,
        itd_max=args.itd_max,
        image_size=args.image_size,
        duration_seconds=args.duration,
    )
    _snapshot(args, cfg, out_dir)
    print(f"wrote {len(records)} scenes and {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    seed = _seed(args, cfg)
    out_dir = Path(args.out_dir)
    train_recs, val_recs, _ = _load_records(args.data, args.dataset_kind, args.split, cfg)
    import torch

    torch.manual_seed(seed)
    bundle = ModelBundle(cfg.net, cfg.audio)
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    _snapshot(args, dataclasses.replace(cfg, train=train_cfg), out_dir)
    _, history = train(
        bundle, train_recs, val_recs or None, cfg.audio, cfg.frames,
        train_cfg, cfg.weights, out_dir=out_dir,
    )
    print(
        f"trained {train_cfg.epochs} epochs; final loss "
        f"{history[-1]['loss_total']:.4f}; artifacts in {out_dir}"
    )
    return 0


def _make_predictor(args, cfg: RunConfig, records=None):
    if getattr(args, "stub", None) == "mono_copy":
        return ZeroDifferencePredictor(), cfg
    if getattr(args, "stub", None) == "ground_truth":
        return "ground_truth", cfg
    bundle = load_checkpoint(args.checkpoint)
    merged = dataclasses.replace(cfg, audio=bundle.audio_cfg, net=bundle.net_cfg)
    return BundlePredictor(bundle, merged.frames, device=cfg.train.device), merged


def cmd_infer(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out_dir)
    predictor, cfg = _make_predictor(args, cfg)
    from .data import read_audio

    data = read_audio(args.audio, cfg.audio.sample_rate)
    rate = cfg.audio.sample_rate
    if data.shape[1] == 2:
        mono = mix_mono(
            Waveform(samples=data[:, 0], sample_rate=rate),
            Waveform(samples=data[:, 1], sample_rate=rate),
        )
    else:
        mono = Waveform(samples=data[:, 0], sample_rate=rate)
    from .data import ClipRecord

    record = ClipRecord(
        video_path=Path(args.frames),
        audio_path=Path(args.audio),
        duration=mono.duration,
        frame_rate=args.frame_rate,
    )
    frames = FrameTrack.from_record(record)
    inf_cfg = cfg.inference
    if args.output_source:
        inf_cfg = dataclasses.replace(inf_cfg, output_source=args.output_source)
    out = binauralize(predictor, mono, frames, cfg.audio, inf_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_binaural(out, out_dir / "binaural.wav")
    _snapshot(args, cfg, out_dir)
    print(f"wrote {out_dir / 'binaural.wav'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    seed = _seed(args, cfg)
    out_dir = Path(args.out_dir)
    _, _, test_recs = _load_records(args.data, args.dataset_kind, args.split, cfg)
    predictor, cfg = _make_predictor(args, cfg)
    inf_cfg = cfg.inference
    if args.output_source:
        inf_cfg = dataclasses.replace(inf_cfg, output_source=args.output_source)
    if predictor == "ground_truth":
        # plumbing check: evaluate each clip against its own ground truth
        from .data import load_binaural
        from .inference import MetricsReport

        clips = []
        for record in test_recs:
            gt = load_binaural(record.audio_path, cfg.audio.sample_rate)
            stub = GroundTruthPredictor(gt, cfg.audio)
            report = evaluate(stub, [record], cfg.audio, inf_cfg, seed=seed)
            clips.extend(report.per_clip)
        report = MetricsReport.from_clips(clips)
    else:
        report = evaluate(predictor, test_recs, cfg.audio, inf_cfg, seed=seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(out_dir / "report.json")
    report.to_csv(out_dir / "report.csv")
    _snapshot(args, cfg, out_dir)
    acc = f" accuracy {report.accuracy:.3f}" if report.accuracy is not None else ""
    print(f"STFT {report.mean_stft:.4f} ENV {report.mean_env:.4f}{acc}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    seed = _seed(args, cfg)
    out_dir = Path(args.out_dir)
    train_recs, val_recs, test_recs = _load_records(
        args.data, args.dataset_kind, args.split, cfg
    )
    rows = tuple(args.rows.split(",")) if args.rows else ABLATION_ROWS
    suite_cfg = AblationConfig(
        net_cfg=cfg.net,
        audio_cfg=cfg.audio,
        frame_cfg=cfg.frames,
        train_cfg=cfg.train,
        weights=cfg.weights,
        inference_cfg=cfg.inference,
        train_records=train_recs,
        val_records=val_recs or None,
        test_records=test_recs,
        seed=seed,
        rows=rows,
        out_dir=out_dir,
    )
    _snapshot(args, cfg, out_dir)
    results = ablation_suite(suite_cfg)
    summary = {
        name: {"mean_stft": r.mean_stft, "mean_env": r.mean_env, "accuracy": r.accuracy}
        for name, r in results.items()
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for name, entry in summary.items():
        print(f"{name}: STFT {entry['mean_stft']:.4f} ENV {entry['mean_env']:.4f}")
    return 0


def cmd_saliency(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out_dir)
    bundle = load_checkpoint(args.checkpoint)
    cfg = dataclasses.replace(cfg, audio=bundle.audio_cfg, net=bundle.net_cfg)
    frame = np.asarray(Image.open(args.frame).convert("RGB"))
    overlay = saliency(bundle, frame, cfg.frames, alpha=args.alpha)
    out_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay).save(out_dir / "saliency.png")
    _snapshot(args, cfg, out_dir)
    print(f"wrote {out_dir / 'saliency.png'}")
    return 0


def cmd_calibrate_weights(args) -> int:
    cfg = _load_run_config(args)
    seed = _seed(args, cfg)
    out_dir = Path(args.out_dir)
    train_recs, _, _ = _load_records(args.data, args.dataset_kind, args.split, cfg)
    import torch

    torch.manual_seed(seed)
    bundle = ModelBundle(cfg.net, cfg.audio)
    weights = calibrate_bundle_weights(
        bundle, train_recs, cfg.audio, cfg.frames,
        steps=args.steps, batch_size=cfg.train.batch_size, seed=seed,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "weights.json").write_text(
        json.dumps(dataclasses.asdict(weights), indent=2) + "\n"
    )
    _snapshot(args, cfg, out_dir)
    print(
        f"difference {weights.difference:.4f} channel {weights.channel:.4f} "
        f"classification {weights.classification:.4f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="binauralgen",
        description="Mono-to-binaural audio generation with visual guidance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="run-config JSON (or an effective-config snapshot)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", type=Path, required=True)
        p.add_argument("--device", type=str, default=None)
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a config value")

    def data_opts(p):
        p.add_argument("--data", type=Path, required=True,
                       help="dataset manifest or corpus root")
        p.add_argument("--dataset-kind", default="auto",
                       choices=("auto", "manifest", "fairplay", "asmr"))
        p.add_argument("--split", type=int, default=1,
                       help="FAIR-Play split number")

    p = sub.add_parser("synth-data", help="generate a synthetic scene dataset")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--source", default="noise_band",
                   choices=("noise_band", "tone_stack"))
    p.add_argument("--itd-max", type=float, default=0.0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--duration", type=float, default=2.0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the multi-task model")
    common(p)
    data_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="binauralize a mono clip")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--stub", choices=("mono_copy",), default=None)
    p.add_argument("--audio", type=Path, required=True)
    p.add_argument("--frames", type=Path, required=True,
                   help="directory of frame images")
    p.add_argument("--frame-rate", type=float, default=10.0)
    p.add_argument("--output-source", default=None,
                   choices=("apnet_channels", "backbone_difference"))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="compute test-set metrics")
    common(p)
    data_opts(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--stub", choices=("ground_truth", "mono_copy"), default=None)
    p.add_argument("--output-source", default=None,
                   choices=("apnet_channels", "backbone_difference"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation suite")
    common(p)
    data_opts(p)
    p.add_argument("--rows", default=None,
                   help=f"comma-separated subset of {','.join(ABLATION_ROWS)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("saliency", help="overlay visual features on a frame")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--frame", type=Path, required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("calibrate-weights", help="derive loss weights from gradients")
    common(p)
    data_opts(p)
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(func=cmd_calibrate_weights)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command in ("infer", "evaluate") and not (
            getattr(args, "checkpoint", None) or getattr(args, "stub", None)
        ):
            raise ConfigError("pass --checkpoint or --stub")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
