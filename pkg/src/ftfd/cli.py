"""Command line front end: data synthesis, training, evaluation, inspection.

Heavy imports happen inside ``main`` so the FTFD_THREADS cap can be applied
to the BLAS pool before numpy loads. Exit codes: 0 success, 1 usage error,
2 runtime failure; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

FUSION_FLAGS = ("cmf", "concat", "sum", "cmf-kqv", "cmf-last", "cmf-last3")
_MOD_LETTERS = {"v": "visual", "a": "audio", "m": "motion"}


def _cap_threads():
    cap = os.environ.get("FTFD_THREADS")
    if cap:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _int_tuple(text: str) -> tuple:
    return tuple(int(x) for x in text.split(","))


def _model_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model")
    g.add_argument("--frames", type=int, default=4,
                   help="frame buffer T (consecutive frames per window)")
    g.add_argument("--size", type=int, default=112, help="input crop height/width")
    g.add_argument("--channels", type=int, default=3, help="frame channels (3=RGB, 1=gray)")
    g.add_argument("--widths", type=_int_tuple, default=(64, 128, 256, 512, 512),
                   help="encoder block widths, comma separated")
    g.add_argument("--convs", type=_int_tuple, default=(2, 2, 3, 3, 3),
                   help="convs per encoder block, comma separated")
    g.add_argument("--fusion", choices=FUSION_FLAGS, default="cmf",
                   help="fusion strategy")
    g.add_argument("--attention", choices=("none", "visual", "avam"), default="avam",
                   help="attention variant in the visual encoder")
    g.add_argument("--modalities", default="vam",
                   help="enabled streams as letters from {v,a,m}")
    g.add_argument("--dropout", type=float, default=0.5, help="classifier dropout")
    g.add_argument("--model-dtype", choices=("float32", "float64"), default="float32",
                   help="weight/activation precision")
    g.add_argument("--config", type=Path, default=None,
                   help="JSON model config (overrides the model flags above)")


def _model_config(args):
    from .model import ModelConfig
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text())
        raw["widths"] = tuple(raw.get("widths", ()))
        raw["convs"] = tuple(raw.get("convs", ()))
        raw["modalities"] = tuple(raw.get("modalities", ()))
        raw["classifier_widths"] = tuple(raw.get("classifier_widths", (512, 128)))
        return ModelConfig(**raw)
    letters = args.modalities.lower()
    if not letters or any(ch not in _MOD_LETTERS for ch in letters):
        raise ValueError(f"--modalities must use letters from 'vam', got {letters!r}")
    mods = tuple(_MOD_LETTERS[ch] for ch in dict.fromkeys(letters))
    return ModelConfig(
        t_frames=args.frames, input_size=args.size, channels=args.channels,
        widths=args.widths, convs=args.convs,
        fusion=args.fusion.replace("-", "_"), attention=args.attention,
        modalities=mods, dropout=args.dropout, dtype=args.model_dtype,
        seed=args.seed,
    )


def _print_config(obj):
    from dataclasses import asdict, is_dataclass
    resolved = asdict(obj) if is_dataclass(obj) else dict(obj)
    print("resolved config: " + json.dumps(resolved, sort_keys=True, default=str))


def _load_model(cfg, checkpoint):
    from . import data_io
    from .model import FTFDNet
    model = FTFDNet(cfg)
    weights, step, _ = data_io.load_checkpoint(checkpoint, cfg.digest())
    model.load_state_arrays(weights)
    model.eval()
    return model, step


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import SynthSpec, generate_dataset
    spec = SynthSpec(n_frames=args.clip_frames, image_size=args.size,
                     channels=args.channels, fake_mode=args.fake_mode)
    _print_config(spec)
    manifest = generate_dataset(args.real, args.fake, args.seed, args.out, spec=spec)
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    from .train import train
    cfg = _model_config(args)
    _print_config(cfg)
    res = train(args.data, cfg, args.epochs, batch_size=args.batch, lr=args.lr,
                seed=args.seed, out_dir=args.out)
    if args.out is not None:
        (Path(args.out) / "config.json").write_text(
            json.dumps(_cfg_dict(cfg), indent=2, sort_keys=True) + "\n")
    if res.checkpoint_path is not None:
        print(f"best checkpoint: {res.checkpoint_path}")
    return 0


def _cfg_dict(cfg):
    from dataclasses import asdict
    return asdict(cfg)


def cmd_eval(args) -> int:
    from .train import evaluate
    cfg = _model_config(args)
    _print_config(cfg)
    model, step = _load_model(cfg, args.checkpoint)
    res = evaluate(args.data, args.split, model)
    auc = f"{res.auc:7.2f}" if res.auc is not None else "      -"
    print(f"{'split':<8}{'ACC(%)':>8}{'AUC(%)':>8}  {'LogLoss':>8}{'segments':>10}")
    print(f"{args.split:<8}{res.acc:8.2f}{auc:>8}  {res.logloss:8.4f}{res.n_segments:10d}")
    return 0


def cmd_infer(args) -> int:
    from . import data_io
    from .model import predict_segment
    from .train import load_clip
    cfg = _model_config(args)
    _print_config(cfg)
    model, _ = _load_model(cfg, args.checkpoint)
    records = data_io.load_manifest(args.data)[args.split]
    if not records:
        raise ValueError(f"empty split {args.split!r}")
    for rec in records:
        clip = load_clip(rec, fps=cfg.fps, expected_rate=cfg.sample_rate)
        rep = predict_segment(model, clip, threshold=args.threshold)
        print(f"{rep.clip_id}\t{rep.segment_score:.6f}\t{rep.verdict}")
    return 0


def cmd_gradcheck(args) -> int:
    from .train import grad_check, mini_config
    cfg = mini_config(dropout=args.dropout)
    _print_config(cfg)
    report = grad_check(cfg, seed=args.seed, zero_input=args.zero_input)
    print(report.row())
    return 0 if report.passed else 2


def cmd_flow(args) -> int:
    import numpy as np
    from . import data_io
    from .signal_prep import farneback_flow

    frames = data_io.read_clip_frames(args.frames_dir)
    _print_config({"frames": str(args.frames_dir), "n_frames": len(frames),
                   "out": str(args.out)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    region = args.region
    if region is None:
        meta_path = Path(args.frames_dir).parent.parent / "meta.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            from .synth import SynthSpec
            region = SynthSpec(**{k: (tuple(v) if isinstance(v, list) else v)
                                  for k, v in meta["spec"].items()}).resolved_lip_rect()
    if region is None:
        s = frames.shape[-1]
        region = (int(0.58 * s), int(0.88 * s), int(0.28 * s), int(0.72 * s))
    r0, r1, c0, c1 = region

    n_pairs = len(frames) - 1 if args.pairs is None else min(args.pairs, len(frames) - 1)
    inside, outside = [], []
    for i in range(n_pairs):
        fl = farneback_flow(frames[i], frames[i + 1])
        data_io.write_tensor(out / f"flow_{i:04d}.ftfd", fl.values.astype(np.float32))
        mag = fl.magnitude()
        mask = np.zeros_like(mag, dtype=bool)
        mask[r0:r1, c0:c1] = True
        inside.append(mag[mask].mean())
        outside.append(mag[~mask].mean())
    inside, outside = np.array(inside), np.array(outside)
    print(f"region rows {r0}:{r1} cols {c0}:{c1}  pairs {n_pairs}")
    print(f"{'':<10}{'mean |flow|':>12}{'temporal var':>14}")
    print(f"{'lip':<10}{inside.mean():12.4f}{inside.var():14.6f}")
    print(f"{'off-lip':<10}{outside.mean():12.4f}{outside.var():14.6f}")
    return 0


def cmd_attmap(args) -> int:
    import numpy as np
    from . import data_io
    from .model import batch_inputs, window_inputs
    from .train import load_clip
    cfg = _model_config(args)
    if cfg.attention != "avam":
        raise ValueError("attmap requires --attention avam")
    _print_config(cfg)
    model, _ = _load_model(cfg, args.checkpoint)
    rec = data_io.ClipRecord(clip_id=Path(args.frames_dir).name,
                             frames_path=Path(args.frames_dir),
                             audio_path=Path(args.audio),
                             label=0, split="test")
    clip = load_clip(rec, fps=cfg.fps, expected_rate=cfg.sample_rate)
    batch = batch_inputs([window_inputs(clip, args.start, cfg)])
    maps = model.avam_maps(batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for b, m in enumerate(maps, start=1):
        path = out / f"attmap_block{b}.ftfd"
        data_io.write_tensor(path, m[0].astype(np.float32))
        print(f"block {b}: {m.shape[-2]}x{m.shape[-1]} map -> {path}")
    return 0


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftfd",
        description="Tri-modal fake talking face detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--real", type=int, required=True, help="number of real clips")
    p.add_argument("--fake", type=int, required=True, help="number of fake clips")
    p.add_argument("--seed", type=int, default=0, help="base generation seed")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    p.add_argument("--size", type=int, default=56, help="frame height/width")
    p.add_argument("--channels", type=int, default=1, help="frame channels")
    p.add_argument("--clip-frames", type=int, default=30, help="frames per clip")
    p.add_argument("--fake-mode", choices=("desync", "jitter", "both"),
                   default="both", help="manipulation applied to fake clips")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="manifest path")
    p.add_argument("--out", type=Path, default=None, help="run directory for checkpoint/logs")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch", type=int, default=32, help="minibatch size")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0, help="weights + sampling seed")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="manifest path")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="manifest split to score")
    p.add_argument("--seed", type=int, default=0, help="model build seed")
    _model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="per-clip verdicts", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="manifest path")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="manifest split to score")
    p.add_argument("--threshold", type=float, default=0.5, help="fake verdict threshold")
    p.add_argument("--seed", type=int, default=0, help="model build seed")
    _model_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite",
                       formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="data seed")
    p.add_argument("--dropout", type=float, default=0.0,
                   help="dropout probability (mask frozen during the check)")
    p.add_argument("--zero-input", action="store_true",
                   help="run the degenerate all-zero-input variant")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flow", help="export optical flow + region summary",
                       formatter_class=fmt)
    p.add_argument("--frames-dir", type=Path, required=True,
                   help="clip frame container directory")
    p.add_argument("--out", type=Path, required=True, help="flow output directory")
    p.add_argument("--region", type=_int_tuple, default=None,
                   help="lip region r0,r1,c0,c1 (default: dataset meta or center)")
    p.add_argument("--pairs", type=int, default=None,
                   help="number of frame pairs (default: all)")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("attmap", help="export per-block attention maps",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    p.add_argument("--frames-dir", type=Path, required=True,
                   help="clip frame container directory")
    p.add_argument("--audio", type=Path, required=True, help="clip WAV file")
    p.add_argument("--start", type=int, default=0, help="window start frame")
    p.add_argument("--out", type=Path, required=True, help="map output directory")
    p.add_argument("--seed", type=int, default=0, help="model build seed")
    _model_flags(p)
    p.set_defaults(func=cmd_attmap)

    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except Exception as exc:                    # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
