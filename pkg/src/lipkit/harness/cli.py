"""``lipkit`` command line: gen-data, train, eval, ablate, align.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..align import AlignmentError, align_clip, load_landmarks, load_template
from ..datapipe import DataError, SyntheticSpec, generate_synthetic, to_grayscale
from ..ndtensor import ShapeError, load_tensor, save_tensor
from .ablation import DEFAULT_SEEDS, SUITES, desk_config, run_ablation
from .config import ConfigError, load_config
from .train import NumericError, predictions_csv, run_eval, run_train

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lipkit", description="Word-level lip-reading training toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic video-word dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=140)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--boundary-context", action="store_true")
    g.add_argument("--jitter", action="store_true", help="per-frame roll/scale/shift jitter (for alignment)")
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="val")
    e.add_argument("--predictions", help="write id,label,pred rows to this CSV file")

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", required=True, choices=sorted(SUITES))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=_seeds, default=list(DEFAULT_SEEDS))
    a.add_argument("--config", help="base configuration (default: the desk preset)")

    al = sub.add_parser("align", help="align a clip's frames to a landmark template")
    al.add_argument("--frames", required=True, help="directory of per-frame LKT1 tensors, in name order")
    al.add_argument("--landmarks", required=True)
    al.add_argument("--template")
    al.add_argument("--out", required=True)
    return ap


def _gen_data(args) -> int:
    spec = SyntheticSpec(classes=args.classes, per_class=args.per_class, frames=args.frames, size=args.size,
                         noise=args.noise, boundary_context=args.boundary_context, jitter=args.jitter, seed=args.seed)
    try:
        m = generate_synthetic(args.out, spec)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    print(f"wrote {len(m.samples)} clips ({len(m.classes)} classes) to {args.out}")
    return 0


def _align(args) -> int:
    files = sorted(Path(args.frames).glob("*.lkt"))
    if not files:
        raise DataError(f"no .lkt frames in {args.frames}")
    frames = []
    for f in files:
        a = load_tensor(f)
        frames.append(to_grayscale(a) if a.ndim == 3 else a)
    out = align_clip(np.stack(frames), load_landmarks(args.landmarks), load_template(args.template))
    dst = Path(args.out)
    dst.mkdir(parents=True, exist_ok=True)
    for f, img in zip(files, out):
        save_tensor(dst / f.name, img)
    print(f"aligned {len(files)} frames into {dst}")
    return 0


def _dispatch(args) -> int:
    if args.command == "gen-data":
        return _gen_data(args)
    if args.command == "train":
        res = run_train(load_config(args.config), args.data, args.out, resume=args.resume, log=print)
        print(json.dumps(res))
        return 0
    if args.command == "eval":
        rep = run_eval(args.ckpt, args.data, args.split)
        if args.predictions:
            Path(args.predictions).write_text(predictions_csv(rep))
        print(json.dumps({k: v for k, v in rep.items() if k != "predictions"}))
        return 0
    if args.command == "ablate":
        base = load_config(args.config) if args.config else desk_config()
        run_ablation(args.suite, args.data, args.out, args.seeds, base, log=print)
        print((Path(args.out) / "table.txt").read_text(), end="")
        return 0
    return _align(args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, AlignmentError, ShapeError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
