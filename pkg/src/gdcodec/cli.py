"""Command-line interface: ``gdcodec {train,encode,decode,eval,bd,plot}``.

Exit codes:
    0  success
    1  other runtime failure
    2  usage error (bad flags or arguments)
    3  missing checkpoint
    4  model mismatch (stream checksum or adapter/prior pairing)
    5  malformed or truncated stream
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_CHECKPOINT = 3
EXIT_MODEL_MISMATCH = 4
EXIT_MALFORMED_STREAM = 5

log = logging.getLogger("gdcodec")


def read_image(path) -> np.ndarray:
    """``[3, H, W]`` float32 in [0, 1] from an image file or a ``.npy`` array."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def write_image(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, img)
        return
    from PIL import Image

    data = np.clip(np.rint(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def _train_config(ckpt: Path):
    from .training import TrainConfig

    cfg_path = ckpt / "train_config.yaml"
    return TrainConfig.from_yaml(cfg_path) if cfg_path.exists() else TrainConfig(out_dir=str(ckpt))


# subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    from .training import TrainConfig, run

    overrides = {"stage": args.stage, "out_dir": args.out_dir, "seed": args.seed,
                 "corpus_dir": args.corpus_dir}
    cfg = TrainConfig.from_yaml(args.config, **overrides) if args.config else TrainConfig(
        **{k: v for k, v in overrides.items() if v is not None})
    run(cfg)
    return EXIT_OK


def cmd_encode(args) -> int:
    import torch

    from .pipeline import GenerativeCodec

    system = GenerativeCodec.load(args.ckpt, adapter=args.adapter, prior=args.prior)
    x = torch.from_numpy(read_image(args.input))
    data = system.encode(x, args.rate_level, args.seed)
    Path(args.output).write_bytes(data)
    h, w = x.shape[-2:]
    print(json.dumps({"bytes": len(data), "bpp": 8 * len(data) / (h * w)}))
    return EXIT_OK


def cmd_decode(args) -> int:
    from .pipeline import GenerativeCodec

    system = GenerativeCodec.load(args.ckpt, adapter=args.adapter, prior=args.prior)
    img = system.decode(Path(args.input).read_bytes(), steps=args.steps,
                        use_adapter=not args.no_adapter, renorm=not args.no_renorm)
    write_image(img, args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .corpus import ToyCorpus
    from .evaluation import run_rd_sweep
    from .pipeline import GenerativeCodec
    from .plotting import write_report

    ckpt = Path(args.ckpt)
    cfg = _train_config(ckpt)
    system = GenerativeCodec.load(ckpt, adapter=args.adapter, prior=args.prior)
    additive = None
    if "additive" in args.variants:
        additive = GenerativeCodec.load(ckpt, adapter=cfg.additive_adapter_file, prior=args.prior)
    n_test = args.n_test or cfg.n_test
    corpus = ToyCorpus(cfg.seed, cfg.n_train, n_test, cfg.image_size, cfg.style,
                       args.corpus_dir or cfg.corpus_dir)
    result = run_rd_sweep(system, corpus.test, args.levels, args.seed, args.variants, additive, args.steps)
    curves = write_report(result, args.out)
    print(json.dumps({"curves": str(curves), "points": len(result.rows)}))
    return EXIT_OK


def cmd_bd(args) -> int:
    from .evaluation import bd_metrics, curves_from_records, read_jsonl

    curves = curves_from_records(read_jsonl(args.records), args.metric, args.rate)
    for label in (args.ref, args.test):
        if label not in curves:
            print(f"error: no curve {label!r} for metric {args.metric!r}", file=sys.stderr)
            return EXIT_USAGE
    rate, dist = bd_metrics(curves[args.ref], curves[args.test], piecewise=args.piecewise)
    print(json.dumps({"ref": args.ref, "test": args.test, "metric": args.metric,
                      "bd_rate_percent": rate, "bd_distortion_percent": dist}))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .evaluation import curves_from_records, read_jsonl
    from .plotting import plot_rd

    curves = curves_from_records(read_jsonl(args.records), args.metric, args.rate)
    if args.labels:
        curves = {k: curves[k] for k in args.labels if k in curves}
    path = plot_rd(curves, args.output, title=args.title, logx=args.logx, rate_label=args.rate)
    print(path)
    return EXIT_OK


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .evaluation import METRICS, VARIANTS
    from .training import STAGES

    parser = argparse.ArgumentParser(prog="gdcodec", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=__doc__.split("\n", 2)[2])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--config", help="YAML training config")
    p.add_argument("--stage", choices=STAGES)
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus-dir", help="directory of images to use instead of the synthetic corpus")
    p.set_defaults(func=cmd_train)

    def model_flags(p):
        p.add_argument("--ckpt", default="checkpoints", help="checkpoint directory")
        p.add_argument("--adapter", help="adapter file name inside --ckpt")
        p.add_argument("--prior", help="prior file name inside --ckpt")

    p = sub.add_parser("encode", help="compress an image to a stream file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--rate-level", type=int, default=0, help="0 = highest rate, 9 = lowest")
    p.add_argument("--seed", type=int, default=0, help="sampling seed stored in the stream")
    model_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct an image from a stream file")
    p.add_argument("input")
    p.add_argument("output", help=".png or .npy")
    p.add_argument("--steps", type=int, default=None, help="DDIM steps (default 10)")
    p.add_argument("--no-adapter", action="store_true")
    p.add_argument("--no-renorm", action="store_true")
    model_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="RD sweep over the test split; writes JSONL and PNG plots")
    p.add_argument("--out", default="results")
    p.add_argument("--levels", type=int, nargs="+", default=None)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=["full"])
    p.add_argument("--n-test", type=int)
    p.add_argument("--corpus-dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bd", help="Bjontegaard deltas between two curves of a records file")
    p.add_argument("records")
    p.add_argument("ref")
    p.add_argument("test")
    p.add_argument("--metric", choices=METRICS, default="ms_ssim")
    p.add_argument("--rate", choices=("bpp", "payload_bpp"), default="bpp")
    p.add_argument("--piecewise", action="store_true", help="piecewise-cubic (PCHIP) instead of cubic fit")
    p.set_defaults(func=cmd_bd)

    p = sub.add_parser("plot", help="render curves from a records file")
    p.add_argument("records")
    p.add_argument("output")
    p.add_argument("--metric", choices=METRICS, default="ms_ssim")
    p.add_argument("--rate", choices=("bpp", "payload_bpp"), default="bpp")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--title")
    p.add_argument("--logx", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    from .errors import (
        AdapterMismatchError,
        ChecksumMismatchError,
        CodecError,
        MissingCheckpointError,
    )

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except (ChecksumMismatchError, AdapterMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL_MISMATCH
    except CodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED_STREAM
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
