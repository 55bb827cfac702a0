"""Command-line surface.

Usage errors exit 2 (argparse); contract violations from any module exit
1 with the diagnostic on stderr. Randomized commands require --seed so
every run is reproducible; train/eval runs drop a run manifest next to
their outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import __version__
from . import bitstream, configio, datasets, evaluation, gradcheck, losses, ppm, trainer
from .codec import CodecParams, compress as codec_compress, decompress as codec_decompress
from .lossnet import ClassifierParams, train_classifier, evaluate_accuracy


def _manifest(out_path, args, configs, inputs):
    path = out_path + ".manifest.txt" if not os.path.isdir(out_path) \
        else os.path.join(out_path, "manifest.txt")
    configio.write_manifest(path, command=" ".join(sys.argv[1:]), configs=configs,
                            seed=getattr(args, "seed", None), inputs=inputs,
                            tool_version=__version__)


def _train_cfg(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig.desk(seed=args.seed)
    if args.config:
        cfg = configio.apply_kv(cfg, configio.read_kv(args.config),
                                skip=("alpha", "layer_ids", "lambda_h"))
    for name in ("epochs", "batch_size", "unroll_steps", "learning_rate"):
        v = getattr(args, name, None)
        if v is not None:
            cfg = dataclasses.replace(cfg, **{name: v})
    return cfg


def _loss_cfg(args) -> losses.LossConfig:
    kw = {}
    if args.config:
        kv = configio.read_kv(args.config)
        if "alpha" in kv:
            kw["alpha"] = float(kv["alpha"])
        if "layer_ids" in kv:
            kw["layer_ids"] = tuple(s.strip() for s in kv["layer_ids"].split(",") if s.strip())
        if "lambda_h" in kv:
            kw["lambda_h"] = float(kv["lambda_h"])
    if getattr(args, "alpha", None) is not None:
        kw["alpha"] = args.alpha
    if getattr(args, "layers", None):
        kw["layer_ids"] = tuple(args.layers.split(","))
    return losses.LossConfig(**kw)


def cmd_gen_data(args):
    spec = datasets.ShapesSpec(seed=args.seed, split=args.split, size=args.n,
                               classes=args.classes, resolution=args.res)
    out = datasets.materialize(datasets.ShapesDataset(spec), args.out)
    _manifest(out, args, {"dataset": spec}, [])
    print(f"wrote {args.n} images to {out}")
    return 0


def cmd_train_classifier(args):
    cfg = _train_cfg(args)
    train_set = datasets.parse_spec(args.data, default_split="train")
    params, log = train_classifier(train_set, cfg, seed=args.seed)
    params.save(args.out)
    if args.val_data:
        val_set = datasets.parse_spec(args.val_data, default_split="val")
        acc = evaluate_accuracy(params, val_set, cfg)
        print(f"val accuracy: {acc:.4f}")
    _manifest(args.out, args, {"train": cfg}, [args.config] if args.config else [])
    print(f"saved classifier to {args.out} ({len(log)} log rows)")
    return 0


def cmd_train_codec(args):
    cfg = _train_cfg(args)
    loss_cfg = _loss_cfg(args)
    train_set = datasets.parse_spec(args.data, default_split="train")
    val_set = datasets.parse_spec(args.val_data or args.data, default_split="val")
    net = ClassifierParams.load(args.lossnet) if args.lossnet else None
    os.makedirs(args.out, exist_ok=True)

    def progress(step, row):
        if args.verbose and step % 50 == 0:
            print(f"step {row[0]}: loss {row[1]:.5f}", flush=True)

    params, log, _ = trainer.train_codec(train_set, val_set, loss_cfg, cfg,
                                         lossnet=net, out_dir=args.out,
                                         progress=progress)
    _manifest(args.out, args, {"train": cfg, "loss": loss_cfg},
              [p for p in (args.config, args.lossnet) if p])
    print(f"final loss {log[-1][1]:.5f} after {log[-1][0]} steps; "
          f"checkpoints in {args.out}")
    return 0


def cmd_compress(args):
    img = ppm.read_ppm(args.infile)
    params = CodecParams.load(args.model)
    bs = codec_compress(img, args.iters, params)
    bitstream.write_file(args.out, bs)
    print(f"{bs.payload_bits} payload bits, {bs.bpp:.6g} bpp")
    return 0


def cmd_decompress(args):
    bs = bitstream.read_file(args.infile)
    params = CodecParams.load(args.model)
    ppm.write_ppm(args.out, codec_decompress(bs, params))
    print(f"decoded {bs.header.width}x{bs.header.height} at T={bs.header.iterations}")
    return 0


def _grid(text):
    return tuple(int(v) for v in text.split(",") if v)


def cmd_eval_quality(args):
    params = CodecParams.load(args.model)
    val_set = datasets.parse_spec(args.data, default_split="val")
    cfg = evaluation.EvalConfig(s_comp=args.s_comp, s_inf=args.s_inf, grid=_grid(args.grid))
    points = evaluation.eval_quality_curve(params, val_set, cfg)
    configio.write_csv(args.out, evaluation.CURVE_HEADER,
                       [(p.level, p.bpp, p.value, p.n) for p in points])
    _manifest(args.out, args, {"eval": cfg}, [args.model])
    for p in points:
        print(f"T={p.level}: bpp {p.bpp:.4f} msssim {p.value:.4f} (n={p.n})")
    return 0


def cmd_eval_accuracy(args):
    params = CodecParams.load(args.model)
    classifier = ClassifierParams.load(args.classifier)
    val_set = datasets.parse_spec(args.data, default_split="val")
    cfg = evaluation.EvalConfig(s_comp=args.s_comp, s_inf=args.s_inf, grid=_grid(args.grid))
    curves = evaluation.eval_accuracy_curve(params, classifier, val_set, cfg)
    base, ext = os.path.splitext(args.out)
    for metric, points in curves.items():
        path = args.out if metric == "accuracy" else f"{base}_{metric}{ext}"
        configio.write_csv(path, evaluation.CURVE_HEADER,
                           [(p.level, p.bpp, p.value, p.n) for p in points])
    _manifest(args.out, args, {"eval": cfg}, [args.model, args.classifier])
    for metric, points in curves.items():
        for p in points:
            print(f"{metric} T={p.level}: bpp {p.bpp:.4f} value {p.value:.4f}")
    return 0


def cmd_sweep(args):
    checkpoints = {}
    for pair in args.models.split(","):
        alpha, path = pair.split("=", 1)
        checkpoints[float(alpha)] = CodecParams.load(path) if os.path.exists(path) else None
    classifier = ClassifierParams.load(args.classifier)
    val_set = datasets.parse_spec(args.data, default_split="val")
    cfg = evaluation.EvalConfig(s_comp=args.s_comp, s_inf=args.s_inf)
    rows, skipped = evaluation.tradeoff_sweep(checkpoints, classifier, val_set,
                                              _grid(args.iters), cfg)
    configio.write_csv(args.out, evaluation.SWEEP_HEADER, rows)
    _manifest(args.out, args, {"eval": cfg}, [args.classifier])
    for a in skipped:
        print(f"warning: no checkpoint for alpha={a}, rows skipped", file=sys.stderr)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def cmd_ablate_layers(args):
    f_l = ClassifierParams.load(args.lossnet)
    classifier = ClassifierParams.load(args.classifier)
    train_set = datasets.parse_spec(args.data, default_split="train")
    val_set = datasets.parse_spec(args.val_data or args.data, default_split="val")
    cfg = _train_cfg(args)
    sets = []
    for chunk in args.sets.split("|"):
        sets.append(tuple(f_l.layer_names()) if chunk == "all" else tuple(chunk.split(",")))
    eval_cfg = evaluation.EvalConfig(s_comp=args.s_comp, s_inf=args.s_inf)
    rows, _ = evaluation.ablate_layers(sets, train_set, val_set, f_l, classifier,
                                       losses.LossConfig(alpha=1.0), cfg,
                                       _grid(args.iters), eval_cfg)
    configio.write_csv(args.out, evaluation.ABLATION_HEADER, rows)
    _manifest(args.out, args, {"train": cfg}, [args.lossnet, args.classifier])
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


def cmd_gradcheck(args):
    dtype = np.float64 if args.dtype == "f64" else np.float32
    rows = gradcheck.run_op_suite(dtype, seed=args.seed)
    worst = {}
    for name, err, tol, ok in rows:
        prev = worst.get(name, (0.0, tol, True))
        worst[name] = (max(prev[0], err), tol, prev[2] and ok)
    failed = 0
    for name in sorted(worst):
        err, tol, ok = worst[name]
        print(f"{'PASS' if ok else 'FAIL'} {name}: max rel err {err:.3e} (tol {tol:g})")
        failed += 0 if ok else 1
    print(f"{len(worst) - failed}/{len(worst)} gradient suites passed [{args.dtype}]")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odlc",
                                description="observer-dependent lossy image codec")
    p.add_argument("--version", action="version", version=f"odlc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp):
        sp.add_argument("--seed", type=int, required=True,
                        help="rng seed (required: runs must be reproducible)")

    sp = sub.add_parser("gen-data", help="materialize the procedural dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train", choices=sorted(datasets._SPLIT_TAGS))
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--res", type=int, default=64)
    seeded(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-classifier", help="train a desk-scale classifier")
    sp.add_argument("--data", required=True, help="dataset spec or folder")
    sp.add_argument("--val-data", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", default=None, help="key = value config file")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    seeded(sp)
    sp.set_defaults(fn=cmd_train_classifier)

    sp = sub.add_parser("train-codec", help="train the codec at one alpha")
    sp.add_argument("--data", required=True)
    sp.add_argument("--val-data", default=None)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--layers", default=None, help="comma-separated tap ids, e.g. 1.1,5.1")
    sp.add_argument("--lossnet", default=None, help="classifier checkpoint for alpha > 0")
    sp.add_argument("--config", default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--unroll-steps", dest="unroll_steps", type=int, default=None)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    sp.add_argument("--verbose", action="store_true")
    seeded(sp)
    sp.set_defaults(fn=cmd_train_codec)

    sp = sub.add_parser("compress", help="image -> bitstream")
    sp.add_argument("--in", dest="infile", required=True, help="P6 PPM input")
    sp.add_argument("--model", required=True)
    sp.add_argument("--iters", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_compress)

    sp = sub.add_parser("decompress", help="bitstream -> image")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_decompress)

    def eval_common(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--s-comp", dest="s_comp", type=int, default=64)
        sp.add_argument("--s-inf", dest="s_inf", type=int, default=56)

    sp = sub.add_parser("eval-quality", help="(bpp, MS-SSIM) curve")
    sp.add_argument("--model", required=True)
    sp.add_argument("--grid", default="1,2,3,4")
    eval_common(sp)
    sp.set_defaults(fn=cmd_eval_quality)

    sp = sub.add_parser("eval-accuracy", help="(bpp, accuracy/preservation) curves")
    sp.add_argument("--model", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--grid", default="1,2,3,4")
    eval_common(sp)
    sp.set_defaults(fn=cmd_eval_accuracy)

    sp = sub.add_parser("sweep", help="alpha x iterations trade-off table")
    sp.add_argument("--models", required=True,
                    help="comma-separated alpha=checkpoint pairs, e.g. 0=a.ckpt,1=b.ckpt")
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--iters", default="1,2,3,4")
    eval_common(sp)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("ablate-layers", help="train alpha=1 codecs per tap set")
    sp.add_argument("--sets", required=True,
                    help="pipe-separated tap sets, e.g. '1.1|5.1|1.1,5.1|all'")
    sp.add_argument("--lossnet", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--val-data", default=None)
    sp.add_argument("--config", default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--unroll-steps", dest="unroll_steps", type=int, default=None)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    sp.add_argument("--iters", default="1,2,3,4")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--s-comp", dest="s_comp", type=int, default=64)
    sp.add_argument("--s-inf", dest="s_inf", type=int, default=56)
    seeded(sp)
    sp.set_defaults(fn=cmd_ablate_layers)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    seeded(sp)
    sp.set_defaults(fn=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"odlc {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
