"""Command-line entry point: ``aaustereo {infer,train-toy,selftest,synth,pca,flops,affine}``.

Exit codes: 0 success, 1 selftest failure, 2 I/O, 3 shape/config, 4 numeric divergence.
"""

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig
from .errors import AAUError, NumericError

EXIT_OK, EXIT_SELFTEST, EXIT_IO, EXIT_SHAPE, EXIT_NUMERIC = 0, 1, 2, 3, 4


def load_run_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.rds.seed = args.seed
    return cfg


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_infer(args):
    from .formats import read_sample, write_pfm, write_ppm
    from .losses import metrics_json, metrics_report
    from .model import AAUformer, load_weights

    cfg = load_run_config(args)
    sample = read_sample(args.sample)
    model = AAUformer(cfg.model, seed=cfg.seed)
    if args.weights:
        load_weights(model, args.weights)
    out = model.infer(sample.left, sample.right, keep_attention=args.dump_attention)
    res = out.result
    d = _out_dir(args)
    write_pfm(os.path.join(d, "disp.pfm"), res.d_final.astype(np.float32))
    write_ppm(os.path.join(d, "occ.pgm"), np.where(res.occ_mask, 255, 0).astype(np.uint8))
    if args.dump_attention:
        # one PFM per cross layer; epipolar rows are stacked vertically, (rows * w, w)
        for i, a in enumerate(out.attention):
            write_pfm(os.path.join(d, f"attention_{i}.pfm"), a.reshape(-1, a.shape[-1]).astype(np.float32))
    if sample.d_gt is not None:
        occ = sample.occ_gt if sample.occ_gt is not None else np.zeros(sample.d_gt.shape, bool)
        report = metrics_report(res.d_final, sample.d_gt, ~occ, occ)
        with open(os.path.join(d, "metrics.json"), "w") as f:
            f.write(metrics_json(report) + "\n")
        print(metrics_json(report))
    return EXIT_OK


def cmd_train_toy(args):
    from .model import save_weights
    from .train import train_toy, write_loss_csv

    cfg = load_run_config(args)
    steps = cfg.train.steps if args.steps is None else args.steps
    log_every = cfg.train.log_every

    def log(step, row):
        if step == 1 or step % log_every == 0 or step == steps:
            parts = " ".join(f"{k}={row[k]:.5f}" for k in ("rr", "d1_raw", "d1_final", "be_final", "total"))
            print(f"step {step:4d} {parts}", flush=True)

    result = train_toy(cfg, steps=steps, log=log)
    d = _out_dir(args)
    write_loss_csv(os.path.join(d, "loss.csv"), result.history)
    save_weights(result.model, os.path.join(d, "weights.aauw"))
    with open(os.path.join(d, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    with open(os.path.join(d, "metrics.json"), "w") as f:
        json.dump(result.metrics, f, indent=2, sort_keys=True)
    print(json.dumps(result.metrics, sort_keys=True))
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    faults = [args.fault] if args.fault else []
    ok, results = run_selftest(faults)
    for name, passed, msg in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}" + (f": {msg}" if msg else ""))
    print(f"{sum(p for _, p, _ in results)}/{len(results)} groups passed")
    return EXIT_OK if ok else EXIT_SELFTEST


def cmd_synth(args):
    from .formats import write_sample
    from .synth import synth_rds

    cfg = load_run_config(args)
    sample = synth_rds(cfg.rds)
    if args.name:
        sample.name = args.name
    path = write_sample(_out_dir(args), sample)
    print(path)
    return EXIT_OK


def cmd_pca(args):
    from . import autodiff as ad
    from .analysis import pca_row_slice, write_pca_csv
    from .formats import read_sample
    from .model import AAUformer, load_weights, standardize_pair

    cfg = load_run_config(args)
    sample = read_sample(args.sample)
    model = AAUformer(cfg.model, seed=cfg.seed)
    if args.weights:
        load_weights(model, args.weights)
    L, R = standardize_pair(sample.left, sample.right)
    with ad.no_tape():
        feats = model.backbone(L, R)
    d = _out_dir(args)
    for side, fm in (("left", feats.left.data), ("right", feats.right.data)):
        comps, ratios, proj = pca_row_slice(fm, min(args.row, fm.shape[0] - 1), args.k)
        write_pca_csv(os.path.join(d, f"pca_{side}.csv"), ratios, proj)
        print(side, " ".join(f"{r:.4f}" for r in ratios))
    return EXIT_OK


def cmd_flops(args):
    from .analysis import flops_eq23, measure_window_attention_macs

    rep = flops_eq23(args.h, args.w, args.C, args.M)
    out = {"h": rep.h, "w": rep.w, "C": rep.C, "M": rep.M, "omega_isa": rep.omega_isa,
           "omega_wsa": rep.omega_wsa, "ratio": rep.ratio}
    if args.measure:
        out["measured_wsa"] = measure_window_attention_macs(args.h, args.w, args.C, args.M)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_affine(args):
    from .formats import read_ppm, write_ppm
    from .synth import apply_affine

    vals = [float(v) for v in args.matrix.split(",")]
    if len(vals) != 6:
        raise AAUError("bad-affine", "--matrix takes six comma-separated numbers a,b,tx,c,d,ty")
    img = read_ppm(args.image)
    out = apply_affine(img, np.array(vals).reshape(2, 3))
    path = os.path.join(_out_dir(args), args.name)
    write_ppm(path, out)
    print(path)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="aaustereo", description="Stereo matching with attention and optimal transport.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--dump-attention", action="store_true", help="save per-layer cross-attention maps")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("infer", parents=[common], help="predict disparity and occlusion for one sample")
    s.add_argument("sample", help="directory holding left.ppm and right.ppm")
    s.add_argument("--weights", help="weights file (default: fresh initialisation from the seed)")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("train-toy", parents=[common], help="overfit a small model on one stereogram")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("selftest", parents=[common], help="run every invariant group")
    s.add_argument("--fault", choices=["softmax-sign"], help="inject a known fault to exercise the harness")
    s.set_defaults(fn=cmd_selftest)

    s = sub.add_parser("synth", parents=[common], help="write a random-dot stereogram sample directory")
    s.add_argument("--name")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("pca", parents=[common], help="PCA of one row of the final feature maps")
    s.add_argument("sample")
    s.add_argument("--weights")
    s.add_argument("--row", type=int, default=30)
    s.add_argument("--k", type=int, default=3)
    s.set_defaults(fn=cmd_pca)

    s = sub.add_parser("flops", parents=[common], help="attention cost of intra-row vs window attention")
    s.add_argument("--h", type=int, default=180)
    s.add_argument("--w", type=int, default=320)
    s.add_argument("--C", type=int, default=48)
    s.add_argument("--M", type=int, default=7)
    s.add_argument("--measure", action="store_true", help="also count MACs of a real window-attention pass")
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("affine", parents=[common], help="resample a PPM image under an affine map")
    s.add_argument("image")
    s.add_argument("--matrix", required=True, help="a,b,tx,c,d,ty")
    s.add_argument("--name", default="affine.ppm")
    s.set_defaults(fn=cmd_affine)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AAUError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
