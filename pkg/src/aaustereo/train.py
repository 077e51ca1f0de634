"""Overfitting a small model on one random-dot stereogram."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .errors import NumericError
from .losses import LOSS_NAMES, gt_match_columns, loss_be, loss_rr, loss_smooth_l1, loss_total, metrics_report
from .model import AAUformer
from .optim import adamw_step
from .synth import synth_rds


@dataclass
class TokenTargets:
    """Ground truth sampled at token centres: disparity in pixels, match columns in tokens."""

    d: np.ndarray
    occ: np.ndarray
    match: np.ndarray

    @classmethod
    def from_pixels(cls, d_gt, occ_gt, stride):
        d = np.asarray(d_gt, dtype=np.float64)[::stride, ::stride]
        occ = np.asarray(occ_gt, dtype=bool)[::stride, ::stride]
        return cls(d, occ, gt_match_columns(d, stride))


def compute_losses(model, out, sample, targets):
    """The four loss terms for one forward pass, keyed by :data:`LOSS_NAMES`."""
    s = model.cfg.attention_stride
    noc_low = ~targets.occ
    noc = ~np.asarray(sample.occ_gt, dtype=bool)
    return {
        "rr": loss_rr(out.T, targets.match, targets.occ),
        "d1_raw": loss_smooth_l1(targets.d, out.d_raw * float(s), noc_low),
        "d1_final": loss_smooth_l1(sample.d_gt, out.d_final, noc),
        "be_final": loss_be(np.asarray(sample.occ_gt, dtype=np.float64), out.occ_final),
    }


def train_step(model, sample, targets, weights, lr, state, step, train_cfg):
    params = model.parameters()
    for p in params:
        p.zero_grad()
    with ad.Tape() as tape:
        out = model(sample.left, sample.right)
        losses = compute_losses(model, out, sample, targets)
        try:
            total = loss_total(losses, weights)
        except NumericError as exc:
            raise NumericError("divergence", f"step {step}: {exc.detail} loss is not finite") from exc
    if not np.isfinite(total.data):
        raise NumericError("divergence", f"step {step}")
    tape.backward(total)
    adamw_step(params, lr, train_cfg.betas, train_cfg.weight_decay, step, state=state)
    row = {k: float(v.data) for k, v in losses.items()}
    row["total"] = float(total.data)
    return row


def smoothed(values, window=50):
    """Trailing mean over the last ``window`` entries at every index."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class TrainResult:
    model: AAUformer
    history: list = field(default_factory=list)
    metrics: dict = None


def evaluate(model, sample):
    """Non-occluded EPE / 3px error and occlusion recall of the current model on ``sample``."""
    out = model.infer(sample.left, sample.right)
    res = out.result
    occ = np.asarray(sample.occ_gt, dtype=bool)
    report = metrics_report(res.d_final, sample.d_gt, ~occ, occ)
    report["occ_recall"] = float(res.occ_mask[occ].mean()) if occ.any() else 1.0
    report["occ_false_alarm"] = float(res.occ_mask[~occ].mean())
    return report, out


def train_toy(run_cfg=None, steps=None, log=None, sample=None):
    """Train on one stereogram; ``log(step, row)`` is called after every step."""
    run_cfg = run_cfg or RunConfig()
    steps = run_cfg.train.steps if steps is None else steps
    model = AAUformer(run_cfg.model, seed=run_cfg.seed)
    sample = sample or synth_rds(run_cfg.rds)
    targets = TokenTargets.from_pixels(sample.d_gt, sample.occ_gt, run_cfg.model.attention_stride)
    lr = {"default": run_cfg.train.lr, "context": run_cfg.train.lr_context}
    state = {}
    history = []
    for step in range(1, steps + 1):
        row = train_step(model, sample, targets, run_cfg.loss_weights, lr, state, step, run_cfg.train)
        row["step"] = step
        history.append(row)
        if log is not None:
            log(step, row)
    metrics, _ = evaluate(model, sample)
    return TrainResult(model, history, metrics)


def write_loss_csv(path, history):
    cols = ["step", *LOSS_NAMES, "total"]
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(cols)
        for row in history:
            out.writerow([row["step"]] + [repr(row[c]) for c in cols[1:]])
