"""Training losses and evaluation metrics."""

import json

import numpy as np

from . import autodiff as ad
from .errors import AAUError, NumericError

LOG_FLOOR = 1e-12


class ClampCounter:
    """Counts supervised probabilities that had to be lifted to ``LOG_FLOOR`` before the log."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_events = ClampCounter()


def _neg_log(t):
    t = ad.astensor(t)
    n_low = int(np.sum(t.data < LOG_FLOOR))
    if n_low:
        clamp_events.count += n_low
        t = ad.clip(t, lo=LOG_FLOOR)
    return -ad.log(t)


def loss_rr_from_probs(t_matched, t_dustbin):
    """Mean -log over matched probabilities plus mean -log over dustbin probabilities.

    Either set may be empty, in which case its term is dropped.
    """
    t_matched, t_dustbin = ad.astensor(t_matched), ad.astensor(t_dustbin)
    total = ad.astensor(0.0)
    if t_matched.size:
        total = total + ad.mean(_neg_log(t_matched))
    if t_dustbin.size:
        total = total + ad.mean(_neg_log(t_dustbin))
    return total


def gt_match_columns(d_gt_tokens, stride):
    """Ground-truth right column (token units, may be fractional) for every left token."""
    d_gt_tokens = np.asarray(d_gt_tokens, dtype=np.float64)
    w = d_gt_tokens.shape[-1]
    return np.arange(w)[None, :] - d_gt_tokens / stride


def loss_rr(T, gt_matches, occluded):
    """Negative log-likelihood of the ground-truth assignment under transport plan T.

    ``T`` is (rows, w+1, w+1); ``gt_matches`` (rows, w) holds the gt right
    column of each left token (NaN when unsupervised); ``occluded`` (rows, w)
    is True where the token should go to the dustbin. A fractional column
    splits its target linearly between the two flanking integer columns.
    Matched tokens whose gt column falls outside the row are ignored.
    """
    T = ad.astensor(T)
    rows, w1, _ = T.shape
    w = w1 - 1
    gt = np.asarray(gt_matches, dtype=np.float64)
    occ = np.asarray(occluded, dtype=bool)
    if gt.shape != (rows, w) or occ.shape != (rows, w):
        raise AAUError("shape-mismatch", f"gt {gt.shape} / occlusion {occ.shape} vs plan rows {(rows, w)}")
    matched = ~occ & np.isfinite(gt)
    matched &= (gt >= 0) & (gt <= w - 1)
    r_idx, i_idx = np.nonzero(matched)
    j = gt[r_idx, i_idx]
    lo = np.floor(j).astype(int)
    hi = np.minimum(lo + 1, w - 1)
    frac = j - lo
    t_lo = ad.getitem(T, (r_idx, i_idx, lo))
    t_hi = ad.getitem(T, (r_idx, i_idx, hi))
    t_match = t_lo * (1.0 - frac) + t_hi * frac
    qr, qi = np.nonzero(occ)
    t_dust = ad.getitem(T, (qr, qi, np.full(qr.shape, w)))
    return loss_rr_from_probs(t_match, t_dust)


def loss_smooth_l1(d_gt, d_pred, valid_mask):
    """Mean smooth-L1 of ``d_pred - d_gt`` over the pixels where ``valid_mask`` holds."""
    mask = np.asarray(valid_mask, dtype=bool)
    if not mask.any():
        raise AAUError("empty-mask", "no valid pixels for the disparity loss")
    d_pred = ad.astensor(d_pred)
    e = ad.getitem(d_pred, mask) - np.asarray(d_gt, dtype=np.float64)[mask]
    return ad.mean(ad.smooth_l1(e))


def loss_be(y, t_phi, eps=LOG_FLOOR):
    """Mean binary cross-entropy of occlusion probabilities ``t_phi`` against labels ``y``."""
    y = np.asarray(y, dtype=np.float64)
    t = ad.clip(ad.astensor(t_phi), eps, 1.0 - eps)
    if y.size == 0:
        raise AAUError("empty-mask", "no pixels for the occlusion loss")
    return -ad.mean(ad.log(t) * y + ad.log(1.0 - t) * (1.0 - y))


LOSS_NAMES = ("rr", "d1_raw", "d1_final", "be_final")


def loss_total(losses, weights):
    """Weighted sum w1*rr + w2*d1_raw + w3*d1_final + w4*be_final.

    ``losses`` maps the names in :data:`LOSS_NAMES` to scalar tensors.
    """
    ws = (weights.w1, weights.w2, weights.w3, weights.w4)
    total = ad.astensor(0.0)
    for name, w in zip(LOSS_NAMES, ws):
        v = ad.astensor(losses[name])
        if not np.all(np.isfinite(v.data)):
            raise NumericError("non-finite-loss", name)
        total = total + v * float(w)
    return total


def metrics_epe_3px(d_pred, d_gt, noc_mask):
    """(EPE, percentage of pixels with error strictly above 3 px) over ``noc_mask``."""
    mask = np.asarray(noc_mask, dtype=bool)
    if not mask.any():
        raise AAUError("empty-mask", "no pixels to evaluate")
    err = np.abs(np.asarray(d_pred, dtype=np.float64)[mask] - np.asarray(d_gt, dtype=np.float64)[mask])
    return float(err.mean()), float(100.0 * np.count_nonzero(err > 3.0) / err.size)


def metrics_report(d_pred, d_gt, noc_mask, occ_gt=None):
    epe, err3 = metrics_epe_3px(d_pred, d_gt, noc_mask)
    n_occ = int(np.count_nonzero(occ_gt)) if occ_gt is not None else 0
    return {"epe": epe, "err3px": err3, "n_pixels": int(np.count_nonzero(noc_mask)), "n_occluded": n_occ}


def metrics_json(report):
    return json.dumps(report, indent=2, sort_keys=True)
