"""Training objectives: regression, classification, orientation, Dice.

All losses build on the autodiff tape and return scalar (1, 1) tensors,
so any of them can be verified against finite differences. Targets are
plain numpy arrays.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import wrap_angle

PROB_FLOOR = 1e-12


def _as_tensor(x):
    return x if isinstance(x, ad.DiffTensor) else ad.constant(x)


def smooth_l1_loss(pred, target):
    """Mean over elements of the smooth-L1 penalty of (pred - target).

    Quadratic (0.5 x^2) inside |x| < 1, linear (|x| - 0.5) outside, so
    large residuals contribute bounded gradients.
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    return ad.mean_all(ad.smooth_l1(ad.sub(pred, target)))


def focal_loss(class_probs, labels, alpha=0.25, gamma=2.0):
    """Mean over rows of -alpha * (1 - p)^gamma * log(p) at the true class.

    class_probs holds one normalized probability row per object; labels
    gives the true class index per row. Probabilities are clamped to at
    least 1e-12 before the log, so a collapsed class cannot produce Inf.
    With gamma=0 and alpha=1 this is plain cross-entropy.
    """
    probs = _as_tensor(class_probs)
    n, c = probs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    p = ad.gather_pairs(probs, np.arange(n, dtype=np.int64), labels)
    p = ad.clamp(p, PROB_FLOOR, 1.0)
    boost = ad.pow_const(ad.sub(ad.constant(np.ones((n, 1))), p), gamma)
    return ad.scal(ad.mean_all(ad.mul(boost, ad.log(p))), -alpha)


@dataclass(frozen=True)
class OrientationBins:
    """Overlapping angular bins for discrete-continuous heading.

    Each bin covers pi plus `overlap` on each side around its center, so
    with the default two centers at -pi/2 and +pi/2 every angle belongs
    to at least one bin and angles near 0 or near +-pi belong to both.
    """

    centers: tuple = (-math.pi / 2, math.pi / 2)
    overlap: float = 0.1 * math.pi

    def __post_init__(self):
        if len(self.centers) < 1:
            raise ValueError("need at least one bin")
        if self.overlap < 0:
            raise ValueError("overlap must be non-negative")

    @property
    def num_bins(self):
        return len(self.centers)

    @property
    def half_width(self):
        return math.pi / 2 + self.overlap

    def contains(self, beta, bin_index):
        """Whether angle beta falls inside the given bin (overlap included)."""
        return abs(wrap_angle(beta - self.centers[bin_index])) <= self.half_width


@dataclass(frozen=True)
class OrientationEncoding:
    """Discrete-continuous encoding of one angle.

    Per bin: a membership confidence plus the sine and cosine of the
    offset from the bin center. For ground-truth encodings the offsets
    satisfy sin^2 + cos^2 = 1 exactly.
    """

    confidence: np.ndarray
    sin_off: np.ndarray
    cos_off: np.ndarray
    bins: OrientationBins

    def as_row(self):
        """Flat layout [conf.. | sin.. | cos..] used by heads and losses."""
        return np.concatenate([self.confidence, self.sin_off, self.cos_off])


def encode_orientation(beta, bins=OrientationBins()):
    """Encode an angle in [-pi, pi) into per-bin confidence and offsets."""
    beta = wrap_angle(beta)
    n = bins.num_bins
    conf = np.zeros(n)
    sin_off = np.zeros(n)
    cos_off = np.zeros(n)
    for i, center in enumerate(bins.centers):
        offset = wrap_angle(beta - center)
        sin_off[i] = math.sin(offset)
        cos_off[i] = math.cos(offset)
        if abs(offset) <= bins.half_width:
            conf[i] = 1.0
    return OrientationEncoding(conf, sin_off, cos_off, bins)


def decode_orientation(encoding):
    """Angle of the most confident bin: center + atan2(sin, cos)."""
    i = int(np.argmax(encoding.confidence))
    return wrap_angle(encoding.bins.centers[i]
                      + math.atan2(encoding.sin_off[i], encoding.cos_off[i]))


def encode_orientation_targets(betas, bins=OrientationBins()):
    """Stack encodings of many angles into (N, n) confidence/sin/cos arrays."""
    encs = [encode_orientation(b, bins) for b in betas]
    conf = np.stack([e.confidence for e in encs]) if encs else np.zeros((0, bins.num_bins))
    sin_off = np.stack([e.sin_off for e in encs]) if encs else np.zeros((0, bins.num_bins))
    cos_off = np.stack([e.cos_off for e in encs]) if encs else np.zeros((0, bins.num_bins))
    return conf, sin_off, cos_off


def decode_orientation_rows(rows, bins=OrientationBins()):
    """Decode a (N, 3n) array of raw head outputs into angles.

    Confidences are compared as raw scores (monotone in sigmoid), and the
    winning bin's (sin, cos) pair needs no normalization since atan2 is
    scale-invariant.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = bins.num_bins
    out = np.empty(rows.shape[0])
    for r in range(rows.shape[0]):
        i = int(np.argmax(rows[r, :n]))
        out[r] = wrap_angle(bins.centers[i]
                            + math.atan2(rows[r, n + i], rows[r, 2 * n + i]))
    return out


def orientation_loss(pred, target_conf, target_sin, target_cos,
                     bins=OrientationBins()):
    """Per-bin confidence cross-entropy plus gated offset regression.

    pred is a (N, 3n) tensor laid out [conf | sin | cos]; confidences are
    raw scores passed through a sigmoid. Each bin adds its binary
    cross-entropy and, only where the ground-truth confidence is 1, the
    smooth-L1 of the (sin, cos) offset pair averaged over its two
    components. Rows are summed over bins and averaged over objects.
    """
    pred = _as_tensor(pred)
    n = bins.num_bins
    rows = pred.shape[0]
    if pred.shape[1] != 3 * n:
        raise ValueError(f"pred width {pred.shape[1]} != 3 * {n}")
    target_conf = np.asarray(target_conf, dtype=np.float64)
    if target_conf.shape != (rows, n):
        raise ValueError(f"target_conf shape {target_conf.shape} != ({rows}, {n})")
    if rows == 0:
        raise ValueError("orientation loss needs at least one object")

    conf_logits, sin_pred, cos_pred = ad.split_cols(pred, [n, n, n])
    prob = ad.clamp(ad.sigmoid(conf_logits), PROB_FLOOR, 1.0 - PROB_FLOOR)
    c = ad.constant(target_conf)
    one_minus_c = ad.constant(1.0 - target_conf)
    ce = ad.neg(ad.add(
        ad.mul(c, ad.log(prob)),
        ad.mul(one_minus_c, ad.log(ad.sub(ad.constant(np.ones((rows, n))), prob))),
    ))
    sl = ad.scal(ad.add(
        ad.smooth_l1(ad.sub(sin_pred, ad.constant(target_sin))),
        ad.smooth_l1(ad.sub(cos_pred, ad.constant(target_cos))),
    ), 0.5)
    per_bin = ad.add(ce, ad.mul(c, sl))
    return ad.scal(ad.sum_all(per_bin), 1.0 / rows)


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the five objectives; all default to 1."""

    loc_nodes: float = 1.0
    loc_edges: float = 1.0
    orientation: float = 1.0
    dims: float = 1.0
    classification: float = 1.0

    def __post_init__(self):
        for name in ("loc_nodes", "loc_edges", "orientation", "dims",
                     "classification"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} weight must be non-negative")


def multitask_total(parts, weights=LossWeights()):
    """Weighted sum of the five loss parts.

    parts maps each LossWeights field name to a scalar tensor. A zero
    weight drops its part from the graph entirely (useful when edge
    supervision is disabled).
    """
    names = ("loc_nodes", "loc_edges", "orientation", "dims", "classification")
    unknown = set(parts) - set(names)
    if unknown:
        raise ValueError(f"unknown loss parts {sorted(unknown)}")
    total = None
    for name in names:
        if name not in parts:
            continue
        w = getattr(weights, name)
        if w == 0.0:
            continue
        term = ad.scal(_as_tensor(parts[name]), w)
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.constant(0.0)
    return total


def dice_loss(pred_scales, target_scales, eps=1e-5):
    """One minus the class-averaged overlap score, summed over scales.

    Each scale pairs a (C, P) prediction in (0, 1) with a binary target
    of the same shape (P = flattened map cells). Per class the score is
    2 * sum(pred * target) / (sum(pred) + sum(target) + eps); eps keeps
    empty maps finite.
    """
    if len(pred_scales) != len(target_scales):
        raise ValueError("prediction and target scale counts differ")
    if not pred_scales:
        raise ValueError("need at least one scale")
    total = None
    num_classes = None
    for pred, target in zip(pred_scales, target_scales):
        pred = _as_tensor(pred)
        target = np.asarray(target, dtype=np.float64)
        if target.shape != pred.shape:
            raise ValueError(f"target shape {target.shape} != pred {pred.shape}")
        if num_classes is None:
            num_classes = pred.shape[0]
        inter = ad.sum_rows(ad.mul(pred, ad.constant(target)))
        denom = ad.add_const(
            ad.add(ad.sum_rows(pred), ad.constant(target.sum(axis=1, keepdims=True))),
            eps)
        score = ad.sum_all(ad.div(ad.scal(inter, 2.0), denom))
        total = score if total is None else ad.add(total, score)
    return ad.add_const(ad.scal(total, -1.0 / num_classes), 1.0)
