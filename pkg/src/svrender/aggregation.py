"""Per-view feature aggregation driven by learnable similarity functions.

For a 3D point seen by n_s source views with features f_1..f_{n_s}, each view
i measures its distance to every other view, maps distances to similarities
with a bank of learnable decay rates, normalizes them into weights over valid
views, and summarizes the feature set as a weighted element-wise mean and
variance from view i's perspective.  Views that disagree with i (occluded or
otherwise inconsistent) receive small weights, so i's summary stays clean
instead of being polluted the way a single global mean/variance would be.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svrender import adcore
from svrender.adcore import Parameter, Tensor

METRICS = ("squared_l2", "cosine")
MAPPINGS = ("exp", "rational")

# evenly spaced decay rates used by the frozen-bank ablation
DEFAULT_FIXED_LAMBDAS = (0.05, 1.2875, 2.525, 3.7625, 5.0)

# module-wide counters for rare numerical events; tests and logs read these
TELEMETRY = {"underflow_fallbacks": 0, "cosine_zero_norms": 0}


def reset_telemetry():
    for key in TELEMETRY:
        TELEMETRY[key] = 0


def _underflow_cutoff(dtype):
    """Similarity mass below this is treated as underflowed for `dtype`."""
    return np.sqrt(np.finfo(dtype).tiny)


@dataclass
class FeatureSet:
    """Per-view feature rows for one 3D point, with view validity flags."""

    features: Tensor
    valid: np.ndarray

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = Tensor(np.asarray(self.features, dtype=np.float64))
        if self.features.ndim != 2:
            raise ValueError("features must be (n_s, n_f)")
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.valid.shape[0] != self.features.shape[0]:
            raise ValueError("one validity flag per view required")

    @property
    def n_s(self):
        return self.features.shape[0]

    @property
    def n_f(self):
        return self.features.shape[1]


@dataclass
class SimilarityBank:
    """n_k learnable decay rates with a distance metric and mapping choice.

    Decay rates are stored as log-values (alphas), so lambda = e^alpha stays
    positive by construction.  Non-trainable banks keep their values frozen:
    the forward pass detaches them and optimizers must not register them.
    """

    alphas: Parameter
    metric: str = "squared_l2"
    mapping: str = "exp"
    trainable: bool = True

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.mapping not in MAPPINGS:
            raise ValueError(f"mapping must be one of {MAPPINGS}")
        if self.alphas.value.ndim != 1 or self.alphas.value.size < 1:
            raise ValueError("alphas must be a non-empty vector")

    @property
    def n_k(self):
        return self.alphas.value.size

    def lambdas(self):
        """Current decay rates as a plain array (for logs and reports)."""
        return np.exp(self.alphas.value.data).copy()


@dataclass
class AggregatedFeatures:
    """Aggregation output for one point: per-view means, variances, weights."""

    means: Tensor      # (n_s, n_k, n_f)
    variances: Tensor  # (n_s, n_k, n_f)
    weights: Tensor    # (n_s, n_k, n_s)


def init_bank(n_k, metric="squared_l2", mapping="exp", name="alpha"):
    """Deterministic bank init: decay rates log-spaced over [0.1, 2.0]."""
    if n_k < 1:
        raise ValueError("n_k must be at least 1")
    lam = np.array([1.0]) if n_k == 1 else np.geomspace(0.1, 2.0, n_k)
    return SimilarityBank(Parameter(name, np.log(lam)), metric, mapping, trainable=True)


def fixed_bank(lambdas, metric="squared_l2", mapping="exp", name="alpha"):
    """A frozen bank with the given positive decay rates."""
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if lam.size < 1 or np.any(lam <= 0):
        raise ValueError("fixed decay rates must be positive")
    return SimilarityBank(Parameter(name, np.log(lam)), metric, mapping, trainable=False)


def similarity(d, bank, k):
    """Scalar similarity of one distance under the bank's k-th decay rate."""
    lam = float(np.exp(bank.alphas.value.data[k]))
    d = float(d)
    if bank.mapping == "exp":
        return float(np.exp(-lam * d))
    return 1.0 / (1.0 + lam * d)


def _distance_batch(feats, valid, metric):
    """Pairwise view distances for (p, n_s, n_f) features -> (p, n_s, n_s)."""
    p, n_s, n_f = feats.shape
    if metric == "squared_l2":
        fi = adcore.reshape(feats, (p, n_s, 1, n_f))
        fj = adcore.reshape(feats, (p, 1, n_s, n_f))
        return adcore.tsum(adcore.square(adcore.sub(fi, fj)), axis=3)
    if metric == "cosine":
        norm_sq = adcore.tsum(adcore.square(feats), axis=2, keepdims=True)
        zero = norm_sq.data[:, :, 0] < 1e-24
        n_zero = int(np.count_nonzero(zero & np.asarray(valid, dtype=bool)))
        if n_zero:
            # zero-norm rows: clamped norm makes cos = 0, i.e. distance 1
            TELEMETRY["cosine_zero_norms"] += n_zero
        inv = adcore.div(1.0, adcore.sqrt(adcore.clamp_min(norm_sq, 1e-24)))
        unit = adcore.mul(feats, inv)
        cos = adcore.matmul(unit, adcore.transpose(unit, (0, 2, 1)))
        return adcore.relu(adcore.sub(1.0, cos))  # keeps rounding within [0, 2]
    raise ValueError(f"metric must be one of {METRICS}")


def distance_distribution(fs, metric="squared_l2"):
    """Pairwise distances for one point -> ((n_s, n_s) Tensor, excluded mask).

    excluded[i, j] is True when either view is invalid; such entries carry no
    meaning and downstream weights for them are forced to zero.
    """
    f3 = adcore.reshape(fs.features, (1,) + tuple(fs.features.shape))
    d = _distance_batch(f3, fs.valid[None, :], metric)
    excluded = ~(fs.valid[:, None] & fs.valid[None, :])
    return adcore.reshape(d, tuple(d.shape[1:])), excluded


def _similarity_batch(d, bank):
    """Map distances (p, n_s, n_s) to similarities (p, n_k, n_s, n_s)."""
    p, n_s, _ = d.shape
    alphas = bank.alphas.value if bank.trainable else adcore.stop_gradient(bank.alphas.value)
    lam = adcore.reshape(adcore.exp(alphas), (1, bank.n_k, 1, 1))
    d4 = adcore.reshape(d, (p, 1, n_s, n_s))
    ld = adcore.mul(lam, d4)
    if bank.mapping == "exp":
        return adcore.exp(adcore.neg(ld))
    return adcore.div(1.0, adcore.add(ld, 1.0))


def aggregate_batch(features, valid, bank):
    """Aggregate (p, n_s, n_f) features -> (means, variances, weights).

    Output shapes: means and variances (p, n_s, n_k, n_f), weights
    (p, n_s, n_k, n_s).  Weights over invalid views are exactly zero and each
    valid row normalizes to 1.  Rows whose similarity mass underflows (below
    sqrt of the smallest normal float) fall back to uniform weights over
    valid views (counted in TELEMETRY); points with no valid view at all
    produce all-zero rows.
    """
    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    valid = np.asarray(valid, dtype=bool)
    p, n_s, n_f = feats.shape
    if valid.shape != (p, n_s):
        raise ValueError("valid mask must be (p, n_s)")
    n_k = bank.n_k

    dt = feats.data.dtype
    d = _distance_batch(feats, valid, bank.metric)
    s = _similarity_batch(d, bank)
    mask_j = valid[:, None, None, :].astype(dt)
    s_masked = adcore.mul(s, adcore.constant(mask_j))
    denom = adcore.tsum(s_masked, axis=3, keepdims=True)  # (p, n_k, n_s, 1)

    # a valid row always holds its own similarity 1, so its mass is >= 1;
    # only rows for an invalid view can underflow.  The cutoff sits at
    # sqrt(tiny) rather than exact zero because the division's backward pass
    # squares the denominator: a subnormal mass survives the forward pass
    # but turns the gradient into 0/0.
    fallback = (denom.data < _underflow_cutoff(denom.data.dtype)).astype(dt)
    if fallback.any():
        any_valid = valid.any(axis=1)
        TELEMETRY["underflow_fallbacks"] += int(fallback[any_valid].sum())
        safe = adcore.add(denom, adcore.constant(fallback))
        n_valid = np.maximum(valid.sum(axis=1), 1)
        uniform = (valid / n_valid[:, None])[:, None, None, :].astype(dt)
        w = adcore.where_mask(fallback, adcore.constant(uniform), adcore.div(s_masked, safe))
    else:
        w = adcore.div(s_masked, denom)

    wj = adcore.reshape(w, (p, n_k, n_s, n_s, 1))
    fj = adcore.reshape(feats, (p, 1, 1, n_s, n_f))
    means = adcore.tsum(adcore.mul(wj, fj), axis=3)  # (p, n_k, n_s, n_f)
    mb = adcore.reshape(means, (p, n_k, n_s, 1, n_f))
    dev = adcore.sub(fj, mb)
    variances = adcore.tsum(adcore.mul(wj, adcore.square(dev)), axis=3)
    variances = adcore.relu(variances)  # rounding can leave tiny negatives

    return (
        adcore.moveaxis(means, 1, 2),
        adcore.moveaxis(variances, 1, 2),
        adcore.moveaxis(w, 1, 2),
    )


def aggregate(fs, bank):
    """Single-point aggregation over a FeatureSet -> AggregatedFeatures."""
    if not fs.valid.any():
        raise ValueError("aggregate requires at least one valid view")
    f3 = adcore.reshape(fs.features, (1,) + tuple(fs.features.shape))
    m, v, w = aggregate_batch(f3, fs.valid[None, :], bank)
    return AggregatedFeatures(
        means=adcore.reshape(m, tuple(m.shape[1:])),
        variances=adcore.reshape(v, tuple(v.shape[1:])),
        weights=adcore.reshape(w, tuple(w.shape[1:])),
    )


def global_aggregate(features, valid):
    """Equally-weighted mean/variance over valid views -> ((p, n_f), (p, n_f)).

    This is the baseline summary every view shares; it has no learnable parts.
    """
    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    valid = np.asarray(valid, dtype=bool)
    p, n_s, n_f = feats.shape
    dt = feats.data.dtype
    mask = adcore.constant(valid[:, :, None].astype(dt))
    count = adcore.constant(np.maximum(valid.sum(axis=1, keepdims=True), 1).astype(dt))
    mean = adcore.div(adcore.tsum(adcore.mul(feats, mask), axis=1), count)
    dev = adcore.sub(feats, adcore.reshape(mean, (p, 1, n_f)))
    var = adcore.div(adcore.tsum(adcore.mul(adcore.square(dev), mask), axis=1), count)
    return mean, adcore.relu(var)
