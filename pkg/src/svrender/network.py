"""Convolutional feature extraction, direction features, and radiance heads.

A small 3-layer convolutional extractor turns each source image into a
feature map (coarse and fine branches share all but the last layer); the
per-point pipeline projects a 3D point into every source view, samples
features and RGB bilinearly, aggregates them across views, and two small
heads read out density (masked mean-pool, softplus) and color (masked softmax
blend over the source RGB samples, so color stays inside their convex hull).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svrender import adcore
from svrender.adcore import ParameterStore
from svrender.adcore.tensor import take
from svrender.aggregation import (
    DEFAULT_FIXED_LAMBDAS,
    aggregate_batch,
    fixed_bank,
    global_aggregate,
    init_bank,
)
from svrender.geometry import bilinear_gather, project_batch

VARIANTS = ("proposed", "baseline", "mean_only", "fixed", "cosine", "rational")
BRANCHES = ("coarse", "fine")


@dataclass
class ModelConfig:
    feat_channels: int = 8
    n_k: int = 1
    hidden_dim: int = 32
    dir_dim: int = 8
    head_layers: int = 2
    variant: str = "proposed"
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        for name in ("feat_channels", "n_k", "hidden_dim", "dir_dim", "head_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def n_f(self):
        """Per-view feature width: extractor channels plus the RGB sample."""
        return self.feat_channels + 3

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def conv2d_same(x, weight, bias):
    """3x3 same-padding convolution of (h, w, c_in) built from primitives."""
    h, w, c_in = x.shape
    c_out = weight.shape[-1]
    padded = adcore.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = None
    for dy in range(3):
        for dx in range(3):
            # one flat GEMM per tap instead of a stack of tiny row matmuls
            tap = adcore.matmul(
                adcore.reshape(
                    take(padded, (slice(dy, dy + h), slice(dx, dx + w))),
                    (h * w, c_in),
                ),
                take(weight, (dy, dx)),
            )
            out = tap if out is None else adcore.add(out, tap)
    return adcore.reshape(adcore.add(out, bias), (h, w, c_out))


def _linear(x, weight, bias):
    shape = tuple(x.shape)
    d_out = weight.shape[-1]
    if len(shape) > 2:
        flat = adcore.reshape(x, (int(np.prod(shape[:-1])), shape[-1]))
        y = adcore.add(adcore.matmul(flat, weight), bias)
        return adcore.reshape(y, shape[:-1] + (d_out,))
    return adcore.add(adcore.matmul(x, weight), bias)


def point_features(points, target_dirs, cameras, feat_maps, dtype=np.float64):
    """Project points into every source view and sample per-view features.

    points (p, 3) and target_dirs (p, 3) are plain arrays (sampling locations
    are not differentiated).  Returns (features (p, n_s, n_f) Tensor, valid
    (p, n_s) bool, direction features (p, n_s, 4) constant array).  A view is
    valid when the point lies in front of its camera and inside the bilinear
    footprint of its image; invalid rows are zeroed.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    target_dirs = np.asarray(target_dirs, dtype=np.float64).reshape(-1, 3)
    p = len(points)
    feats, valids, dirfeats = [], [], []
    for cam, fmap in zip(cameras, feat_maps):
        uv, _, in_front = project_batch(points, cam)
        sampled, in_image = bilinear_gather(fmap, uv)
        valid = in_front & in_image
        # behind-camera projections can alias into the image; zero them too
        sampled = adcore.mul(sampled, adcore.constant(valid[:, None].astype(dtype)))
        feats.append(adcore.reshape(sampled, (p, 1, sampled.shape[1])))
        valids.append(valid)

        src_dir = points - cam.center
        src_dir = src_dir / np.linalg.norm(src_dir, axis=1, keepdims=True)
        dot = np.clip(np.sum(target_dirs * src_dir, axis=1, keepdims=True), -1.0, 1.0)
        dirfeats.append(np.concatenate([target_dirs - src_dir, dot], axis=1))
    features = adcore.concat(feats, axis=1)
    valid = np.stack(valids, axis=1)
    dirfeat = np.stack(dirfeats, axis=1).astype(dtype)
    return features, valid, dirfeat


class RenderModel:
    """Coarse+fine radiance networks sharing an extractor trunk.

    All trainable parameters live in one ParameterStore; extractor parameters
    are the `extractor.` prefix (they get their own learning-rate group).
    """

    def __init__(self, config, seed=0):
        self.config = config
        self.store = ParameterStore()
        self.banks = {}
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        c = config.feat_channels

        self._add_conv(rng, "extractor.conv1", 3, c, dt)
        self._add_conv(rng, "extractor.conv2", c, c, dt)
        for branch in BRANCHES:
            self._add_conv(rng, f"extractor.{branch}.conv3", c, c, dt)
        for branch in BRANCHES:
            self._add_linear(rng, f"{branch}.dir", 4, config.dir_dim, dt)
            width = self.head_input_dim()
            for j in range(config.head_layers):
                self._add_linear(rng, f"{branch}.head.l{j}", width, config.hidden_dim, dt)
                width = config.hidden_dim
            self._add_linear(rng, f"{branch}.head.density", width, 1, dt)
            self._add_linear(rng, f"{branch}.head.color", width, 1, dt)
            bank = self._make_bank(branch, dt)
            if bank is not None:
                self.banks[branch] = bank
                self.store.register(bank.alphas)

    # -- construction helpers -------------------------------------------------

    def _add_conv(self, rng, name, c_in, c_out, dt):
        fan_in = 9 * c_in
        w = (rng.normal(size=(3, 3, c_in, c_out)) * np.sqrt(2.0 / fan_in)).astype(dt)
        self.store.add(f"{name}.weight", w)
        self.store.add(f"{name}.bias", np.zeros(c_out, dtype=dt))

    def _add_linear(self, rng, name, d_in, d_out, dt):
        w = (rng.normal(size=(d_in, d_out)) * np.sqrt(2.0 / d_in)).astype(dt)
        self.store.add(f"{name}.weight", w)
        self.store.add(f"{name}.bias", np.zeros(d_out, dtype=dt))

    def _make_bank(self, branch, dt):
        cfg = self.config
        name = f"{branch}.alpha"
        if cfg.variant == "proposed":
            bank = init_bank(cfg.n_k, name=name)
        elif cfg.variant == "cosine":
            bank = init_bank(cfg.n_k, metric="cosine", name=name)
        elif cfg.variant == "rational":
            bank = init_bank(cfg.n_k, mapping="rational", name=name)
        elif cfg.variant == "fixed":
            bank = fixed_bank(DEFAULT_FIXED_LAMBDAS, name=name)
        else:
            return None  # baseline and mean_only carry no similarity bank
        bank.alphas.value.data = bank.alphas.value.data.astype(dt)
        bank.alphas.zero_grad()
        return bank

    def effective_n_k(self):
        if self.config.variant == "fixed":
            return len(DEFAULT_FIXED_LAMBDAS)
        return self.config.n_k

    def aggregated_width(self):
        n_f = self.config.n_f
        if self.config.variant in ("proposed", "cosine", "rational", "fixed"):
            return 2 * self.effective_n_k() * n_f
        if self.config.variant == "baseline":
            return 2 * n_f
        return n_f  # mean_only

    def head_input_dim(self):
        return self.config.n_f + self.aggregated_width() + self.config.dir_dim

    def trainable_parameters(self):
        """Parameters the optimizer may update (frozen banks excluded)."""
        frozen = {
            bank.alphas.name for bank in self.banks.values() if not bank.trainable
        }
        return [p for p in self.store if p.name not in frozen]

    # -- forward pieces -------------------------------------------------------

    def extract(self, images, branch):
        """Feature maps for a list of (h, w, 3) images in [0, 1]."""
        if branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}")
        s = self.store
        dt = self.config.np_dtype
        maps = []
        for img in images:
            x = adcore.constant(np.asarray(img, dtype=dt))
            h1 = adcore.elu(conv2d_same(x, s["extractor.conv1.weight"].value,
                                        s["extractor.conv1.bias"].value))
            h2 = adcore.elu(conv2d_same(h1, s["extractor.conv2.weight"].value,
                                        s["extractor.conv2.bias"].value))
            f = conv2d_same(h2, s[f"extractor.{branch}.conv3.weight"].value,
                            s[f"extractor.{branch}.conv3.bias"].value)
            maps.append(adcore.concat([f, x], axis=2))
        return maps

    def _direction_projection(self, branch, dirfeat):
        s = self.store
        return adcore.elu(
            _linear(
                adcore.constant(dirfeat),
                s[f"{branch}.dir.weight"].value,
                s[f"{branch}.dir.bias"].value,
            )
        )

    def _aggregated(self, branch, features, valid):
        cfg = self.config
        p, n_s, n_f = features.shape
        if cfg.variant in ("proposed", "cosine", "rational", "fixed"):
            means, variances, _ = aggregate_batch(features, valid, self.banks[branch])
            k = self.effective_n_k()
            return adcore.concat(
                [
                    adcore.reshape(means, (p, n_s, k * n_f)),
                    adcore.reshape(variances, (p, n_s, k * n_f)),
                ],
                axis=2,
            )
        g_mean, g_var = global_aggregate(features, valid)
        if cfg.variant == "baseline":
            g = adcore.concat([g_mean, g_var], axis=1)
        else:  # mean_only
            g = g_mean
        g = adcore.reshape(g, (p, 1, g.shape[1]))
        return adcore.broadcast_to(g, (p, n_s, g.shape[2]))

    def density_color_head(self, branch, features, valid, aggregated, dirproj):
        """Shared per-view MLP, masked pooling, and the two output heads.

        Returns (sigma (p,), color (p, 3)).  Points with no valid view get
        sigma 0 and black; color is a convex blend of valid source RGBs.
        """
        s = self.store
        cfg = self.config
        dt = cfg.np_dtype
        p, n_s, n_f = features.shape

        x = adcore.concat([features, aggregated, dirproj], axis=2)
        h = x
        for j in range(cfg.head_layers):
            h = adcore.elu(
                _linear(h, s[f"{branch}.head.l{j}.weight"].value,
                        s[f"{branch}.head.l{j}.bias"].value)
            )

        vmask = adcore.constant(valid[:, :, None].astype(dt))
        any_valid = valid.any(axis=1)
        count = adcore.constant(
            np.maximum(valid.sum(axis=1, keepdims=True), 1).astype(dt)
        )
        pooled = adcore.div(adcore.tsum(adcore.mul(h, vmask), axis=1), count)
        raw = _linear(pooled, s[f"{branch}.head.density.weight"].value,
                      s[f"{branch}.head.density.bias"].value)
        sigma = adcore.mul(
            adcore.softplus(raw), adcore.constant(any_valid[:, None].astype(dt))
        )
        sigma = adcore.reshape(sigma, (p,))

        logits = _linear(h, s[f"{branch}.head.color.weight"].value,
                         s[f"{branch}.head.color.bias"].value)
        # stability shift: per-point max over valid logits, detached
        masked = np.where(valid, logits.data[:, :, 0], -np.inf)
        shift = np.where(any_valid, masked.max(axis=1), 0.0).astype(dt)
        e = adcore.mul(adcore.exp(adcore.sub(logits, adcore.constant(shift[:, None, None]))), vmask)
        denom = adcore.add(
            adcore.tsum(e, axis=1, keepdims=True),
            adcore.constant((~any_valid)[:, None, None].astype(dt)),
        )
        blend = adcore.div(e, denom)
        rgb = take(features, (slice(None), slice(None), slice(n_f - 3, n_f)))
        color = adcore.tsum(adcore.mul(blend, rgb), axis=1)
        return sigma, color

    def radiance(self, branch, points, target_dirs, cameras, feat_maps):
        """Full per-point readout: sigma (p,) and color (p, 3) Tensors."""
        features, valid, dirfeat = point_features(
            points, target_dirs, cameras, feat_maps, dtype=self.config.np_dtype
        )
        aggregated = self._aggregated(branch, features, valid)
        dirproj = self._direction_projection(branch, dirfeat)
        return self.density_color_head(branch, features, valid, aggregated, dirproj)
