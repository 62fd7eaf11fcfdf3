"""Differentiable volume compositing and hierarchical ray rendering.

Each sample's opacity covers the interval to the next depth; the final
interval runs to the far plane, so total optical depth stays finite and the
per-ray compositing weights always sum to at most one.  Unconsumed
transmittance maps to black (no background model).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svrender import adcore
from svrender.adcore import no_grad
from svrender.geometry import generate_rays, importance_sample, stratified_sample


@dataclass
class RenderOptions:
    n_t: int = 32  # coarse stratified samples per ray
    n_extra: int = 32  # importance samples added for the fine pass
    ray_batch: int = 256  # pixels per chunk in render_image

    def __post_init__(self):
        if self.n_t < 2 or self.n_extra < 1 or self.ray_batch < 1:
            raise ValueError("n_t >= 2, n_extra >= 1, ray_batch >= 1 required")


def composite(depths, sigmas, colors, far):
    """Alpha-composite samples along rays -> (color, weights).

    depths (r, n) is a constant array of sorted sample positions; sigmas
    (r, n) and colors (r, n, 3) are Tensors.  Single-ray (n,) inputs are
    accepted and returned unbatched.  weight_i = T_i * (1 - exp(-sigma_i *
    delta_i)) with delta taken to the next sample and the last delta to the
    far plane.
    """
    depths = np.asarray(depths, dtype=np.float64)
    single = depths.ndim == 1
    if single:
        depths = depths[None, :]
        sigmas = adcore.reshape(sigmas, (1,) + tuple(sigmas.shape))
        colors = adcore.reshape(colors, (1,) + tuple(colors.shape))
    r, n = depths.shape
    if sigmas.shape != (r, n) or colors.shape != (r, n, 3):
        raise ValueError("sigmas must be (r, n) and colors (r, n, 3)")
    if np.any(np.diff(depths, axis=1) < 0):
        raise ValueError("unsorted depths")
    if np.any(sigmas.data < 0):
        raise ValueError("sigma must be non-negative")

    delta = np.concatenate(
        [np.diff(depths, axis=1), np.maximum(far - depths[:, -1:], 0.0)], axis=1
    )
    dt = sigmas.data.dtype
    tau = adcore.mul(sigmas, adcore.constant(delta.astype(dt)))
    inclusive = adcore.cumsum(tau, axis=1)
    exclusive = adcore.pad(inclusive, ((0, 0), (1, 0)))
    exclusive = adcore.tensor.take(exclusive, (slice(None), slice(0, n)))
    trans = adcore.exp(adcore.neg(exclusive))
    alpha = adcore.sub(1.0, adcore.exp(adcore.neg(tau)))
    weights = adcore.mul(trans, alpha)
    color = adcore.tsum(
        adcore.mul(adcore.reshape(weights, (r, n, 1)), colors), axis=1
    )
    if single:
        return adcore.reshape(color, (3,)), adcore.reshape(weights, (n,))
    return color, weights


def _per_ray_rngs(rng, n):
    """Normalize rng input to one generator per ray."""
    if isinstance(rng, np.random.Generator):
        return [rng] * n
    rngs = list(rng)
    if len(rngs) != n:
        raise ValueError(f"need {n} per-ray generators, got {len(rngs)}")
    return rngs


def render_rays(model, origins, directions, cameras, coarse_maps, fine_maps,
                near, far, options, rng):
    """Hierarchical coarse+fine rendering of a ray batch.

    Returns (coarse_color, fine_color), both (r, 3) Tensors.  The coarse
    pass uses stratified depths; its detached compositing weights drive
    importance sampling of options.n_extra additional depths, and the fine
    network evaluates the sorted union.  `rng` is a single Generator
    (consumed in ray order) or a sequence of per-ray Generators.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    r = len(origins)
    rngs = _per_ray_rngs(rng, r)

    t_coarse = np.stack(
        [stratified_sample(near, far, options.n_t, rngs[i]) for i in range(r)]
    )
    coarse_sigma, coarse_color = _ray_radiance(
        model, "coarse", origins, directions, t_coarse, cameras, coarse_maps
    )
    c_pixel, c_weights = composite(t_coarse, coarse_sigma, coarse_color, far)

    w = c_weights.data  # sampling uses detached weights
    t_fine = np.stack(
        [
            importance_sample(t_coarse[i], w[i], options.n_extra, rngs[i], near, far)
            for i in range(r)
        ]
    )
    fine_sigma, fine_color = _ray_radiance(
        model, "fine", origins, directions, t_fine, cameras, fine_maps
    )
    f_pixel, _ = composite(t_fine, fine_sigma, fine_color, far)
    return c_pixel, f_pixel


def _ray_radiance(model, branch, origins, directions, depths, cameras, maps):
    """Evaluate the model at every (ray, depth) point -> ((r, n), (r, n, 3))."""
    r, n = depths.shape
    points = origins[:, None, :] + depths[:, :, None] * directions[:, None, :]
    target_dirs = np.repeat(directions, n, axis=0)
    sigma, color = model.radiance(
        branch, points.reshape(-1, 3), target_dirs, cameras, maps
    )
    return adcore.reshape(sigma, (r, n)), adcore.reshape(color, (r, n, 3))


def _pixel_generator(seed, index):
    """Deterministic per-pixel rng; independent of batch layout."""
    return np.random.default_rng([int(seed), int(index)])


def render_pixel(model, target_camera, pixel, cameras, images, options, seed=0):
    """Render one pixel -> (coarse (3,), fine (3,)) arrays, unclamped."""
    with no_grad():
        coarse_maps = model.extract(images, "coarse")
        fine_maps = model.extract(images, "fine")
        x, y = pixel
        index = int(round(y)) * target_camera.width + int(round(x))
        origins, dirs = generate_rays(
            target_camera, np.asarray([pixel], dtype=np.float64)
        )
        c, f = render_rays(
            model, origins, dirs, cameras, coarse_maps, fine_maps,
            target_camera.near, target_camera.far, options,
            [_pixel_generator(seed, index)],
        )
    return c.data.reshape(3), f.data.reshape(3)


def render_image(model, target_camera, cameras, images, options, seed=0):
    """Render a full view -> (fine, coarse) float images, clamped to [0, 1].

    Pixels are processed row-major in batches of options.ray_batch; per-pixel
    randomness is keyed by pixel index alone, so any batch size produces the
    same image.  Values are clamped only when written into the output.
    """
    h, w = target_camera.height, target_camera.width
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    fine_out = np.zeros((h * w, 3))
    coarse_out = np.zeros((h * w, 3))

    with no_grad():
        coarse_maps = model.extract(images, "coarse")
        fine_maps = model.extract(images, "fine")
        for start in range(0, h * w, options.ray_batch):
            stop = min(start + options.ray_batch, h * w)
            origins, dirs = generate_rays(target_camera, pixels[start:stop])
            rngs = [_pixel_generator(seed, i) for i in range(start, stop)]
            c, f = render_rays(
                model, origins, dirs, cameras, coarse_maps, fine_maps,
                target_camera.near, target_camera.far, options, rngs,
            )
            fine_out[start:stop] = np.clip(f.data, 0.0, 1.0)
            coarse_out[start:stop] = np.clip(c.data, 0.0, 1.0)
    return fine_out.reshape(h, w, 3), coarse_out.reshape(h, w, 3)
