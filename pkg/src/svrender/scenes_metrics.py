"""Toy scenes with controllable per-view occlusion, plus PSNR/SSIM metrics.

Ground truth comes from analytic ray-primitive intersection with flat albedo
shading on a black background.  Occluders are primitives rendered only into a
flagged subset of views: those views see the occluder hiding whatever lies
behind it while all other views see the scene clean, so features sampled from
flagged views become outliers for points on the hidden surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from svrender.geometry import Camera, generate_rays, project, save_scene

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------

@dataclass
class Primitive:
    """Sphere or axis-aligned box with flat albedo.

    `size` is a radius for spheres and per-axis half-extents for boxes (a
    scalar means a cube).  `views`, when set, restricts rendering to those
    view indices; None means visible everywhere.
    """

    kind: str
    center: tuple
    size: object
    albedo: tuple
    views: list = None

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo components must lie in [0, 1]")
        if self.kind == "sphere":
            self.size = float(self.size)
            if self.size <= 0:
                raise ValueError("sphere radius must be positive")
        else:
            half = np.asarray(self.size, dtype=np.float64).reshape(-1)
            if half.size == 1:
                half = np.full(3, half[0])
            if half.shape != (3,) or np.any(half <= 0):
                raise ValueError("box half-extents must be 3 positive reals")
            self.size = half
        if self.views is not None:
            self.views = sorted(int(v) for v in self.views)

    @property
    def bound_radius(self):
        if self.kind == "sphere":
            return self.size
        return float(np.linalg.norm(self.size))

    def rendered_in(self, view_index):
        return self.views is None or view_index in self.views


@dataclass
class ToySceneSpec:
    """Camera ring around the origin looking inward, plus primitive lists."""

    primitives: list
    occluders: list = field(default_factory=list)
    n_views: int = 10
    width: int = 64
    height: int = 64
    ring_radius: float = 4.0
    elevation_deg: float = 20.0
    fov_deg: float = 40.0
    near: float = 1.0
    far: float = 8.0
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("need at least one view")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        for occ in self.occluders:
            if occ.views is None:
                raise ValueError("occluders must flag the views they appear in")

    def all_primitives(self):
        return list(self.primitives) + list(self.occluders)


def _look_at_pose(position, target, up=(0.0, 1.0, 0.0)):
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(up, forward))) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # world -> camera rows
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = -rot @ position
    return pose


def ring_cameras(spec):
    """Cameras evenly spaced on a ring, all aimed at the origin."""
    rng = np.random.default_rng(spec.seed)
    focal = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2.0)
    k = np.array(
        [
            [focal, 0.0, (spec.width - 1) / 2.0],
            [0.0, focal, (spec.height - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    cameras = []
    elev = math.radians(spec.elevation_deg)
    for i in range(spec.n_views):
        azim = 2.0 * math.pi * i / spec.n_views
        if spec.jitter > 0.0:
            azim += rng.normal() * spec.jitter
        e = elev + (rng.normal() * spec.jitter if spec.jitter > 0.0 else 0.0)
        pos = spec.ring_radius * np.array(
            [math.cos(azim) * math.cos(e), math.sin(e), math.sin(azim) * math.cos(e)]
        )
        pose = _look_at_pose(pos, (0.0, 0.0, 0.0))
        cameras.append(Camera(k, pose, spec.width, spec.height, spec.near, spec.far))
    return cameras


# ---------------------------------------------------------------------------
# analytic intersection
# ---------------------------------------------------------------------------

def _intersect_sphere(origins, dirs, center, radius, t_min, t_max):
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - root
    t1 = -b + root
    t = np.where(t0 >= t_min, t0, t1)  # camera inside sphere -> far root
    hit &= (t >= t_min) & (t <= t_max)
    return np.where(hit, t, np.inf)


def _intersect_box(origins, dirs, center, half, t_min, t_max):
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe
    lo = (center - half - origins) * inv
    hi = (center + half - origins) * inv
    t_near = np.minimum(lo, hi).max(axis=1)
    t_far = np.maximum(lo, hi).min(axis=1)
    hit = t_far >= np.maximum(t_near, t_min)
    t = np.where(t_near >= t_min, t_near, t_far)  # camera inside box -> exit
    hit &= (t >= t_min) & (t <= t_max)
    return np.where(hit, t, np.inf)


def _intersect(origins, dirs, prim, t_min, t_max):
    if prim.kind == "sphere":
        return _intersect_sphere(origins, dirs, prim.center, prim.size, t_min, t_max)
    return _intersect_box(origins, dirs, prim.center, prim.size, t_min, t_max)


def render_view(spec, camera, view_index):
    """Flat-albedo render of all primitives active in one view."""
    prims = [p for p in spec.all_primitives() if p.rendered_in(view_index)]
    ys, xs = np.mgrid[0 : camera.height, 0 : camera.width]
    pixels = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64)
    origins, dirs = generate_rays(camera, pixels)
    best_t = np.full(len(pixels), np.inf)
    color = np.zeros((len(pixels), 3))
    for prim in prims:
        t = _intersect(origins, dirs, prim, camera.near, camera.far)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        color[closer] = prim.albedo
    return color.reshape(camera.height, camera.width, 3)


def _check_reachable(spec, cameras):
    for prim in spec.all_primitives():
        for i, cam in enumerate(cameras):
            if not prim.rendered_in(i):
                continue
            dist = float(np.linalg.norm(prim.center - cam.center))
            if dist - prim.bound_radius < cam.near or dist + prim.bound_radius > cam.far:
                raise ValueError(
                    f"primitive at {prim.center.tolist()} falls outside the "
                    f"[near, far] range of view {i}"
                )
            _, _, in_front = project(prim.center, cam)
            if not in_front:
                raise ValueError(f"primitive at {prim.center.tolist()} is behind view {i}")


def render_ground_truth(spec):
    """All views of a scene -> (images, cameras)."""
    cameras = ring_cameras(spec)
    _check_reachable(spec, cameras)
    images = [render_view(spec, cam, i) for i, cam in enumerate(cameras)]
    return images, cameras


def generate_toy_scene(spec, directory):
    """Render ground truth and write the scene directory; returns (images, cameras)."""
    images, cameras = render_ground_truth(spec)
    meta = {
        "seed": spec.seed,
        "n_views": spec.n_views,
        "occluded_views": sorted({v for occ in spec.occluders for v in occ.views}),
    }
    save_scene(directory, images, cameras, meta=meta)
    return images, cameras


def _ring_direction(view_index, n_views, elevation_rad):
    azim = 2.0 * math.pi * view_index / n_views
    return np.array(
        [
            math.cos(azim) * math.cos(elevation_rad),
            math.sin(elevation_rad),
            math.sin(azim) * math.cos(elevation_rad),
        ]
    )


def default_occluder_spec(seed=0, width=64, height=64, n_views=10):
    """A ring scene where several training views see floating occluders.

    Each occluder sits on the segment between a pair of adjacent cameras and
    the central object, flagged for exactly that pair, so those views see the
    object partially hidden while every other view (including the clean
    held-out ones at the end of the ring) sees it unobstructed.
    """
    primitives = [
        Primitive("sphere", (0.0, 0.0, 0.0), 0.95, (0.9, 0.35, 0.2)),
        Primitive("box", (0.0, -0.85, 0.0), (1.6, 0.12, 1.6), (0.25, 0.55, 0.9)),
        Primitive("sphere", (0.85, 0.45, 0.55), 0.38, (0.3, 0.85, 0.4)),
    ]
    elev = math.radians(20.0)
    pairs = [(0, 1), (2, 3), (4, 5), (6, 7)]
    kinds = ["box", "sphere", "box", "sphere"]
    colors = [(0.85, 0.8, 0.15), (0.6, 0.2, 0.75), (0.2, 0.8, 0.8), (0.95, 0.9, 0.85)]
    occluders = []
    for pair, kind, color in zip(pairs, kinds, colors):
        direction = _ring_direction(pair[0], n_views, elev) + _ring_direction(
            pair[1], n_views, elev
        )
        direction /= np.linalg.norm(direction)
        center = tuple(1.7 * direction)
        size = 0.34 if kind == "sphere" else (0.3, 0.34, 0.3)
        occluders.append(Primitive(kind, center, size, color, views=list(pair)))
    # every surface sits between 1.88 and 6.64 units from the ring cameras
    # (by bounding radius), so tighter bounds spend the sample budget where
    # geometry can actually be
    return ToySceneSpec(
        primitives=primitives,
        occluders=occluders,
        n_views=n_views,
        width=width,
        height=height,
        seed=seed,
        near=1.7,
        far=6.8,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(img_a, img_b, max_value=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have the same shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(max_value * max_value / mse), PSNR_CAP)


def _gaussian_kernel(size, sigma):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img, kernel):
    """Separable filtering keeping only fully covered windows."""
    size = kernel.size
    out = sliding_window_view(img, size, axis=0) @ kernel
    out = sliding_window_view(out, size, axis=1) @ kernel
    return out


def _to_gray(img):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=2)
    if arr.ndim == 2:
        return arr
    raise ValueError("expected (h, w) or (h, w, c) image")


def ssim(img_a, img_b):
    """Mean structural similarity over fully covered 11x11 Gaussian windows.

    Images are converted to grayscale by channel mean; constants assume unit
    data range.
    """
    a = _to_gray(img_a)
    b = _to_gray(img_b)
    if a.shape != b.shape:
        raise ValueError("images must have the same shape")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2

    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    var_a = _filter_valid(a * a, kernel) - mu_a * mu_a
    var_b = _filter_valid(b * b, kernel) - mu_b * mu_b
    cov = _filter_valid(a * b, kernel) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())
