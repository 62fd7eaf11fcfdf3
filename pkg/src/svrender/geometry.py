"""Cameras, rays, projection, bilinear sampling, and depth sampling along rays.

Pixel convention: (0, 0) is the center of the top-left texel, so an image
array indexed [row, col] holds the texel centered at (u=col, v=row).  A
projection is valid only while all four texels under its bilinear footprint
exist; everything else reports valid=False and samples as zeros.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from svrender import adcore

IMPORTANCE_FLOOR = 1e-5


@dataclass
class Camera:
    """Pinhole camera: intrinsics K, rigid world-to-camera transform, bounds."""

    intrinsics: np.ndarray
    world_to_camera: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.intrinsics = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.world_to_camera = np.array(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        self.near = float(self.near)
        self.far = float(self.far)
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got ({self.near}, {self.far})")
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-6:
            raise ValueError("world_to_camera rotation block is not orthonormal")
        if np.abs(self.world_to_camera[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ValueError("world_to_camera last row must be [0, 0, 0, 1]")

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self):
        """Unit viewing direction (camera +z) in world coordinates."""
        return self.rotation[2, :].copy()


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def generate_ray(camera, pixel):
    """Back-project a (possibly fractional) pixel into a world-space ray."""
    origins, dirs = generate_rays(camera, np.asarray(pixel, dtype=np.float64).reshape(1, 2))
    return Ray(origins[0], dirs[0])


def generate_rays(camera, pixels):
    """Vectorized back-projection: pixels (n, 2) -> origins (n, 3), dirs (n, 3)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    try:
        k_inv = np.linalg.inv(camera.intrinsics)
    except np.linalg.LinAlgError:
        raise ValueError("singular intrinsics") from None
    homog = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    d_cam = homog @ k_inv.T
    d_world = d_cam @ camera.rotation  # (R^T d)^T rows
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def project(point, camera):
    """World point -> (pixel uv, camera depth, in_front flag)."""
    uv, depth, in_front = project_batch(np.asarray(point, dtype=np.float64).reshape(1, 3), camera)
    return uv[0], float(depth[0]), bool(in_front[0])


def project_batch(points, camera):
    """Vectorized perspective projection of (n, 3) world points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x_cam = points @ camera.rotation.T + camera.translation
    depth = x_cam[:, 2]
    in_front = depth > 0.0
    uvw = x_cam @ camera.intrinsics.T
    z = np.where(np.abs(uvw[:, 2]) < 1e-12, 1e-12, uvw[:, 2])
    uv = uvw[:, :2] / z[:, None]
    return uv, depth, in_front


def _bilinear_setup(height, width, uv):
    """Constant gather indices/weights for bilinear sampling at uv (n, 2).

    Returns (idx (n, 4) into the row-major flattened image, weights (n, 4),
    valid (n,) bool).  Weights of invalid rows are zeroed so gathered values
    contribute nothing; their indices are clamped in range so gathers stay
    legal.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    valid = (
        (u >= 0.0) & (u <= width - 1) & (v >= 0.0) & (v <= height - 1)
        & (width >= 2) & (height >= 2)
    )
    uc = np.clip(u, 0.0, max(width - 1, 0))
    vc = np.clip(v, 0.0, max(height - 1, 0))
    x0 = np.clip(np.floor(uc).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(vc).astype(np.int64), 0, max(height - 2, 0))
    fu = uc - x0
    fv = vc - y0
    idx = np.stack(
        [
            y0 * width + x0,
            y0 * width + x0 + 1,
            (y0 + 1) * width + x0,
            (y0 + 1) * width + x0 + 1,
        ],
        axis=1,
    )
    weights = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1
    )
    weights = weights * valid[:, None]
    return idx, weights, valid


def bilinear_sample(image, uv):
    """Sample one pixel from an (h, w, c) array; out-of-bounds -> zeros, False."""
    out, valid = bilinear_sample_batch(image, np.asarray(uv, dtype=np.float64).reshape(1, 2))
    return out[0], bool(valid[0])


def bilinear_sample_batch(image, uv):
    """Bilinear samples at uv (n, 2) from an (h, w, c) array -> ((n, c), valid)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    idx, weights, valid = _bilinear_setup(h, w, uv)
    flat = image.reshape(h * w, -1)
    out = np.einsum("nk,nkc->nc", weights, flat[idx])
    return out, valid


def bilinear_gather(feat, uv):
    """Differentiable bilinear sampling from an (h, w, c) feature Tensor.

    The sample locations are treated as constants; gradients flow only into
    the feature map.  Returns ((n, c) Tensor, valid (n,) bool ndarray).
    """
    h, w, c = feat.shape
    idx, weights, valid = _bilinear_setup(h, w, uv)
    weights = weights.astype(feat.data.dtype)
    flat = adcore.reshape(feat, (h * w, c))
    out = None
    for k in range(4):
        term = adcore.mul(adcore.gather(flat, idx[:, k]), adcore.constant(weights[:, k : k + 1]))
        out = term if out is None else adcore.add(out, term)
    return out, valid


def stratified_sample(near, far, n_t, rng):
    """One uniform draw per equal-width bin spanning [near, far]; sorted."""
    near, far = float(near), float(far)
    if not near < far:
        raise ValueError(f"need near < far, got ({near}, {far})")
    if n_t < 2:
        raise ValueError("n_t must be at least 2")
    width = (far - near) / n_t
    lower = near + width * np.arange(n_t)
    return lower + width * rng.random(n_t)


def importance_sample(coarse_t, weights, n_extra, rng, near, far):
    """Draw n_extra depths from the per-bin weight histogram; merge and sort.

    The coarse depths came from stratified_sample's equal-width bins over
    [near, far], so weights are per-bin masses.  Normalized weights get a
    small floor before CDF construction so empty bins stay reachable and the
    CDF never degenerates.  Returns the sorted union, length n_t + n_extra.
    """
    coarse_t = np.asarray(coarse_t, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != coarse_t.shape:
        raise ValueError("weights and coarse depths must have matching length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    n_t = coarse_t.size
    edges = np.linspace(float(near), float(far), n_t + 1)

    total = w.sum()
    norm = w / total if total > 0 else np.zeros_like(w)
    p = norm + IMPORTANCE_FLOOR
    p = p / p.sum()
    assert p.sum() > 0.0, "per-bin pdf degenerated to zero"

    cdf = np.concatenate([[0.0], np.cumsum(p)])
    cdf[-1] = 1.0
    u = rng.random(n_extra)
    bins = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, n_t - 1)
    frac = (u - cdf[bins]) / p[bins]
    extra = edges[bins] + frac * (edges[bins + 1] - edges[bins])
    return np.sort(np.concatenate([coarse_t, extra]))


def select_source_views(cameras, target, n_s, skip_closest=0, exclude=None):
    """Pick n_s source view indices nearest the target camera in viewing angle.

    Ranking is by angle between optical axes, ties broken by camera-center
    distance.  `skip_closest` drops that many best-ranked candidates first
    (stress-testing selection quality); `exclude` removes one index entirely
    (the target itself when it belongs to the same list).
    """
    axis_t = target.optical_axis
    center_t = target.center
    scored = []
    for i, cam in enumerate(cameras):
        if exclude is not None and i == exclude:
            continue
        cos = float(np.clip(np.dot(cam.optical_axis, axis_t), -1.0, 1.0))
        angle = float(np.arccos(cos))
        dist = float(np.linalg.norm(cam.center - center_t))
        scored.append((angle, dist, i))
    scored.sort()
    kept = [i for _, _, i in scored[skip_closest:]]
    if len(kept) < n_s:
        raise ValueError(f"need {n_s} source views, only {len(kept)} available")
    return kept[:n_s]


# ---------------------------------------------------------------------------
# scene directory format
# ---------------------------------------------------------------------------

SCENE_MANIFEST = "scene.json"


def save_scene(directory, images, cameras, meta=None):
    """Write images as 8-bit RGB PNGs plus a scene.json manifest.

    Per image the manifest records: relative path, K as 9 row-major reals,
    world_to_camera as 16 row-major reals, near, far.
    """
    if len(images) != len(cameras):
        raise ValueError("one camera per image required")
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    entries = []
    for i, (img, cam) in enumerate(zip(images, cameras)):
        arr = np.asarray(img)
        if arr.dtype != np.uint8:
            arr = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError("images must be (h, w, 3)")
        rel = os.path.join("images", f"{i:03d}.png")
        Image.fromarray(arr, mode="RGB").save(os.path.join(directory, rel))
        entries.append(
            {
                "path": rel,
                "intrinsics": [float(x) for x in cam.intrinsics.reshape(-1)],
                "world_to_camera": [float(x) for x in cam.world_to_camera.reshape(-1)],
                "near": cam.near,
                "far": cam.far,
            }
        )
    manifest = {"images": entries, "meta": dict(meta or {})}
    with open(os.path.join(directory, SCENE_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_scene(directory):
    """Read a scene directory -> (images in [0,1] float64, cameras, meta)."""
    with open(os.path.join(directory, SCENE_MANIFEST), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    images, cameras = [], []
    for entry in manifest["images"]:
        with Image.open(os.path.join(directory, entry["path"])) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        images.append(arr)
        cameras.append(
            Camera(
                intrinsics=np.array(entry["intrinsics"]).reshape(3, 3),
                world_to_camera=np.array(entry["world_to_camera"]).reshape(4, 4),
                width=arr.shape[1],
                height=arr.shape[0],
                near=entry["near"],
                far=entry["far"],
            )
        )
    return images, cameras, manifest.get("meta", {})
