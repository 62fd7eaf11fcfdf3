"""End-to-end optimization: rendering loss, Adam, schedules, experiment runner.

Training repeatedly picks a random training image, renders a batch of its
rays through the coarse and fine networks, and minimizes the summed squared
color error.  The extractor gets its own learning-rate group; every other
parameter, including the similarity exponents, uses the second group.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from svrender import adcore
from svrender.adcore import NonFiniteError, load_checkpoint, no_grad, save_checkpoint
from svrender.geometry import generate_rays, select_source_views
from svrender.network import ModelConfig, RenderModel, VARIANTS
from svrender.renderer import RenderOptions, render_image, render_rays
from svrender.scenes_metrics import psnr, ssim


@dataclass
class TrainConfig:
    n_s: int = 5
    n_t: int = 32
    n_extra: int = 32
    n_k: int = 1
    feat_channels: int = 8
    hidden_dim: int = 32
    dir_dim: int = 8
    head_layers: int = 2
    ray_batch: int = 128
    iterations: int = 2000
    lr_extractor: float = 1e-3
    lr_rest: float = 5e-4
    decay_factor: float = 0.5
    decay_interval: int = 50_000
    seed: int = 0
    variant: str = "proposed"
    deterministic: bool = True
    dtype: str = "float64"
    log_every: int = 50
    eval_every: int = 0  # 0: evaluate the held-out view only at the end
    workers: int = 1

    def __post_init__(self):
        positive = (
            "n_s", "n_t", "n_extra", "n_k", "feat_channels", "hidden_dim",
            "dir_dim", "head_layers", "ray_batch", "decay_interval",
            "log_every", "workers",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0 or self.eval_every < 0:
            raise ValueError("iterations and eval_every must be non-negative")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.lr_extractor < 0 or self.lr_rest < 0:
            raise ValueError("learning rates must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def n_f(self):
        return self.feat_channels + 3

    def model_config(self):
        return ModelConfig(
            feat_channels=self.feat_channels,
            n_k=self.n_k,
            hidden_dim=self.hidden_dim,
            dir_dim=self.dir_dim,
            head_layers=self.head_layers,
            variant=self.variant,
            dtype=self.dtype,
        )

    def render_options(self):
        return RenderOptions(
            n_t=self.n_t, n_extra=self.n_extra, ray_batch=self.ray_batch
        )

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


def rendering_loss(rendered, truth):
    """Sum over the ray batch of squared color error -> scalar Tensor."""
    truth = np.asarray(truth, dtype=rendered.data.dtype)
    if tuple(rendered.shape) != truth.shape:
        raise ValueError(
            f"rendered {tuple(rendered.shape)} and truth {truth.shape} differ"
        )
    return adcore.tsum(adcore.square(adcore.sub(rendered, adcore.constant(truth))))


def lr_schedule(base_lr, iteration, decay_factor, decay_interval):
    """Stepwise decay: base * factor^(iteration // interval)."""
    return base_lr * decay_factor ** (iteration // decay_interval)


def adam_state(params):
    return {
        "step": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place; returns the mutated state."""
    state["step"] += 1
    t = state["step"]
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.value.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """Adam over named learning-rate groups sharing one step counter."""

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        # groups: list of (params, base_lr)
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.states = [adam_state(params) for params, _ in self.groups]
        self.step_count = 0

    def step(self, lr_scale=1.0):
        self.step_count += 1
        for (params, base_lr), state in zip(self.groups, self.states):
            adam_step(
                params,
                [p.grad for p in params],
                state,
                base_lr * lr_scale,
                self.beta1,
                self.beta2,
                self.eps,
            )

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()


def _optimizer(model, config):
    extractor = [
        p for p in model.trainable_parameters() if p.name.startswith("extractor.")
    ]
    rest = [
        p for p in model.trainable_parameters() if not p.name.startswith("extractor.")
    ]
    return Adam([(extractor, config.lr_extractor), (rest, config.lr_rest)])


def _source_views(cameras, train_views, target_view, n_s):
    """Absolute indices of the n_s training views nearest the target view.

    The target itself is excluded when enough other training views exist;
    single-image overfit runs fall back to sourcing from the target.
    """
    candidates = [v for v in train_views if v != target_view]
    if len(candidates) < n_s:
        candidates = list(train_views)
    if len(candidates) < n_s:
        raise ValueError(
            f"need {n_s} source views, have {len(candidates)} training views"
        )
    subset = [cameras[v] for v in candidates]
    picked = select_source_views(subset, cameras[target_view], n_s)
    return [candidates[i] for i in picked]


def _lambda_columns(model):
    cols = []
    for branch in ("coarse", "fine"):
        bank = model.banks.get(branch)
        if bank is None:
            continue
        for k in range(bank.n_k):
            cols.append(f"{branch}_lambda_{k + 1}")
    return cols


def _lambda_values(model):
    values = []
    for branch in ("coarse", "fine"):
        bank = model.banks.get(branch)
        if bank is None:
            continue
        values.extend(float(x) for x in bank.lambdas())
    return values


@dataclass
class TrainResult:
    model: RenderModel
    config: TrainConfig
    log_rows: list = field(default_factory=list)
    eval_view: int | None = None
    final_psnr: float | None = None
    final_ssim: float | None = None
    final_image: np.ndarray | None = None
    checkpoint_dir: str | None = None


def _eval_view_psnr(model, images, cameras, train_views, eval_view, config, seed):
    sources = _source_views(cameras, train_views, eval_view, config.n_s)
    fine, _ = render_image(
        model,
        cameras[eval_view],
        [cameras[i] for i in sources],
        [images[i] for i in sources],
        config.render_options(),
        seed=seed,
    )
    return fine, psnr(fine, images[eval_view])


def train(images, cameras, config, out_dir=None, train_views=None, eval_view=None):
    """Optimize coarse+fine networks on a scene -> TrainResult.

    images/cameras describe every view; train_views defaults to all but the
    last, which becomes the held-out evaluation view.  Pass eval_view=None
    explicitly via an empty train/eval split only when holding out nothing.
    Writes checkpoint/ and log.csv under out_dir when given.  A non-finite
    forward value aborts with diagnostics.
    """
    n_views = len(images)
    if train_views is None:
        train_views = list(range(n_views - 1))
        eval_view = n_views - 1 if eval_view is None else eval_view
    train_views = list(train_views)
    if not train_views:
        raise ValueError("at least one training view is required")
    for v in train_views:
        if not 0 <= v < n_views:
            raise ValueError(f"training view {v} out of range")
    if eval_view is not None and not 0 <= eval_view < n_views:
        raise ValueError(f"eval view {eval_view} out of range")

    model = RenderModel(config.model_config(), seed=config.seed)
    optimizer = _optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    options = config.render_options()
    columns = ["iteration", "loss", "eval_psnr"] + _lambda_columns(model)
    rows = []
    last_loss = None
    result = TrainResult(model=model, config=config, eval_view=eval_view)

    def evaluate(seed):
        if eval_view is None:
            return None
        with no_grad():
            image, value = _eval_view_psnr(
                model, images, cameras, train_views, eval_view, config, seed
            )
        result.final_image = image
        return value

    for it in range(config.iterations):
        target = int(rng.choice(train_views))
        cam = cameras[target]
        truth_img = images[target]
        n_px = cam.width * cam.height
        replace = config.ray_batch > n_px
        pix_idx = rng.choice(n_px, size=config.ray_batch, replace=replace)
        pixels = np.stack([pix_idx % cam.width, pix_idx // cam.width], axis=1)
        truth = truth_img.reshape(n_px, 3)[pix_idx]

        sources = _source_views(cameras, train_views, target, config.n_s)
        src_cams = [cameras[i] for i in sources]
        src_imgs = [images[i] for i in sources]

        try:
            coarse_maps = model.extract(src_imgs, "coarse")
            fine_maps = model.extract(src_imgs, "fine")
            origins, dirs = generate_rays(cam, pixels.astype(np.float64))
            c_pixel, f_pixel = render_rays(
                model, origins, dirs, src_cams, coarse_maps, fine_maps,
                cam.near, cam.far, options, rng,
            )
            loss = adcore.add(
                rendering_loss(c_pixel, truth), rendering_loss(f_pixel, truth)
            )
            loss.backward()
        except NonFiniteError as exc:
            raise RuntimeError(
                f"non-finite value at iteration {it} "
                f"(last finite loss: {last_loss!r}, "
                f"lr scale: {lr_schedule(1.0, it, config.decay_factor, config.decay_interval)!r}): {exc}"
            ) from exc

        scale = lr_schedule(1.0, it, config.decay_factor, config.decay_interval)
        optimizer.step(lr_scale=scale)
        optimizer.zero_grad()
        last_loss = float(loss.data)

        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            fresh = (
                config.eval_every > 0 and (it + 1) % config.eval_every == 0
            ) or (it + 1 == config.iterations)
            value = evaluate(config.seed) if fresh else None
            row = [it + 1, repr(last_loss), "" if value is None else repr(value)]
            row.extend(repr(v) for v in _lambda_values(model))
            rows.append(row)
            if value is not None:
                result.final_psnr = value

    if config.iterations == 0 and eval_view is not None:
        result.final_psnr = evaluate(config.seed)

    result.log_rows = [columns] + rows
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoint")
        meta = {
            "config": asdict(config),
            "train_views": train_views,
            "eval_view": eval_view,
            "iterations_run": config.iterations,
        }
        save_checkpoint(ckpt_dir, model.store, meta=meta)
        result.checkpoint_dir = ckpt_dir
        with open(os.path.join(out_dir, "log.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerows(result.log_rows)
    return result


def load_model(checkpoint_dir):
    """Rebuild a RenderModel from a training checkpoint -> (model, meta)."""
    values, meta = load_checkpoint(checkpoint_dir)
    if not isinstance(meta, dict) or "config" not in meta:
        raise ValueError(f"checkpoint at {checkpoint_dir!r} lacks a config record")
    config = TrainConfig.from_dict(meta["config"])
    model = RenderModel(config.model_config(), seed=config.seed)
    load_checkpoint(checkpoint_dir, store=model.store)
    return model, meta


def run_comparison(images, cameras, base_config, variants=("baseline", "proposed"),
                   out_dir=None, train_views=None, eval_view=None):
    """Train each variant with identical seed/budget -> list of report rows.

    Every run shares base_config except the variant; rows carry held-out
    PSNR/SSIM and the learned lambda values per branch.  Writes report.csv
    under out_dir when given.
    """
    rows = []
    for variant in variants:
        cfg = TrainConfig(**{**asdict(base_config), "variant": variant})
        run_dir = os.path.join(out_dir, variant) if out_dir is not None else None
        result = train(
            images, cameras, cfg, out_dir=run_dir,
            train_views=train_views, eval_view=eval_view,
        )
        row = {"variant": variant, "psnr": None, "ssim": None, "lambdas": {}}
        if result.eval_view is not None and result.final_image is not None:
            row["psnr"] = result.final_psnr
            row["ssim"] = ssim(result.final_image, images[result.eval_view])
            result.final_ssim = row["ssim"]
        for name, value in zip(_lambda_columns(result.model), _lambda_values(result.model)):
            row["lambdas"][name] = value
        row["result"] = result
        rows.append(row)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        lambda_names = sorted({k for r in rows for k in r["lambdas"]})
        with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "psnr", "ssim"] + lambda_names)
            for r in rows:
                writer.writerow(
                    [
                        r["variant"],
                        "" if r["psnr"] is None else repr(r["psnr"]),
                        "" if r["ssim"] is None else repr(r["ssim"]),
                    ]
                    + [
                        repr(r["lambdas"][n]) if n in r["lambdas"] else ""
                        for n in lambda_names
                    ]
                )
    return rows
