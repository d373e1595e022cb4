"""Forward noising, one-step reconstruction, and denoiser backends.

The engine is space-agnostic: backends may operate on pixel images or
on recorded latents, both carried as ImageTensor of declared shape.
All schedule algebra runs in float64 so the inverse step stays exact
even at late timesteps where the signal coefficient is tiny.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .injection import InjectionPair
from .tensorfile import load_tensor
from .types import (
    ImageTensor,
    NoiseSchedule,
    TokenIndexSet,
    ValidationError,
    nearest_indices,
    seeded_normal,
)

@dataclass(frozen=True)
class ConditionSpec:
    """Conditioning for one generation: prompt, class tokens, bias masks.

    ``injection`` maps attention grid (h, w) to its cross/self bias
    pair; ``alpha_inject`` is the raw logit-bias weight applied with
    them. ``sample_id`` / ``class_name`` identify the work unit so
    recorded backends can key their lookups.
    """

    prompt: str
    token_set: TokenIndexSet
    injection: dict[tuple[int, int], InjectionPair] = field(default_factory=dict)
    alpha_inject: float = 0.0
    sample_id: str | None = None
    class_name: str | None = None

    def __post_init__(self):
        for (h, w), pair in self.injection.items():
            if pair.cross.rows != h * w or pair.self_.rows != h * w:
                raise ValidationError(
                    f"injection masks for grid {(h, w)} have {pair.cross.rows} rows, "
                    f"expected {h * w}"
                )


class DenoiserBackend:
    """Contract: predict the noise component of a noisy sample.

    Implementations must be deterministic given (x_t, t, cond) and safe
    to call from multiple threads read-only.
    """

    def predict_eps(self, x_t: ImageTensor, t: int, cond: ConditionSpec) -> ImageTensor:
        raise NotImplementedError


def _check_t(sched: NoiseSchedule, t: int) -> None:
    if not 0 <= t <= sched.num_steps:
        raise ValidationError(f"timestep {t} outside [0, {sched.num_steps}]")


def _check_shapes(a: ImageTensor, b: ImageTensor) -> None:
    if a.array.shape != b.array.shape:
        raise ValidationError(f"shape mismatch: {a.array.shape} vs {b.array.shape}")


def add_noise(x0: ImageTensor, t: int, eps: ImageTensor,
              sched: NoiseSchedule) -> ImageTensor:
    """Forward noising: x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    _check_t(sched, t)
    _check_shapes(x0, eps)
    abar = sched.at(t)
    x_t = np.sqrt(abar) * x0.array.astype(np.float64) \
        + np.sqrt(1.0 - abar) * eps.array.astype(np.float64)
    return ImageTensor(x_t)


def predict_x0(x_t: ImageTensor, eps_hat: ImageTensor, t: int,
               sched: NoiseSchedule) -> ImageTensor:
    """One-shot clean-sample estimate:
    x0 = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)."""
    _check_t(sched, t)
    _check_shapes(x_t, eps_hat)
    abar = sched.at(t)
    if abar <= 0.0:
        raise ValidationError("abar must be positive to invert the noising step")
    x0 = (x_t.array.astype(np.float64)
          - np.sqrt(1.0 - abar) * eps_hat.array.astype(np.float64)) / np.sqrt(abar)
    return ImageTensor(x0)


def ddim_step(x_t: ImageTensor, eps_hat: ImageTensor, t: int, t_prev: int,
              sched: NoiseSchedule, sigma: float = 0.0,
              noise_seed: int = 0) -> ImageTensor:
    """Deterministic (sigma=0) or stochastic sampler step:
    x_prev = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev - sigma^2) * eps_hat
             [+ sigma * fresh noise].
    """
    if t_prev >= t:
        raise ValidationError(f"t_prev {t_prev} must be below t {t}")
    _check_t(sched, t_prev)
    abar_prev = sched.at(t_prev)
    dir_coeff_sq = 1.0 - abar_prev - sigma * sigma
    if sigma < 0.0 or dir_coeff_sq < 0.0:
        raise ValidationError(f"invalid sigma {sigma} for abar_prev {abar_prev}")
    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    out = np.sqrt(abar_prev) * x0_hat.array \
        + np.sqrt(dir_coeff_sq) * eps_hat.array.astype(np.float64)
    if sigma > 0.0:
        out = out + sigma * seeded_normal(out.shape, noise_seed)
    return ImageTensor(out)


def one_step_reconstruct(x0: ImageTensor, t_s: int, cond: ConditionSpec,
                         backend: DenoiserBackend, seed: int,
                         sched: NoiseSchedule | None = None) -> ImageTensor:
    """Noise once to t_s, predict eps once, invert back to a clean image.

    The whole multi-step sampler collapses into a single prediction;
    with a fixed seed the result is bit-reproducible.
    """
    sched = sched or NoiseSchedule.linear_beta()
    if not 0 < t_s <= sched.num_steps:
        raise ValidationError(f"t_s {t_s} outside (0, {sched.num_steps}]")
    eps = ImageTensor(seeded_normal(x0.array.shape, seed))
    x_t = add_noise(x0, t_s, eps, sched)
    eps_hat = backend.predict_eps(x_t, t_s, cond)
    return predict_x0(x_t, eps_hat, t_s, sched)


class ToyDenoiser(DenoiserBackend):
    """Desk-scale backend that reconstructs a condition-defined target.

    ``target_fn(cond, h, w, c)`` returns the image the backend behaves
    as if the model would generate; predict_eps is chosen so the
    one-step reconstruction recovers that target exactly:

        eps = (x_t - sqrt(abar_t) * target) / sqrt(1 - abar_t)
    """

    def __init__(self, target_fn, sched: NoiseSchedule | None = None):
        self.target_fn = target_fn
        self.sched = sched or NoiseSchedule.linear_beta()

    @classmethod
    def from_textures(cls, fg, bg, sched: NoiseSchedule | None = None) -> "ToyDenoiser":
        """Target = mask * fg + (1 - mask) * bg.

        The mask is recovered from the finest injected self-attention
        bias (its diagonal is the flattened foreground mask) and
        nearest-resampled to image resolution, so the generated object
        region follows the injected mask: over-segmented injections
        expand the object, under-segmented ones shrink it.
        """
        fg = np.asarray(fg, dtype=np.float64)
        bg = np.asarray(bg, dtype=np.float64)

        def target_fn(cond: ConditionSpec, h: int, w: int, c: int) -> np.ndarray:
            m = injected_mask_at(cond, h, w)
            fg_img = np.broadcast_to(fg, (h, w, c))
            bg_img = np.broadcast_to(bg, (h, w, c))
            return m[:, :, None] * fg_img + (1.0 - m[:, :, None]) * bg_img

        return cls(target_fn, sched)

    def predict_eps(self, x_t: ImageTensor, t: int, cond: ConditionSpec) -> ImageTensor:
        _check_t(self.sched, t)
        abar = self.sched.at(t)
        if abar >= 1.0:
            raise ValidationError("toy backend needs t with abar < 1")
        h, w, c = x_t.array.shape
        target = np.asarray(self.target_fn(cond, h, w, c), dtype=np.float64)
        if target.shape != x_t.array.shape:
            raise ValidationError(
                f"target shape {target.shape} does not match x_t {x_t.array.shape}"
            )
        eps = (x_t.array - np.sqrt(abar) * target) / np.sqrt(1.0 - abar)
        return ImageTensor(eps)


def injected_mask_at(cond: ConditionSpec, h: int, w: int) -> np.ndarray:
    """Recover the injected binary mask at (h, w) from a condition.

    Uses the finest injected grid; the self-bias diagonal equals the
    flattened mask. Returns all-zero when nothing is injected.
    """
    if not cond.injection:
        return np.zeros((h, w), dtype=np.float64)
    (gh, gw), pair = max(cond.injection.items(), key=lambda kv: kv[0][0] * kv[0][1])
    flat = np.diagonal(pair.self_.bits).astype(np.float64)
    grid = flat.reshape(gh, gw)
    return grid[np.ix_(nearest_indices(gh, h), nearest_indices(gw, w))]


class RecordedBackend(DenoiserBackend):
    """Backend replaying exported generations from a recorded run dir.

    Layout: ``<run>/<sample_id>/gen_t<t>.g4tn`` holding the generated
    clean image, or ``gen_<class>_t<t>.g4tn`` when one sample carries
    several classes; ``eps[_<class>]_t<t>.g4tn`` records raw noise
    predictions instead. A JSON manifest at the run root lists sample
    ids, timesteps and shapes. A lookup miss is an error, never a
    silent fallback.
    """

    def __init__(self, run_dir: str | Path, sched: NoiseSchedule | None = None):
        self.run_dir = Path(run_dir)
        self.sched = sched or NoiseSchedule.linear_beta()
        manifest_path = self.run_dir / "manifest.json"
        if not manifest_path.is_file():
            raise ValidationError(f"no manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())

    def _candidates(self, kind: str, cond: ConditionSpec, t: int) -> list[Path]:
        if cond.sample_id is None:
            raise ValidationError("recorded backend requires cond.sample_id")
        base = self.run_dir / cond.sample_id
        names = []
        if cond.class_name is not None:
            names.append(f"{kind}_{_slug(cond.class_name)}_t{t}.g4tn")
        names.append(f"{kind}_t{t}.g4tn")
        return [base / n for n in names]

    def predict_eps(self, x_t: ImageTensor, t: int, cond: ConditionSpec) -> ImageTensor:
        for path in self._candidates("eps", cond, t):
            if path.is_file():
                return self._as_eps(load_tensor(path), x_t, t, derive=False)
        for path in self._candidates("gen", cond, t):
            if path.is_file():
                return self._as_eps(load_tensor(path), x_t, t, derive=True)
        raise ValidationError(
            f"no recorded prediction for sample={cond.sample_id!r} "
            f"class={cond.class_name!r} t={t}"
        )

    def _as_eps(self, arr: np.ndarray, x_t: ImageTensor, t: int,
                derive: bool) -> ImageTensor:
        if arr.shape != x_t.array.shape:
            raise ValidationError(
                f"recorded tensor shape {arr.shape} does not match x_t "
                f"{x_t.array.shape}"
            )
        if not derive:
            return ImageTensor(arr.astype(np.float64))
        # Stored record is the generated clean image; back out the eps
        # that makes the one-step inversion land exactly on it.
        abar = self.sched.at(t)
        eps = (x_t.array.astype(np.float64) - np.sqrt(abar) * arr.astype(np.float64)) \
            / np.sqrt(1.0 - abar)
        return ImageTensor(eps)


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")
