"""Mask-guided dual-branch appearance editor.

Runs a reconstruction branch and an editing branch in lockstep from a shared
inverted latent. Per step: energy-guided latent updates steer the edited
tokens' cross-attention into the object mask, features and self-attention
from the reconstruction branch are injected for the first fraction of steps,
and (for local edits) latent values outside the mask are reset to the
reconstruction branch after every step. Global style/weather edits skip the
energy and the blend.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import scenes
from .diffusion import ddim_invert, ddim_step, make_schedule
from .diffusion.denoiser import DTYPE, DenoiserError
from .diffusion.toy_unet import decode_latent, encode_latent
from .prompt import AttributeKind, EditRequest

log = logging.getLogger(__name__)

LOCAL_KINDS = (AttributeKind.COLOR, AttributeKind.MATERIAL)


class AppearanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EditConfig:
    T: int = 50
    theta_f: float = 0.8
    theta_a: float = 0.5
    gamma: float = 0.2
    eta: float = 1.0
    max_guidance_iters: int = 10
    guidance_layer: str = "up0"
    schedule_kind: str = "linear"
    denominator_all_tokens: bool = True  # keep every prompt token in the energy ratio

    def __post_init__(self):
        if not (0.0 <= self.theta_f <= 1.0 and 0.0 <= self.theta_a <= 1.0):
            raise AppearanceError("injection fractions must lie in [0, 1]")
        if self.gamma <= 0 or self.eta < 0 or self.max_guidance_iters < 1 or self.T < 1:
            raise AppearanceError("invalid edit configuration")


@dataclass
class GuidanceState:
    """Per-run guidance telemetry: last energy, iterations, per-step log."""

    gamma: float = float("inf")
    current_l: float = float("inf")
    iterations: int = 0
    steps: list[tuple[int, float, int]] = field(default_factory=list)

    def record(self, t: int, l_value: float, iters: int):
        self.current_l = l_value
        self.iterations = iters
        self.steps.append((t, l_value, iters))

    @property
    def converged(self) -> bool:
        return all(l <= self.gamma for (_, l, _) in self.steps)

    def to_dict(self) -> dict:
        return {
            "per_step": [
                {"t": t, "L": l, "guidance_iters": i} for (t, l, i) in self.steps
            ],
            "total_guidance_iters": sum(i for (_, _, i) in self.steps),
            "converged": self.converged,
        }


def downsample_mask(mask: scenes.BinaryMask, latent_hw: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel mask → (continuous, binary) masks at latent resolution.

    Continuous values are per-cell area fractions; the binary mask thresholds
    at 0.5 and is what the blend and the mask-element count use.
    """
    bits = torch.from_numpy(mask.bits.astype("float64"))
    h, w = mask.bits.shape
    lh, lw = latent_hw
    if h % lh or w % lw or h // lh != w // lw:
        raise AppearanceError(f"mask {h}×{w} does not pool evenly to {lh}×{lw}")
    factor = h // lh
    cont = F.avg_pool2d(bits.unsqueeze(0).unsqueeze(0), factor).squeeze()
    return cont.to(DTYPE), cont >= 0.5


def inject_features(f_recon: dict, f_edit: dict, t: int, config: EditConfig) -> dict:
    """Reconstruction features for denoising step t (1-indexed) iff t ≤ θ_f·T."""
    if set(f_recon) != set(f_edit):
        raise AppearanceError("feature block keys differ between branches")
    for key in f_recon:
        if f_recon[key].shape != f_edit[key].shape:
            raise AppearanceError(f"feature shape mismatch at block {key!r}")
    return dict(f_recon) if t <= config.theta_f * config.T else dict(f_edit)


def inject_self_attention(a_recon: dict, a_edit: dict, t: int, config: EditConfig) -> dict:
    """As inject_features, with the self-attention threshold θ_a."""
    if set(a_recon) != set(a_edit):
        raise AppearanceError("self-attention keys differ between branches")
    for key in a_recon:
        if a_recon[key].shape != a_edit[key].shape:
            raise AppearanceError(f"self-attention shape mismatch at layer {key!r}")
    return dict(a_recon) if t <= config.theta_a * config.T else dict(a_edit)


def mask_energy(cross_attn: torch.Tensor, edit_indices, mask: torch.Tensor) -> torch.Tensor:
    """Squared shortfall of edit-token attention mass inside the mask.

    ``cross_attn``: per-token maps, (tokens, h, w) or (heads, tokens, h, w)
    (heads are averaged). ``mask`` may be continuous; it multiplies the
    attention ratio, while the mask-element count uses the ≥0.5 cells.
    """
    attn = cross_attn
    if attn.dim() == 4:
        attn = attn.mean(dim=0)
    if attn.dim() != 3:
        raise AppearanceError("cross-attention maps must be (tokens, h, w)")
    n_tokens, h, w = attn.shape
    idx = list(edit_indices)
    if not idx or min(idx) < 0 or max(idx) >= n_tokens:
        raise AppearanceError(f"edit token indices {idx} outside [0, {n_tokens})")
    if mask.shape != (h, w):
        raise AppearanceError("mask resolution must match attention maps")
    count = float((mask >= 0.5).sum())
    if count == 0:
        raise AppearanceError("empty mask: no elements at or above 0.5")

    token_sum = attn.sum(dim=0)
    dead = (mask > 0) & (token_sum <= 0)
    if dead.any():
        y, x = [int(v) for v in dead.nonzero()[0]]
        raise AppearanceError(f"zero total attention at masked location ({y}, {x})")
    ratio = attn[idx].sum(dim=0) / token_sum
    inner = (mask.to(attn.dtype) * ratio).sum() / count
    return (1.0 - inner.clamp(max=1.0)) ** 2


def guided_update(
    z_edit: torch.Tensor,
    denoiser,
    tokens,
    edit_indices,
    mask_cont: torch.Tensor,
    t: int,
    config: EditConfig,
    structure=None,
) -> tuple[torch.Tensor, float, int]:
    """Push edit-token attention into the mask by gradient descent on the latent.

    Evaluates the energy at ``guidance_layer`` (head-averaged); while it
    exceeds gamma, steps z ← z − eta·∇L, up to max_guidance_iters. Returns
    (latent, last energy, iterations used).
    """

    def energy_fn(cross_attn: dict) -> torch.Tensor:
        if config.guidance_layer not in cross_attn:
            raise AppearanceError(
                f"guidance layer {config.guidance_layer!r} not in {sorted(cross_attn)}"
            )
        return mask_energy(cross_attn[config.guidance_layer], edit_indices, mask_cont)

    z = z_edit
    iters = 0
    l_value = float("inf")
    while True:
        try:
            l_value, grad = denoiser.energy_value_and_grad(
                z, t, tokens, energy_fn, structure=structure
            )
        except DenoiserError as err:
            raise AppearanceError(f"guidance failed at t={t}: {err}") from err
        if l_value <= config.gamma or iters >= config.max_guidance_iters:
            break
        z_new = z - config.eta * grad
        if torch.equal(z_new, z):
            log.warning("guidance made no progress at t=%d (eta=%g)", t, config.eta)
        z = z_new
        iters += 1
    return z, l_value, iters


def blend_latents(z_edit: torch.Tensor, z_recon: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked elements from the edit branch, the rest from reconstruction."""
    if z_edit.shape != z_recon.shape:
        raise AppearanceError("latent shapes differ")
    if mask.shape != z_edit.shape[-2:]:
        raise AppearanceError("mask resolution must match latents")
    keep = mask.to(torch.bool)
    return torch.where(keep.unsqueeze(0).expand_as(z_edit), z_edit, z_recon)


@dataclass
class EditResult:
    edited: scenes.Image
    recon: scenes.Image
    state: GuidanceState
    edited_latent: torch.Tensor
    recon_latent: torch.Tensor


def edit_appearance(
    image: scenes.Image,
    label: scenes.SegLabel,
    mask: scenes.BinaryMask,
    edit_request: EditRequest,
    denoiser,
    config: EditConfig = EditConfig(),
    schedule=None,
) -> EditResult:
    """Full dual-branch edit of one image.

    Local (color/material) edits run energy guidance and per-step blending;
    global (style/weather) edits change all pixels and skip both. The
    structure condition (label map) stays active on every denoiser call.
    """
    if mask.count == 0:
        raise AppearanceError("edit mask is empty")
    if mask.bits.shape != image.pixels.shape[:2]:
        raise AppearanceError("mask/image shape mismatch")
    schedule = schedule or make_schedule(config.T, config.schedule_kind)
    if schedule.T != config.T:
        raise AppearanceError("schedule length differs from config.T")

    src_ids = denoiser.tokenizer.encode(edit_request.source_text)
    tgt_ids = denoiser.tokenizer.encode(edit_request.target_text)
    structure = None
    if hasattr(denoiser, "prepare_structure"):
        structure = denoiser.prepare_structure(label)

    z0 = encode_latent(image)
    m_cont, m_bin = downsample_mask(mask, z0.shape[-2:])
    local = edit_request.kind in LOCAL_KINDS
    if local and not m_bin.any():
        raise AppearanceError("object mask vanishes at latent resolution")

    traj = ddim_invert(z0, denoiser, src_ids, schedule, structure=structure)
    z_rec = traj[-1]
    z_edit = traj[-1].clone()
    state = GuidanceState(gamma=config.gamma)

    for step, tau in enumerate(range(config.T, 0, -1), start=1):
        if local:
            z_edit, l_value, iters = guided_update(
                z_edit, denoiser, tgt_ids, edit_request.edit_indices,
                m_cont, tau, config, structure=structure,
            )
            state.record(tau, l_value, iters)
        out_rec = denoiser(z_rec, tau, src_ids, structure=structure)
        out_edit = denoiser(z_edit, tau, tgt_ids, structure=structure)
        feats = inject_features(out_rec.features, out_edit.features, step, config)
        attn = inject_self_attention(out_rec.self_attn, out_edit.self_attn, step, config)
        out_final = denoiser(
            z_edit, tau, tgt_ids, structure=structure,
            overrides={"features": feats, "self_attn": attn},
        )
        z_edit = ddim_step(z_edit, out_final.eps, tau, schedule)
        z_rec = ddim_step(z_rec, out_rec.eps, tau, schedule)
        if local:
            z_edit = blend_latents(z_edit, z_rec, m_bin)
        if not torch.isfinite(z_edit).all():
            raise AppearanceError(f"non-finite edit latent after step t={tau}")

    out_hw = image.pixels.shape[:2]
    return EditResult(
        edited=decode_latent(z_edit, out_hw),
        recon=decode_latent(z_rec, out_hw),
        state=state,
        edited_latent=z_edit,
        recon_latent=z_rec,
    )


def reconstruct(
    image: scenes.Image,
    label: scenes.SegLabel,
    caption: str,
    denoiser,
    config: EditConfig = EditConfig(),
    schedule=None,
) -> scenes.Image:
    """Invert and denoise with the unedited caption (the no-edit baseline)."""
    schedule = schedule or make_schedule(config.T, config.schedule_kind)
    ids = denoiser.tokenizer.encode(caption)
    structure = None
    if hasattr(denoiser, "prepare_structure"):
        structure = denoiser.prepare_structure(label)
    z0 = encode_latent(image)
    z = ddim_invert(z0, denoiser, ids, schedule, structure=structure)[-1]
    for tau in range(schedule.T, 0, -1):
        eps = denoiser(z, tau, ids, structure=structure).eps
        z = ddim_step(z, eps, tau, schedule)
    return decode_latent(z, image.pixels.shape[:2])
