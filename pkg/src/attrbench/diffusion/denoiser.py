"""Denoiser call contract, capturable internals, and a linear test double.

A denoiser maps (latent, timestep, token ids, optional structure condition,
optional overrides) to predicted noise plus its internal features, self-
attention and per-token cross-attention maps. Overrides replace the named
internal tensors before downstream layers consume them, which is what the
dual-branch editor relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

DTYPE = torch.float64


class DenoiserError(RuntimeError):
    pass


@dataclass
class DenoiseOutput:
    """Predicted noise and the capturable internals of one forward pass.

    ``cross_attn`` maps layer id to a (heads, tokens, h, w) tensor whose token
    weights sum to 1 at every (head, location).
    """

    eps: torch.Tensor
    features: dict[str, torch.Tensor] = field(default_factory=dict)
    self_attn: dict[str, torch.Tensor] = field(default_factory=dict)
    cross_attn: dict[str, torch.Tensor] = field(default_factory=dict)

    def validate(self, z_shape: tuple[int, ...]):
        if tuple(self.eps.shape) != tuple(z_shape):
            raise DenoiserError("eps shape must equal input latent shape")
        for name, attn in self.cross_attn.items():
            if (attn < -1e-12).any():
                raise DenoiserError(f"cross-attention {name} has negative weights")
            sums = attn.sum(dim=1)
            if (sums - 1.0).abs().max().item() > 1e-5:
                raise DenoiserError(f"cross-attention {name} token weights do not sum to 1")


def as_token_tensor(tokens) -> torch.Tensor:
    if isinstance(tokens, torch.Tensor):
        return tokens.to(torch.long)
    return torch.tensor(list(tokens), dtype=torch.long)


class Denoiser:
    """Base class wiring the differentiation contract through autograd."""

    tokenizer = None

    def __call__(self, z, t, tokens, structure=None, overrides=None) -> DenoiseOutput:
        raise NotImplementedError

    def energy_value_and_grad(
        self, z: torch.Tensor, t: int, tokens, energy_fn, structure=None
    ) -> tuple[float, torch.Tensor]:
        """Value and exact gradient of a scalar function of cross-attention.

        ``energy_fn`` receives the cross-attention dict and must return a
        scalar tensor; the gradient is taken with respect to the input latent.
        """
        with torch.enable_grad():
            z_req = z.detach().clone().requires_grad_(True)
            out = self(z_req, t, tokens, structure=structure)
            value = energy_fn(out.cross_attn)
            (grad,) = torch.autograd.grad(value, z_req)
        if not torch.isfinite(grad).all():
            raise DenoiserError(f"non-finite energy gradient at t={t}")
        return float(value.detach()), grad.detach()


class HashTokenizer:
    """Stable word→id tokenizer for denoisers that only key on token ids."""

    def __init__(self, modulus: int = 997):
        self.modulus = modulus

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.lower().split():
            word = word.strip(".,!?;:'\"()")
            if not word:
                continue
            h = 0
            for ch in word:
                h = (h * 131 + ord(ch)) % self.modulus
            ids.append(h)
        return ids


class LinearDenoiser(Denoiser):
    """Test double: eps = A·(self-attention mix of features) + b.

    ``A`` is a channel-mixing matrix and ``b`` a channel bias, so A = 0, b = 0
    gives eps ≡ 0 exactly. Cross-attention is synthesized from seeded unit
    directions keyed by token id, which keeps the energy differentiable with a
    hand-derivable gradient.
    """

    def __init__(self, channels: int = 3, a=None, b=None, seed: int = 0, attn_scale: float = 1.0):
        self.channels = channels
        self.A = torch.zeros(channels, channels, dtype=DTYPE) if a is None else torch.as_tensor(a, dtype=DTYPE)
        self.b = torch.zeros(channels, dtype=DTYPE) if b is None else torch.as_tensor(b, dtype=DTYPE)
        if self.A.shape != (channels, channels) or self.b.shape != (channels,):
            raise DenoiserError("A must be (C, C) and b must be (C,)")
        self.seed = seed
        self.attn_scale = attn_scale
        self.tokenizer = HashTokenizer()
        self._directions: dict[int, torch.Tensor] = {}

    def token_direction(self, token_id: int) -> torch.Tensor:
        """Seeded unit vector in channel space for one token id."""
        if token_id not in self._directions:
            g = torch.Generator().manual_seed(self.seed * 1_000_003 + int(token_id))
            v = torch.randn(self.channels, generator=g, dtype=DTYPE)
            self._directions[token_id] = v / v.norm()
        return self._directions[token_id]

    def _synthetic_self_attn(self, f: torch.Tensor) -> torch.Tensor:
        c, h, w = f.shape
        flat = f.reshape(c, h * w)
        logits = flat.T @ flat / (c**0.5)
        return torch.softmax(logits, dim=1)  # (hw, hw), rows sum to 1

    def _synthetic_cross_attn(self, z: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        c, h, w = z.shape
        dirs = torch.stack([self.token_direction(int(k)) for k in token_ids])  # (N, C)
        logits = torch.einsum("nc,chw->nhw", dirs, z) * self.attn_scale
        attn = torch.softmax(logits, dim=0)  # over tokens
        return attn.unsqueeze(0)  # (1, N, h, w)

    def __call__(self, z, t, tokens, structure=None, overrides=None) -> DenoiseOutput:
        z = z.to(DTYPE)
        token_ids = as_token_tensor(tokens)
        overrides = overrides or {}
        feats = {"base": z}
        f = overrides.get("features", {}).get("base", feats["base"])

        sa = overrides.get("self_attn", {}).get("sa0")
        if sa is None:
            sa = self._synthetic_self_attn(f)
        c, h, w = f.shape
        mixed = (f.reshape(c, h * w) @ sa.T).reshape(c, h, w)

        eps = torch.einsum("cd,dhw->chw", self.A, mixed) + self.b.view(-1, 1, 1)
        ca = self._synthetic_cross_attn(z, token_ids)
        return DenoiseOutput(
            eps=eps,
            features={"base": f},
            self_attn={"sa0": sa},
            cross_attn={"up0": ca},
        )
