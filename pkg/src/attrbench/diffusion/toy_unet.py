"""Small conditional denoiser trained on synthetic scenes.

Operates on a pixel latent: channel-preserving 4× average pooling down,
bilinear upsampling back. Conditioning: sinusoidal timestep embedding, token
cross-attention (captions are the only source of object color during
training, so the net is forced to use them), and an additive branch over the
pooled one-hot label map that plays the role of an external structure
controller.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import scenes
from .denoiser import DTYPE, Denoiser, DenoiseOutput, DenoiserError, as_token_tensor

LATENT_FACTOR = 4


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, grad_norm: float):
        super().__init__(
            f"denoiser training diverged at step {step}: loss={loss}, grad_norm={grad_norm}"
        )
        self.step = step
        self.loss = loss
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class ToyDenoiserConfig:
    image_size: int = 96
    latent_channels: int = 3
    base_channels: int = 32
    num_classes: int = 4
    emb_dim: int = 32
    T: int = 50
    vocab: tuple[str, ...] = ()

    @property
    def latent_size(self) -> int:
        return self.image_size // LATENT_FACTOR


def encode_latent(image: scenes.Image) -> torch.Tensor:
    """Image → (3, H/4, W/4) latent via block averaging."""
    px = torch.from_numpy(image.pixels).to(DTYPE).permute(2, 0, 1)
    return F.avg_pool2d(px.unsqueeze(0), LATENT_FACTOR).squeeze(0)


def decode_latent(z: torch.Tensor, out_hw: tuple[int, int]) -> scenes.Image:
    """Latent → image via bilinear upsampling, clamped to [0, 1]."""
    up = F.interpolate(
        z.unsqueeze(0).to(DTYPE), size=out_hw, mode="bilinear", align_corners=False
    ).squeeze(0)
    arr = up.clamp(0.0, 1.0).permute(1, 2, 0).numpy()
    return scenes.Image(arr)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 200.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=DTYPE) / max(half - 1, 1)
    )
    args = t.to(DTYPE)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv2(F.gelu(self.conv1(F.gelu(x))))
        return x + h


class ToyDenoiser(nn.Module, Denoiser):
    """Denoiser with one self-attention and one cross-attention layer.

    Layer naming: the injectable feature block and the cross-attention layer
    both live at the start of the upsampling path and are exposed under key
    ``"up0"``; self-attention is ``"sa0"``.
    """

    def __init__(self, config: ToyDenoiserConfig, tokenizer):
        super().__init__()
        if tokenizer is None or not hasattr(tokenizer, "encode"):
            raise DenoiserError("ToyDenoiser requires a tokenizer with .encode")
        self.config = config
        self.tokenizer = tokenizer
        c = config.base_channels
        self.conv_in = nn.Conv2d(config.latent_channels, c, 3, padding=1)
        self.t_proj = nn.Sequential(nn.Linear(c, c), nn.GELU(), nn.Linear(c, c))
        self.struct_proj = nn.Conv2d(config.num_classes, c, 1)
        self.res1 = _ResBlock(c)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.sa_q = nn.Conv2d(2 * c, 2 * c, 1)
        self.sa_k = nn.Conv2d(2 * c, 2 * c, 1)
        self.sa_v = nn.Conv2d(2 * c, 2 * c, 1)
        self.sa_out = nn.Conv2d(2 * c, 2 * c, 1)
        self.up = nn.Conv2d(2 * c, c, 3, padding=1)
        self.ca_q = nn.Conv2d(c, c, 1)
        self.ca_k = nn.Linear(config.emb_dim, c)
        self.ca_v = nn.Linear(config.emb_dim, c)
        self.ca_out = nn.Conv2d(c, c, 1)
        self.res2 = _ResBlock(c)
        self.conv_out = nn.Conv2d(c, config.latent_channels, 3, padding=1)
        self.token_emb = nn.Embedding(max(len(config.vocab), 1), config.emb_dim)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self.to(DTYPE)
        self.eval()

    # -- conditioning helpers -------------------------------------------------

    def prepare_structure(self, label) -> torch.Tensor:
        """One-hot the label map and pool it to latent resolution."""
        if isinstance(label, torch.Tensor):
            return label.to(DTYPE)
        classes = label.classes if isinstance(label, scenes.SegLabel) else np.asarray(label)
        k = self.config.num_classes
        safe = np.where(classes >= k, 0, classes)
        onehot = np.eye(k, dtype=np.float64)[safe]
        onehot[classes >= k] = 0.0
        t = torch.from_numpy(onehot).permute(2, 0, 1).to(DTYPE)
        return F.avg_pool2d(t.unsqueeze(0), LATENT_FACTOR).squeeze(0)

    # -- forward --------------------------------------------------------------

    def _backbone(self, z, t, token_ids, structure, overrides):
        b = z.shape[0]
        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), float(t), dtype=DTYPE)
        temb = self.t_proj(timestep_embedding(t, self.config.base_channels))
        x = self.conv_in(z) + temb[:, :, None, None]
        if structure is not None:
            x = x + self.struct_proj(structure)
        x = self.res1(x)

        d = self.down(x)
        bq, cq, hq, wq = d.shape
        q = self.sa_q(d).reshape(bq, cq, hq * wq)
        k = self.sa_k(d).reshape(bq, cq, hq * wq)
        v = self.sa_v(d).reshape(bq, cq, hq * wq)
        sa = overrides.get("self_attn", {}).get("sa0")
        if sa is None:
            sa = torch.softmax(torch.einsum("bcp,bcq->bpq", q, k) / math.sqrt(cq), dim=2)
        elif sa.dim() == 2:
            sa = sa.unsqueeze(0)
        mixed = torch.einsum("bpq,bcq->bcp", sa, v).reshape(bq, cq, hq, wq)
        d = d + self.sa_out(mixed)

        u = self.up(F.interpolate(d, scale_factor=2, mode="nearest")) + x
        feat = overrides.get("features", {}).get("up0")
        if feat is not None:
            u = feat.unsqueeze(0) if feat.dim() == 3 else feat
        features = u

        n = token_ids.shape[-1]
        emb = self.token_emb(token_ids.reshape(b, n))
        keys = self.ca_k(emb)  # (b, n, c)
        vals = self.ca_v(emb)
        quer = self.ca_q(u)  # (b, c, h, w)
        logits = torch.einsum("bnc,bchw->bnhw", keys, quer) / math.sqrt(quer.shape[1])
        ca = torch.softmax(logits, dim=1)
        ca_mix = torch.einsum("bnhw,bnc->bchw", ca, vals)
        u = u + self.ca_out(ca_mix)

        eps = self.conv_out(self.res2(u))
        return eps, features, sa, ca

    def training_eps(self, z_batch, t_batch, token_batch, struct_batch) -> torch.Tensor:
        eps, _, _, _ = self._backbone(z_batch, t_batch, token_batch, struct_batch, {})
        return eps

    def __call__(self, z, t, tokens, structure=None, overrides=None) -> DenoiseOutput:
        token_ids = as_token_tensor(tokens)
        if token_ids.dim() == 1:
            token_ids = token_ids.unsqueeze(0)
        struct = None
        if structure is not None:
            struct = self.prepare_structure(structure)
            if struct.dim() == 3:
                struct = struct.unsqueeze(0)
        eps, feat, sa, ca = self._backbone(
            z.to(DTYPE).unsqueeze(0), t, token_ids, struct, overrides or {}
        )
        return DenoiseOutput(
            eps=eps.squeeze(0),
            features={"up0": feat.squeeze(0)},
            self_attn={"sa0": sa.squeeze(0)},
            cross_attn={"up0": ca},  # (heads=1, tokens, h, w)
        )


def train_toy_denoiser(
    config: ToyDenoiserConfig,
    dataset,
    steps: int,
    seed: int,
    tokenizer=None,
    lr: float = 2e-3,
    batch_size: int = 16,
) -> ToyDenoiser:
    """Train on (Image, token sequence, SegLabel) triples; deterministic per seed.

    Samples a timestep and a fresh noise draw per example and regresses the
    predicted noise. Raises TrainingDiverged on a non-finite loss. The loss
    history is stashed on ``model.train_history``.
    """
    if tokenizer is None:
        from ..prompt import Tokenizer

        tokenizer = Tokenizer(config.vocab)
    torch.manual_seed(seed)
    model = ToyDenoiser(config, tokenizer)
    gen = torch.Generator().manual_seed(seed + 1)

    latents, structs, token_lists = [], [], []
    for image, toks, label in dataset:
        latents.append(encode_latent(image))
        structs.append(model.prepare_structure(label))
        ids = tokenizer.encode(toks) if isinstance(toks, str) else list(toks)
        token_lists.append(torch.tensor(ids, dtype=torch.long))

    by_len: dict[int, list[int]] = {}
    for i, tl in enumerate(token_lists):
        by_len.setdefault(len(tl), []).append(i)
    groups = sorted(by_len.values(), key=len, reverse=True)
    weights = torch.tensor([len(g) for g in groups], dtype=DTYPE)

    from .schedule import make_schedule

    schedule = make_schedule(config.T, "linear")
    abar = torch.from_numpy(schedule.alpha_bar).to(DTYPE)

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    model.train()
    for step in range(steps):
        gi = int(torch.multinomial(weights, 1, generator=gen))
        group = groups[gi]
        pick = torch.randint(len(group), (min(batch_size, len(group)),), generator=gen)
        idx = [group[int(i)] for i in pick]
        z0 = torch.stack([latents[i] for i in idx])
        st = torch.stack([structs[i] for i in idx])
        tk = torch.stack([token_lists[i] for i in idx])
        t = torch.randint(1, config.T + 1, (len(idx),), generator=gen)
        noise = torch.randn(z0.shape, generator=gen, dtype=DTYPE)
        ab = abar[t].view(-1, 1, 1, 1)
        z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * noise
        eps = model.training_eps(z_t, t, tk, st)
        loss = F.mse_loss(eps, noise)
        opt.zero_grad()
        loss.backward()
        sq = sum((p.grad**2).sum() for p in model.parameters() if p.grad is not None)
        grad_norm = float(torch.sqrt(sq).item())
        loss_val = float(loss.item())
        if not math.isfinite(loss_val) or not math.isfinite(grad_norm):
            raise TrainingDiverged(step, loss_val, grad_norm)
        opt.step()
        history.append(loss_val)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.train_history = history
    return model


def denoising_loss(model: ToyDenoiser, dataset, seed: int = 0, draws: int = 4) -> float:
    """Mean noise-prediction MSE over a dataset; used to compare checkpoints."""
    from .schedule import make_schedule

    schedule = make_schedule(model.config.T, "linear")
    abar = torch.from_numpy(schedule.alpha_bar).to(DTYPE)
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for image, toks, label in dataset:
            z0 = encode_latent(image)
            ids = model.tokenizer.encode(toks) if isinstance(toks, str) else list(toks)
            tk = torch.tensor(ids, dtype=torch.long).unsqueeze(0)
            st = model.prepare_structure(label).unsqueeze(0)
            for _ in range(draws):
                t = int(torch.randint(1, model.config.T + 1, (1,), generator=gen))
                noise = torch.randn(z0.shape, generator=gen, dtype=DTYPE)
                ab = abar[t]
                z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * noise
                eps = model.training_eps(z_t.unsqueeze(0), t, tk, st)
                total += float(F.mse_loss(eps.squeeze(0), noise))
                count += 1
    return total / max(count, 1)


# -- checkpoint container: named tensors plus a JSON config ------------------


def save_denoiser(model: ToyDenoiser, path):
    arrays = {
        f"param::{name}": tensor.detach().numpy()
        for name, tensor in model.state_dict().items()
    }
    cfg = asdict(model.config)
    cfg["vocab"] = list(cfg["vocab"])
    arrays["config_json"] = np.frombuffer(
        json.dumps(cfg, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_denoiser(path, tokenizer=None) -> ToyDenoiser:
    data = np.load(path)
    cfg_dict = json.loads(bytes(data["config_json"]).decode("utf-8"))
    cfg_dict["vocab"] = tuple(cfg_dict["vocab"])
    config = ToyDenoiserConfig(**cfg_dict)
    if tokenizer is None:
        from ..prompt import Tokenizer

        tokenizer = Tokenizer(config.vocab)
    model = ToyDenoiser(config, tokenizer)
    state = {
        key[len("param::") :]: torch.from_numpy(data[key])
        for key in data.files
        if key.startswith("param::")
    }
    model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
