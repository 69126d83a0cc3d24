"""Encoder, scalar-codebook latent model, decoder and temporal encoder.

Networks are plain functions over a mapping of named tensors so that the
same code runs on live float32 parameters and on float64 copies inside the
finite-difference checks.  :class:`AldaModel` bundles the parameter stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import torch

from . import diffkit as dk

LATENT_MODES = ("associate", "vanilla_ae", "argmin")
N_CONV = 4  # default depth; tiny gradient checks use fewer layers


@dataclass(frozen=True)
class AldaConfig:
    n_z: int = 12
    codes_per_latent: int = 12
    beta: float = 100.0
    lambda_encoder: float = 0.1
    lambda_decoder: float = 0.1
    conv_width: int = 32
    conv_layers: int = N_CONV
    temporal_dim: int = 50
    temporal_channels: int = 32
    latent_mode: str = "associate"
    framestack_joint: bool = False
    critic_grads_to_encoder: bool = False
    lr: float = 1e-3
    codebook_lr: float = 1e-3

    def __post_init__(self):
        if self.conv_layers < 1:
            raise ValueError("conv_layers must be >= 1")
        if self.n_z < 1 or self.codes_per_latent < 2:
            raise ValueError("need n_z >= 1 and at least 2 codes per latent")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.latent_mode not in LATENT_MODES:
            raise ValueError(f"latent_mode must be one of {LATENT_MODES}")
        if self.lambda_encoder < 0 or self.lambda_decoder < 0:
            raise ValueError("weight decay must be non-negative")
        if self.lr <= 0 or self.codebook_lr <= 0:
            raise ValueError("learning rates must be positive")


# ---------------------------------------------------------------------------
# latent model


def init_codebook(n_z: int, m: int) -> torch.Tensor:
    return torch.linspace(-1.0, 1.0, m, dtype=dk.DTYPE).repeat(n_z, 1)


def quantize_argmin(z: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Snap each coordinate to its nearest code; gradient passes straight through.

    Ties go to the lower code index (``torch.argmin`` returns the first minimum).
    Written as ``q + (z - sg(z))`` so the forward value is exactly the code
    and the selected codes still receive the downstream gradient.
    """
    dist = (z.unsqueeze(-1) - codebook).abs()
    idx = dist.argmin(dim=-1, keepdim=True)
    q = torch.gather(codebook.expand(*z.shape, -1), -1, idx).squeeze(-1)
    return q + (z - dk.stop_gradient(z))


def association_weights(z: torch.Tensor, codebook: torch.Tensor, beta: float) -> torch.Tensor:
    """softmax(-beta * |z_j - V_j|) per latent dimension, shape [..., n_z, m]."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return dk.softmax(-beta * dk.l1_distance(z.unsqueeze(-1), codebook.expand(*z.shape, -1)), axis=-1)


def associate(z: torch.Tensor, codebook: torch.Tensor, beta: float) -> torch.Tensor:
    """Softmax-separated retrieval of each coordinate from its own codebook."""
    return (association_weights(z, codebook, beta) * codebook).sum(dim=-1)


def energy(xi, codebook_row, beta: float):
    """-(1/beta) * log sum_k exp(-beta |xi - v_k|); minima sit on stored codes."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    xi = torch.as_tensor(xi, dtype=torch.float64)
    v = torch.as_tensor(codebook_row, dtype=torch.float64)
    return -torch.logsumexp(-beta * (xi.unsqueeze(-1) - v).abs(), dim=-1) / beta


def bottleneck(z_cont: torch.Tensor, codebook: torch.Tensor, cfg: AldaConfig) -> torch.Tensor:
    if cfg.latent_mode == "associate":
        return associate(z_cont, codebook, cfg.beta)
    if cfg.latent_mode == "argmin":
        return quantize_argmin(z_cont, codebook)
    return z_cont


# ---------------------------------------------------------------------------
# networks


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(2.0)) -> torch.Tensor:
    """Variance-preserving uniform init (gain sqrt(2) before a GeLU, 1 for linear outputs).

    The 1/sqrt(fan_in) bound shrinks activations ~3x per layer, which leaves a
    fresh encoder nearly constant across images and every latent on one code.
    """
    bound = gain * math.sqrt(3.0 / fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape).astype(np.float32))


def _zeros(shape) -> torch.Tensor:
    return torch.zeros(shape, dtype=torch.float32)


def feature_size(image_size: int, layers: int = N_CONV) -> int:
    side = image_size // 2**layers
    if side < 1 or image_size % 2**layers:
        raise ValueError(f"image_size {image_size} must be a multiple of {2**layers}")
    return side


def init_encoder(
    rng, in_channels: int, image_size: int, n_z: int, width: int = 32, layers: int = N_CONV
) -> Dict[str, torch.Tensor]:
    p, c = {}, in_channels
    for i in range(layers):
        p[f"conv{i}.w"] = _uniform(rng, (width, c, 4, 4), c * 16)
        p[f"conv{i}.b"] = _zeros((width,))
        c = width
    flat = width * feature_size(image_size, layers) ** 2
    p["fc.w"] = _uniform(rng, (n_z, flat), flat, gain=1.0)
    p["fc.b"] = _zeros((n_z,))
    return p


def encoder_forward(p: Mapping[str, torch.Tensor], frames: torch.Tensor) -> torch.Tensor:
    """[N, C, H, W] -> [N, n_z]: stride-2 convolutions with GeLU, then a dense head."""
    h = frames
    for i in range(_depth(p, "conv")):
        h = dk.gelu(dk.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=1))
    return dk.dense(dk.reshape(h, (h.shape[0], -1)), p["fc.w"], p["fc.b"])


def _depth(p: Mapping[str, torch.Tensor], prefix: str) -> int:
    return sum(1 for k in p if k.startswith(prefix) and k.endswith(".w"))


def init_decoder(
    rng, out_channels: int, image_size: int, n_z: int, width: int = 32, layers: int = N_CONV
) -> Dict[str, torch.Tensor]:
    side = feature_size(image_size, layers)
    flat = width * side * side
    p = {"fc.w": _uniform(rng, (flat, n_z), n_z), "fc.b": _zeros((flat,))}
    for i in range(layers):
        last = i == layers - 1
        cout = out_channels if last else width
        # a stride-2 transposed conv sums width * 4 taps per output pixel
        p[f"deconv{i}.w"] = _uniform(rng, (width, cout, 4, 4), width * 4, gain=1.0 if last else math.sqrt(2.0))
        p[f"deconv{i}.b"] = _zeros((cout,))
    return p


def decoder_forward(p: Mapping[str, torch.Tensor], z: torch.Tensor) -> torch.Tensor:
    """[N, n_z] -> [N, C, H, W]; mirrors the encoder, unbounded output."""
    width = p["deconv0.w"].shape[0]
    side = int(round(math.sqrt(p["fc.w"].shape[0] / width)))
    h = dk.gelu(dk.dense(z, p["fc.w"], p["fc.b"]))
    h = dk.reshape(h, (z.shape[0], width, side, side))
    layers = _depth(p, "deconv")
    for i in range(layers):
        h = dk.conv_transpose2d(h, p[f"deconv{i}.w"], p[f"deconv{i}.b"], stride=2, padding=1)
        if i < layers - 1:
            h = dk.gelu(h)
    return h


def init_temporal(rng, n_z: int, k: int, out_dim: int, channels: int = 32) -> Dict[str, torch.Tensor]:
    ksize = min(2, k)
    length = k - ksize + 1
    return {
        "conv.w": _uniform(rng, (channels, n_z, ksize), n_z * ksize),
        "conv.b": _zeros((channels,)),
        "fc.w": _uniform(rng, (out_dim, channels * length), channels * length, gain=1.0),
        "fc.b": _zeros((out_dim,)),
    }


def temporal_encode(p: Mapping[str, torch.Tensor], zd_stack: torch.Tensor) -> torch.Tensor:
    """[B, k, n_z] -> [B, e]: 1D convolution over time (kernel 2), GeLU, dense."""
    if zd_stack.dim() != 3 or zd_stack.shape[2] != p["conv.w"].shape[1]:
        raise dk.ShapeError(f"temporal_encode: bad latent stack shape {tuple(zd_stack.shape)}")
    h = dk.gelu(dk.conv1d(zd_stack.transpose(1, 2), p["conv.w"], p["conv.b"]))
    h = dk.reshape(h, (h.shape[0], -1))
    if h.shape[1] != p["fc.w"].shape[1]:
        raise dk.ShapeError("temporal_encode: frame count does not match the configured framestack")
    return dk.dense(h, p["fc.w"], p["fc.b"])


def fold_frames(obs: torch.Tensor) -> torch.Tensor:
    """[B, 3k, H, W] -> [B*k, 3, H, W], frame order kept within each stack."""
    if obs.dim() != 4 or obs.shape[1] % 3:
        raise dk.ShapeError(f"observation channels must be a multiple of 3, got shape {tuple(obs.shape)}")
    b, c, h, w = obs.shape
    return obs.reshape(b * (c // 3), 3, h, w)


def unfold_frames(frames: torch.Tensor, k: int) -> torch.Tensor:
    n, c, h, w = frames.shape
    return frames.reshape(n // k, k * c, h, w)


def encode(p_enc: Mapping[str, torch.Tensor], obs: torch.Tensor, joint: bool = False) -> torch.Tensor:
    """Continuous latents: [B*k, n_z] (folded) or [B, n_z] when ``joint``."""
    if joint:
        return encoder_forward(p_enc, obs)
    return encoder_forward(p_enc, fold_frames(obs))


def alda_loss(
    params: Mapping[str, Mapping[str, torch.Tensor]],
    obs: torch.Tensor,
    cfg: AldaConfig,
    commit_target: Optional[torch.Tensor] = None,
) -> tuple:
    """Commitment + reconstruction + L2 penalties on encoder/decoder weights.

    ``params`` holds ``encoder``, ``decoder`` and ``codebook`` mappings.
    Reconstruction is the squared error summed over pixels (a unit-variance
    Gaussian negative log-likelihood up to constants), averaged over frames;
    commitment is summed over latent dimensions and averaged over frames.
    Returns ``(loss, parts)`` where ``parts`` holds detached components.

    ``commit_target`` replaces the stop-gradient target; finite-difference
    checks pass the value from the unperturbed point so both sides see a
    constant target.
    """
    enc, dec, V = params["encoder"], params["decoder"], params["codebook"]["values"]
    target = obs if cfg.framestack_joint else fold_frames(obs)
    z_cont = encoder_forward(enc, target)
    z_d = bottleneck(z_cont, V, cfg)
    recon = decoder_forward(dec, z_d)
    n = target.shape[0]
    recon_sse = ((recon - target) ** 2).reshape(n, -1).sum(dim=1).mean()
    if cfg.latent_mode == "vanilla_ae":
        commit = torch.zeros((), dtype=z_cont.dtype)
    else:
        if commit_target is None:
            commit_target = dk.stop_gradient(associate(z_cont, V, cfg.beta))
        commit = ((z_cont - commit_target) ** 2).sum(dim=1).mean()
    decay = cfg.lambda_encoder * sum((w * w).sum() for w in enc.values())
    decay = decay + cfg.lambda_decoder * sum((w * w).sum() for w in dec.values())
    loss = commit + recon_sse + decay
    parts = {
        "commit": float(commit.detach()),
        "recon_sse": float(recon_sse.detach()),
        "recon_mse": float(((recon - target) ** 2).mean().detach()),
        "weight_decay": float(decay.detach()),
    }
    return loss, parts


# ---------------------------------------------------------------------------
# bundled model


class AldaModel:
    """Parameter stores for the representation plus convenience forwards."""

    def __init__(self, cfg: AldaConfig, image_size: int, framestack: int, rng: np.random.Generator):
        self.cfg = cfg
        self.image_size = image_size
        self.k = framestack
        channels = 3 * framestack if cfg.framestack_joint else 3
        self.encoder = dk.ParamStore(init_encoder(rng, channels, image_size, cfg.n_z, cfg.conv_width, cfg.conv_layers))
        self.decoder = dk.ParamStore(init_decoder(rng, channels, image_size, cfg.n_z, cfg.conv_width, cfg.conv_layers))
        self.codebook = dk.ParamStore({"values": init_codebook(cfg.n_z, cfg.codes_per_latent)})
        if cfg.framestack_joint:
            self.temporal = dk.ParamStore()
        else:
            self.temporal = dk.ParamStore(
                init_temporal(rng, cfg.n_z, framestack, cfg.temporal_dim, cfg.temporal_channels)
            )

    @property
    def state_dim(self) -> int:
        return self.cfg.n_z if self.cfg.framestack_joint else self.cfg.temporal_dim

    def stores(self) -> Dict[str, dk.ParamStore]:
        return {"encoder": self.encoder, "decoder": self.decoder, "codebook": self.codebook, "temporal": self.temporal}

    def loss_params(self) -> Dict[str, Dict[str, torch.Tensor]]:
        return {"encoder": self.encoder.params, "decoder": self.decoder.params, "codebook": self.codebook.params}

    @property
    def values(self) -> torch.Tensor:
        return self.codebook["values"]

    def latents(self, frames: torch.Tensor) -> torch.Tensor:
        """z_d for a batch of single frames [N, 3, H, W] (or stacks in joint mode)."""
        return bottleneck(encoder_forward(self.encoder.params, frames), self.values, self.cfg)

    def disentangled(self, obs: torch.Tensor) -> torch.Tensor:
        """z_d of each frame of each stack: [B, k, n_z] (or [B, n_z] in joint mode)."""
        z_d = bottleneck(encode(self.encoder.params, obs, self.cfg.framestack_joint), self.values, self.cfg)
        if self.cfg.framestack_joint:
            return z_d
        return z_d.reshape(obs.shape[0], self.k, self.cfg.n_z)

    def state_from_latents(self, z_d: torch.Tensor) -> torch.Tensor:
        if self.cfg.framestack_joint:
            return z_d
        return temporal_encode(self.temporal.params, z_d)

    def state(self, obs: torch.Tensor, grad_to_encoder: Optional[bool] = None) -> torch.Tensor:
        """Actor/critic input. Encoder and codebooks sit behind a stop-gradient
        unless ``critic_grads_to_encoder`` is set."""
        if grad_to_encoder is None:
            grad_to_encoder = self.cfg.critic_grads_to_encoder
        if grad_to_encoder:
            z_d = self.disentangled(obs)
        else:
            with torch.no_grad():
                z_d = self.disentangled(obs)
        return self.state_from_latents(z_d)

    def reconstruct(self, frames: torch.Tensor) -> torch.Tensor:
        return decoder_forward(self.decoder.params, self.latents(frames))

    def loss(self, obs: torch.Tensor):
        return alda_loss(self.loss_params(), obs, self.cfg)

    def update(self, obs: torch.Tensor) -> Dict[str, float]:
        """One gradient step of the representation objective."""
        loss, parts = self.loss(obs)
        grads = dk.backward_groups(loss, self.loss_params())
        cfg = self.cfg
        dk.adam_step(self.encoder, grads["encoder"], cfg.lr, weight_decay=0.0)
        dk.adam_step(self.decoder, grads["decoder"], cfg.lr, weight_decay=0.0)
        if cfg.latent_mode != "vanilla_ae":
            dk.adam_step(self.codebook, grads["codebook"], cfg.codebook_lr)
        parts["alda_loss"] = float(loss.detach())
        return parts


# ---------------------------------------------------------------------------
# traversal


def latent_traversal(model: AldaModel, obs: torch.Tensor, dim: int) -> torch.Tensor:
    """Decode ``m`` images sweeping latent ``dim`` over its sorted codebook.

    ``obs`` is a single frame [3, H, W] or a frame stack [3k, H, W]; for a
    stack the most recent frame is used (in joint mode the whole stack).
    """
    if not 0 <= dim < model.cfg.n_z:
        raise IndexError(f"latent dim {dim} out of range [0, {model.cfg.n_z})")
    with torch.no_grad():
        x = torch.as_tensor(obs, dtype=dk.DTYPE)
        if model.cfg.framestack_joint:
            x = x.reshape(1, -1, *x.shape[-2:])
        else:
            x = x[-3:].reshape(1, 3, *x.shape[-2:])
        z_d = model.latents(x)
        codes = torch.sort(model.values[dim]).values
        zs = z_d.repeat(codes.shape[0], 1)
        zs[:, dim] = codes
        # one row at a time so each image matches a single-frame reconstruction bit for bit
        return torch.cat([decoder_forward(model.decoder.params, zs[i:i + 1]) for i in range(zs.shape[0])])


def traversal_strip(images: torch.Tensor, gap: int = 2) -> np.ndarray:
    """Lay out [m, C, H, W] images left to right as a uint8 RGB array (last frame if C > 3)."""
    imgs = images.detach().cpu().numpy()[:, -3:]
    m, _, h, w = imgs.shape
    strip = np.ones((h, m * w + (m - 1) * gap, 3), dtype=np.float32)
    for i in range(m):
        strip[:, i * (w + gap): i * (w + gap) + w] = imgs[i].transpose(1, 2, 0)
    return (np.clip(strip, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(array: np.ndarray, path: Path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, mode="RGB").save(path, format="PNG", optimize=False)
    return path


def model_tensors(model: AldaModel) -> Dict[str, torch.Tensor]:
    out = {}
    for group, store in model.stores().items():
        for name, p in store.items():
            out[f"{group}/{name}"] = p.detach()
    return out


def expected_shapes(stores: Mapping[str, dk.ParamStore]) -> Dict[str, Sequence[int]]:
    return {f"{g}/{n}": tuple(p.shape) for g, s in stores.items() for n, p in s.items()}
