"""Convolutional VAE producing the latent state embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import SeededRng, Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class VaeConfig:
    image_size: int = 40
    channels: tuple[int, int, int] = (16, 32, 32)
    strides: tuple[int, int, int] = (2, 1, 1)
    latent_dim: int = 20
    kernel: int = 3

    def feature_size(self) -> int:
        n = self.image_size
        for s in self.strides:
            n = nc.conv_output_size(n, self.kernel, s, self.kernel // 2)
        return n

    def output_paddings(self) -> list[int]:
        """Per-layer output padding that lets each deconv land on its mirrored conv's input size."""
        sizes = [self.image_size]
        for s in self.strides:
            sizes.append(nc.conv_output_size(sizes[-1], self.kernel, s, self.kernel // 2))
        pad = self.kernel // 2
        out = []
        for i, s in enumerate(self.strides):
            natural = (sizes[i + 1] - 1) * s - 2 * pad + self.kernel
            out.append(sizes[i] - natural)
        return out


@dataclass
class LatentDistribution:
    mu: Tensor
    logvar: Tensor


class VaeParams:
    """Encoder (conv x3 -> mu/logvar heads) and mirrored decoder weights."""

    def __init__(self, cfg: VaeConfig, rng: SeededRng, dtype="float32"):
        self.cfg = cfg
        k = cfg.kernel
        c = (1,) + tuple(cfg.channels)
        feat = cfg.channels[-1] * cfg.feature_size() ** 2
        p: dict[str, Tensor] = {}
        for i in range(3):
            fan = c[i] * k * k
            p[f"enc.conv{i + 1}.w"] = nc.uniform_init(rng, (c[i + 1], c[i], k, k), fan, dtype)
            p[f"enc.conv{i + 1}.b"] = nc.uniform_init(rng, (c[i + 1],), fan, dtype)
        for head in ("mu", "logvar"):
            p[f"enc.fc_{head}.w"] = nc.uniform_init(rng, (cfg.latent_dim, feat), feat, dtype)
            p[f"enc.fc_{head}.b"] = nc.uniform_init(rng, (cfg.latent_dim,), feat, dtype)
        p["dec.fc.w"] = nc.uniform_init(rng, (feat, cfg.latent_dim), cfg.latent_dim, dtype)
        p["dec.fc.b"] = nc.uniform_init(rng, (feat,), cfg.latent_dim, dtype)
        # deconv i mirrors conv i: weight [C_in_deconv, C_out_deconv, k, k]
        for i in (3, 2, 1):
            fan = c[i] * k * k
            p[f"dec.deconv{i}.w"] = nc.uniform_init(rng, (c[i], c[i - 1], k, k), fan, dtype)
            p[f"dec.deconv{i}.b"] = nc.uniform_init(rng, (c[i - 1],), fan, dtype)
        for name, t in p.items():
            t.name = name
        self.params = p

    def __getitem__(self, key) -> Tensor:
        return self.params[key]

    def encoder_params(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("enc.")]

    def decoder_params(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("dec.")]

    def all_params(self) -> list[Tensor]:
        return list(self.params.values())

    def arrays(self, prefix: str = "vae/") -> dict[str, np.ndarray]:
        return {prefix + k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "vae/"):
        for k, t in self.params.items():
            src = arrays[prefix + k]
            if src.shape != t.shape:
                raise ValueError(f"checkpoint array {prefix + k} has shape {src.shape}, expected {t.shape}")
            t.data[...] = src

    def checksum(self) -> float:
        return float(sum(np.abs(t.data.astype(np.float64)).sum() for t in self.params.values()))


def encode(image: Tensor, params: VaeParams) -> LatentDistribution:
    """Map ``[1,H,W]`` or ``[B,1,H,W]`` images in [0,1] to the latent Gaussian."""
    cfg = params.cfg
    n = cfg.image_size
    if image.shape[-3:] != (1, n, n) or image.ndim not in (3, 4):
        raise ValueError(f"encode: expected [1,{n},{n}] or [B,1,{n},{n}] image, got {image.shape}")
    batch = image.shape[0] if image.ndim == 4 else 1
    # channel-major [C,B,H,W] through the conv stack; with C=1 this is a pure reshape
    h = nc.reshape(image, (1, batch, n, n))
    pad = cfg.kernel // 2
    for i, s in enumerate(cfg.strides, start=1):
        h = nc.relu(nc.conv2d(h, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"], stride=s,
                              padding=pad, layout="CNHW"))
    flat = nc.reshape(nc.transpose(h, (1, 0, 2, 3)), (batch, -1))
    if image.ndim == 3:
        flat = nc.reshape(flat, (-1,))
    mu = nc.linear(flat, params["enc.fc_mu.w"], params["enc.fc_mu.b"])
    logvar = nc.clamp(nc.linear(flat, params["enc.fc_logvar.w"], params["enc.fc_logvar.b"]),
                      LOGVAR_MIN, LOGVAR_MAX)
    return LatentDistribution(mu, logvar)


def reparameterize(dist: LatentDistribution, rng: SeededRng) -> Tensor:
    eps = rng.normal(dist.mu.shape, dtype=dist.mu.dtype)
    return dist.mu + nc.exp(dist.logvar * 0.5) * eps


def decode_logits(z: Tensor, params: VaeParams) -> Tensor:
    cfg = params.cfg
    if z.shape[-1] != cfg.latent_dim or z.ndim not in (1, 2):
        raise ValueError(f"decode: expected latent of length {cfg.latent_dim}, got shape {z.shape}")
    f = cfg.feature_size()
    batch = z.shape[0] if z.ndim == 2 else 1
    h = nc.relu(nc.linear(z, params["dec.fc.w"], params["dec.fc.b"]))
    h = nc.transpose(nc.reshape(h, (batch, cfg.channels[-1], f, f)), (1, 0, 2, 3))
    pad = cfg.kernel // 2
    out_pads = cfg.output_paddings()
    for i in (3, 2, 1):
        h = nc.deconv2d(h, params[f"dec.deconv{i}.w"], params[f"dec.deconv{i}.b"],
                        stride=cfg.strides[i - 1], padding=pad, output_padding=out_pads[i - 1],
                        layout="CNHW")
        if i > 1:
            h = nc.relu(h)
    n = cfg.image_size
    return nc.reshape(h, (1, n, n) if z.ndim == 1 else (batch, 1, n, n))


def decode(z: Tensor, params: VaeParams) -> Tensor:
    return nc.sigmoid(decode_logits(z, params))


def kl_divergence(dist: LatentDistribution) -> Tensor:
    """Per-sample KL(q || N(0, I)), summed over latent dimensions."""
    mu, logvar = dist.mu, dist.logvar
    # expm1(x) - x >= 0 holds exactly in floating point, unlike exp(x) - 1 - x
    terms = nc.square(mu) + (nc.expm1(logvar) - logvar)
    return nc.tsum(terms, axis=-1) * 0.5


def vae_loss(images, params: VaeParams, rng: SeededRng,
             dist: LatentDistribution | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Negated ELBO averaged over the batch: (loss, reconstruction term, KL term).

    ``dist`` can be passed in when the caller already encoded ``images`` (joint
    training shares one encoder pass with the critic).
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"vae_loss needs a non-empty [B,1,H,W] batch, got {images.shape}")
    if dist is None:
        dist = encode(images, params)
    z = reparameterize(dist, rng)
    logits = decode_logits(z, params)
    recon = nc.mean(nc.tsum(nc.reshape(nc.bce_with_logits(logits, images.data), (images.shape[0], -1)), axis=1))
    kl = nc.mean(kl_divergence(dist))
    return recon + kl, recon, kl


def embed(images: np.ndarray, params: VaeParams) -> np.ndarray:
    """Deterministic embedding (posterior mean) without recording."""
    with nc.no_grad():
        return encode(Tensor(images.astype(params["enc.conv1.w"].dtype, copy=False)), params).mu.data
