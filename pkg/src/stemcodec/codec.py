"""Waveform codec: strided conv encoder, BiLSTM bottleneck, residual vector
quantizer, and a mirrored transposed-conv decoder that emits one channel per
source. Losses: multi-scale mel spectral, time-domain MSE per source, and
the quantizer commitment loss.

Length bookkeeping (relied on by tests): with odd kernel k, stride s and
symmetric padding k//2,

    conv:            L_out = floor((L + 2*(k//2) - k)/s) + 1 = L/s  when s | L
    transposed conv: L_out = (L-1)*s - 2*(k//2) + k + output_padding
                           = (L-1)*s + 1 + (s-1) = L*s

so output_padding = s-1 makes the decoder mirror the encoder exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import rvq
from .dsp import Waveform, mel_power_frames
from .errors import ConfigError

SPECTRAL_SCALES = (64, 128, 256, 512, 1024, 2048)


@dataclass(frozen=True)
class CodecConfig:
    strides: tuple[int, ...] = (5, 5, 4, 2)
    kernels: tuple[int, ...] = (7, 7, 7, 5)
    base_channels: int = 16
    lstm_layers: int = 2
    n_sources: int = 4
    sample_rate: int = 22050
    context_seconds: float = 4.0
    use_skips: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.strides) != 4 or len(self.kernels) != 4:
            raise ConfigError("strides and kernels must list exactly 4 entries")
        if any(s < 1 for s in self.strides):
            raise ConfigError(f"strides must be positive: {self.strides}")
        if any(k % 2 == 0 or k < 1 for k in self.kernels):
            raise ConfigError(f"kernels must be odd and positive: {self.kernels}")
        if self.base_channels < 1 or self.lstm_layers < 1 or self.n_sources < 1:
            raise ConfigError("base_channels, lstm_layers and n_sources must be >= 1")
        context = self.context_seconds * self.sample_rate
        if abs(context - round(context)) > 1e-9 or round(context) % self.fold != 0:
            raise ConfigError(
                f"context_seconds*sample_rate = {context:g} must be divisible by the "
                f"stride product (fold reduction) {self.fold}"
            )

    @property
    def fold(self) -> int:
        f = 1
        for s in self.strides:
            f *= s
        return f

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2 ** len(self.strides)

    @property
    def context_samples(self) -> int:
        return int(round(self.context_seconds * self.sample_rate))

    @property
    def latent_rate(self) -> float:
        return self.sample_rate / self.fold


@dataclass(frozen=True)
class RvqConfig:
    n_codebooks: int = 12
    codebook_size: int = 4096
    ema_decay: float = 0.97
    reinit_threshold: float = 2.0
    beta: float = 0.25
    include_encoder_anchor: bool = True
    kmeans_iters: int = 20

    def __post_init__(self):
        if self.n_codebooks < 1 or self.codebook_size < 1:
            raise ConfigError("n_codebooks and codebook_size must be >= 1")
        if self.codebook_size > 65536:
            raise ConfigError("codebook_size must fit 16-bit codes")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in (0, 1), got {self.ema_decay}")


@dataclass(frozen=True)
class LossWeights:
    spec: float = 1.0
    rec: float = 10.0
    comm: float = 1.0


def compression_factor(
    sample_rate: int = 22050, bits_per_sample: int = 16, latent_rate: float = 110.25, depth: int = 12, bits_per_code: int = 12
) -> float:
    """Source bitrate over code-grid bitrate."""
    return (sample_rate * bits_per_sample) / (latent_rate * depth * bits_per_code)


class ResidualUnit(nn.Module):
    """Three same-length conv layers with BN + PReLU, plus a residual add."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.body = nn.Sequential(
            *[
                layer
                for _ in range(3)
                for layer in (
                    nn.Conv1d(channels, channels, kernel, padding=kernel // 2),
                    nn.BatchNorm1d(channels),
                    nn.PReLU(channels),
                )
            ]
        )

    def forward(self, x):
        return x + self.body(x)


class EncoderBlock(nn.Module):
    def __init__(self, c_in: int, kernel: int, stride: int):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv1d(c_in, 2 * c_in, kernel, stride=stride, padding=kernel // 2),
            nn.BatchNorm1d(2 * c_in),
            nn.PReLU(2 * c_in),
        )
        self.res = ResidualUnit(2 * c_in, kernel)

    def forward(self, x):
        return self.res(self.down(x))


class DecoderBlock(nn.Module):
    def __init__(self, c_in: int, kernel: int, stride: int):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose1d(
                c_in, c_in // 2, kernel, stride=stride, padding=kernel // 2, output_padding=stride - 1
            ),
            nn.BatchNorm1d(c_in // 2),
            nn.PReLU(c_in // 2),
        )
        self.res = ResidualUnit(c_in // 2, kernel)

    def forward(self, x):
        return self.res(self.up(x))


@dataclass
class CodecOutput:
    estimates: torch.Tensor  # (B, n_sources, T)
    loss_spec: torch.Tensor
    loss_rec: torch.Tensor
    loss_comm: torch.Tensor
    loss_total: torch.Tensor
    quantized: rvq.QuantizeResult
    latent: torch.Tensor


class CodecModel(nn.Module):
    def __init__(self, config: CodecConfig, rvq_config: RvqConfig = RvqConfig()):
        super().__init__()
        self.config = config
        self.rvq_config = rvq_config
        bc = config.base_channels

        self.pre = nn.Conv1d(1, bc, 3, padding=1)
        self.enc_blocks = nn.ModuleList(
            EncoderBlock(bc * 2**i, k, s) for i, (k, s) in enumerate(zip(config.kernels, config.strides))
        )
        latent = config.latent_channels
        self.lstm = nn.LSTM(
            latent,
            latent // 2,
            num_layers=config.lstm_layers,
            batch_first=True,
            bidirectional=True,
        )
        self.quantizer = rvq.ResidualQuantizer(
            n_codebooks=rvq_config.n_codebooks,
            codebook_size=rvq_config.codebook_size,
            dim=latent,
            decay=rvq_config.ema_decay,
            reinit_threshold=rvq_config.reinit_threshold,
            beta=rvq_config.beta,
        )
        rev = list(zip(config.kernels[::-1], config.strides[::-1]))
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(latent // 2**i, k, s) for i, (k, s) in enumerate(rev)
        )
        # bias-free so a zeroed skip is identical to no skip at all
        if config.use_skips:
            self.skip_projs = nn.ModuleList(
                nn.Conv1d(bc * 2 ** (3 - i), bc * 2 ** (3 - i), 1, bias=False) for i in range(4)
            )
        else:
            self.skip_projs = None
        self.post = nn.Conv1d(bc, config.n_sources, 3, padding=1)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """x: (B, 1, T) with T divisible by the fold reduction.

        Returns latent (B, T_c, latent_channels) and the per-block pre-stride
        activations for the decoder skips.
        """
        if x.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, T) input, got {tuple(x.shape)}")
        if x.shape[-1] % self.config.fold:
            raise ValueError(
                f"input length {x.shape[-1]} not divisible by fold {self.config.fold}; "
                "pad or window the clip first (see data.chunk)"
            )
        h = self.pre(x)
        skips = []
        for block in self.enc_blocks:
            skips.append(h)
            h = block(h)
        latent, _ = self.lstm(h.transpose(1, 2))
        return latent, skips

    def decode(self, latent: torch.Tensor, skips: list[torch.Tensor] | None = None) -> torch.Tensor:
        """latent: (B, T_c, latent_channels) -> estimates (B, n_sources, T).

        With skips=None the output depends on the latent alone (generation
        mode); passing zeroed skips gives the identical result.
        """
        if latent.ndim != 3 or latent.shape[-1] != self.config.latent_channels:
            raise ValueError(f"expected (B, T_c, {self.config.latent_channels}) latent, got {tuple(latent.shape)}")
        h = latent.transpose(1, 2)
        for i, block in enumerate(self.dec_blocks):
            h = block(h)
            if skips is not None and self.skip_projs is not None:
                h = h + self.skip_projs[i](skips[3 - i])
        return self.post(h)

    def forward(
        self,
        mixture: torch.Tensor,
        targets: torch.Tensor,
        weights: LossWeights = LossWeights(),
        scales: tuple[int, ...] = SPECTRAL_SCALES,
        spectral_compute_dtype: torch.dtype | None = torch.float64,
        pins: rvq.QuantizePins | None = None,
    ) -> CodecOutput:
        """Full training pass: encode, quantize, straight-through, decode, losses.

        `pins` re-evaluates the forward with frozen code assignments and
        stop-gradient values (the smooth surrogate that autograd actually
        differentiates); the gradient-check harness probes that function.
        """
        if targets.shape[1] != self.config.n_sources or targets.shape[-1] != mixture.shape[-1]:
            raise ValueError(f"targets shape {tuple(targets.shape)} inconsistent with mixture/config")
        latent, skips = self.encode(mixture)
        q = rvq.quantize(latent, self.quantizer, pins=pins)
        # straight-through with the pinned constants; identical to
        # rvq.straight_through when the pins come from this same call
        st = q.pins.sg_quantized_sum + (latent - q.pins.sg_latent)
        estimates = self.decode(st, skips if self.config.use_skips else None)

        loss_spec = spectral_loss(
            targets, estimates, self.config.sample_rate, scales=scales, compute_dtype=spectral_compute_dtype
        )
        loss_rec = reconstruction_loss(targets, estimates)
        loss_comm = rvq.commitment_loss(
            q.residuals,
            q.quantized_depths,
            latent,
            beta=self.rvq_config.beta,
            include_encoder_anchor=self.rvq_config.include_encoder_anchor,
            sg_residuals=q.pins.sg_residuals,
            sg_quantized=q.pins.sg_quantized,
        ) / mixture.shape[0]
        total = (
            weights.spec * loss_spec.double() + weights.rec * loss_rec.double() + weights.comm * loss_comm.double()
        )
        return CodecOutput(
            estimates=estimates,
            loss_spec=loss_spec,
            loss_rec=loss_rec,
            loss_comm=loss_comm,
            loss_total=total,
            quantized=q,
            latent=latent,
        )


def spectral_loss(
    targets: torch.Tensor,
    estimates: torch.Tensor,
    sample_rate: int,
    scales: tuple[int, ...] = SPECTRAL_SCALES,
    alpha: float = 1.0,
    eps: float = 1e-5,
    compute_dtype: torch.dtype | None = torch.float64,
) -> torch.Tensor:
    """Multi-scale mel loss.

    Per scale and source: frame mean of ||dmel||_1 + alpha*||dlog mel||_2,
    then the mean over scales, summed over sources. Batched inputs
    (B, S, T) return the batch mean; (S, T) returns the per-clip value.
    """
    if targets.shape != estimates.shape:
        raise ValueError(f"shape mismatch: {tuple(targets.shape)} vs {tuple(estimates.shape)}")
    if targets.shape[-1] < max(scales):
        raise ValueError(f"inputs of length {targets.shape[-1]} shorter than largest scale {max(scales)}")
    batched = targets.ndim == 3
    if compute_dtype is not None:
        targets = targets.to(compute_dtype)
        estimates = estimates.to(compute_dtype)
    per_scale = []
    for scale in scales:
        mel_t = mel_power_frames(targets, scale, sample_rate)
        mel_e = mel_power_frames(estimates, scale, sample_rate)
        l1 = (mel_t - mel_e).abs().sum(-1).mean(-1)
        dlog = torch.log(mel_t.clamp_min(eps)) - torch.log(mel_e.clamp_min(eps))
        # clamp guards the sqrt backward at exactly zero
        l2 = dlog.square().sum(-1).clamp_min(1e-24).sqrt().mean(-1)
        per_scale.append(l1 + alpha * l2)
    per_source = sum(per_scale) / len(scales)
    per_clip = per_source.sum(-1)
    return per_clip.mean() if batched else per_clip


def reconstruction_loss(targets: torch.Tensor, estimates: torch.Tensor) -> torch.Tensor:
    """Time-domain MSE per source, summed over sources (batch mean if batched)."""
    if targets.shape != estimates.shape:
        raise ValueError(f"shape mismatch: {tuple(targets.shape)} vs {tuple(estimates.shape)}")
    per_clip = (targets - estimates).square().mean(-1).sum(-1)
    return per_clip.mean() if targets.ndim == 3 else per_clip


# single-clip conveniences used by the CLI commands and evaluation ------------


def waveform_to_tensor(w: Waveform, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(w.samples)).to(dtype).reshape(1, 1, -1)


@torch.no_grad()
def encode_clip(model: CodecModel, w: Waveform) -> tuple[torch.Tensor, list[torch.Tensor], rvq.CodeGrid]:
    """Encode one clip to (latent, skips, code grid); model must be in eval mode."""
    if w.sample_rate != model.config.sample_rate:
        raise ValueError(f"clip rate {w.sample_rate} != model rate {model.config.sample_rate}")
    dtype = next(model.parameters()).dtype
    latent, skips = model.encode(waveform_to_tensor(w, dtype))
    q = rvq.quantize(latent, model.quantizer)
    return latent, skips, q.code_grid(model.rvq_config.codebook_size)


@torch.no_grad()
def decode_grid(model: CodecModel, grid: rvq.CodeGrid, skips: list[torch.Tensor] | None = None) -> np.ndarray:
    """Decode a code grid to (n_sources, T) samples; no encoder pass needed."""
    latent = rvq.dequantize(grid, model.quantizer).unsqueeze(0)
    return model.decode(latent, skips).squeeze(0).double().numpy()


@torch.no_grad()
def separate_clip(model: CodecModel, w: Waveform) -> np.ndarray:
    """Mixture clip -> (n_sources, T) stem estimates through the full codec."""
    if w.sample_rate != model.config.sample_rate:
        raise ValueError(f"clip rate {w.sample_rate} != model rate {model.config.sample_rate}")
    dtype = next(model.parameters()).dtype
    x = waveform_to_tensor(w, dtype)
    latent, skips = model.encode(x)
    q = rvq.quantize(latent, model.quantizer)
    estimates = model.decode(q.quantized, skips if model.config.use_skips else None)
    return estimates.squeeze(0).double().numpy()
