"""Residual vector quantizer.

A hierarchy of codebooks quantizes each latent frame in stages: every depth
snaps the remaining residual to its nearest codebook vector and passes the
new residual on. Codebook vectors are ordinary parameters trained by the
commitment loss; usage statistics are tracked as an exponential moving
average of assignment counts, and rarely used vectors are re-seeded from
encoder frames.

Gradient contract (relied on by the finite-difference harness in codec):
  * residual recursion subtracts stop-gradient quantized vectors, so
    residuals carry encoder gradients only
  * the first commitment term is the only gradient path into codebooks
  * `QuantizePins` freezes every stop-gradient value and the argmin
    decisions, which makes the loss a smooth function of the parameters
    that finite differences can probe
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

CODE_GRID_MAGIC = b"CGRD"


@dataclass(frozen=True)
class CodeGrid:
    """Quantized clip: codes[t, d] is the index chosen at position t, depth d."""

    codes: np.ndarray  # (T_c, Q) integer
    n_cb: int

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.int64)
        object.__setattr__(self, "codes", codes)
        if codes.ndim != 2:
            raise ValueError(f"codes must be 2-D (positions x depths), got {codes.shape}")
        if self.n_cb < 1 or self.n_cb > 65536:
            raise ValueError(f"n_cb must fit 16-bit codes, got {self.n_cb}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.n_cb):
            raise ValueError(f"codes out of range [0, {self.n_cb})")

    @property
    def length(self) -> int:
        return self.codes.shape[0]

    @property
    def depth(self) -> int:
        return self.codes.shape[1]


def save_code_grid(path, grid: CodeGrid) -> None:
    """Little-endian layout: magic 'CGRD', u32 T_c, u32 Q, u32 N_cb, u16 codes row-major."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = CODE_GRID_MAGIC + struct.pack("<III", grid.length, grid.depth, grid.n_cb)
    body = grid.codes.astype("<u2").tobytes()
    path.write_bytes(header + body)


def load_code_grid(path) -> CodeGrid:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CODE_GRID_MAGIC:
        raise ValueError(f"{path}: not a code-grid file")
    t_c, q, n_cb = struct.unpack("<III", raw[4:16])
    expected = 16 + 2 * t_c * q
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated code-grid file ({len(raw)} vs {expected} bytes)")
    codes = np.frombuffer(raw[16:], dtype="<u2").astype(np.int64).reshape(t_c, q)
    return CodeGrid(codes=codes, n_cb=n_cb)


class Codebook(nn.Module):
    """One codebook: learnable vectors plus EMA usage counts (float64)."""

    def __init__(self, n_cb: int, dim: int):
        super().__init__()
        self.vectors = nn.Parameter(torch.randn(n_cb, dim) * 0.1)
        self.register_buffer("ema_usage", torch.ones(n_cb, dtype=torch.float64))

    @property
    def n_cb(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class ResidualQuantizer(nn.Module):
    def __init__(
        self,
        n_codebooks: int = 12,
        codebook_size: int = 4096,
        dim: int = 256,
        decay: float = 0.97,
        reinit_threshold: float = 2.0,
        beta: float = 0.25,
    ):
        super().__init__()
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must be in (0, 1), got {decay}")
        self.codebooks = nn.ModuleList(Codebook(codebook_size, dim) for _ in range(n_codebooks))
        self.decay = decay
        self.reinit_threshold = reinit_threshold
        self.beta = beta

    @property
    def depth(self) -> int:
        return len(self.codebooks)

    @property
    def codebook_size(self) -> int:
        return self.codebooks[0].n_cb

    @property
    def dim(self) -> int:
        return self.codebooks[0].dim


@dataclass
class QuantizePins:
    """Frozen argmin decisions and stop-gradient values from one quantize call.

    Re-running quantize with pins evaluates the same smooth function autograd
    differentiates: indices stay fixed and every sg[...] keeps its pinned value.
    """

    indices: list[torch.Tensor]
    sg_residuals: list[torch.Tensor]
    sg_quantized: list[torch.Tensor]
    sg_latent: torch.Tensor
    sg_quantized_sum: torch.Tensor


@dataclass
class QuantizeResult:
    quantized: torch.Tensor  # sum of chosen vectors, grad -> codebooks
    codes: torch.Tensor  # (..., Q) long
    residuals: list[torch.Tensor] = field(default_factory=list)  # r^d, grad -> encoder
    quantized_depths: list[torch.Tensor] = field(default_factory=list)  # z_q^d, grad -> codebooks
    pins: QuantizePins | None = None

    @property
    def final_residual(self) -> torch.Tensor:
        last = self.residuals[-1]
        return last - self.pins.sg_quantized[-1]

    def code_grid(self, n_cb: int | None = None) -> CodeGrid:
        codes = self.codes.detach().cpu().numpy()
        if codes.ndim == 3:
            if codes.shape[0] != 1:
                raise ValueError("code_grid() needs an unbatched result; use code_grids()")
            codes = codes[0]
        return CodeGrid(codes=codes, n_cb=n_cb or int(codes.max()) + 1)

    def code_grids(self, n_cb: int) -> list[CodeGrid]:
        codes = self.codes.detach().cpu().numpy()
        return [CodeGrid(codes=c, n_cb=n_cb) for c in codes]


def _nearest_codes(residual: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Lowest-index argmin over squared Euclidean distance."""
    flat = residual.reshape(-1, residual.shape[-1])
    dists = (
        flat.square().sum(-1, keepdim=True)
        - 2.0 * flat @ vectors.T
        + vectors.square().sum(-1)
    )
    min_vals = dists.min(dim=-1, keepdim=True).values
    n = vectors.shape[0]
    candidates = torch.where(
        dists == min_vals, torch.arange(n, device=dists.device), torch.full((), n, device=dists.device)
    )
    return candidates.min(dim=-1).values.reshape(residual.shape[:-1])


def quantize(latent: torch.Tensor, rq: ResidualQuantizer, pins: QuantizePins | None = None) -> QuantizeResult:
    """Cascade nearest-neighbor assignment over all depths.

    latent: (..., D). Returns live residuals/quantized per depth plus the
    pins capturing this call's discrete decisions and sg values.
    """
    if latent.shape[-1] != rq.dim:
        raise ValueError(f"latent dim {latent.shape[-1]} != quantizer dim {rq.dim}")
    if not torch.isfinite(latent.detach()).all():
        raise ValueError("latent contains non-finite values")
    live_pins = pins is None
    if live_pins:
        pins = QuantizePins([], [], [], latent.detach(), torch.zeros(()))

    residual = latent
    quantized = torch.zeros_like(latent)
    residuals, quantized_depths, codes = [], [], []
    for d, cb in enumerate(rq.codebooks):
        if live_pins:
            with torch.no_grad():
                idx = _nearest_codes(residual, cb.vectors)
            pins.indices.append(idx)
        else:
            idx = pins.indices[d]
        z_q = cb.vectors[idx]
        residuals.append(residual)
        quantized_depths.append(z_q)
        codes.append(idx)
        if live_pins:
            pins.sg_residuals.append(residual.detach())
            pins.sg_quantized.append(z_q.detach())
        quantized = quantized + z_q
        residual = residual - pins.sg_quantized[d]
    if live_pins:
        pins.sg_quantized_sum = quantized.detach()
    return QuantizeResult(
        quantized=quantized,
        codes=torch.stack(codes, dim=-1),
        residuals=residuals,
        quantized_depths=quantized_depths,
        pins=pins,
    )


def dequantize(grid, rq: ResidualQuantizer) -> torch.Tensor:
    """Sum the indexed vectors over depths; inverse of quantize's code path."""
    if isinstance(grid, CodeGrid):
        codes = torch.from_numpy(grid.codes)
    else:
        codes = grid
    if codes.shape[-1] != rq.depth:
        raise ValueError(f"grid depth {codes.shape[-1]} != quantizer depth {rq.depth}")
    out = torch.zeros(*codes.shape[:-1], rq.dim, dtype=rq.codebooks[0].vectors.dtype)
    for d, cb in enumerate(rq.codebooks):
        idx = codes[..., d]
        if idx.min() < 0 or idx.max() >= cb.n_cb:
            raise ValueError(f"depth {d}: code out of range [0, {cb.n_cb})")
        out = out + cb.vectors[idx]
    return out


def straight_through(latent: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value is exactly `quantized`; gradient w.r.t. `latent` is identity."""
    if latent.shape != quantized.shape:
        raise ValueError(f"shape mismatch: {tuple(latent.shape)} vs {tuple(quantized.shape)}")
    return quantized.detach() + (latent - latent.detach())


def commitment_loss(
    residuals: list[torch.Tensor],
    quantized_depths: list[torch.Tensor],
    encoder_output: torch.Tensor,
    beta: float = 0.25,
    include_encoder_anchor: bool = True,
    sg_residuals: list[torch.Tensor] | None = None,
    sg_quantized: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Per depth: ||sg[r^d] - z_q^d||^2 + beta*||r^d - sg[z_q^d]||^2
    + ||z_e - sg[z_q^d]||^2, summed over depths and all tensor elements.

    The third term anchors the raw encoder output at every depth; its intent
    is debatable, so `include_encoder_anchor` can drop it.
    """
    if len(residuals) != len(quantized_depths):
        raise ValueError(f"depth mismatch: {len(residuals)} residuals vs {len(quantized_depths)} quantized")
    if sg_residuals is None:
        sg_residuals = [r.detach() for r in residuals]
    if sg_quantized is None:
        sg_quantized = [q.detach() for q in quantized_depths]
    total = torch.zeros((), dtype=encoder_output.dtype, device=encoder_output.device)
    for r, z_q, sg_r, sg_q in zip(residuals, quantized_depths, sg_residuals, sg_quantized):
        total = total + (sg_r - z_q).square().sum()
        total = total + beta * (r - sg_q).square().sum()
        if include_encoder_anchor:
            total = total + (encoder_output - sg_q).square().sum()
    return total


@torch.no_grad()
def ema_update(rq: ResidualQuantizer, codes: torch.Tensor) -> None:
    """usage <- decay*usage + (1-decay)*assignment_count, per vector."""
    if codes.shape[-1] != rq.depth:
        raise ValueError(f"codes depth {codes.shape[-1]} != quantizer depth {rq.depth}")
    flat = codes.reshape(-1, rq.depth)
    for d, cb in enumerate(rq.codebooks):
        counts = torch.bincount(flat[:, d], minlength=cb.n_cb).to(torch.float64)
        cb.ema_usage.mul_(rq.decay).add_(counts, alpha=1.0 - rq.decay)


@torch.no_grad()
def reinit_dead_codes(rq: ResidualQuantizer, encoded_batch: torch.Tensor, rng_seed: int) -> int:
    """Replace vectors whose EMA usage fell below the threshold with random
    rows of `encoded_batch`; their usage restarts at the threshold. Returns
    the number of replaced vectors."""
    frames = encoded_batch.reshape(-1, encoded_batch.shape[-1])
    if frames.shape[0] == 0:
        raise ValueError("encoded_batch is empty")
    if frames.shape[-1] != rq.dim:
        raise ValueError(f"encoded_batch dim {frames.shape[-1]} != quantizer dim {rq.dim}")
    gen = torch.Generator().manual_seed(rng_seed)
    replaced = 0
    for cb in rq.codebooks:
        dead = cb.ema_usage < rq.reinit_threshold
        k = int(dead.sum())
        if k == 0:
            continue
        picks = torch.randint(frames.shape[0], (k,), generator=gen)
        cb.vectors.data[dead] = frames[picks].to(cb.vectors.dtype)
        cb.ema_usage[dead] = rq.reinit_threshold
        replaced += k
    return replaced


def kmeans_init(encoded_batch: torch.Tensor, n_cb: int, iters: int = 20, seed: int = 0) -> Codebook:
    """Codebook from k-means (k-means++ seeding) over encoder frames.

    Usage counts start at the cluster populations scaled to mean 1.
    """
    frames = encoded_batch.detach().reshape(-1, encoded_batch.shape[-1]).to(torch.float64)
    m = frames.shape[0]
    if m < n_cb:
        raise ValueError(f"init batch has {m} frames < {n_cb} codebook vectors; enlarge the batch")
    gen = torch.Generator().manual_seed(seed)

    centroids = torch.empty(n_cb, frames.shape[1], dtype=torch.float64)
    centroids[0] = frames[torch.randint(m, (1,), generator=gen)]
    min_d2 = (frames - centroids[0]).square().sum(-1)
    for k in range(1, n_cb):
        total = min_d2.sum()
        if total <= 0:
            pick = torch.randint(m, (1,), generator=gen)
        else:
            pick = torch.multinomial(min_d2 / total, 1, generator=gen)
        centroids[k] = frames[pick]
        min_d2 = torch.minimum(min_d2, (frames - centroids[k]).square().sum(-1))

    for _ in range(iters):
        assign = _nearest_codes(frames, centroids)
        counts = torch.bincount(assign, minlength=n_cb).to(torch.float64)
        sums = torch.zeros_like(centroids)
        sums.index_add_(0, assign, frames)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty].unsqueeze(-1)

    assign = _nearest_codes(frames, centroids)
    counts = torch.bincount(assign, minlength=n_cb).to(torch.float64)
    cb = Codebook(n_cb, frames.shape[1])
    cb.vectors.data = centroids.to(cb.vectors.dtype)
    cb.ema_usage.copy_(counts * (n_cb / m))
    return cb
