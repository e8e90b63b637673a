"""Vector quantizers: frozen-codebook SLM-VQ, classic EMA VQ, rotation-trick transport.

Shapes follow ``(..., dim)``; every quantizer flattens leading axes internally.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8
ANGLE_TOL = 1e-6
# direct (x - c)^2 distances below this many elements, expanded form above
_DIRECT_DISTANCE_LIMIT = 1 << 22


class VQLossTerms(NamedTuple):
    codebook_term: torch.Tensor
    commitment_term: torch.Tensor
    beta: float = 1.0

    @property
    def total(self) -> torch.Tensor:
        return self.codebook_term + self.commitment_term

    def __add__(self, other):  # type: ignore[override]
        return VQLossTerms(self.codebook_term + other.codebook_term,
                           self.commitment_term + other.commitment_term, self.beta)


def vq_loss(x: torch.Tensor, x_hat: torch.Tensor, beta: float = 1.0) -> VQLossTerms:
    """Codebook and commitment terms with mean-square reduction.

    The codebook term only reaches ``x_hat`` and the commitment term only
    reaches ``x``.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"vq_loss shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    codebook = F.mse_loss(x_hat, x.detach())
    commitment = beta * F.mse_loss(x, x_hat.detach())
    return VQLossTerms(codebook, commitment, beta)


def pairwise_sq_distances(x: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if x.shape[0] * table.shape[0] * table.shape[1] <= _DIRECT_DISTANCE_LIMIT:
        return (x[:, None, :] - table[None, :, :]).pow(2).sum(-1)
    d = x.pow(2).sum(1, keepdim=True) - 2.0 * x @ table.T + table.pow(2).sum(1)[None, :]
    return d.clamp_min_(0.0)


def nearest_codes(x: torch.Tensor, table: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest row of ``table`` for each row of ``x``; lowest index wins ties."""
    if x.shape[-1] != table.shape[-1]:
        raise ShapeError(f"dimension mismatch: input {x.shape[-1]} vs codes {table.shape[-1]}")
    flat = x.reshape(-1, x.shape[-1])
    if flat.shape[0] == 0:
        return torch.zeros(x.shape[:-1], dtype=torch.long, device=x.device)
    with torch.no_grad():
        out = [pairwise_sq_distances(part, table).argmin(dim=1)
               for part in torch.split(flat, chunk)]
    return torch.cat(out).reshape(x.shape[:-1])


# --- rotation trick -----------------------------------------------------------

def rotation_matrix(e: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Minimal rotation taking direction ``e`` onto direction ``q`` (dense, for small dims)."""
    e_hat = e / np.linalg.norm(e)
    q_hat = q / np.linalg.norm(q)
    r = e_hat + q_hat
    r = r / np.linalg.norm(r)
    n = e.shape[0]
    return np.eye(n) - 2.0 * np.outer(r, r) + 2.0 * np.outer(q_hat, e_hat)


def rotation_transport(e: torch.Tensor, q: torch.Tensor, eps: float = NORM_EPS,
                       angle_tol: float = ANGLE_TOL) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``q`` in the forward pass with rotation-scaled gradients to ``e``.

    Backward treats the output as ``(|q|/|e|) R e`` with the rotation ``R``
    and the scale held constant, so an upstream gradient ``g`` reaches ``e``
    as ``(|q|/|e|) R^T g``. Rows where ``|e|`` or ``|q|`` is at most ``eps``
    or where ``e`` and ``q`` are anti-parallel within ``angle_tol`` radians
    use the straight-through estimator instead. No gradient flows to ``q``.

    Returns ``(output, fallback_mask)``.
    """
    if e.shape != q.shape:
        raise ShapeError(f"rotation shape mismatch: {tuple(e.shape)} vs {tuple(q.shape)}")
    q = q.detach()
    with torch.no_grad():
        e_norm = e.detach().norm(dim=-1, keepdim=True)
        q_norm = q.norm(dim=-1, keepdim=True)
        e_hat = e.detach() / e_norm.clamp_min(eps)
        q_hat = q / q_norm.clamp_min(eps)
        # |e_hat + q_hat| = 2 cos(theta / 2), roughly the angular gap to anti-parallel
        bisector = e_hat + q_hat
        b_norm = bisector.norm(dim=-1, keepdim=True)
        fallback = (e_norm <= eps) | (q_norm <= eps) | (b_norm <= angle_tol)
        r = bisector / b_norm.clamp_min(angle_tol)
        scale = torch.where(fallback, torch.ones_like(q_norm), q_norm / e_norm.clamp_min(eps))
    rotated = (e - 2.0 * (e * r).sum(-1, keepdim=True) * r
               + 2.0 * (e * e_hat).sum(-1, keepdim=True) * q_hat)
    surrogate = torch.where(fallback, e, scale * rotated)
    out = q + (surrogate - surrogate.detach())
    return out, fallback.squeeze(-1)


def straight_through(e: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return q.detach() + (e - e.detach())


def rotation_forward_backward(e_vec, q_vec, eps: float = NORM_EPS, angle_tol: float = ANGLE_TOL):
    """Single-vector view of the rotation transport.

    Returns ``(output, transform, used_fallback)`` where ``transform(g)``
    maps an upstream gradient to the gradient delivered to ``e_vec``.
    """
    e = torch.as_tensor(np.asarray(e_vec, dtype=np.float64)).clone().requires_grad_(True)
    q = torch.as_tensor(np.asarray(q_vec, dtype=np.float64))
    out, fallback = rotation_transport(e[None], q[None], eps, angle_tol)

    def transform(g):
        g = torch.as_tensor(np.asarray(g, dtype=np.float64))
        (grad,) = torch.autograd.grad(out[0], e, grad_outputs=g, retain_graph=True)
        return grad.numpy()

    return out[0].detach().numpy(), transform, bool(fallback.item())


# --- quantizer layers -------------------------------------------------------

def _make_reparam(code_dim: int, dim: int, depth: int) -> nn.Module:
    if depth < 1:
        raise ValueError("reparameterization depth must be >= 1")
    layers: List[nn.Module] = []
    in_dim = code_dim
    for i in range(depth):
        lin = nn.Linear(in_dim, dim)
        layers.append(lin)
        if i < depth - 1:
            layers.append(nn.GELU())
        in_dim = dim
    seq = nn.Sequential(*layers)
    if depth == 1 and code_dim == dim:
        with torch.no_grad():
            seq[0].weight.copy_(torch.eye(dim))
            seq[0].bias.zero_()
    return seq


def latent_stats(latents: torch.Tensor):
    """(mean vector, mean distance to it, mean norm) of a batch of latents."""
    flat = latents.reshape(-1, latents.shape[-1]).detach().double()
    mean = flat.mean(0)
    spread = (flat - mean).norm(dim=-1).mean().clamp_min(NORM_EPS)
    norm = flat.norm(dim=-1).mean().clamp_min(NORM_EPS)
    return mean.float(), float(spread), float(norm)


def covariance_sqrt(latents: torch.Tensor) -> torch.Tensor:
    """Symmetric square root of the latent covariance (eigenvalues clamped at 0)."""
    flat = latents.reshape(-1, latents.shape[-1]).detach().double()
    centered = flat - flat.mean(0)
    cov = centered.T @ centered / max(1, flat.shape[0] - 1)
    vals, vecs = torch.linalg.eigh(cov)
    return ((vecs * vals.clamp_min(0).sqrt()) @ vecs.T).float()


class QuantizerLayer(nn.Module):
    """Shared interface: ``forward(x) -> (output, codes, VQLossTerms)``."""

    n_codes: int
    dim: int

    def __init__(self):
        super().__init__()
        self.register_buffer("initialized", torch.tensor(False))
        self.fallback_count = 0

    def effective_codes(self) -> torch.Tensor:
        raise NotImplementedError

    def quantize(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Pure lookup: ``(codes, vectors)`` with vectors rows of the effective table."""
        table = self.effective_codes()
        codes = nearest_codes(x.detach(), table.detach())
        return codes, F.embedding(codes, table)

    def lookup(self, codes: torch.Tensor) -> torch.Tensor:
        return F.embedding(codes, self.effective_codes())

    @torch.no_grad()
    def init_from_latents(self, latents: torch.Tensor, seed: int = 0) -> None:
        raise NotImplementedError


class SLMVQLayer(QuantizerLayer):
    """Frozen random codebook mapped through a learnable linear reparameterization.

    The codebook is a buffer and never changes after initialization; the
    effective code table is ``reparam(codebook)``.
    """

    def __init__(self, n_codes: int, dim: int, code_dim: Optional[int] = None,
                 reparam_depth: int = 1, rotation: bool = True, beta: float = 1.0,
                 seed: int = 0):
        super().__init__()
        self.n_codes = n_codes
        self.dim = dim
        self.code_dim = code_dim or dim
        self.rotation = rotation
        self.beta = beta
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("codebook", torch.randn(n_codes, self.code_dim, generator=gen))
        self.reparam = _make_reparam(self.code_dim, dim, reparam_depth)

    def effective_codes(self) -> torch.Tensor:
        return self.reparam(self.codebook)

    @torch.no_grad()
    def init_from_latents(self, latents: torch.Tensor, seed: int = 0) -> None:
        """Unit-Gaussian rows scaled to the mean latent norm.

        The reparameterization starts as the affine map sending these rows to a
        cloud with the latents' mean and covariance, so no region of the latent
        distribution begins without nearby codes.
        """
        gen = torch.Generator().manual_seed(seed)
        book = torch.randn(self.n_codes, self.code_dim, generator=gen)
        mean, spread, norm = latent_stats(latents)
        book = book / book.norm(dim=-1, keepdim=True) * norm
        self.codebook.copy_(book.to(self.codebook))
        last = self.reparam[-1]
        if len(self.reparam) == 1 and self.code_dim == self.dim:
            scale = math.sqrt(self.code_dim) / norm
            last.weight.copy_(covariance_sqrt(latents) * scale)
        last.bias.copy_(mean.to(last.bias))
        self.initialized.fill_(True)

    def forward(self, x: torch.Tensor):
        codes, x_hat = self.quantize(x)
        terms = vq_loss(x, x_hat, self.beta)
        if self.rotation:
            out, fallback = rotation_transport(x, x_hat)
            n = int(fallback.sum())
            if n:
                self.fallback_count += n
                logger.debug("rotation fallback on %d vectors", n)
        else:
            out = straight_through(x, x_hat)
        return out, codes, terms


class ClassicVQLayer(QuantizerLayer):
    """Baseline VQ: codebook updated by exponential moving averages, straight-through gradients."""

    def __init__(self, n_codes: int, dim: int, decay: float = 0.99, beta: float = 1.0,
                 eps: float = 1e-5, seed: int = 0):
        super().__init__()
        self.n_codes = n_codes
        self.dim = dim
        self.decay = decay
        self.beta = beta
        self.eps = eps
        gen = torch.Generator().manual_seed(seed)
        book = torch.randn(n_codes, dim, generator=gen)
        self.register_buffer("codebook", book)
        self.register_buffer("ema_count", torch.ones(n_codes))
        self.register_buffer("ema_sum", book.clone())

    def effective_codes(self) -> torch.Tensor:
        return self.codebook

    @torch.no_grad()
    def init_from_latents(self, latents: torch.Tensor, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        book = torch.randn(self.n_codes, self.dim, generator=gen)
        mean, spread, _ = latent_stats(latents)
        book = (mean + book / book.norm(dim=-1, keepdim=True) * spread).to(self.codebook)
        self.codebook.copy_(book)
        self.ema_sum.copy_(book)
        self.ema_count.fill_(1.0)
        self.initialized.fill_(True)

    @torch.no_grad()
    def _ema_update(self, x: torch.Tensor, codes: torch.Tensor) -> None:
        flat = x.reshape(-1, self.dim).to(self.codebook.dtype)
        onehot = F.one_hot(codes.reshape(-1), self.n_codes).to(flat.dtype)
        self.ema_count.mul_(self.decay).add_(onehot.sum(0), alpha=1 - self.decay)
        self.ema_sum.mul_(self.decay).add_(onehot.T @ flat, alpha=1 - self.decay)
        total = self.ema_count.sum()
        smoothed = (self.ema_count + self.eps) / (total + self.n_codes * self.eps) * total
        self.codebook.copy_(self.ema_sum / smoothed[:, None])

    def forward(self, x: torch.Tensor):
        codes, x_hat = self.quantize(x)
        terms = vq_loss(x, x_hat, self.beta)
        if self.training:
            self._ema_update(x.detach(), codes)
        return straight_through(x, x_hat), codes, terms


@dataclass
class QuantizerOutput:
    first: torch.Tensor            # layer-1 output, the only tensor the decoder sees
    summed: torch.Tensor           # detached sum over layers, for diagnostics
    codes: torch.Tensor            # (n_layers, ...)
    terms: VQLossTerms

    @property
    def loss(self) -> torch.Tensor:
        return self.terms.total


class ResidualQuantizer(nn.Module):
    """Residual stack trained with several layers, inferred with the first only.

    Later layers quantize ``e - layer1(e)`` and contribute only through their
    VQ loss terms.
    """

    def __init__(self, n_codes: int, dim: int, n_layers: int = 2, kind: str = "slm",
                 reparam_depth: int = 1, rotation: bool = True, beta: float = 1.0,
                 ema_decay: float = 0.99, seed: int = 0):
        super().__init__()
        if kind not in ("slm", "classic"):
            raise ValueError(f"unknown quantizer kind {kind!r}")
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.kind = kind
        self.n_codes = n_codes
        self.dim = dim
        layers = []
        for i in range(n_layers):
            if kind == "slm":
                layers.append(SLMVQLayer(n_codes, dim, reparam_depth=reparam_depth,
                                         rotation=rotation, beta=beta, seed=seed + i))
            else:
                layers.append(ClassicVQLayer(n_codes, dim, decay=ema_decay, beta=beta,
                                             seed=seed + i))
        self.layers = nn.ModuleList(layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @torch.no_grad()
    def init_from_latents(self, e: torch.Tensor, seed: int = 0) -> None:
        residual = e.detach()
        for i, layer in enumerate(self.layers):
            layer.init_from_latents(residual, seed=seed + i)
            _, vec = layer.quantize(residual)
            residual = residual - vec

    def forward(self, e: torch.Tensor) -> QuantizerOutput:
        first, codes, terms = self.layers[0](e)
        all_codes = [codes]
        summed = first.detach()
        residual = e - F.embedding(codes, self.layers[0].effective_codes()).detach()
        for layer in self.layers[1:]:
            out, c, t = layer(residual)
            terms = terms + t
            all_codes.append(c)
            summed = summed + out.detach()
            residual = residual - layer.lookup(c).detach()
        return QuantizerOutput(first, summed, torch.stack(all_codes), terms)

    @torch.no_grad()
    def infer(self, e: torch.Tensor) -> torch.Tensor:
        """Layer-1 codes only."""
        codes, _ = self.layers[0].quantize(e)
        return codes

    @torch.no_grad()
    def lookup(self, codes: torch.Tensor) -> torch.Tensor:
        return self.layers[0].lookup(codes)

    @property
    def fallback_count(self) -> int:
        return sum(layer.fallback_count for layer in self.layers)


def quantize_layer(x, entries, reparam=None):
    """Functional nearest-neighbour lookup against ``reparam(entries)``.

    ``reparam`` may be any callable on a tensor, or ``None`` for identity.
    Returns ``(codes, vectors)`` as numpy arrays.
    """
    x_t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    table = torch.as_tensor(np.asarray(entries, dtype=np.float64))
    if reparam is not None:
        with torch.no_grad():
            table = reparam(table)
    if x_t.numel() == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, table.shape[1]))
    codes = nearest_codes(x_t, table)
    return codes.numpy(), table[codes].numpy()


# --- codebook export ----------------------------------------------------------

_BOOK_MAGIC = b"HHCB"
_BOOK_VERSION = 1


def export_codebook(layer: SLMVQLayer | ClassicVQLayer, path) -> None:
    """Write ``HHCB | u16 version | u32 K | u32 code_dim | u32 n_linear`` then
    float32 LE codebook rows, then per linear map ``u32 out | u32 in`` + weight
    rows + bias. Linear maps are separated by GELU when there are several.
    """
    book = layer.codebook.detach().cpu().numpy().astype("<f4")
    linears = [m for m in getattr(layer, "reparam", nn.Sequential()) if isinstance(m, nn.Linear)]
    parts = [_BOOK_MAGIC, struct.pack("<HIII", _BOOK_VERSION, book.shape[0], book.shape[1],
                                      len(linears)), book.tobytes()]
    for lin in linears:
        w = lin.weight.detach().cpu().numpy().astype("<f4")
        b = lin.bias.detach().cpu().numpy().astype("<f4")
        parts += [struct.pack("<II", *w.shape), w.tobytes(), b.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_codebook_table(path) -> np.ndarray:
    """Read an exported codebook and return the effective (K, dim) code table."""
    data = Path(path).read_bytes()
    if data[:4] != _BOOK_MAGIC:
        raise ValueError("not a codebook export")
    version, k, code_dim, n_linear = struct.unpack_from("<HIII", data, 4)
    if version != _BOOK_VERSION:
        raise ValueError(f"unsupported codebook export version {version}")
    off = 4 + 14
    table = np.frombuffer(data, "<f4", k * code_dim, off).reshape(k, code_dim).astype(np.float64)
    off += 4 * k * code_dim
    t = torch.from_numpy(table)
    for i in range(n_linear):
        out_d, in_d = struct.unpack_from("<II", data, off)
        off += 8
        w = np.frombuffer(data, "<f4", out_d * in_d, off).reshape(out_d, in_d)
        off += 4 * out_d * in_d
        b = np.frombuffer(data, "<f4", out_d, off)
        off += 4 * out_d
        t = t @ torch.from_numpy(w.astype(np.float64)).T + torch.from_numpy(b.astype(np.float64))
        if i < n_linear - 1:
            t = F.gelu(t)
    return t.numpy()
