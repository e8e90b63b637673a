"""Codebook-utilization benchmark on synthetic clustered embeddings."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from .estimator import QuantizedAutoencoder

DEFAULT_SIZES = (1024, 2048, 4096, 8192, 16384)
VARIANTS = {
    "classic": dict(quantizer="classic", n_layers=1, rotation=False),
    "single-slmvq": dict(quantizer="slm", n_layers=1, rotation=True),
    "slmvq": dict(quantizer="slm", n_layers=2, rotation=True),
}


def clustered_embeddings(n: int, dim: int = 32, n_clusters: int = 512, spread: float = 0.3,
                         seed: int = 0, centers_seed: int = 0) -> np.ndarray:
    """Gaussian mixture: unit-variance centres (fixed by ``centers_seed``) plus isotropic noise."""
    centers = np.random.default_rng(centers_seed).standard_normal((n_clusters, dim))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n_clusters, size=n)
    return (centers[idx] + spread * rng.standard_normal((n, dim))).astype(np.float32)


@dataclass(frozen=True)
class BenchmarkResult:
    variant: str
    codebook_size: int
    utilization: float
    perplexity: float
    reconstruction_mse: float
    seconds: float


def run_utilization(variants: Sequence[str] = tuple(VARIANTS), sizes: Sequence[int] = DEFAULT_SIZES,
                    n_train: int = 262144, n_eval: int = 65536, dim: int = 32,
                    n_steps: int = 400, seed: int = 0, **estimator_params
                    ) -> Dict[Tuple[str, int], BenchmarkResult]:
    """Train one autoencoder per (variant, size) and measure layer-1 utilization on held-out data."""
    train = clustered_embeddings(n_train, dim, seed=seed + 1, centers_seed=seed)
    held_out = clustered_embeddings(n_eval, dim, seed=seed + 2, centers_seed=seed)
    results = {}
    for variant in variants:
        for k in sizes:
            t0 = time.time()
            est = QuantizedAutoencoder(n_codes=k, latent_dim=dim, n_steps=n_steps,
                                       random_state=seed + 1, **VARIANTS[variant],
                                       **estimator_params).fit(train)
            rep = est.utilization(held_out)
            results[(variant, k)] = BenchmarkResult(variant, k, rep.utilization, rep.perplexity,
                                                    -est.score(held_out), time.time() - t0)
    return results


def format_table(results: Dict[Tuple[str, int], BenchmarkResult]) -> str:
    sizes = sorted({k for _, k in results})
    variants = list(dict.fromkeys(v for v, _ in results))
    lines = ["variant".ljust(14) + "".join(str(k).rjust(8) for k in sizes)]
    for v in variants:
        cells = [f"{100 * results[(v, k)].utilization:7.1f}%" if (v, k) in results else " " * 8
                 for k in sizes]
        lines.append(v.ljust(14) + "".join(cells))
    return "\n".join(lines)
