"""Waxman random geometric graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import FeaturedGraph, connected_components


@dataclass(frozen=True)
class WaxmanConfig:
    """Edge probability ``q * exp(-d / (s * L))`` with ``L`` the largest pairwise distance.

    ``kernel="literal"`` uses ``q * exp(-s * d)`` instead. Components smaller
    than ``min_nodes`` are discarded.
    """

    n_graphs: int = 20000
    n_nodes: int = 12
    q: float = 0.65
    s: float = 0.3
    min_nodes: int = 5
    kernel: str = "scaled"

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if self.s < 0:
            raise ValueError("s must be nonnegative")
        if self.kernel not in ("scaled", "literal"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.n_graphs < 0 or self.n_nodes < 1:
            raise ValueError("graph and node counts must be nonnegative")


def edge_probability(d, cfg: WaxmanConfig, scale: float = 1.0):
    """Connection probability at distance ``d`` (``scale`` is ``L`` for the scaled kernel)."""
    d = np.asarray(d, dtype=np.float64)
    if cfg.kernel == "literal":
        return cfg.q * np.exp(-cfg.s * d)
    if cfg.s == 0:
        return np.where(d > 0, 0.0, cfg.q) if scale > 0 else np.full_like(d, cfg.q)
    return cfg.q * np.exp(-d / (cfg.s * scale)) if scale > 0 else np.full_like(d, cfg.q)


def waxman_graph(cfg: WaxmanConfig, rng: np.random.Generator) -> FeaturedGraph | None:
    """One draw: the largest component with its node coordinates, or None if too small."""
    n = cfg.n_nodes
    pos = rng.random((n, 2))
    iu, ju = np.triu_indices(n, 1)
    d = np.linalg.norm(pos[iu] - pos[ju], axis=1)
    p = edge_probability(d, cfg, d.max() if len(d) else 0.0)
    keep = rng.random(len(d)) < p
    g = FeaturedGraph.from_edges(n, np.stack([iu[keep], ju[keep]], 1).tolist(), pos)
    comp = max(connected_components(g), key=len)
    if len(comp) < cfg.min_nodes:
        return None
    return g.subgraph(comp)


def waxman_generate(cfg: WaxmanConfig, rng: np.random.Generator) -> list[FeaturedGraph]:
    """Draw ``n_graphs`` times and keep the accepted largest components."""
    out = []
    for _ in range(cfg.n_graphs):
        g = waxman_graph(cfg, rng)
        if g is not None:
            out.append(g)
    return out
