"""Distribution distances between graph-property samples."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

from .graph import FeaturedGraph, avg_clustering, avg_node_connectivity, edge_density

KL_BINS = 20
KL_EPS = 1e-10


def _sample(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("distribution distances need nonempty samples")
    return arr


def kl_divergence(a, b, bins: int = KL_BINS, eps: float = KL_EPS) -> float:
    """KL(A || B) between histograms on shared uniform bins over the pooled range."""
    a, b = _sample(a), _sample(b)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0] + eps
    q = np.histogram(b, edges)[0] + eps
    p, q = p / p.sum(), q / q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def wasserstein_1d(a, b) -> float:
    """W1 between empirical distributions: area between the two CDFs."""
    a, b = np.sort(_sample(a)), np.sort(_sample(b))
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    fa = np.searchsorted(a, grid[:-1], side="right") / len(a)
    fb = np.searchsorted(b, grid[:-1], side="right") / len(b)
    return float(np.sum(np.abs(fa - fb) * widths))


@dataclass(frozen=True)
class MetricsReport:
    """Eight distances in table column order."""

    kl_edge_density: float
    kl_clustering: float
    kl_connectivity: float
    kl_node_features: float
    wd_edge_density: float
    wd_clustering: float
    wd_connectivity: float
    wd_node_features: float

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> tuple[float, ...]:
        return astuple(self)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names(), self.values()))

    def to_csv(self) -> str:
        return ",".join(self.names()) + "\n" + ",".join(repr(v) for v in self.values()) + "\n"

    def to_text(self) -> str:
        names = self.names()
        width = max(len(n) for n in names)
        head = "  ".join(n.rjust(width) for n in names)
        row = "  ".join(f"{v:.4f}".rjust(width) for v in self.values())
        return head + "\n" + row + "\n"


def graph_properties(graphs: Sequence[FeaturedGraph]) -> dict[str, np.ndarray]:
    """Per-graph edge density, average clustering and average node connectivity."""
    return {
        "edge_density": np.array([edge_density(g) for g in graphs]),
        "clustering": np.array([avg_clustering(g) for g in graphs]),
        "connectivity": np.array([avg_node_connectivity(g) for g in graphs]),
    }


def _feature_columns(graphs: Sequence[FeaturedGraph]) -> np.ndarray:
    return np.concatenate([g.x for g in graphs], axis=0)


def evaluate(generated: Sequence[FeaturedGraph], reference: Sequence[FeaturedGraph], ref_props: dict | None = None) -> MetricsReport:
    """All eight distances of generated against reference graphs.

    Node features are compared per coordinate and the coordinate distances
    averaged; graphs without node features score 0 on those two columns.
    """
    if not generated or not reference:
        raise ValueError("evaluation needs nonempty graph sets")
    gp = graph_properties(generated)
    rp = ref_props if ref_props is not None else graph_properties(reference)
    kl = [kl_divergence(gp[k], rp[k]) for k in ("edge_density", "clustering", "connectivity")]
    wd = [wasserstein_1d(gp[k], rp[k]) for k in ("edge_density", "clustering", "connectivity")]
    xg, xr = _feature_columns(generated), _feature_columns(reference)
    if xg.shape[1] and xg.shape[1] == xr.shape[1]:
        kl_x = float(np.mean([kl_divergence(xg[:, c], xr[:, c]) for c in range(xg.shape[1])]))
        wd_x = float(np.mean([wasserstein_1d(xg[:, c], xr[:, c]) for c in range(xg.shape[1])]))
    else:
        kl_x = wd_x = 0.0
    return MetricsReport(*kl, kl_x, *wd, wd_x)


def property_samples(graphs: Sequence[FeaturedGraph]) -> dict[str, np.ndarray]:
    """Graph properties plus one entry per node-feature coordinate."""
    props = graph_properties(graphs)
    x = _feature_columns(graphs)
    for c in range(x.shape[1]):
        props[f"node_feature_{c}"] = x[:, c]
    return props


def histograms(graphs: Sequence[FeaturedGraph], bins: int = KL_BINS, ranges: dict | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per property: (bin edges, normalized frequencies); ``ranges`` fixes shared bin ranges."""
    out = {}
    for k, v in property_samples(graphs).items():
        lo, hi = ranges[k] if ranges and k in ranges else (float(v.min()), float(v.max()))
        counts, edges = np.histogram(v, bins, range=(lo, hi) if hi > lo else (lo - 0.5, lo + 0.5))
        out[k] = (edges, counts / max(len(v), 1))
    return out


def shared_ranges(*graph_sets: Sequence[FeaturedGraph]) -> dict[str, tuple[float, float]]:
    samples = [property_samples(gs) for gs in graph_sets]
    keys = set.intersection(*(set(s) for s in samples))
    return {k: (min(float(s[k].min()) for s in samples), max(float(s[k].max()) for s in samples)) for k in keys}
