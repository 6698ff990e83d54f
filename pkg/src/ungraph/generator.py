"""Generator composition: initial 3-node graph, MPNN / unpooling stages, output heads."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .batch import GraphBatch
from .graph import FeaturedGraph
from .layers import FinalEdgeLayer, InitialLayer, Mpnn, OutputHead, SkipConnection
from .nn import DTYPE, hard_gumbel_softmax
from .unpool import UnpoolHyper, UnpoolLayer, UnpoolOutcome

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PRESETS = ("waxman", "waxman-desk", "protein", "qm9", "zinc")


class ConfigError(ValueError):
    """Raised when a generator or training configuration is inconsistent."""


@dataclass
class GeneratorSpec:
    """Ordered layer list of a generator.

    ``layers`` entries are dicts with a ``kind`` of ``mpnn``, ``unpool``,
    ``skip``, ``node_head`` or ``edge_head``; missing widths are inferred
    from the running node/edge feature widths.
    """

    name: str
    d_in: int
    init_d_x: int
    init_d_w: int
    layers: list[dict] = field(default_factory=list)
    output: str = "continuous"
    inter_mode: str = "preference"

    @classmethod
    def from_dict(cls, rec: dict) -> "GeneratorSpec":
        try:
            spec = cls(
                name=str(rec.get("name", "custom")),
                d_in=int(rec["d_in"]),
                init_d_x=int(rec["initial"]["d_x"]),
                init_d_w=int(rec["initial"]["d_w"]),
                layers=[dict(layer) for layer in rec.get("layers", [])],
                output=str(rec.get("output", "continuous")),
                inter_mode=str(rec.get("inter_mode", "preference")),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed generator spec: {exc}") from exc
        spec.check()
        return spec

    @classmethod
    def from_toml(cls, path) -> "GeneratorSpec":
        with open(path, "rb") as fh:
            rec = tomllib.load(fh)
        return cls.from_dict(rec.get("generator", rec))

    @classmethod
    def preset(cls, name: str) -> "GeneratorSpec":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        text = resources.files("ungraph.presets").joinpath(f"{name}.toml").read_text()
        rec = tomllib.loads(text)
        return cls.from_dict(rec.get("generator", rec))

    def check(self) -> None:
        if self.output not in ("continuous", "categorical"):
            raise ConfigError(f"unknown output mode {self.output!r}")
        kinds = [layer.get("kind") for layer in self.layers]
        unknown = set(kinds) - {"mpnn", "unpool", "skip", "node_head", "edge_head"}
        if unknown:
            raise ConfigError(f"unknown layer kinds {sorted(unknown)}")
        if "unpool" not in kinds:
            raise ConfigError("a generator needs at least one unpooling layer")

    def node_range(self) -> tuple[int, int]:
        """Smallest and largest possible output node counts."""
        lo = hi = 3
        for layer in self.layers:
            if layer["kind"] != "unpool":
                continue
            static = set(layer.get("fixed_static", []))
            prob = set(layer.get("probabilistic", []))
            forced = sum(1 for i in range(lo) if i not in static and i not in prob)
            grow = forced == 0 and any(i in prob for i in range(lo)) and layer.get("enforce_min_growth", True)
            lo = lo + forced + int(grow)
            hi = hi + sum(1 for i in range(hi) if i not in static)
        return lo, hi


@dataclass
class GenResult:
    graphs: GraphBatch
    logp: Tensor
    logp_init: Tensor
    outcomes: list[UnpoolOutcome]
    stages: list[GraphBatch]
    init_choice: np.ndarray


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.initial = InitialLayer(spec.d_in, spec.init_d_x, spec.init_d_w)
        d_x, d_w = spec.init_d_x, spec.init_d_w
        self.stack = nn.ModuleList()
        self.kinds: list[str] = []
        self.out_d_w = 0
        for layer in spec.layers:
            kind = layer["kind"]
            if kind == "mpnn":
                mod = Mpnn(d_x, d_w, int(layer["d_out"]))
                d_x = int(layer["d_out"])
            elif kind == "unpool":
                hyper = UnpoolHyper(
                    d_x=d_x,
                    d_w=d_w,
                    d_y=int(layer["d_y"]),
                    d_u=int(layer.get("d_u", d_w)),
                    fixed_static=tuple(layer.get("fixed_static", ())),
                    probabilistic=tuple(layer.get("probabilistic", ())),
                    k_v=int(layer.get("k_v", layer.get("k", 0))),
                    k_ia=int(layer.get("k_ia", layer.get("k", 0))),
                    k_ie=int(layer.get("k_ie", layer.get("k", 0))),
                    k_w=int(layer.get("k_w", layer.get("k", 0))),
                    enforce_min_growth=bool(layer.get("enforce_min_growth", True)),
                    inter_mode=spec.inter_mode,
                )
                mod = UnpoolLayer(hyper)
                d_x, d_w = hyper.d_y, hyper.d_u
            elif kind == "skip":
                mod = SkipConnection(spec.d_in, int(layer["n_z"]), int(layer["d_y"]), int(layer["n_max"]))
                d_x += int(layer["d_y"])
            elif kind == "node_head":
                widths = [d_x, *[int(k) for k in layer["widths"]]]
                mod = OutputHead(widths, categorical=spec.output == "categorical")
                d_x = widths[-1]
            else:
                mod = FinalEdgeLayer(d_x, d_w, int(layer["d_u"]))
                self.out_d_w = int(layer["d_u"])
            self.stack.append(mod)
            self.kinds.append(kind)
        self.out_d_x = d_x

    def unpool_layers(self) -> list[UnpoolLayer]:
        return [m for m in self.stack if isinstance(m, UnpoolLayer)]

    def structure_parameters(self) -> list[Tensor]:
        out = self.initial.structure_parameters()
        for layer in self.unpool_layers():
            out += layer.structure_parameters()
        return out

    def feature_parameters(self) -> list[Tensor]:
        ids = {id(p) for p in self.structure_parameters()}
        return [p for p in self.parameters() if id(p) not in ids and p.requires_grad]

    def forward(self, z: Tensor, rng: np.random.Generator) -> GenResult:
        g, logp_init, choice = self.initial(z, rng)
        logp = logp_init
        outcomes, stages = [], [g]
        edge_done = False
        for kind, mod in zip(self.kinds, self.stack):
            if kind == "mpnn":
                g = g.with_features(x=mod(g))
            elif kind == "unpool":
                out = mod(g, rng)
                outcomes.append(out)
                logp = logp + out.logp_total
                g = out.output
                stages.append(g)
            elif kind == "skip":
                g = g.with_features(x=torch.cat([g.x, mod(z, g)], 1))
            elif kind == "node_head":
                g = g.with_features(x=mod(g.x, rng))
            else:
                w = mod(g)
                if self.spec.output == "categorical":
                    w = hard_gumbel_softmax(w, rng)
                g = g.with_features(w=w)
                edge_done = True
        if not edge_done:
            g = g.with_features(w=torch.zeros((g.n_edges, 0), dtype=DTYPE))
        return GenResult(g, logp, logp_init, outcomes, stages, choice)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[list[FeaturedGraph], np.ndarray]:
        """Draw ``n`` graphs in eval mode, returning graphs and their log-probabilities."""
        was = self.training
        self.eval()
        with torch.no_grad():
            z = torch.as_tensor(rng.standard_normal((n, self.spec.d_in)), dtype=DTYPE)
            res = self(z, rng)
        self.train(was)
        return res.graphs.to_graphs(), res.logp.numpy().copy()


def load_spec(preset: str | None = None, path: str | Path | None = None) -> GeneratorSpec:
    if path is not None:
        return GeneratorSpec.from_toml(path)
    return GeneratorSpec.preset(preset or "waxman")
