"""Neural building blocks on top of torch autograd (float64 throughout).

Only the pieces the generator, critic and encoder need: the MLP block with
batch normalization, activations, segment softmax, hard Gumbel-softmax,
Adam, checkpoint files and a finite-difference gradient checker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor, nn

DTYPE = torch.float64
LEAKY_SLOPE = 0.05
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
GUMBEL_TAU = 1.0


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return torch.nn.functional.leaky_relu(x, slope)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def agg(a: Tensor, b: Tensor) -> Tensor:
    """Order-invariant pair aggregation ``LeakyReLU(a + b)``."""
    return leaky_relu(a + b)


def as_tensor(a) -> Tensor:
    return torch.as_tensor(np.asarray(a), dtype=DTYPE)


class BatchNorm(nn.Module):
    """Batch normalization over rows, with optional per-row weights.

    Weighted statistics let padded rows (weight 0) stay out of the batch
    moments. A single row in train mode normalizes to the shift ``beta``.
    """

    def __init__(self, width: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(width, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(width, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(width, dtype=DTYPE))

    def forward(self, x: Tensor, row_weight: Tensor | None = None) -> Tensor:
        shape = x.shape
        x2 = x.reshape(-1, shape[-1])
        if self.training:
            if row_weight is None:
                n = x2.shape[0]
                if n == 0:
                    return x
                mean = x2.mean(0)
                var = ((x2 - mean) ** 2).mean(0)
                count = float(n)
            else:
                rw = row_weight.reshape(-1, 1)
                total = rw.sum()
                if float(total) <= 0:
                    return x * 0 + self.bias
                mean = (rw * x2).sum(0) / total
                var = (rw * (x2 - mean) ** 2).sum(0) / total
                count = float(total)
            with torch.no_grad():
                unbiased = var * (count / (count - 1)) if count > 1 else var
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.detach())
        else:
            mean, var = self.running_mean, self.running_var
        out = (x2 - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias
        return out.reshape(shape)


@dataclass(frozen=True)
class MlpSpec:
    """``MLP[k_0, ..., k_m]``: m-1 hidden blocks (linear, BN, LeakyReLU) then a linear block."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(k < 1 for k in self.widths):
            raise ValueError(f"MLP widths must be positive: {self.widths}")


class Mlp(nn.Module):
    def __init__(self, widths: Sequence[int] | MlpSpec):
        super().__init__()
        spec = widths if isinstance(widths, MlpSpec) else MlpSpec(tuple(int(k) for k in widths))
        self.spec = spec
        w = spec.widths
        self.linears = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(w[:-1], w[1:]))
        self.norms = nn.ModuleList(BatchNorm(b) for b in w[1:-1])

    @property
    def in_width(self) -> int:
        return self.spec.widths[0]

    @property
    def out_width(self) -> int:
        return self.spec.widths[-1]

    def forward(self, x: Tensor, row_weight: Tensor | None = None) -> Tensor:
        if x.shape[-1] != self.in_width:
            raise ValueError(f"MLP expects width {self.in_width}, got {x.shape[-1]}")
        # norms has one entry fewer, so zip stops before the output layer
        for lin, bn in zip(self.linears, self.norms):
            x = leaky_relu(bn(lin(x), row_weight))
        return self.linears[len(self.norms)](x)


def mlp_forward(spec: MlpSpec, params: Mlp, x: Tensor) -> Tensor:
    if params.spec != spec:
        raise ValueError("parameters were built for a different MLP spec")
    return params(x)


def segment_log_softmax(scores: Tensor, group: Tensor, n_groups: int) -> Tensor:
    """Log-softmax of ``scores`` within each group id."""
    if scores.numel() == 0:
        return scores
    idx = group.long()
    peak = torch.full((n_groups,), -torch.inf, dtype=scores.dtype)
    peak = peak.scatter_reduce(0, idx, scores.detach(), reduce="amax", include_self=True)
    shifted = scores - peak[idx]
    denom = torch.zeros(n_groups, dtype=scores.dtype).index_add(0, idx, torch.exp(shifted))
    return shifted - torch.log(denom)[idx]


def segment_softmax(scores: Tensor, group: Tensor, n_groups: int) -> Tensor:
    """Softmax of ``scores`` within each group id."""
    return torch.exp(segment_log_softmax(scores, group, n_groups))


def segment_sum(values: Tensor, group, n_groups: int) -> Tensor:
    idx = torch.as_tensor(group, dtype=torch.long)
    out = torch.zeros((n_groups,) + tuple(values.shape[1:]), dtype=values.dtype)
    if values.numel() == 0:
        return out
    return out.index_add(0, idx, values)


def hard_gumbel_softmax(logits: Tensor, rng: np.random.Generator, tau: float = GUMBEL_TAU) -> Tensor:
    """One-hot sample along the last axis with a straight-through gradient.

    Forward returns the argmax of ``(logits + g) / tau`` as a one-hot vector;
    backward flows through the soft sample.
    """
    u = rng.random(tuple(logits.shape))
    g = -np.log(-np.log(np.clip(u, 1e-300, 1.0)))
    soft = torch.softmax((logits + as_tensor(g)) / tau, dim=-1)
    index = soft.detach().argmax(dim=-1, keepdim=True)
    hard = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    return hard - soft.detach() + soft


def make_adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, foreach=True)


def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor | None], state: torch.optim.Adam) -> None:
    """Apply one Adam update with the given gradients."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.grad = None if g is None else g.detach().clone()
    state.step()


def save_checkpoint(path, tensors: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    """JSON map name -> {shape, values}; floats round-trip exactly through repr."""
    payload = {
        "tensors": {
            k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", ""), "values": v.detach().reshape(-1).tolist()}
            for k, v in tensors.items()
        },
        "meta": dict(meta or {}),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    with open(path) as fh:
        payload = json.load(fh)
    out = {}
    for k, rec in payload["tensors"].items():
        dtype = getattr(torch, rec.get("dtype", "float64"))
        out[k] = torch.tensor(rec["values"], dtype=dtype).reshape(rec["shape"])
    return out, payload.get("meta", {})


def module_state(module: nn.Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def optimizer_state(opt: torch.optim.Optimizer, params: Sequence[Tensor], prefix: str) -> dict[str, Tensor]:
    """Flatten Adam moments to named tensors, aligned with ``params`` order."""
    out = {}
    for k, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{prefix}{k}.exp_avg"] = st["exp_avg"]
        out[f"{prefix}{k}.exp_avg_sq"] = st["exp_avg_sq"]
        out[f"{prefix}{k}.step"] = torch.as_tensor(st["step"], dtype=DTYPE).reshape(1)
    return out


def restore_optimizer(opt: torch.optim.Optimizer, params: Sequence[Tensor], tensors: Mapping[str, Tensor], prefix: str) -> None:
    for k, p in enumerate(params):
        key = f"{prefix}{k}.exp_avg"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[f"{prefix}{k}.step"][0])),
            "exp_avg": tensors[key].clone(),
            "exp_avg_sq": tensors[f"{prefix}{k}.exp_avg_sq"].clone(),
        }


@dataclass(frozen=True)
class FdResult:
    """Relative error over the smooth entries of one tensor, and how many entries were non-smooth."""

    error: float
    checked: int
    skipped: int


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    floor: float = 1e-6,
) -> dict[str, FdResult]:
    """Compare autograd against central differences, per named tensor.

    ``loss_fn`` must be deterministic. The error is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)`` in the Euclidean norm.
    An entry whose central difference at ``h`` disagrees with the one at
    ``h / 10`` has a kink within ``h`` (piecewise-linear activations) and is
    counted in ``skipped`` instead of the error.
    """
    names = list(params)
    tensors = [params[k] for k in names]
    ad = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    out = {}

    def central(flat, k, step):
        orig = flat[k].item()
        flat[k] = orig + step
        up = float(loss_fn())
        flat[k] = orig - step
        down = float(loss_fn())
        flat[k] = orig
        return (up - down) / (2 * step)

    with torch.no_grad():
        for name, t, g in zip(names, tensors, ad):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            ga = g.reshape(-1)
            keep, fd = [], []
            for k in range(flat.numel()):
                coarse = central(flat, k, h)
                fine = central(flat, k, h / 10)
                if abs(coarse - fine) > 1e-3 * max(abs(coarse), abs(fine), 1e-3):
                    continue
                keep.append(k)
                fd.append(coarse)
            idx = torch.as_tensor(keep, dtype=torch.long)
            fd_t = torch.as_tensor(fd, dtype=t.dtype)
            diff = torch.linalg.vector_norm(ga[idx] - fd_t).item()
            scale = max(torch.linalg.vector_norm(ga[idx]).item(), torch.linalg.vector_norm(fd_t).item(), floor)
            out[name] = FdResult(diff / scale, len(keep), flat.numel() - len(keep))
    return out
