"""Float64 tensors, parameter stores, small MLPs, exact derivatives and Adam.

Tensors are plain ``torch.Tensor`` objects in float64. Networks are written
functionally: an :class:`MlpSpec` describes the layer shapes and the weights
live in a :class:`ParamStore` under ``"<prefix>.<layer>.weight"`` and
``"<prefix>.<layer>.bias"``. This keeps freezing explicit and lets a single
objective be differentiated with respect to any subset of names.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

DTYPE = torch.float64

ACTIVATIONS = ("relu", "tanh", "softplus", "leaky_relu", "none")
FINAL_ACTIVATIONS = ("none", "softmax", "softplus")


class NonFiniteError(FloatingPointError):
    """Raised when a public operation produces NaN or Inf."""


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return t


class ParamStore:
    """Ordered ``name -> tensor`` map with a per-name frozen flag.

    Stored tensors are leaf tensors with ``requires_grad=True``. The optimizer
    mutates them in place under ``torch.no_grad``; frozen names are skipped.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None):
        self._tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self._frozen: set[str] = set()
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = as_tensor(value).detach().clone().contiguous()
        t.requires_grad_(True)
        self._tensors[name] = t

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, prefix: str | None = None) -> list[str]:
        if prefix is None:
            return list(self._tensors)
        return [n for n in self._tensors if n == prefix or n.startswith(prefix + ".")]

    def items(self):
        return self._tensors.items()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            self[n]
            self._frozen.add(n)

    def unfreeze(self, names: Iterable[str] | None = None) -> None:
        if names is None:
            self._frozen.clear()
            return
        for n in names:
            self._frozen.discard(n)

    def trainable(self) -> list[str]:
        return [n for n in self._tensors if n not in self._frozen]

    def view(self, detach: Iterable[str] = ()) -> dict[str, torch.Tensor]:
        """Plain dict of the tensors, with the given names detached.

        Detached entries act as constant copies of the parameters: an objective
        built from the view propagates no gradient into them.
        """
        detach = set(detach)
        return {n: (t.detach() if n in detach else t) for n, t in self._tensors.items()}

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: t.detach().clone() for n, t in self._tensors.items()}

    def load(self, values: Mapping[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for n, v in values.items():
                tgt = self[n]
                if tuple(v.shape) != tuple(tgt.shape):
                    raise ValueError(f"shape mismatch for {n}: {tuple(v.shape)} vs {tuple(tgt.shape)}")
                tgt.copy_(v)


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "relu"
    final_activation: str = "none"

    def __post_init__(self):
        dims = (self.in_dim, *self.hidden, self.out_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all MLP dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"unknown final activation {self.final_activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.in_dim, *self.hidden, self.out_dim)
        return list(zip(dims[:-1], dims[1:]))

    def param_names(self, prefix: str) -> list[str]:
        out = []
        for k in range(len(self.layer_dims)):
            out += [f"{prefix}.{k}.weight", f"{prefix}.{k}.bias"]
        return out


def init_mlp(store: ParamStore, spec: MlpSpec, prefix: str, generator: torch.Generator) -> None:
    """Glorot-uniform weights, zero biases."""
    for k, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = torch.empty(fan_out, fan_in, dtype=DTYPE).uniform_(-bound, bound, generator=generator)
        store.add(f"{prefix}.{k}.weight", w)
        store.add(f"{prefix}.{k}.bias", torch.zeros(fan_out, dtype=DTYPE))


def _activate(h: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "relu":
        return torch.relu(h)
    if kind == "tanh":
        return torch.tanh(h)
    if kind == "softplus":
        return F.softplus(h)
    if kind == "leaky_relu":
        return F.leaky_relu(h, 0.2)
    return h


def mlp_forward(spec: MlpSpec, params: Mapping[str, torch.Tensor], prefix: str,
                x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"{prefix}: input last dim {x.shape[-1]} != {spec.in_dim}")
    h = x
    n_layers = len(spec.layer_dims)
    for k in range(n_layers):
        try:
            w = params[f"{prefix}.{k}.weight"]
            b = params[f"{prefix}.{k}.bias"]
        except KeyError as err:
            raise KeyError(f"missing parameter {err.args[0]!r}") from None
        h = h @ w.T + b
        if k < n_layers - 1:
            h = _activate(h, spec.activation)
    if spec.final_activation == "softmax":
        h = torch.softmax(h, dim=-1)
    elif spec.final_activation == "softplus":
        h = F.softplus(h)
    return h


def grad(objective: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
         params: ParamStore, wrt: Sequence[str]) -> dict[str, torch.Tensor]:
    """Exact gradient of a scalar objective with respect to the named parameters.

    ``objective`` receives a view of the store in which every name outside
    ``wrt`` is detached.
    """
    wrt = list(wrt)
    for n in wrt:
        params[n]
    others = [n for n in params.names() if n not in set(wrt)]
    value = objective(params.view(detach=others))
    if value.dim() != 0:
        raise ValueError("objective must return a scalar")
    check_finite(value, "objective")
    tensors = [params[n] for n in wrt]
    if not value.requires_grad:
        gs = [None] * len(tensors)
    else:
        gs = torch.autograd.grad(value, tensors, allow_unused=True)
    out = {}
    for n, t, g in zip(wrt, tensors, gs):
        out[n] = torch.zeros_like(t).detach() if g is None else check_finite(g.detach(), f"grad {n}")
    return out


def latent_grad_and_hessian_diag(log_density: Callable[[torch.Tensor], torch.Tensor],
                                 z: torch.Tensor, create_graph: bool = False
                                 ) -> tuple[torch.Tensor, torch.Tensor]:
    """First derivatives and diagonal second derivatives of ``log_density`` in z.

    ``log_density`` maps ``z`` of shape ``(..., k)`` to per-row values of shape
    ``(...)``; rows must not interact. Returns tensors shaped like ``z``. With
    ``create_graph`` the results stay differentiable w.r.t. whatever
    parameters the density closes over.
    """
    z = z.detach().requires_grad_(True)
    with torch.enable_grad():
        f = log_density(z)
        (g,) = torch.autograd.grad(f.sum(), z, create_graph=True)
        cols = []
        for j in range(z.shape[-1]):
            (hj,) = torch.autograd.grad(g[..., j].sum(), z, create_graph=create_graph,
                                        retain_graph=True, allow_unused=True)
            cols.append(torch.zeros_like(z[..., j]) if hj is None else hj[..., j])
        h = torch.stack(cols, dim=-1)
    if not create_graph:
        g, h = g.detach(), h.detach()
    check_finite(g, "latent gradient")
    check_finite(h, "latent hessian diagonal")
    return g, h


def latent_hessian_diag(log_density: Callable[[torch.Tensor], torch.Tensor],
                        z: torch.Tensor) -> torch.Tensor:
    return latent_grad_and_hessian_diag(log_density, z)[1]


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    # per-parameter step counts: the two update scopes touch disjoint names
    step: dict[str, int] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamStore, grads: Mapping[str, torch.Tensor]) -> None:
    """One bias-corrected Adam update of every non-frozen parameter, in place."""
    trainable = params.trainable()
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise KeyError(f"no gradient for trainable parameters {missing}")
    with torch.no_grad():
        for n in trainable:
            p, g = params[n], grads[n]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {n}")
            m = state.m.get(n)
            v = state.v.get(n)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            t = state.step.get(n, 0) + 1
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p -= state.lr * m_hat / (v_hat.sqrt() + state.eps)
            state.m[n], state.v[n], state.step[n] = m, v, t
