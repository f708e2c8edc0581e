"""Log-density kernels and samplers.

All kernels broadcast over leading batch dimensions and reduce over the last
one, so a ``(cells, dims)`` input yields one value per cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import DTYPE, MlpSpec, ParamStore, as_tensor, init_mlp, mlp_forward

LOG_2PI = math.log(2 * math.pi)


@dataclass
class DiagGaussianParams:
    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean shape {tuple(self.mean.shape)} != log_var shape {tuple(self.log_var.shape)}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, idx) -> "DiagGaussianParams":
        """Slice the latent coordinates, e.g. ``p[..., :i]``."""
        return DiagGaussianParams(self.mean[idx], self.log_var[idx])


@dataclass
class NBParams:
    mean: torch.Tensor
    inverse_dispersion: torch.Tensor


def _check_dims(z: torch.Tensor, p: DiagGaussianParams) -> None:
    if z.shape[-1] != p.dim:
        raise ValueError(f"dimension mismatch: z has {z.shape[-1]}, params have {p.dim}")


def gaussian_log_pdf(z, p: DiagGaussianParams) -> torch.Tensor:
    z = as_tensor(z)
    _check_dims(z, p)
    lv = p.log_var
    return (-0.5 * LOG_2PI - 0.5 * lv - (z - p.mean) ** 2 / (2 * torch.exp(lv))).sum(-1)


def gaussian_sample(p: DiagGaussianParams, noise) -> torch.Tensor:
    noise = as_tensor(noise)
    _check_dims(noise, p)
    return p.mean + torch.exp(0.5 * p.log_var) * noise


def gaussian_kl(q: DiagGaussianParams, p: DiagGaussianParams) -> torch.Tensor:
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    d = q.log_var - p.log_var
    # expm1(d) - d >= 0 survives rounding, unlike exp(d) - 1 - d
    return 0.5 * (torch.expm1(d) - d + (q.mean - p.mean) ** 2 / torch.exp(p.log_var)).sum(-1)


def _validate_counts(x: torch.Tensor) -> None:
    if bool((x < 0).any()) or bool((x != torch.floor(x)).any()):
        raise ValueError("counts must be non-negative integers")


def nb_log_pmf(x, p: NBParams, validate: bool = True) -> torch.Tensor:
    """Negative-binomial log-mass in the (mean, inverse-dispersion) parameterisation."""
    x = as_tensor(x)
    mu, theta = p.mean, p.inverse_dispersion
    if validate:
        _validate_counts(x)
        if bool((theta <= 0).any()):
            raise ValueError("inverse dispersion must be positive")
        if bool((mu < 0).any()):
            raise ValueError("NB mean must be non-negative")
    log_theta_mu = torch.log(theta + mu)
    res = (torch.lgamma(x + theta) - torch.lgamma(theta) - torch.lgamma(x + 1)
           + theta * (torch.log(theta) - log_theta_mu)
           + torch.xlogy(x, mu) - x * log_theta_mu)
    return res.sum(-1)


def nb_sample(mean, inverse_dispersion, rng: np.random.Generator) -> np.ndarray:
    """Gamma-Poisson draw; ``mean`` and ``inverse_dispersion`` broadcast."""
    mu = np.asarray(mean, dtype=np.float64)
    theta = np.broadcast_to(np.asarray(inverse_dispersion, dtype=np.float64), mu.shape)
    if (theta <= 0).any() or (mu < 0).any() or not np.isfinite(mu).all():
        raise ValueError("invalid NB parameters")
    rate = rng.gamma(shape=theta, scale=mu / theta)
    return rng.poisson(rate).astype(np.int64)


@dataclass(frozen=True)
class EFInvariantPrior:
    """Unnormalised non-factorised exponential-family prior over a latent block.

    ``log p~(z | c) = <T_NN(z), lambda_NN(c)> + <(z, z**2), lambda_f(c)>`` where
    ``c`` is the conditioning vector (the covariate embedding). Base measure
    and normaliser are never evaluated.
    """
    latent_dim: int
    cond_dim: int
    stat_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    prefix: str = "inv_prior"

    @property
    def t_nn(self) -> MlpSpec:
        # smooth activation: score matching needs non-trivial second derivatives
        return MlpSpec(self.latent_dim, self.hidden, self.stat_dim, activation="tanh")

    @property
    def lambda_nn(self) -> MlpSpec:
        return MlpSpec(self.cond_dim, self.hidden, self.stat_dim)

    @property
    def lambda_f(self) -> MlpSpec:
        return MlpSpec(self.cond_dim, self.hidden, 2 * self.latent_dim)

    def param_names(self) -> list[str]:
        return (self.t_nn.param_names(f"{self.prefix}.t_nn")
                + self.lambda_nn.param_names(f"{self.prefix}.lambda_nn")
                + self.lambda_f.param_names(f"{self.prefix}.lambda_f"))

    def init(self, store: ParamStore, generator: torch.Generator) -> None:
        init_mlp(store, self.t_nn, f"{self.prefix}.t_nn", generator)
        init_mlp(store, self.lambda_nn, f"{self.prefix}.lambda_nn", generator)
        init_mlp(store, self.lambda_f, f"{self.prefix}.lambda_f", generator)
        # start from an unnormalised standard normal: zero linear, -1/2 quadratic
        with torch.no_grad():
            last = len(self.lambda_f.layer_dims) - 1
            store[f"{self.prefix}.lambda_f.{last}.bias"][self.latent_dim:] = -0.5

    def natural_params(self, params: Mapping[str, torch.Tensor], cond: torch.Tensor):
        lam_nn = mlp_forward(self.lambda_nn, params, f"{self.prefix}.lambda_nn", cond)
        lam_f = mlp_forward(self.lambda_f, params, f"{self.prefix}.lambda_f", cond)
        return lam_nn, lam_f

    def log_density(self, params: Mapping[str, torch.Tensor], z: torch.Tensor,
                    cond: torch.Tensor, natural=None) -> torch.Tensor:
        return ef_unnorm_log_density(z, cond, params, self, natural=natural)


def ef_unnorm_log_density(z_inv, cond, params: Mapping[str, torch.Tensor], prior: EFInvariantPrior,
                          natural=None) -> torch.Tensor:
    z_inv, cond = as_tensor(z_inv), as_tensor(cond)
    if z_inv.shape[-1] != prior.latent_dim:
        raise ValueError(f"latent dim {z_inv.shape[-1]} != prior latent dim {prior.latent_dim}")
    if cond.shape[-1] != prior.cond_dim:
        raise ValueError(f"conditioning dim {cond.shape[-1]} != prior cond dim {prior.cond_dim}")
    lam_nn, lam_f = natural if natural is not None else prior.natural_params(params, cond)
    t_nn = mlp_forward(prior.t_nn, params, f"{prior.prefix}.t_nn", z_inv)
    t_f = torch.cat([z_inv, z_inv ** 2], dim=-1)
    return (t_nn * lam_nn).sum(-1) + (t_f * lam_f).sum(-1)


def softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def positive(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw)


__all__ = [
    "DTYPE", "DiagGaussianParams", "NBParams", "EFInvariantPrior", "gaussian_log_pdf",
    "gaussian_sample", "gaussian_kl", "nb_log_pmf", "nb_sample", "ef_unnorm_log_density",
    "softplus_inverse", "positive",
]
