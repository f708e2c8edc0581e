"""Training objectives and their freeze scopes.

Sign convention: the trainer minimises ``-ELBO + SM + beta * TC``.

* ``elbo_loss`` sees the unnormalised invariant prior as a constant copy;
  its gradients reach the encoder, decoder, dispersion, covariate encoder and
  spurious prior only.
* ``sm_loss`` sees detached latent samples and covariate embeddings; its
  gradients reach the unnormalised prior only.
* ``tc_loss`` depends on encoder outputs only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch

from .distributions import DiagGaussianParams, gaussian_log_pdf, nb_log_pmf
from .model import Batch, InVAE
from .numerics import ParamStore, check_finite, latent_grad_and_hessian_diag


class FreezeContractError(RuntimeError):
    """A loss was evaluated with the wrong parameter group left trainable."""


@dataclass
class LossReport:
    elbo: torch.Tensor
    sm: torch.Tensor
    tc: torch.Tensor
    total: torch.Tensor
    beta: float = 0.0

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("elbo", "sm", "tc", "total")}


@dataclass
class ForwardPass:
    """Encoder outputs and the reparameterised sample for one batch."""
    enc: DiagGaussianParams
    d_embed: torch.Tensor
    z: torch.Tensor


def forward(model: InVAE, params: Mapping[str, torch.Tensor], batch: Batch, noise: torch.Tensor) -> ForwardPass:
    enc, d_embed = model.posterior(params, batch)
    z = model.sample_latent(enc, noise).concat()
    return ForwardPass(enc, d_embed, z)


def elbo_terms(model: InVAE, params: Mapping[str, torch.Tensor], batch: Batch, fp: ForwardPass) -> dict[str, torch.Tensor]:
    """Per-cell pieces of the single-sample ELBO estimate."""
    cfg = model.config
    i = cfg.n_invariant
    nb = model.decode(params, fp.z, batch.library)
    terms = {
        "log_lik": nb_log_pmf(batch.counts, nb, validate=False),
        "log_q": gaussian_log_pdf(fp.z, fp.enc),
    }
    if cfg.variant == "ivae":
        terms["log_prior"] = gaussian_log_pdf(fp.z, model.ivae_prior_params(params, fp.d_embed, batch.env_onehot))
    else:
        cond = model.prior_condition(fp.d_embed, batch.env_onehot)
        z_block = fp.z[..., :i] if cfg.variant == "invae" else fp.z
        log_prior = model.inv_prior.log_density(params, z_block, cond)
        if cfg.variant == "invae" and cfg.n_spurious > 0:
            log_prior = log_prior + gaussian_log_pdf(fp.z[..., i:], model.spurious_prior_params(params, batch.env))
        terms["log_prior"] = log_prior
    return terms


def _elbo_from_view(model, view, batch, fp) -> torch.Tensor:
    t = elbo_terms(model, view, batch, fp)
    return check_finite((t["log_lik"] - t["log_q"] + t["log_prior"]).mean(), "ELBO")


def elbo_loss(model: InVAE, params: ParamStore, batch: Batch, noise: torch.Tensor,
              fp: ForwardPass | None = None) -> torch.Tensor:
    """Batch-mean ELBO (to maximise) with the unnormalised prior held constant."""
    unfrozen = [n for n in model.prior_param_names if not params.is_frozen(n)]
    if unfrozen:
        raise FreezeContractError(f"invariant prior must be frozen for the ELBO; trainable: {unfrozen[:3]}")
    view = params.view(detach=model.prior_param_names)
    fp = fp or forward(model, view, batch, noise)
    return _elbo_from_view(model, view, batch, fp)


def score_matching_objective(log_density, z: torch.Tensor, lambda_reg: float) -> torch.Tensor:
    """Per-sample ``sum_j [d2_j + 0.5 * d1_j**2 + lambda_reg * d2_j**2]``.

    ``log_density`` maps ``(rows, k)`` latents to per-row unnormalised
    log-densities. The result stays differentiable with respect to the
    parameters ``log_density`` closes over; ``z`` is treated as data.
    """
    g, h = latent_grad_and_hessian_diag(log_density, z, create_graph=True)
    return (h + 0.5 * g ** 2 + lambda_reg * h ** 2).sum(-1)


def sm_loss(model: InVAE, params: Mapping[str, torch.Tensor], z_block: torch.Tensor,
            cond: torch.Tensor, lambda_reg: float = 0.01) -> torch.Tensor:
    """Regularised score-matching loss of the unnormalised prior (to minimise).

    ``z_block`` holds latent samples of the prior's block and ``cond`` the
    conditioning vectors; both are detached here so only prior parameters
    receive gradient.
    """
    if model.inv_prior is None:
        return torch.zeros((), dtype=z_block.dtype)
    cond = cond.detach()
    natural = model.inv_prior.natural_params(params, cond)
    per_cell = score_matching_objective(
        lambda z: model.inv_prior.log_density(params, z, cond, natural=natural), z_block.detach(), lambda_reg)
    return check_finite(per_cell.mean(), "score-matching loss")


def minibatch_log_marginal(z_eval: torch.Tensor, group: DiagGaussianParams, n_u: float) -> torch.Tensor:
    """``log (1/(n_u b)) sum_j q(z_eval | x_j)`` for each row of ``z_eval``.

    ``group`` holds the b posterior components of one domain. Pass column
    slices of both arguments to evaluate a block marginal.
    """
    b = group.mean.shape[0]
    if b < 2:
        raise ValueError("minibatch-weighted sampling needs at least 2 samples in the group")
    if z_eval.dim() == 1:
        return minibatch_log_marginal(z_eval.unsqueeze(0), group, n_u)[0]
    zi = z_eval.unsqueeze(1)
    mu, lv = group.mean.unsqueeze(0), group.log_var.unsqueeze(0)
    log_q = (-0.5 * math.log(2 * math.pi) - 0.5 * lv - (zi - mu) ** 2 / (2 * torch.exp(lv))).sum(-1)
    return torch.logsumexp(log_q, dim=1) - math.log(n_u * b)


def tc_loss(model: InVAE, batch: Batch, fp: ForwardPass) -> torch.Tensor:
    """Total correlation between the invariant and spurious blocks within each domain.

    Each domain group of size >= 2 in the batch contributes the mean over its
    samples of ``log q(z|u) - log q(z_I|u) - log q(z_S|u)``; groups are weighted
    by size. The ``1/n_u`` factor of the minibatch estimator appears once in
    the joint term and twice in the marginal terms, so ``log n_u`` is removed
    to make the value consistent (it is constant, gradients are unchanged).
    """
    i = model.config.n_invariant
    return tc_estimate(fp.enc, fp.z, batch.group, batch.group_size, i)


def tc_estimate(enc: DiagGaussianParams, z: torch.Tensor, group: torch.Tensor,
                group_size: torch.Tensor, n_invariant: int) -> torch.Tensor:
    m = z.shape[-1]
    if n_invariant >= m:
        return torch.zeros((), dtype=z.dtype)
    total = torch.zeros((), dtype=z.dtype)
    kept = 0
    for g in torch.unique(group):
        idx = torch.nonzero(group == g).squeeze(1)
        b = idx.numel()
        if b < 2:
            continue
        n_u = float(group_size[idx[0]])
        if n_u < b:
            raise ValueError(f"domain size {n_u} smaller than its batch share {b}")
        comp = DiagGaussianParams(enc.mean[idx], enc.log_var[idx])
        zg = z[idx]
        full = minibatch_log_marginal(zg, comp, n_u)
        inv = minibatch_log_marginal(zg[:, :n_invariant], comp[:, :n_invariant], n_u)
        spur = minibatch_log_marginal(zg[:, n_invariant:], comp[:, n_invariant:], n_u)
        total = total + (full - inv - spur - math.log(n_u)).sum()
        kept += b
    if kept == 0:
        return torch.zeros((), dtype=z.dtype)
    return check_finite(total / kept, "total correlation")


def total_loss(model: InVAE, params: ParamStore, batch: Batch, noise: torch.Tensor,
               beta: float = 1.0, lambda_reg: float = 0.01) -> LossReport:
    """Composite loss with each term restricted to its own parameter scope.

    Differentiating ``report.total`` gives, for prior parameters, exactly the
    score-matching gradient and, for all others, the ``-ELBO + beta * TC``
    gradient.
    """
    prior = model.prior_param_names
    elbo_view = params.view(detach=prior)
    fp = forward(model, elbo_view, batch, noise)
    elbo = _elbo_from_view(model, elbo_view, batch, fp)
    tc = tc_loss(model, batch, fp) if model.config.variant == "invae" else torch.zeros((), dtype=elbo.dtype)
    sm = sm_loss(model, params.view(), *_sm_inputs(model, fp, batch), lambda_reg=lambda_reg)
    total = -elbo + sm + beta * tc
    return LossReport(elbo, sm, tc, total, beta)


def _sm_inputs(model: InVAE, fp: ForwardPass, batch: Batch):
    cfg = model.config
    z_block = fp.z[..., :cfg.n_invariant] if cfg.variant == "invae" else fp.z
    cond = model.prior_condition(fp.d_embed, batch.env_onehot)
    return z_block.detach(), cond.detach()
