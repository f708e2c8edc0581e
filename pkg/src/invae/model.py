"""inVAE architecture and its iVAE / NF-iVAE prior wirings.

Latent layout is fixed: the invariant block occupies the first
``n_invariant`` coordinates, the spurious block the remaining ``n_spurious``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .distributions import (
    DiagGaussianParams, EFInvariantPrior, NBParams, gaussian_sample, positive, softplus_inverse,
)
from .numerics import DTYPE, MlpSpec, ParamStore, as_tensor, check_finite, init_mlp, mlp_forward

logger = logging.getLogger(__name__)

VARIANTS = ("invae", "ivae", "nfivae")


class SchemaError(ValueError):
    """Input data does not match the covariate schema or gene set of a model."""


@dataclass
class CovariateSchema:
    """Vocabularies for the biological covariates ``d`` and the environment ``e``.

    ``categorical`` maps column name to its ordered levels; ``continuous`` lists
    numeric column names. Raw features are the concatenated one-hot blocks
    followed by the continuous values.
    """
    categorical: dict[str, list[str]] = field(default_factory=dict)
    continuous: list[str] = field(default_factory=list)
    env_levels: list[str] = field(default_factory=list)

    @property
    def raw_dim(self) -> int:
        return sum(len(v) for v in self.categorical.values()) + len(self.continuous)

    @property
    def n_envs(self) -> int:
        return len(self.env_levels)

    @classmethod
    def infer(cls, d_columns: Mapping[str, Sequence], env: Sequence,
              categorical: Sequence[str] | None = None) -> "CovariateSchema":
        """Build a schema from data: columns with non-numeric values are categorical."""
        cat, cont = {}, []
        for name, values in d_columns.items():
            is_cat = name in categorical if categorical is not None else not _all_numeric(values)
            if is_cat:
                cat[name] = sorted({str(v) for v in values})
            else:
                cont.append(name)
        return cls(cat, cont, sorted({str(v) for v in env}))

    def featurize(self, d_columns: Mapping[str, Sequence], lenient: bool = False) -> np.ndarray:
        n = _column_length(d_columns)
        blocks = []
        for name, levels in self.categorical.items():
            if name not in d_columns:
                raise SchemaError(f"missing covariate column {name!r}")
            index = {lv: k for k, lv in enumerate(levels)}
            block = np.zeros((n, len(levels)))
            for row, v in enumerate(d_columns[name]):
                k = index.get(str(v))
                if k is None:
                    if not lenient:
                        raise SchemaError(f"unseen level {v!r} in covariate column {name!r}")
                    logger.warning("unseen level %r in column %r mapped to a zero embedding", v, name)
                    continue
                block[row, k] = 1.0
            blocks.append(block)
        for name in self.continuous:
            if name not in d_columns:
                raise SchemaError(f"missing covariate column {name!r}")
            blocks.append(np.asarray(d_columns[name], dtype=np.float64).reshape(n, 1))
        if not blocks:
            return np.zeros((n, 0))
        return np.concatenate(blocks, axis=1)

    def env_index(self, env: Sequence, lenient: bool = False) -> np.ndarray:
        """Environment indices; with ``lenient`` an unseen level maps to -1 (zero one-hot)."""
        index = {lv: k for k, lv in enumerate(self.env_levels)}
        out = np.empty(len(env), dtype=np.int64)
        for row, v in enumerate(env):
            k = index.get(str(v))
            if k is None:
                if not lenient:
                    raise SchemaError(f"unseen level {v!r} in column 'env'")
                logger.warning("unseen environment %r mapped to a zero one-hot", v)
                k = -1
            out[row] = k
        return out

    def one_hot_env(self, env_idx: np.ndarray) -> np.ndarray:
        out = np.zeros((len(env_idx), self.n_envs))
        ok = env_idx >= 0
        out[np.nonzero(ok)[0], env_idx[ok]] = 1.0
        return out

    def domain_groups(self, d_columns: Mapping[str, Sequence], env_idx: np.ndarray) -> np.ndarray:
        """Integer id of the (categorical d, e) combination of each cell."""
        keys = [tuple(str(v) for v in vals) for vals in zip(*(d_columns[c] for c in self.categorical))] \
            if self.categorical else [()] * len(env_idx)
        labels = [k + (int(e),) for k, e in zip(keys, env_idx)]
        uniq = {lab: g for g, lab in enumerate(sorted(set(labels)))}
        return np.array([uniq[lab] for lab in labels], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"categorical": {k: list(v) for k, v in self.categorical.items()},
                "continuous": list(self.continuous), "env_levels": list(self.env_levels)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CovariateSchema":
        return cls({k: list(v) for k, v in d["categorical"].items()}, list(d["continuous"]),
                   list(d["env_levels"]))


def _column_length(cols: Mapping[str, Sequence]) -> int:
    lengths = {len(v) for v in cols.values()}
    if len(lengths) > 1:
        raise SchemaError("covariate columns differ in length")
    return lengths.pop() if lengths else 0


def _all_numeric(values) -> bool:
    try:
        for v in values:
            float(v)
    except (TypeError, ValueError):
        return False
    return True


@dataclass
class ModelConfig:
    n_genes: int
    n_invariant: int = 5
    n_spurious: int = 3
    hidden: tuple[int, ...] = (128, 128)
    prior_hidden: tuple[int, ...] = (64, 64)
    prior_stat_dim: int = 16
    d_embed_dim: int | None = None
    variant: str = "invae"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.prior_hidden = tuple(int(h) for h in self.prior_hidden)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant != "invae":
            # baselines have no invariant/spurious split: one block holds all m latents
            self.n_invariant, self.n_spurious = self.n_invariant + self.n_spurious, 0
        if self.n_invariant < 1 or self.n_spurious < 0:
            raise ValueError("need n_invariant >= 1 and n_spurious >= 0")
        if self.latent_dim > self.n_genes:
            raise ValueError(f"latent dim {self.latent_dim} exceeds gene count {self.n_genes}")

    @property
    def latent_dim(self) -> int:
        return self.n_invariant + self.n_spurious

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["prior_hidden"] = list(self.prior_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentSplit:
    z_inv: torch.Tensor
    z_spur: torch.Tensor

    def concat(self) -> torch.Tensor:
        return torch.cat([self.z_inv, self.z_spur], dim=-1)


@dataclass
class Batch:
    """Tensors for a set of cells, ready for the model.

    ``features`` is the standardized log1p expression; ``group`` the domain id
    ``u = (d, e)`` and ``group_size`` the total number of cells of that domain
    in the dataset (``n_u``).
    """
    counts: torch.Tensor
    features: torch.Tensor
    d_raw: torch.Tensor
    env: torch.Tensor
    env_onehot: torch.Tensor
    library: torch.Tensor
    group: torch.Tensor
    group_size: torch.Tensor

    def __len__(self) -> int:
        return self.counts.shape[0]

    def subset(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch(*(getattr(self, f)[idx] for f in Batch.__dataclass_fields__))


class InVAE:
    """Parameter layout and forward computations of the model.

    Parameters live in :attr:`params`; every method takes a mapping of tensors
    (normally a :meth:`ParamStore.view`) so callers control which parameters
    act as constants.
    """

    def __init__(self, config: ModelConfig, schema: CovariateSchema, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.schema = schema
        if schema.n_envs < 1:
            raise ValueError("schema has no environment levels")
        self.d_raw_dim = schema.raw_dim
        self.d_embed_dim = config.d_embed_dim or max(self.d_raw_dim, 1)
        n, m, i = config.n_genes, config.latent_dim, config.n_invariant
        E = schema.n_envs
        self.covariate_net = MlpSpec(max(self.d_raw_dim, 1), (), self.d_embed_dim, final_activation="none")
        self.encoder_net = MlpSpec(n + E + self.d_embed_dim, config.hidden, 2 * m)
        self.decoder_net = MlpSpec(m, config.hidden, n)
        self.inv_prior: EFInvariantPrior | None = None
        self.ivae_prior_net: MlpSpec | None = None
        if config.variant == "invae":
            self.inv_prior = EFInvariantPrior(i, self.d_embed_dim, config.prior_stat_dim, config.prior_hidden)
        elif config.variant == "nfivae":
            self.inv_prior = EFInvariantPrior(m, self.d_embed_dim + E, config.prior_stat_dim, config.prior_hidden)
        else:
            self.ivae_prior_net = MlpSpec(self.d_embed_dim + E, (), 2 * m)
        self.params = self._init_params()

    def _init_params(self) -> ParamStore:
        cfg = self.config
        g = torch.Generator().manual_seed(self.seed)
        store = ParamStore()
        init_mlp(store, self.covariate_net, "covariate_encoder", g)
        init_mlp(store, self.encoder_net, "encoder", g)
        init_mlp(store, self.decoder_net, "decoder", g)
        store.add("dispersion.raw", torch.full((cfg.n_genes,), softplus_inverse(1.0), dtype=DTYPE))
        if cfg.variant == "invae":
            E, s = self.schema.n_envs, cfg.n_spurious
            store.add("spurious_prior.mean", torch.zeros(E, s, dtype=DTYPE))
            store.add("spurious_prior.log_var", torch.zeros(E, s, dtype=DTYPE))
        if self.inv_prior is not None:
            self.inv_prior.init(store, g)
        if self.ivae_prior_net is not None:
            init_mlp(store, self.ivae_prior_net, "ivae_prior", g)
            with torch.no_grad():
                store["ivae_prior.0.weight"].zero_()
        return store

    # parameter groups -----------------------------------------------------

    @property
    def prior_param_names(self) -> list[str]:
        """Parameters trained by score matching only (the unnormalised prior)."""
        return self.inv_prior.param_names() if self.inv_prior is not None else []

    @property
    def elbo_param_names(self) -> list[str]:
        prior = set(self.prior_param_names)
        return [n for n in self.params.names() if n not in prior]

    # forward pieces -------------------------------------------------------

    def encode_covariates(self, params: Mapping[str, torch.Tensor], d_raw: torch.Tensor) -> torch.Tensor:
        if d_raw.shape[-1] == 0:
            d_raw = torch.zeros(*d_raw.shape[:-1], 1, dtype=DTYPE)
        return mlp_forward(self.covariate_net, params, "covariate_encoder", d_raw)

    def encode(self, params: Mapping[str, torch.Tensor], features: torch.Tensor,
               env_onehot: torch.Tensor, d_embed: torch.Tensor) -> DiagGaussianParams:
        if features.shape[-1] != self.config.n_genes:
            raise SchemaError(f"expected {self.config.n_genes} genes, got {features.shape[-1]}")
        h = mlp_forward(self.encoder_net, params, "encoder", torch.cat([features, env_onehot, d_embed], -1))
        m = self.config.latent_dim
        return DiagGaussianParams(h[..., :m], h[..., m:])

    def decode(self, params: Mapping[str, torch.Tensor], z: torch.Tensor, library: torch.Tensor) -> NBParams:
        check_finite(z, "latent sample")
        rho = torch.softmax(mlp_forward(self.decoder_net, params, "decoder", z), dim=-1)
        theta = positive(params["dispersion.raw"])
        return NBParams(library.unsqueeze(-1) * rho, theta.expand_as(rho))

    def spurious_prior_params(self, params: Mapping[str, torch.Tensor], env: torch.Tensor) -> DiagGaussianParams:
        E = self.schema.n_envs
        if bool(((env < 0) | (env >= E)).any()):
            raise IndexError("environment index out of range")
        return DiagGaussianParams(params["spurious_prior.mean"][env], params["spurious_prior.log_var"][env])

    def ivae_prior_params(self, params: Mapping[str, torch.Tensor], d_embed, env_onehot) -> DiagGaussianParams:
        h = mlp_forward(self.ivae_prior_net, params, "ivae_prior", torch.cat([d_embed, env_onehot], -1))
        m = self.config.latent_dim
        return DiagGaussianParams(h[..., :m], h[..., m:])

    def prior_condition(self, d_embed: torch.Tensor, env_onehot: torch.Tensor) -> torch.Tensor:
        if self.config.variant == "nfivae":
            return torch.cat([d_embed, env_onehot], -1)
        return d_embed

    def sample_latent(self, enc: DiagGaussianParams, noise: torch.Tensor) -> LatentSplit:
        if noise.shape[-1] != self.config.latent_dim:
            raise ValueError(f"noise dim {noise.shape[-1]} != latent dim {self.config.latent_dim}")
        return split_latent(gaussian_sample(enc, noise), self.config.n_invariant)

    # convenience ----------------------------------------------------------

    def posterior(self, params: Mapping[str, torch.Tensor], batch: Batch):
        d_embed = self.encode_covariates(params, batch.d_raw)
        return self.encode(params, batch.features, batch.env_onehot, d_embed), d_embed

    @torch.no_grad()
    def posterior_mean(self, batch: Batch) -> torch.Tensor:
        enc, _ = self.posterior(self.params.view(), batch)
        return check_finite(enc.mean.detach(), "posterior mean")


def split_latent(z: torch.Tensor, n_invariant: int) -> LatentSplit:
    return LatentSplit(z[..., :n_invariant], z[..., n_invariant:])


def log1p_features(counts: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.log1p(counts) - mean) / std


def standardization_stats(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise ValueError("negative counts")
    lx = np.log1p(counts)
    mean = lx.mean(axis=0)
    std = lx.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    return mean, std


def make_batch(counts, d_raw, env_idx, schema: CovariateSchema, mean, std,
               group=None, group_size=None) -> Batch:
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise ValueError("negative counts")
    n = counts.shape[0]
    library = counts.sum(axis=1)
    # an empty cell still needs a positive scale for the NB mean
    library = np.where(library > 0, library, 1.0)
    group = np.zeros(n, dtype=np.int64) if group is None else np.asarray(group)
    group_size = np.full(n, float(n)) if group_size is None else np.asarray(group_size, dtype=np.float64)
    return Batch(
        counts=as_tensor(counts),
        features=as_tensor(log1p_features(counts, mean, std)),
        d_raw=as_tensor(np.asarray(d_raw, dtype=np.float64).reshape(n, -1)),
        env=torch.as_tensor(np.asarray(env_idx), dtype=torch.long),
        env_onehot=as_tensor(schema.one_hot_env(np.asarray(env_idx))),
        library=as_tensor(library),
        group=torch.as_tensor(group, dtype=torch.long),
        group_size=as_tensor(group_size),
    )
