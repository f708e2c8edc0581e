"""Synthetic multi-environment count data with ground-truth latents.

Per cell: environment ``e``; biological class ``d`` drawn with an
environment-specific association; ``z_I ~ N(mu_d, Sigma_d)`` with correlated
coordinates; ``z_S ~ N(mu_site(e), diag sigma_site(e)^2)``; gene frequencies
``rho = softmax(f(z_I, z_S))`` for a random leaky-ReLU network ``f``; library
size ``l ~ LogNormal``; counts ``x ~ NB(l * rho, theta)``; label
``y = argmax(W_y z_I + b_y)`` with uniform label flips.

Environments that share a *site* share the spurious-latent distribution,
which is how a held-out environment can look like a training site while its
class composition is reversed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset
from .distributions import nb_sample


@dataclass
class SynthConfig:
    name: str = "custom"
    seed: int = 0
    n_envs: int = 4
    n_classes: int = 3
    n_invariant: int = 5
    n_spurious: int = 3
    n_genes: int = 100
    cells_per_group: int = 1000
    invariant_mean_scale: float = 2.0
    invariant_std_range: tuple[float, float] = (0.5, 1.5)
    rho_corr: float = 0.5
    corr_structure: str = "chain"
    spurious_mean_scale: float = 2.0
    spurious_std_range: tuple[float, float] = (0.5, 1.5)
    sites: tuple[int, ...] | None = None
    decoder_depth: int = 1
    decoder_width: int = 64
    decoder_scale: float = 1.0
    decoder_seed: int | None = None
    library_log_mean: float = 8.0
    library_log_std: float = 0.2
    dispersion: float = 2.0
    label_rule: str = "class_means"
    label_noise: float = 0.0
    association: tuple[float, ...] | None = None
    heldout_envs: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("invariant_std_range", "spurious_std_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.sites is not None:
            self.sites = tuple(int(v) for v in self.sites)
        if self.association is not None:
            self.association = tuple(float(v) for v in self.association)
        self.heldout_envs = tuple(int(v) for v in self.heldout_envs)
        self.validate()

    def validate(self) -> None:
        if self.n_envs < 2 or self.n_classes < 2:
            raise ValueError("need at least 2 environments and 2 classes")
        if self.n_invariant < 1 or self.n_spurious < 0 or self.n_genes < 1 or self.cells_per_group < 1:
            raise ValueError("invalid dimensions")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be a probability")
        if self.association is not None:
            if len(self.association) != self.n_envs:
                raise ValueError("association needs one strength per environment")
            if any(abs(a) > 1 for a in self.association):
                raise ValueError("association strengths must lie in [-1, 1]")
        if self.sites is not None and len(self.sites) != self.n_envs:
            raise ValueError("sites needs one entry per environment")
        if any(not 0 <= e < self.n_envs for e in self.heldout_envs):
            raise ValueError("held-out environment index out of range")
        for lo, hi in (self.invariant_std_range, self.spurious_std_range):
            if not 0 < lo <= hi:
                raise ValueError("std ranges must satisfy 0 < lo <= hi")
        if self.corr_structure not in ("chain", "equi"):
            raise ValueError("corr_structure must be 'chain' or 'equi'")
        if self.label_rule not in ("class_means", "identity", "random"):
            raise ValueError("label_rule must be class_means, identity or random")
        try:
            np.linalg.cholesky(correlation_matrix(self.n_invariant, self.rho_corr, self.corr_structure))
        except np.linalg.LinAlgError:
            raise ValueError(f"rho_corr={self.rho_corr} gives a covariance that is not positive definite") from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthTruth:
    """Generator parameters, kept for oracles and tests."""
    class_means: np.ndarray
    class_covs: np.ndarray
    site_of_env: np.ndarray
    spur_means: np.ndarray
    spur_stds: np.ndarray
    class_probs: np.ndarray
    decoder: list[tuple[np.ndarray, np.ndarray]]
    label_weights: np.ndarray
    label_bias: np.ndarray


@dataclass
class SynthDataset:
    counts: np.ndarray
    d: np.ndarray
    e: np.ndarray
    y: np.ndarray
    true_z_inv: np.ndarray
    true_z_spur: np.ndarray
    library: np.ndarray
    config: SynthConfig
    truth: SynthTruth = field(repr=False, default=None)

    def __len__(self) -> int:
        return self.counts.shape[0]

    def to_dataset(self) -> Dataset:
        n = len(self)
        width = len(str(n))
        i, s = self.true_z_inv.shape[1], self.true_z_spur.shape[1]
        return Dataset(
            cell_ids=[f"cell{k:0{width}d}" for k in range(n)],
            genes=[f"gene{g + 1:03d}" for g in range(self.counts.shape[1])],
            counts=self.counts,
            covariates={"bio_class": [f"class{v}" for v in self.d]},
            env=[f"env{v}" for v in self.e],
            labels=[f"type{v}" for v in self.y],
            true_latents=np.concatenate([self.true_z_inv, self.true_z_spur], axis=1),
            latent_names=[f"zI_{j + 1}" for j in range(i)] + [f"zS_{j + 1}" for j in range(s)],
        )


def correlation_matrix(k: int, rho: float, structure: str = "chain") -> np.ndarray:
    if structure == "equi":
        c = np.full((k, k), rho)
    else:
        c = np.zeros((k, k))
        idx = np.arange(k - 1)
        c[idx, idx + 1] = c[idx + 1, idx] = rho
    np.fill_diagonal(c, 1.0)
    return c


def class_probabilities(cfg: SynthConfig) -> np.ndarray:
    """``P(d | e)``: ``(1 + a_e * c_k) / D`` with class scores ``c`` spread over [-1, 1]."""
    a = np.zeros(cfg.n_envs) if cfg.association is None else np.asarray(cfg.association)
    c = np.linspace(-1.0, 1.0, cfg.n_classes)
    return (1.0 + a[:, None] * c[None, :]) / cfg.n_classes


def design_counts(cfg: SynthConfig) -> np.ndarray:
    """Cells per (e, d) design cell; rows sum to ``n_classes * cells_per_group``."""
    per_env = cfg.n_classes * cfg.cells_per_group
    probs = class_probabilities(cfg)
    out = np.zeros_like(probs, dtype=np.int64)
    for e in range(cfg.n_envs):
        raw = probs[e] * per_env
        base = np.floor(raw).astype(np.int64)
        # largest-remainder rounding keeps the row total exact
        order = np.argsort(-(raw - base), kind="stable")
        base[order[: per_env - base.sum()]] += 1
        out[e] = base
    if (out == 0).any():
        e, d = np.argwhere(out == 0)[0]
        raise ValueError(f"design cell (env {e}, class {d}) is empty; weaken the association")
    return out


def _sample_truth(cfg: SynthConfig, rng: np.random.Generator) -> SynthTruth:
    D, E, i, s = cfg.n_classes, cfg.n_envs, cfg.n_invariant, cfg.n_spurious
    corr = correlation_matrix(i, cfg.rho_corr, cfg.corr_structure)
    means = rng.normal(0.0, 1.0, (D, i)) * cfg.invariant_mean_scale
    stds = rng.uniform(*cfg.invariant_std_range, size=(D, i))
    covs = stds[:, :, None] * corr[None] * stds[:, None, :]
    sites = np.arange(E) if cfg.sites is None else np.asarray(cfg.sites)
    n_sites = int(sites.max()) + 1
    spur_means = rng.normal(0.0, 1.0, (n_sites, s)) * cfg.spurious_mean_scale
    spur_stds = rng.uniform(*cfg.spurious_std_range, size=(n_sites, s))

    drng = np.random.default_rng(cfg.decoder_seed if cfg.decoder_seed is not None else [cfg.seed, 1])
    dims = [i + s] + [cfg.decoder_width] * cfg.decoder_depth + [cfg.n_genes]
    layers = [(drng.normal(0, 1 / np.sqrt(a), (b, a)), drng.normal(0, 0.5, b)) for a, b in zip(dims[:-1], dims[1:])]

    if cfg.label_rule == "class_means":
        w, bias = means.copy(), -0.5 * (means ** 2).sum(1)
    elif cfg.label_rule == "identity":
        w, bias = np.eye(D, i), np.zeros(D)
    else:
        w, bias = rng.normal(0, 1, (D, i)), np.zeros(D)
    return SynthTruth(means, covs, sites, spur_means, spur_stds, class_probabilities(cfg), layers, w, bias)


def decoder_logits(truth: SynthTruth, z: np.ndarray, scale: float) -> np.ndarray:
    h = z
    for k, (w, b) in enumerate(truth.decoder):
        h = h @ w.T + b
        if k < len(truth.decoder) - 1:
            h = np.where(h > 0, h, 0.2 * h)
    return scale * h


def _softmax(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=1, keepdims=True)
    ea = np.exp(a)
    return ea / ea.sum(axis=1, keepdims=True)


def generate(cfg: SynthConfig) -> SynthDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    truth = _sample_truth(cfg, rng)
    counts_ed = design_counts(cfg)
    e = np.concatenate([np.full(counts_ed[k].sum(), k) for k in range(cfg.n_envs)])
    d = np.concatenate([np.repeat(np.arange(cfg.n_classes), counts_ed[k]) for k in range(cfg.n_envs)])
    n = len(e)

    z_inv = np.empty((n, cfg.n_invariant))
    for k in range(cfg.n_classes):
        idx = np.nonzero(d == k)[0]
        chol = np.linalg.cholesky(truth.class_covs[k])
        z_inv[idx] = truth.class_means[k] + rng.standard_normal((len(idx), cfg.n_invariant)) @ chol.T
    site = truth.site_of_env[e]
    z_spur = truth.spur_means[site] + truth.spur_stds[site] * rng.standard_normal((n, cfg.n_spurious))

    rho = _softmax(decoder_logits(truth, np.concatenate([z_inv, z_spur], axis=1), cfg.decoder_scale))
    library = np.exp(cfg.library_log_mean + cfg.library_log_std * rng.standard_normal(n))
    counts = nb_sample(library[:, None] * rho, cfg.dispersion, rng)

    y = np.argmax(z_inv @ truth.label_weights.T + truth.label_bias, axis=1)
    flip = rng.random(n) < cfg.label_noise
    y = np.where(flip, rng.integers(0, truth.label_weights.shape[0], n), y)
    return SynthDataset(counts, d, e, y, z_inv, z_spur, library, cfg, truth)


def default_suite() -> dict[str, SynthConfig]:
    """Named configurations used by the benchmark and the acceptance tests."""
    identifiability = SynthConfig(
        name="identifiability", n_envs=4, n_classes=3, n_invariant=5, n_spurious=3, n_genes=100,
        cells_per_group=1000, rho_corr=0.5,
    )
    ood = SynthConfig(
        name="ood-prediction", n_envs=3, n_classes=3, n_invariant=5, n_spurious=3, n_genes=100,
        cells_per_group=600, rho_corr=0.5, sites=(0, 1, 0), association=(0.9, -0.9, -0.9),
        heldout_envs=(2,), label_noise=0.05,
    )
    null = SynthConfig(
        name="null", n_envs=4, n_classes=3, n_invariant=5, n_spurious=3, n_genes=100,
        cells_per_group=250, invariant_mean_scale=0.0, invariant_std_range=(1.0, 1.0), rho_corr=0.0,
        spurious_mean_scale=0.0, spurious_std_range=(1.0, 1.0), decoder_scale=0.0,
    )
    return {c.name: c for c in (identifiability, ood, null)}


def suite_config(name: str, **overrides) -> SynthConfig:
    suite = default_suite()
    if name not in suite:
        raise KeyError(f"unknown suite config {name!r}; choose from {sorted(suite)}")
    return replace(suite[name], **overrides)
