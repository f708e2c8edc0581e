"""Training loop, checkpoint container and embedding extraction."""
from __future__ import annotations

import base64
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .data import Dataset
from .losses import elbo_terms, forward, sm_loss, tc_loss, _sm_inputs
from .model import Batch, CovariateSchema, InVAE, ModelConfig, SchemaError, make_batch, standardization_stats
from .numerics import DTYPE, AdamState, NonFiniteError, adam_step

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class NonFiniteLossError(NonFiniteError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch = epoch, batch


class CheckpointError(ValueError):
    """Corrupt or unreadable checkpoint container."""


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.01
    beta: float = 1.0
    lambda_reg: float = 0.01
    mc_samples: int = 1
    seed: int = 0
    patience: int = 10
    val_fraction: float = 0.1
    sm_every: int = 1
    restore_best: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 4:
            raise ValueError("batch size must be >= 4")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.mc_samples < 1 or self.sm_every < 1:
            raise ValueError("mc_samples and sm_every must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train: dict[str, float]
    val: dict[str, float] | None
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return {"epochs": [asdict(r) for r in self.epochs], "stopped_early": self.stopped_early,
                "best_epoch": self.best_epoch}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    schema: CovariateSchema
    genes: list[str]
    std_mean: np.ndarray
    std_scale: np.ndarray
    params: dict[str, torch.Tensor]
    format_version: int = FORMAT_VERSION

    def build_model(self) -> InVAE:
        model = InVAE(self.model_config, self.schema, seed=self.train_config.seed)
        model.params.load(self.params)
        return model

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "model_config": self.model_config.to_dict(),
            "train_config": asdict(self.train_config),
            "covariate_vocab": self.schema.to_dict(),
            "genes": list(self.genes),
            "standardization": {"mean": [float(v) for v in self.std_mean],
                                "std": [float(v) for v in self.std_scale]},
            "params": {n: {"shape": list(t.shape), "data": _encode_tensor(t)} for n, t in self.params.items()},
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise CheckpointError(f"corrupt checkpoint container: {err}") from err
        if not isinstance(doc, dict) or "format_version" not in doc:
            raise CheckpointError("corrupt checkpoint container: no format_version")
        if doc["format_version"] != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint format_version {doc['format_version']!r} (expected {FORMAT_VERSION})")
        try:
            params = {n: _decode_tensor(v["data"], v["shape"]) for n, v in doc["params"].items()}
            ckpt = cls(
                model_config=ModelConfig.from_dict(doc["model_config"]),
                train_config=TrainConfig(**doc["train_config"]),
                schema=CovariateSchema.from_dict(doc["covariate_vocab"]),
                genes=list(doc["genes"]),
                std_mean=np.array(doc["standardization"]["mean"], dtype=np.float64),
                std_scale=np.array(doc["standardization"]["std"], dtype=np.float64),
                params=params,
            )
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointError(f"corrupt checkpoint container: {err!r}") from err
        expected = set(ckpt.build_model().params.names())
        if expected != set(params):
            raise CheckpointError(f"checkpoint parameter names do not match the model: "
                                  f"missing {sorted(expected - set(params))[:3]}, extra {sorted(set(params) - expected)[:3]}")
        return ckpt


def _encode_tensor(t: torch.Tensor) -> str:
    return base64.b64encode(np.ascontiguousarray(t.detach().numpy(), dtype="<f8").tobytes()).decode("ascii")


def _decode_tensor(data: str, shape) -> torch.Tensor:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise ValueError("tensor data does not match its shape")
    return torch.from_numpy(arr.astype(np.float64).reshape(shape))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(ckpt.to_json())


def load_checkpoint(path) -> Checkpoint:
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as err:
        raise CheckpointError(f"corrupt checkpoint container: {err}") from err
    return Checkpoint.from_json(text)


# data preparation ----------------------------------------------------------

@dataclass
class PreparedData:
    schema: CovariateSchema
    d_raw: np.ndarray
    env_idx: np.ndarray
    groups: np.ndarray
    group_sizes: np.ndarray


def prepare(dataset: Dataset, schema: CovariateSchema | None = None, lenient: bool = False) -> PreparedData:
    schema = schema or CovariateSchema.infer(dataset.covariates, dataset.env)
    d_raw = schema.featurize(dataset.covariates, lenient=lenient)
    env_idx = schema.env_index(dataset.env, lenient=lenient)
    groups = schema.domain_groups(dataset.covariates, env_idx)
    sizes = np.bincount(groups)[groups].astype(np.float64)
    return PreparedData(schema, d_raw, env_idx, groups, sizes)


def stratified_split(keys: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``fraction`` of each stratum (rounded); returns (train, val) indices."""
    val = []
    for k in np.unique(keys):
        idx = np.nonzero(keys == k)[0]
        n_val = int(round(fraction * len(idx)))
        if n_val and len(idx) - n_val >= 1:
            val.append(rng.permutation(idx)[:n_val])
    val = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=np.int64)
    train = np.setdiff1d(np.arange(len(keys)), val)
    return train, val


class StratifiedBatcher:
    """Batches that interleave domain groups evenly; leftovers carry to the next epoch."""

    def __init__(self, groups: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.groups = groups
        self.batch_size = min(batch_size, len(groups))
        self.rng = rng
        self.carry = np.zeros(0, dtype=np.int64)

    def epoch(self) -> list[np.ndarray]:
        keys = np.empty(len(self.groups))
        for g in np.unique(self.groups):
            idx = np.nonzero(self.groups == g)[0]
            ranks = self.rng.permutation(len(idx))
            keys[idx] = (ranks + self.rng.random(len(idx))) / len(idx)
        fresh = np.argsort(keys, kind="stable")
        fresh = fresh[~np.isin(fresh, self.carry)]
        order = np.concatenate([self.carry, fresh])
        n_full = len(order) // self.batch_size
        self.carry = order[n_full * self.batch_size:]
        return [order[k * self.batch_size:(k + 1) * self.batch_size] for k in range(n_full)]


# training ------------------------------------------------------------------

def _noise(gen: torch.Generator, n: int, m: int) -> torch.Tensor:
    return torch.randn(n, m, generator=gen, dtype=DTYPE)


def evaluate_losses(model: InVAE, batch: Batch, noise: torch.Tensor, beta: float, lambda_reg: float) -> dict[str, float]:
    view = model.params.view(detach=model.params.names())
    fp = forward(model, view, batch, noise)
    t = elbo_terms(model, view, batch, fp)
    elbo = float((t["log_lik"] - t["log_q"] + t["log_prior"]).mean())
    tc = float(tc_loss(model, batch, fp)) if model.config.variant == "invae" else 0.0
    sm = float(sm_loss(model, view, *_sm_inputs(model, fp, batch), lambda_reg=lambda_reg).detach())
    return {"elbo": elbo, "sm": sm, "tc": tc, "total": -elbo + sm + beta * tc}


def elbo_step(model: InVAE, opt: AdamState, batch: Batch, noises: list[torch.Tensor], beta: float):
    """Step A: one Adam update of everything except the unnormalised prior on ``-ELBO + beta * TC``.

    Returns the batch-mean ELBO and TC plus the detached (latent block,
    condition) pairs for the score-matching step.
    """
    store = model.params
    prior = model.prior_param_names
    view = store.view(detach=prior)
    elbo = tc = torch.zeros((), dtype=DTYPE)
    sm_inputs = []
    for noise in noises:
        fp = forward(model, view, batch, noise)
        t = elbo_terms(model, view, batch, fp)
        elbo = elbo + (t["log_lik"] - t["log_q"] + t["log_prior"]).mean() / len(noises)
        if model.config.variant == "invae":
            tc = tc + tc_loss(model, batch, fp) / len(noises)
        sm_inputs.append(_sm_inputs(model, fp, batch))
    loss = -elbo + beta * tc
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError(f"ELBO/TC objective is {float(loss.detach())}")
    store.unfreeze()
    store.freeze(prior)
    try:
        names = store.trainable()
        grads = torch.autograd.grad(loss, [store[n] for n in names], allow_unused=True)
        adam_step(opt, store, {n: (torch.zeros_like(store[n]) if g is None else g) for n, g in zip(names, grads)})
    finally:
        store.unfreeze()
    return elbo.detach(), tc.detach(), sm_inputs


def sm_step(model: InVAE, opt: AdamState, sm_inputs, lambda_reg: float) -> torch.Tensor:
    """Step B: one Adam update of the unnormalised prior only, on the score-matching loss."""
    store = model.params
    prior = model.prior_param_names
    if not prior:
        return torch.zeros((), dtype=DTYPE)
    view = store.view()
    sm = torch.zeros((), dtype=DTYPE)
    for z_block, cond in sm_inputs:
        sm = sm + sm_loss(model, view, z_block, cond, lambda_reg) / len(sm_inputs)
    if not bool(torch.isfinite(sm)):
        raise NonFiniteError(f"score-matching objective is {float(sm.detach())}")
    store.unfreeze()
    store.freeze(model.elbo_param_names)
    try:
        grads = torch.autograd.grad(sm, [store[n] for n in prior], allow_unused=True)
        adam_step(opt, store, {n: (torch.zeros_like(store[n]) if g is None else g) for n, g in zip(prior, grads)})
    finally:
        store.unfreeze()
    return sm.detach()


def train_step(model: InVAE, opt: AdamState, batch: Batch, noises: list[torch.Tensor],
               beta: float, lambda_reg: float, do_sm: bool = True) -> dict[str, torch.Tensor]:
    """Step A then step B on the same batch; step B reuses step A's latent samples as fixed data."""
    elbo, tc, sm_inputs = elbo_step(model, opt, batch, noises, beta)
    sm = sm_step(model, opt, sm_inputs, lambda_reg) if do_sm else torch.zeros((), dtype=DTYPE)
    return {"elbo": elbo, "sm": sm, "tc": tc, "total": -elbo + beta * tc + sm}


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          schema: CovariateSchema | None = None, log_every: int = 0) -> tuple[Checkpoint, TrainReport]:
    """Fit a model; returns the best-validation checkpoint and the per-epoch report."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg, tcfg = model_config, train_config
    if cfg.n_genes != len(dataset.genes):
        raise SchemaError(f"model expects {cfg.n_genes} genes, dataset has {len(dataset.genes)}")
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    prep = prepare(dataset, schema)
    for k, lv in enumerate(prep.schema.env_levels):
        if (prep.env_idx == k).sum() < 2:
            raise ValueError(f"environment {lv!r} has fewer than 2 cells")

    strata = prep.groups * 100003 + _label_codes(dataset.labels)
    train_idx, val_idx = stratified_split(strata, tcfg.val_fraction, rng)
    for g in np.unique(prep.groups):
        if (prep.groups[train_idx] == g).sum() < 2:
            logger.warning("domain group %d has fewer than 2 training cells; it never contributes to TC", g)
    mean, std = standardization_stats(dataset.counts[train_idx])

    def batch_of(idx):
        return make_batch(dataset.counts[idx], prep.d_raw[idx], prep.env_idx[idx], prep.schema, mean, std,
                          prep.groups[idx], prep.group_sizes[idx])

    full_train = batch_of(train_idx)
    val_batch = batch_of(val_idx) if len(val_idx) >= 2 else None
    model = InVAE(cfg, prep.schema, seed=tcfg.seed)
    opt = AdamState(lr=tcfg.lr)
    gen = torch.Generator().manual_seed(tcfg.seed)
    batcher = StratifiedBatcher(prep.groups[train_idx], tcfg.batch_size, rng)
    m = cfg.latent_dim

    report = TrainReport()
    best, best_score, since_best = None, math.inf, 0
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        sums = {"elbo": 0.0, "sm": 0.0, "tc": 0.0, "total": 0.0}
        batches = batcher.epoch()
        for b, local in enumerate(batches):
            batch = full_train.subset(local)
            noises = [_noise(gen, len(batch), m) for _ in range(tcfg.mc_samples)]
            try:
                out = train_step(model, opt, batch, noises, tcfg.beta, tcfg.lambda_reg,
                                 do_sm=(step % tcfg.sm_every == 0))
            except NonFiniteError as err:
                raise NonFiniteLossError(epoch, b, str(err)) from err
            step += 1
            for k in sums:
                sums[k] += float(out[k]) / len(batches)
        val = None
        if val_batch is not None:
            vgen = torch.Generator().manual_seed(tcfg.seed + 1)
            try:
                val = evaluate_losses(model, val_batch, _noise(vgen, len(val_batch), m), tcfg.beta, tcfg.lambda_reg)
            except NonFiniteError as err:
                raise NonFiniteLossError(epoch, -1, f"validation: {err}") from err
        report.epochs.append(EpochRecord(epoch, sums, val, time.perf_counter() - t0))
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d train %s val %s", epoch, _fmt(sums), _fmt(val or {}))
        score = -(val["elbo"] if val is not None else sums["elbo"])
        if score < best_score:
            best, best_score, since_best, report.best_epoch = model.params.snapshot(), score, 0, epoch
        else:
            since_best += 1
            if tcfg.patience and since_best >= tcfg.patience:
                report.stopped_early = True
                break
    if best is not None and tcfg.restore_best:
        model.params.load(best)
    ckpt = Checkpoint(cfg, tcfg, prep.schema, list(dataset.genes), mean, std, model.params.snapshot())
    return ckpt, report


def _label_codes(labels):
    if labels is None:
        return 0
    uniq = {v: k for k, v in enumerate(sorted(set(labels)))}
    return np.array([uniq[v] for v in labels], dtype=np.int64)


def _fmt(d: Mapping[str, float]) -> str:
    return " ".join(f"{k}={v:.4g}" for k, v in d.items())


# embedding -----------------------------------------------------------------

def align_genes(dataset: Dataset, genes: list[str]) -> np.ndarray:
    pos = {g: k for k, g in enumerate(dataset.genes)}
    missing = [g for g in genes if g not in pos]
    if missing:
        raise SchemaError(f"gene column {missing[0]!r} expected by the checkpoint is missing")
    return dataset.counts[:, [pos[g] for g in genes]]


def embed(dataset: Dataset, ckpt: Checkpoint, lenient: bool = False, chunk: int = 4096,
          model: InVAE | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means split into (Z_I, Z_S)."""
    counts = align_genes(dataset, ckpt.genes)
    prep = prepare(dataset, ckpt.schema, lenient=lenient)
    model = model or ckpt.build_model()
    out = []
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        batch = make_batch(counts[sl], prep.d_raw[sl], prep.env_idx[sl], ckpt.schema, ckpt.std_mean, ckpt.std_scale)
        out.append(model.posterior_mean(batch).numpy())
    z = np.concatenate(out, axis=0) if out else np.zeros((0, ckpt.model_config.latent_dim))
    i = ckpt.model_config.n_invariant
    return z[:, :i].copy(), z[:, i:].copy()


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
