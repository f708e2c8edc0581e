"""Latent-recovery, invariant-prediction and integration metrics.

All functions are pure: the same inputs (and seed, where one is taken) give
the same numbers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.stats import chi2, rankdata
from sklearn.cluster import KMeans
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import silhouette_samples
from sklearn.preprocessing import StandardScaler

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    """A metric's preconditions are not met."""


def _labels(v, n: int | None = None) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise MetricError("labels must be one-dimensional")
    if n is not None and len(arr) != n:
        raise MetricError(f"label length {len(arr)} does not match {n} rows")
    return arr


def _codes(v) -> tuple[np.ndarray, np.ndarray]:
    uniq, codes = np.unique(np.asarray(v), return_inverse=True)
    return uniq, codes.reshape(-1)


def _matrix(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[0] < 2:
        raise MetricError("an embedding needs at least 2 rows")
    if not np.isfinite(z).all():
        raise MetricError("embedding contains non-finite values")
    return z


# latent recovery -------------------------------------------------------------

def correlation_matrix(a: np.ndarray, b: np.ndarray, method: str = "pearson") -> np.ndarray:
    """Cross-correlation between the columns of ``a`` and ``b``; constant columns give 0."""
    a, b = _matrix(a), _matrix(b)
    if a.shape[0] != b.shape[0]:
        raise MetricError("row counts differ")
    if method == "spearman":
        a, b = rankdata(a, axis=0), rankdata(b, axis=0)
    elif method != "pearson":
        raise MetricError(f"unknown correlation method {method!r}")

    def standardize(x):
        x = x - x.mean(axis=0)
        norm = np.sqrt((x ** 2).sum(axis=0))
        ok = norm > 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0)))
        return np.where(ok, x / np.where(ok, norm, 1.0), 0.0)

    return np.clip(standardize(a).T @ standardize(b), -1.0, 1.0)


def mcc(z_true, z_est, method: str = "pearson") -> float:
    """Mean absolute correlation under the best one-to-one column matching.

    Scores ``min(k_true, k_est)`` matched pairs, so extra columns on either
    side are ignored.
    """
    c = np.abs(correlation_matrix(z_true, z_est, method))
    rows, cols = linear_sum_assignment(c, maximize=True)
    return float(c[rows, cols].mean())


# invariant prediction --------------------------------------------------------

@dataclass
class ProbeResult:
    per_env: dict[str, float]
    summary: dict[str, float]
    degenerate: bool = False
    per_class: dict[str, float] = field(default_factory=dict)


def probe_accuracy(z_train, y_train, z_eval, y_eval, env_eval, max_iter: int = 2000) -> ProbeResult:
    """Multinomial logistic-regression probe fitted on ``z_train`` and scored per environment.

    Features are standardized with training statistics. A constant training
    label makes the probe a constant predictor; the result is flagged
    ``degenerate``.
    """
    z_train, z_eval = _matrix(z_train), _matrix(z_eval)
    y_train = _labels(y_train, z_train.shape[0])
    y_eval = _labels(y_eval, z_eval.shape[0])
    env_eval = _labels(env_eval, z_eval.shape[0])
    classes = np.unique(y_train)
    if len(classes) < 2:
        pred = np.full(len(y_eval), classes[0], dtype=y_train.dtype)
        degenerate = True
    else:
        scaler = StandardScaler().fit(z_train)
        clf = LogisticRegression(max_iter=max_iter, tol=1e-8)
        clf.fit(scaler.transform(z_train), y_train)
        pred = clf.predict(scaler.transform(z_eval))
        degenerate = False
    hit = pred == y_eval
    per_env = {str(e): float(hit[env_eval == e].mean()) for e in np.unique(env_eval)}
    acc = np.array(list(per_env.values()))
    summary = {"avg": float(acc.mean()), "min": float(acc.min()), "max": float(acc.max()),
               "median": float(np.median(acc))}
    per_class = {str(c): float(hit[y_eval == c].mean()) for c in np.unique(y_eval)}
    return ProbeResult(per_env, summary, degenerate, per_class)


# silhouettes ----------------------------------------------------------------

def _silhouette(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Per-point silhouette; singleton clusters and all-singleton labelings score 0."""
    n_labels = len(np.unique(codes))
    if n_labels < 2 or n_labels >= len(codes):
        return np.zeros(len(codes))
    return silhouette_samples(z, codes, metric="euclidean")


def silhouette_label_asw(z, labels) -> float:
    """Mean silhouette of ``labels`` rescaled to [0, 1] as ``(asw + 1) / 2``."""
    z = _matrix(z)
    _, codes = _codes(_labels(labels, z.shape[0]))
    if codes.max(initial=0) < 1:
        raise MetricError("silhouette needs at least 2 labels")
    return float((_silhouette(z, codes).mean() + 1.0) / 2.0)


def batch_asw(z, batch_labels, group_labels) -> float:
    """Batch mixing within each group: mean over groups of ``mean(1 - |s_batch|)``.

    A group holding a single batch scores 1 (its silhouettes are defined as 0).
    """
    z = _matrix(z)
    batch = _labels(batch_labels, z.shape[0])
    group = _labels(group_labels, z.shape[0])
    scores = []
    for g in np.unique(group):
        idx = np.nonzero(group == g)[0]
        _, codes = _codes(batch[idx])
        s = _silhouette(z[idx], codes)
        scores.append(float(np.mean(1.0 - np.abs(s))))
    return float(np.mean(scores))


# clustering agreement --------------------------------------------------------

def _contingency(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise MetricError("labelings must be 1-d and of equal length")
    if len(a) < 2:
        raise MetricError("labelings need at least 2 entries")
    _, ca = _codes(a)
    _, cb = _codes(b)
    table = np.zeros((ca.max() + 1, cb.max() + 1))
    np.add.at(table, (ca, cb), 1.0)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_a, labels_b) -> float:
    """Mutual information over the arithmetic mean of the two entropies (0/0 := 0)."""
    t = _contingency(labels_a, labels_b)
    n = t.sum()
    pa, pb = t.sum(1), t.sum(0)
    nz = t > 0
    mi = float((t[nz] / n * np.log(t[nz] * n / np.outer(pa, pb)[nz])).sum())
    denom = 0.5 * (_entropy(pa) + _entropy(pb))
    if denom <= 0:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


def ari(labels_a, labels_b) -> float:
    """Pair-counting adjusted Rand index.

    The denominator vanishes only for two identical trivial partitions (both
    all-singleton or both a single cluster); those score 1.
    """
    t = _contingency(labels_a, labels_b)

    def pairs(x):
        return float((x * (x - 1) / 2).sum())

    n_pairs = pairs(np.array([t.sum()]))
    index, sa, sb = pairs(t), pairs(t.sum(1)), pairs(t.sum(0))
    # multiplied through by n_pairs so integer-valued counts stay exact
    num = n_pairs * index - sa * sb
    denom = 0.5 * n_pairs * (sa + sb) - sa * sb
    if denom == 0:
        return 1.0
    return float(num / denom)


def kmeans(z, k: int, seed: int = 0) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding, 10 restarts, best inertia kept."""
    z = _matrix(z)
    if not 1 <= k <= z.shape[0]:
        raise MetricError(f"k={k} must lie in [1, {z.shape[0]}]")
    km = KMeans(n_clusters=k, init="k-means++", n_init=10, algorithm="lloyd", random_state=seed)
    return km.fit_predict(z).astype(np.int64)


# graph metrics ---------------------------------------------------------------

@dataclass
class KnnGraph:
    neighbors: np.ndarray  # (n, k) indices, nearest first
    k: int

    @property
    def n_nodes(self) -> int:
        return self.neighbors.shape[0]


def knn_graph(z, k: int, chunk: int = 512) -> KnnGraph:
    """Exact Euclidean k nearest neighbours, self excluded, ties broken by lower index."""
    z = _matrix(z)
    n = z.shape[0]
    if not 1 <= k < n:
        raise MetricError(f"k={k} must lie in [1, {n - 1}]")
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        d2 = ((z[rows, None, :] - z[None, :, :]) ** 2).sum(-1)
        d2[np.arange(len(rows)), rows] = np.inf
        out[rows] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return KnnGraph(out, k)


def _adjacency(g: KnnGraph, nodes: np.ndarray) -> csr_matrix:
    """Undirected adjacency of the subgraph induced by ``nodes``."""
    local = np.full(g.n_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    src = np.repeat(local[nodes], g.k)
    dst = local[g.neighbors[nodes].reshape(-1)]
    keep = dst >= 0
    a = csr_matrix((np.ones(keep.sum()), (src[keep], dst[keep])), shape=(len(nodes), len(nodes)))
    return a + a.T


def graph_connectivity(g: KnnGraph, labels) -> float:
    """Mean over labels of the largest-connected-component fraction of the label's subgraph."""
    labels = _labels(labels, g.n_nodes)
    scores = []
    for lab in np.unique(labels):
        nodes = np.nonzero(labels == lab)[0]
        _, comp = connected_components(_adjacency(g, nodes), directed=False)
        scores.append(np.bincount(comp).max() / len(nodes))
    return float(np.mean(scores))


def kbet(g: KnnGraph, batch_labels, alpha: float = 0.05, sample_fraction: float = 0.25, seed: int = 0) -> float:
    """Rejection rate of a chi-square test of neighbourhood batch composition.

    Each sampled node's k neighbours are compared with the global batch
    frequencies (df = #batches - 1). Batches whose expected neighbourhood
    count falls below 1 are pooled, smallest first.
    """
    batch = _labels(batch_labels, g.n_nodes)
    _, codes = _codes(batch)
    freq = np.bincount(codes) / len(codes)
    if len(freq) < 2:
        return 0.0
    # pool the rarest batches until every expected count reaches 1
    pools = [[c] for c in np.argsort(freq, kind="stable")]
    while len(pools) > 2 and freq[pools[0]].sum() * g.k < 1:
        logger.warning("kBET: pooling batches %s with %s (expected count < 1 at k=%d)", pools[0], pools[1], g.k)
        pools = sorted([pools[0] + pools[1]] + pools[2:], key=lambda p: (freq[p].sum(), min(p)))
    pool_of = np.empty(len(freq), dtype=np.int64)
    for j, members in enumerate(pools):
        pool_of[members] = j
    merged_codes = pool_of[codes]
    p = np.bincount(merged_codes, minlength=len(pools)) / len(codes)
    rng = np.random.default_rng(seed)
    n_test = max(1, int(math.floor(sample_fraction * g.n_nodes)))
    nodes = np.sort(rng.choice(g.n_nodes, size=n_test, replace=False))
    counts = np.zeros((n_test, len(pools)))
    np.add.at(counts, (np.repeat(np.arange(n_test), g.k), merged_codes[g.neighbors[nodes]].reshape(-1)), 1.0)
    expected = g.k * p
    stat = ((counts - expected) ** 2 / expected).sum(1)
    pval = chi2.sf(stat, df=len(pools) - 1)
    return float((pval < alpha).mean())


# isolated labels -------------------------------------------------------------

def isolated_labels(type_labels, batch_labels) -> list:
    """Labels present in the fewest distinct batches."""
    t, b = np.asarray(type_labels), np.asarray(batch_labels)
    if t.shape != b.shape:
        raise MetricError("type and batch labels differ in length")
    n_batches = {lab: len(np.unique(b[t == lab])) for lab in np.unique(t)}
    least = min(n_batches.values())
    return [lab for lab, c in n_batches.items() if c == least]


def isolated_label_f1(cluster_labels, type_labels, batch_labels) -> float:
    """Mean over isolated labels of the best cluster F1 against the label's membership."""
    clusters = np.asarray(cluster_labels)
    types = np.asarray(type_labels)
    if clusters.shape != types.shape:
        raise MetricError("cluster and type labels differ in length")
    if clusters.size == 0:
        raise MetricError("no clusters")
    scores = []
    for lab in isolated_labels(types, batch_labels):
        member = types == lab
        best = 0.0
        for c in np.unique(clusters):
            in_c = clusters == c
            overlap = float((in_c & member).sum())
            best = max(best, 2.0 * overlap / (in_c.sum() + member.sum()))
        scores.append(best)
    return float(np.mean(scores))


def isolated_label_silhouette(z, type_labels, batch_labels) -> float:
    """Scaled silhouette of each isolated label against the rest, averaged over isolated labels."""
    z = _matrix(z)
    types = _labels(type_labels, z.shape[0])
    if len(np.unique(types)) < 2:
        raise MetricError("silhouette needs at least 2 labels")
    scores = []
    for lab in isolated_labels(types, batch_labels):
        member = types == lab
        s = _silhouette(z, member.astype(np.int64))
        scores.append((s[member].mean() + 1.0) / 2.0)
    return float(np.mean(scores))


# report ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    metrics: dict[str, float] = field(default_factory=dict)
    skipped: list[dict[str, str]] = field(default_factory=list)

    def skip(self, name: str, reason: str) -> None:
        logger.warning("skipping %s: %s", name, reason)
        self.skipped.append({"name": name, "reason": reason})

    def to_dict(self, meta: Mapping | None = None) -> dict:
        return {"metrics": dict(sorted(self.metrics.items())), "skipped": list(self.skipped),
                "meta": dict(meta or {})}


BLOCKS = ("invariant", "spurious", "all")


def metrics_report(blocks: Mapping[str, np.ndarray], type_labels: Sequence | None = None,
                   batch_labels: Sequence | None = None, true_latents: Mapping[str, np.ndarray] | None = None,
                   probe_train_envs: Sequence[str] | None = None, k: int = 15, seed: int = 0) -> MetricsReport:
    """Every applicable metric for each embedding block.

    ``blocks`` maps block name (``invariant``, ``spurious``, ``all``) to a
    cells x dims matrix; ``true_latents`` maps ``invariant`` / ``spurious`` to
    ground-truth matrices. The probe is fitted on cells whose batch label is in
    ``probe_train_envs`` and scored on every other environment.
    """
    rep = MetricsReport()
    n = next(iter(blocks.values())).shape[0] if blocks else 0
    types = None if type_labels is None else _labels(type_labels, n)
    batch = None if batch_labels is None else _labels(batch_labels, n)
    n_types = 0 if types is None else len(np.unique(types))
    n_batches = 0 if batch is None else len(np.unique(batch))

    if true_latents:
        for name in ("invariant", "spurious"):
            truth, est = true_latents.get(name), blocks.get(name)
            if truth is None or truth.shape[1] == 0:
                rep.skip(f"mcc_{name}", "no ground-truth latents for this block")
            elif est is None or est.shape[1] == 0:
                rep.skip(f"mcc_{name}", "embedding has no columns in this block")
            else:
                rep.metrics[f"mcc_{name}"] = mcc(truth, est)
    else:
        rep.skip("mcc", "no ground-truth latents")

    for block in BLOCKS:
        z = blocks.get(block)
        if z is None:
            continue
        if z.shape[1] == 0:
            rep.skip(f"*_{block}", "embedding block has no columns")
            continue
        _block_metrics(rep, block, np.asarray(z, dtype=np.float64), types, batch, n_types, n_batches, k, seed)

    if probe_train_envs is not None:
        _probe_metrics(rep, blocks, types, batch, probe_train_envs)
    return rep


def _block_metrics(rep, block, z, types, batch, n_types, n_batches, k, seed):
    graph = knn_graph(z, min(k, z.shape[0] - 1))
    if types is None:
        rep.skip(f"type metrics ({block})", "no label column")
    elif n_types < 2:
        rep.skip(f"type metrics ({block})", "fewer than 2 cell-type labels")
    else:
        clusters = kmeans(z, n_types, seed)
        rep.metrics[f"asw_label_{block}"] = silhouette_label_asw(z, types)
        rep.metrics[f"nmi_{block}"] = nmi(clusters, types)
        rep.metrics[f"ari_{block}"] = ari(clusters, types)
        rep.metrics[f"graph_connectivity_{block}"] = graph_connectivity(graph, types)
        if batch is not None:
            rep.metrics[f"isolated_label_f1_{block}"] = isolated_label_f1(clusters, types, batch)
            rep.metrics[f"isolated_label_asw_{block}"] = isolated_label_silhouette(z, types, batch)
    if batch is None:
        rep.skip(f"batch metrics ({block})", "no batch labels")
    elif n_batches < 2:
        rep.skip(f"batch metrics ({block})", "fewer than 2 batches")
    else:
        groups = types if types is not None else np.zeros(len(batch), dtype=np.int64)
        rep.metrics[f"batch_asw_{block}"] = batch_asw(z, batch, groups)
        rep.metrics[f"kbet_{block}"] = kbet(graph, batch, seed=seed)


def _probe_metrics(rep, blocks, types, batch, train_envs):
    if types is None:
        rep.skip("probe_accuracy", "no label column")
        return
    if batch is None:
        rep.skip("probe_accuracy", "no environment labels")
        return
    train_envs = [str(e) for e in train_envs]
    env = np.array([str(v) for v in batch])
    unknown = sorted(set(train_envs) - set(env))
    if unknown:
        rep.skip("probe_accuracy", f"unknown probe training environments {unknown}")
        return
    train = np.isin(env, train_envs)
    if train.all() or not train.any():
        rep.skip("probe_accuracy", "probe needs both training and held-out environments")
        return
    for block in BLOCKS:
        z = blocks.get(block)
        if z is None or z.shape[1] == 0:
            continue
        res = probe_accuracy(z[train], types[train], z[~train], types[~train], env[~train])
        if res.degenerate:
            rep.skip(f"probe_accuracy_{block}", "single-class training labels; probe is constant")
        for e, acc in res.per_env.items():
            rep.metrics[f"probe_accuracy_{block}_{e}"] = acc
        for stat, v in res.summary.items():
            rep.metrics[f"probe_accuracy_{block}_{stat}"] = v
    if "probe_accuracy_invariant_avg" in rep.metrics:
        rep.metrics["probe_accuracy_heldout"] = rep.metrics["probe_accuracy_invariant_avg"]
