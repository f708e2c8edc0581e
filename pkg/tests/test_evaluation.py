import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from invae.evaluation import (
    KnnGraph, MetricError, ari, batch_asw, graph_connectivity, isolated_label_f1, isolated_label_silhouette,
    isolated_labels, kbet, kmeans, knn_graph, mcc, metrics_report, nmi, probe_accuracy, silhouette_label_asw,
)

labelings = st.lists(st.integers(0, 4), min_size=2, max_size=40)


# MCC ---------------------------------------------------------------------------

def test_mcc_identity_and_affine_permutation():
    z = np.random.default_rng(0).normal(size=(300, 4))
    assert mcc(z, z) == pytest.approx(1.0, abs=1e-12)
    assert mcc(z, -2 * z[:, [2, 0, 3, 1]] + 7) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mcc_invariant_to_permutation_sign_and_affine_maps(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(50, 4))
    b = a @ rng.normal(size=(4, 4)) + rng.normal(size=(50, 4))
    base = mcc(a, b)
    perm = rng.permutation(4)
    scale = rng.uniform(0.5, 3, 4) * rng.choice([-1, 1], 4)
    assert mcc(a, b[:, perm] * scale + rng.normal(size=4)) == pytest.approx(base, abs=1e-12)
    assert mcc(a[:, perm] * scale - 3, b) == pytest.approx(base, abs=1e-12)


def test_mcc_null_simulation():
    vals = [mcc(np.random.default_rng(s).normal(size=(1000, 5)), np.random.default_rng(s + 1000).normal(size=(1000, 5)))
            for s in range(100)]
    assert max(vals) < 0.2


def test_mcc_uneven_columns_and_constant_column():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(200, 3))
    est = np.hstack([z[:, :2], np.ones((200, 1)), rng.normal(size=(200, 2))])
    # three true columns matched among five estimates: two perfect, the third against noise
    assert 2 / 3 < mcc(z, est) < 2 / 3 + 0.1
    assert mcc(z[:, :1], np.ones((200, 2))) == 0.0
    with pytest.raises(MetricError):
        mcc(z, z[:100])


def test_mcc_spearman_sees_monotone_maps():
    z = np.random.default_rng(2).normal(size=(400, 3))
    assert mcc(z, np.exp(z), method="spearman") == pytest.approx(1.0, abs=1e-12)
    assert mcc(z, np.exp(z)) < 0.95


# probe -------------------------------------------------------------------------

def test_probe_separable_with_margin():
    rng = np.random.default_rng(0)
    centers = np.array([[0, 0], [6, 0], [0, 6]])
    y = rng.integers(0, 3, 900)
    z = centers[y] + rng.uniform(-1, 1, (900, 2))
    env = np.where(np.arange(900) < 600, "train", "heldout")
    tr = env == "train"
    res = probe_accuracy(z[tr], y[tr], z[~tr], y[~tr], env[~tr])
    assert res.per_env["heldout"] >= 0.99 and not res.degenerate


def test_probe_chance_on_noise():
    rng = np.random.default_rng(0)
    n = 3000
    y = np.repeat([0, 1, 2], n // 3)
    z = rng.normal(size=(n, 4))
    res = probe_accuracy(z[::2], y[::2], z[1::2], y[1::2], np.array(["a", "b"] * (n // 4))[: n // 2])
    assert abs(res.summary["avg"] - 1 / 3) < 0.05
    assert set(res.summary) == {"avg", "min", "max", "median"}


def test_probe_constant_labels_flagged():
    z = np.random.default_rng(0).normal(size=(20, 2))
    res = probe_accuracy(z, ["t"] * 20, z, ["t"] * 20, ["e"] * 20)
    assert res.degenerate and res.per_env == {"e": 1.0}


# silhouettes -------------------------------------------------------------------

def silhouette_oracle(z, labels):
    """Direct O(n^2) silhouette with the singleton rule."""
    z, labels = np.asarray(z, float), np.asarray(labels)
    out = []
    for i in range(len(z)):
        d = np.sqrt(((z - z[i]) ** 2).sum(1))
        own = labels == labels[i]
        if own.sum() == 1:
            out.append(0.0)
            continue
        a = d[own].sum() / (own.sum() - 1)
        b = min(d[labels == c].mean() for c in set(labels.tolist()) if c != labels[i])
        out.append((b - a) / max(a, b))
    return np.array(out)


def test_silhouette_toy_by_hand():
    z = [[0, 0], [0, 1], [10, 0], [10, 1]]
    lab = ["A", "A", "B", "B"]
    # every point: a = 1, b = mean(10, sqrt(101))
    b = (10 + math.sqrt(101)) / 2
    raw = 1 - 1 / b
    assert silhouette_label_asw(z, lab) == pytest.approx((raw + 1) / 2, abs=1e-12)
    assert silhouette_label_asw(z, lab) == pytest.approx(0.950124, abs=1e-6)


def test_silhouette_matches_direct_scan():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(60, 3))
    lab = rng.integers(0, 4, 60)
    lab[0] = 9  # singleton cluster
    assert silhouette_label_asw(z, lab) == pytest.approx((silhouette_oracle(z, lab).mean() + 1) / 2, abs=1e-12)


def test_silhouette_overlap_and_separation_limits():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, 2))
    assert silhouette_label_asw(np.vstack([pts, pts]), [0] * 200 + [1] * 200) == pytest.approx(0.5, abs=0.02)
    scores = [silhouette_label_asw(np.vstack([pts, pts + sep]), [0] * 200 + [1] * 200) for sep in (10, 100, 1000)]
    assert scores == sorted(scores) and scores[-1] > 0.998
    with pytest.raises(MetricError):
        silhouette_label_asw(pts, [0] * 200)


def test_batch_asw_cases():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(300, 2))
    mixed = np.vstack([pts, pts + 1e-9])
    assert batch_asw(mixed, [0] * 300 + [1] * 300, [0] * 600) == pytest.approx(1.0, abs=0.02)
    apart = np.vstack([pts, pts + 1000])
    assert batch_asw(apart, [0] * 300 + [1] * 300, [0] * 600) == pytest.approx(0.0, abs=0.01)
    assert batch_asw(pts, [0] * 300, [0] * 300) == 1.0
    # a group with one batch contributes 1; the mixed group contributes about 1 as well
    assert batch_asw(np.vstack([mixed, apart]), [0] * 300 + [1] * 300 + [5] * 600,
                     [0] * 600 + [1] * 600) == pytest.approx(1.0, abs=0.02)


# NMI / ARI ---------------------------------------------------------------------

def test_nmi_ari_golden_values():
    assert nmi([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0
    assert ari([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5
    assert ari([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0
    assert nmi([0, 0, 0, 0], [0, 0, 0, 0]) == 0.0  # 0/0 := 0
    assert ari([0, 1, 2], [5, 6, 7]) == 1.0 and ari([0, 0], [1, 1]) == 1.0
    with pytest.raises(MetricError):
        ari([0, 1], [0, 1, 2])


@settings(max_examples=60, deadline=None)
@given(labelings, st.randoms(use_true_random=False))
def test_nmi_ari_match_sklearn_symmetric_and_rename_invariant(a, rnd):
    b = [rnd.randint(0, 3) for _ in a]
    renamed = [f"x{v * 7}" for v in a]
    if len(set(a)) > 1 or len(set(b)) > 1:  # sklearn scores two single-cluster labelings 1, not 0/0 := 0
        assert nmi(a, b) == pytest.approx(normalized_mutual_info_score(a, b, average_method="arithmetic"), abs=1e-12)
    assert ari(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12) and ari(a, b) == pytest.approx(ari(b, a), abs=1e-12)
    assert nmi(renamed, b) == pytest.approx(nmi(a, b), abs=1e-12) and ari(renamed, b) == ari(a, b)


# k-means -----------------------------------------------------------------------

def test_kmeans_cases():
    rng = np.random.default_rng(0)
    z = np.vstack([rng.normal(size=(50, 2)), rng.normal(size=(50, 2)) + 100])
    lab = kmeans(z, 2, seed=1)
    assert len(set(lab[:50])) == 1 and len(set(lab[50:])) == 1 and lab[0] != lab[50]
    small = rng.normal(size=(7, 2))
    assert len(set(kmeans(small, 7).tolist())) == 7
    assert np.array_equal(kmeans(z, 3, seed=4), kmeans(z, 3, seed=4))
    with pytest.raises(MetricError):
        kmeans(small, 8)


# kNN graph ---------------------------------------------------------------------

def knn_oracle(z, k):
    out = []
    for i in range(len(z)):
        cand = sorted((math.dist(z[i], z[j]), j) for j in range(len(z)) if j != i)
        out.append([j for _, j in cand[:k]])
    return np.array(out)


def test_knn_small_cases():
    g = knn_graph([[0.0], [1.0], [3.0]], 1)
    assert g.neighbors[:, 0].tolist() == [1, 0, 1]
    g = knn_graph([[0.0], [0.0], [0.0], [5.0]], 2)
    assert g.neighbors.tolist() == [[1, 2], [0, 2], [0, 1], [0, 1]]
    with pytest.raises(MetricError):
        knn_graph([[0.0], [1.0]], 2)


def test_knn_matches_quadratic_scan():
    z = np.random.default_rng(5).normal(size=(200, 5))
    assert np.array_equal(knn_graph(z, 7, chunk=37).neighbors, knn_oracle(z, 7))


# graph connectivity --------------------------------------------------------------

def test_graph_connectivity_construction():
    # label A = {0,1,2,3} split into {0,1} and {2,3}; label B = {4,5} connected; C = {6} singleton
    nbrs = np.array([[1], [0], [3], [2], [5], [4], [0]])
    labels = ["A"] * 4 + ["B"] * 2 + ["C"]
    assert graph_connectivity(KnnGraph(nbrs, 1), labels) == pytest.approx((0.5 + 1 + 1) / 3, abs=0)
    # node 6 now joins B but its only edge leaves B: B's largest component is {4, 5}
    assert graph_connectivity(KnnGraph(nbrs, 1), ["A"] * 4 + ["B"] * 3) == pytest.approx((0.5 + 2 / 3) / 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_graph_connectivity_monotone_in_edges(seed):
    rng = np.random.default_rng(seed)
    n = 30
    nbrs = np.stack([rng.choice(np.delete(np.arange(n), i), 3, replace=False) for i in range(n)])
    labels = rng.integers(0, 3, n)
    extra = np.array([[rng.choice(np.delete(np.arange(n), i))] for i in range(n)])
    base = KnnGraph(nbrs[:, :2], 2)
    more = KnnGraph(np.hstack([nbrs[:, :2], extra]), 3)
    for lab in np.unique(labels):
        only = np.where(labels == lab, 0, 1)
        assert graph_connectivity(more, only) >= graph_connectivity(base, only) - 1e-15


# kBET --------------------------------------------------------------------------

def test_kbet_single_and_separated_batches():
    rng = np.random.default_rng(0)
    z = np.vstack([rng.normal(size=(200, 2)), rng.normal(size=(200, 2)) + 50])
    g = knn_graph(z, 20)
    assert kbet(g, ["a"] * 400) == 0.0
    assert kbet(g, ["a"] * 200 + ["b"] * 200) >= 0.95


def test_kbet_interleaved_batches():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(1000, 2))
    batch = np.tile(["a", "b"], 500)
    assert kbet(knn_graph(z, 50), batch) <= 0.05 + 0.05


def test_kbet_null_calibration():
    alpha, rates = 0.05, []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2000, 3))
        batch = rng.permutation(np.repeat(["a", "b", "c"], [700, 700, 600]))
        rates.append(kbet(knn_graph(z, 50), batch, alpha=alpha, seed=seed))
    assert alpha - 0.03 <= np.mean(rates) <= alpha + 0.05


def test_kbet_pools_rare_batches(caplog):
    rng = np.random.default_rng(0)
    z = rng.normal(size=(300, 2))
    batch = np.array(["a"] * 149 + ["b"] * 149 + ["r1", "r2"])
    rate = kbet(knn_graph(z, 10), batch)
    assert 0.0 <= rate <= 1.0
    assert "pooling" in caplog.text


# isolated labels -----------------------------------------------------------------

def test_isolated_label_f1_cases():
    types = ["iso"] * 4 + ["x"] * 4 + ["y"] * 4
    batch = ["b1"] * 4 + ["b1", "b2"] * 2 + ["b1", "b2"] * 2
    assert isolated_labels(types, batch) == ["iso"]
    clusters = [0] * 4 + [1] * 8
    assert isolated_label_f1(clusters, types, batch) == 1.0
    split = [0, 0, 1, 1] + [2] * 8
    assert isolated_label_f1(split, types, batch) == pytest.approx(2 * (1 * 0.5) / (1 + 0.5), abs=1e-15)
    everywhere = ["b1", "b2"] * 6
    assert sorted(isolated_labels(types, everywhere)) == ["iso", "x", "y"]
    assert isolated_label_f1([0] * 4 + [1] * 4 + [2] * 4, types, everywhere) == 1.0


def test_isolated_label_silhouette_cases():
    rng = np.random.default_rng(0)
    rest = rng.normal(size=(100, 2))
    types = ["iso"] * 20 + ["r"] * 100
    batch = ["b1"] * 20 + ["b1", "b2"] * 50
    far = np.vstack([rng.normal(size=(20, 2)) + 1e4, rest])
    assert isolated_label_silhouette(far, types, batch) > 0.999
    overlap = np.vstack([rng.normal(size=(100, 2)), rest])
    assert isolated_label_silhouette(overlap, ["iso"] * 100 + ["r"] * 100,
                                     ["b1"] * 100 + ["b1", "b2"] * 50) == pytest.approx(0.5, abs=0.03)
    single = np.vstack([[0.0, 0.0], rest])
    assert isolated_label_silhouette(single, ["iso"] + ["r"] * 100, ["b1"] + ["b1", "b2"] * 50) == 0.5


# report ------------------------------------------------------------------------

def report_inputs(seed=0):
    rng = np.random.default_rng(seed)
    n = 120
    types = np.repeat(["t0", "t1", "t2"], n // 3)
    env = np.tile(["e0", "e1", "e2"], n // 3)
    zi = rng.normal(size=(n, 2)) + 3 * (np.arange(n) // 40)[:, None]
    zs = rng.normal(size=(n, 1))
    blocks = {"invariant": zi, "spurious": zs, "all": np.hstack([zi, zs])}
    truth = {"invariant": zi + 0.1 * rng.normal(size=zi.shape), "spurious": zs}
    return blocks, types, env, truth


def test_metrics_report_contents_and_json():
    blocks, types, env, truth = report_inputs()
    rep = metrics_report(blocks, types, env, truth, probe_train_envs=["e0", "e1"])
    m = rep.metrics
    for name in ("mcc_invariant", "mcc_spurious", "probe_accuracy_heldout", "nmi_all", "ari_invariant",
                 "kbet_spurious", "batch_asw_all", "graph_connectivity_invariant", "isolated_label_f1_all",
                 "probe_accuracy_invariant_e2", "probe_accuracy_spurious_median"):
        assert name in m
    assert m["mcc_spurious"] == 1.0
    doc = json.loads(json.dumps(rep.to_dict({"seed": 0})))
    assert list(doc["metrics"]) == sorted(doc["metrics"])
    assert all(isinstance(v, float) for v in doc["metrics"].values())


def test_metrics_report_without_batch_labels_skips_loudly(caplog):
    blocks, types, _, _ = report_inputs()
    rep = metrics_report(blocks, types)
    assert not any(k.startswith(("kbet", "batch_asw", "isolated")) for k in rep.metrics)
    assert any("batch" in s["name"] for s in rep.skipped)
    assert "skipping" in caplog.text


def test_metrics_are_pure():
    blocks, types, env, truth = report_inputs(3)
    a = metrics_report(blocks, types, env, truth, probe_train_envs=["e0"], seed=2).to_dict()
    b = metrics_report(blocks, types, env, truth, probe_train_envs=["e0"], seed=2).to_dict()
    assert a == b
