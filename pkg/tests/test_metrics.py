"""Ranking metrics vs exhaustive oracles plus invariance properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pulse import metrics
from pulse.errors import InvariantError


def random_instance(rng, max_n=30, ties=True):
    n = int(rng.integers(4, max_n + 1))
    if ties:
        scores = rng.choice(np.linspace(0, 1, 7), size=n)
    else:
        scores = rng.standard_normal(n)
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    return scores, labels


# --- AUROC ---------------------------------------------------------------------

def test_auroc_perfect_and_tied():
    assert metrics.auroc([0.0, 1.0], [0, 1]) == 1.0
    assert metrics.auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_auroc_hand_example():
    assert metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auroc_single_class_rejected():
    with pytest.raises(InvariantError):
        metrics.auroc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(20))
def test_auroc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    scores, labels = random_instance(rng)
    assert metrics.auroc(scores, labels) == pytest.approx(
        oracles.oracle_auroc(scores, labels), abs=1e-12)


def test_auroc_monotone_transform_invariance():
    rng = np.random.default_rng(99)
    scores, labels = random_instance(rng, ties=False)
    base = metrics.auroc(scores, labels)
    assert metrics.auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
    assert metrics.auroc(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)


def test_auroc_negation_complement_without_ties():
    rng = np.random.default_rng(100)
    scores, labels = random_instance(rng, ties=False)
    a = metrics.auroc(scores, labels)
    b = metrics.auroc(-scores, labels)
    assert a + b == pytest.approx(1.0, abs=1e-12)


# --- AUPRC ---------------------------------------------------------------------

def test_auprc_perfect_ranking():
    assert metrics.auprc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0


def test_auprc_all_positives():
    assert metrics.auprc([0.3, 0.9, 0.5], [1, 1, 1]) == 1.0


def test_auprc_hand_walked_example():
    assert metrics.auprc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.5 + (2 / 3) * 0.5)


def test_auprc_no_positive_rejected():
    with pytest.raises(InvariantError):
        metrics.auprc([0.5, 0.6], [0, 0])


@pytest.mark.parametrize("seed", range(20))
def test_auprc_matches_stepwise_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    scores, labels = random_instance(rng)
    assert metrics.auprc(scores, labels) == pytest.approx(
        oracles.oracle_auprc(scores, labels), abs=1e-12)


def test_auprc_constant_baseline_equals_prevalence():
    # A constant scorer collapses to one threshold group, so its average
    # precision is exactly the positive prevalence.
    rng = np.random.default_rng(300)
    for _ in range(20):
        _, labels = random_instance(rng)
        prevalence = labels.mean()
        scores = np.full(labels.size, 0.5)
        assert metrics.auprc(scores, labels) == pytest.approx(prevalence, abs=1e-12)


# --- thresholding -----------------------------------------------------------------

def test_best_threshold_separable():
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    labels = np.array([0, 0, 1, 1])
    thr = metrics.best_threshold(scores, labels)
    assert 0.2 < thr < 0.8
    assert metrics.accuracy_at_threshold(scores, labels, thr) == 1.0


def test_best_threshold_all_positive_predicts_everything():
    thr = metrics.best_threshold([0.2, 0.7], [1, 1])
    assert thr == -np.inf
    assert metrics.accuracy_at_threshold([0.2, 0.7], [1, 1], thr) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_best_threshold_matches_sweep_oracle(seed):
    rng = np.random.default_rng(400 + seed)
    scores, labels = random_instance(rng, max_n=20)
    thr = metrics.best_threshold(scores, labels)
    oracle_thr, oracle_acc = oracles.oracle_best_threshold(scores, labels)
    assert metrics.accuracy_at_threshold(scores, labels, thr) == pytest.approx(oracle_acc, abs=1e-12)
    assert thr == pytest.approx(oracle_thr, abs=1e-12) or thr == oracle_thr


def test_accuracy_trivialities():
    assert metrics.accuracy_at_threshold([0.9, 0.1], [1, 0], 0.5) == 1.0
    assert metrics.accuracy_at_threshold([0.9, 0.1], [0, 1], 0.5) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_accuracy_matches_count_oracle(seed):
    rng = np.random.default_rng(seed)
    scores, labels = random_instance(rng)
    thr = float(rng.uniform(0, 1))
    got = metrics.accuracy_at_threshold(scores, labels, thr)
    want = sum(int((s >= thr) == l) for s, l in zip(scores, labels)) / len(labels)
    assert got == pytest.approx(want, abs=1e-12)


# --- multiclass --------------------------------------------------------------------

def test_macro_one_hot_perfect():
    labels = np.array([1, 2, 3, 1, 2, 3])
    scores = np.eye(3)[labels - 1]
    au, ap, acc = metrics.macro_multiclass(scores, labels)
    assert (au, ap, acc) == (1.0, 1.0, 1.0)


def test_macro_uniform_scores_chance():
    labels = np.array([1, 2, 3, 1, 2, 3])
    scores = np.full((6, 3), 0.5)
    au, ap, acc = metrics.macro_multiclass(scores, labels)
    assert au == pytest.approx(0.5)


def test_macro_missing_class_rejected():
    with pytest.raises(InvariantError):
        metrics.macro_multiclass(np.ones((4, 3)), np.array([1, 1, 2, 2]))


def test_macro_matches_binary_oracles():
    rng = np.random.default_rng(7)
    labels = rng.integers(1, 4, size=12)
    labels[:3] = [1, 2, 3]
    scores = rng.random((12, 3))
    au, ap, acc = metrics.macro_multiclass(scores, labels)
    want_au = np.mean([oracles.oracle_auroc(scores[:, k], (labels == k + 1).astype(int))
                       for k in range(3)])
    want_ap = np.mean([oracles.oracle_auprc(scores[:, k], (labels == k + 1).astype(int))
                       for k in range(3)])
    assert au == pytest.approx(want_au, abs=1e-12)
    assert ap == pytest.approx(want_ap, abs=1e-12)


# --- collapse diagnostics -------------------------------------------------------------

def test_collapse_identical_rows():
    emb = np.tile([1.0, 2.0, 3.0], (5, 1))
    rep = metrics.collapse_diagnostics({"ECG": emb})
    stats = rep.per_modality["ECG"]
    assert stats["mean_pairwise_cosine"] == pytest.approx(1.0)
    assert stats["mean_feature_variance"] == pytest.approx(0.0)


def test_collapse_orthonormal_rows():
    rep = metrics.collapse_diagnostics({"m": np.eye(4)})
    assert rep.per_modality["m"]["mean_pairwise_cosine"] == pytest.approx(0.0)


def test_collapse_invariances():
    rng = np.random.default_rng(8)
    emb = rng.standard_normal((6, 5))
    base = metrics.collapse_diagnostics({"m": emb}).per_modality["m"]
    perm = metrics.collapse_diagnostics({"m": emb[rng.permutation(6)]}).per_modality["m"]
    assert perm["mean_pairwise_cosine"] == pytest.approx(base["mean_pairwise_cosine"])
    assert perm["mean_feature_variance"] == pytest.approx(base["mean_feature_variance"])
    scaled = metrics.collapse_diagnostics({"m": 4.0 * emb}).per_modality["m"]
    assert scaled["mean_pairwise_cosine"] == pytest.approx(base["mean_pairwise_cosine"])


def test_collapse_zero_rows_excluded():
    emb = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    stats = metrics.collapse_diagnostics({"m": emb}).per_modality["m"]
    assert stats["excluded_pairs"] == 2
    assert stats["mean_pairwise_cosine"] == pytest.approx(0.0)


# --- report plumbing -------------------------------------------------------------------

def test_report_aggregation_and_csv():
    rep = metrics.MetricsReport(task="binary")
    rep.add(metrics.FoldMetrics(1, 0.9, 0.8, 0.85, 0.5, 10))
    rep.add(metrics.FoldMetrics(2, 0.7, 0.6, 0.65, 0.4, 12))
    assert rep.mean("auroc") == pytest.approx(0.8)
    assert rep.sd("auroc") == pytest.approx(np.std([0.9, 0.7], ddof=1))
    csv = rep.to_csv()
    assert csv.splitlines()[0] == "fold,auroc,auprc,accuracy,threshold,n_test"
    assert "mean," in csv and "sd," in csv
