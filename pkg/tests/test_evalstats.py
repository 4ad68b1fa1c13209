import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize
from sklearn import metrics as skm

from gradutil import pullback_errors
from pathfuse.evalstats import (
    UndefinedMetricError,
    auc_score,
    average_precision,
    bin_comparisons,
    c_index,
    cls_metrics,
    cox_fit,
    cox_loss_grad,
    hazard_bins,
    km_estimate,
    logrank_test,
    write_km_csvs,
)


def cox_direct(time, event, score):
    """Partial likelihood by explicit risk-set sums."""
    total = 0.0
    for i in range(len(time)):
        if event[i]:
            risk = [math.exp(score[j]) for j in range(len(time)) if time[j] >= time[i]]
            total -= score[i] - math.log(sum(risk))
    return total


def c_index_brute(time, event, score):
    conc = adm = 0.0
    for i in range(len(time)):
        for j in range(len(time)):
            if time[i] < time[j] and event[i]:
                adm += 1
                if score[i] > score[j]:
                    conc += 1
                elif score[i] == score[j]:
                    conc += 0.5
    return conc / adm


def cohorts(min_size=2, max_size=30):
    return st.integers(min_size, max_size).flatmap(
        lambda n: st.tuples(
            st.lists(st.floats(0.1, 100), min_size=n, max_size=n),
            st.lists(st.booleans(), min_size=n, max_size=n),
            st.lists(st.floats(-5, 5), min_size=n, max_size=n),
        )
    )


# ---------------------------------------------------------------------------
# Cox loss


def test_cox_equal_scores_three_events_is_ln6():
    loss, _ = cox_loss_grad([1.0, 2.0, 3.0], [1, 1, 1], [0.0, 0.0, 0.0])
    assert loss == pytest.approx(math.log(6), abs=1e-15)


def test_cox_single_patient_zero_loss():
    assert cox_loss_grad([5.0], [1], [0.7])[0] == 0.0


def test_cox_five_patients_gradient_and_direct_sum():
    rng = np.random.default_rng(0)
    time = np.array([2.0, 5.0, 1.0, 4.0, 3.0])
    event = np.array([1, 0, 1, 1, 0])
    score = rng.normal(size=5)
    loss, _ = cox_loss_grad(time, event, score)
    assert abs(loss - cox_direct(time, event, score)) < 1e-12

    def fn(s):
        value, grad = cox_loss_grad(time, event, s)
        return np.array(value), lambda dy: dy * grad

    assert pullback_errors(fn, [score])[0] < 1e-7


def test_cox_needs_an_event():
    with pytest.raises(UndefinedMetricError):
        cox_loss_grad([1.0, 2.0], [0, 0], [0.0, 1.0])


def test_cox_breslow_ties_share_risk_set():
    # two tied events: each sees all three patients
    loss, _ = cox_loss_grad([1.0, 1.0, 2.0], [1, 1, 0], [0.0, 0.0, 0.0])
    assert loss == pytest.approx(2 * math.log(3), abs=1e-15)


@given(cohorts(), st.floats(-50, 50))
def test_cox_loss_shift_invariant(cohort, c):
    time, event, score = cohort
    if not any(event):
        return
    l0 = cox_loss_grad(time, event, score)[0]
    l1 = cox_loss_grad(time, event, np.asarray(score) + c)[0]
    assert abs(l1 - l0) <= 1e-12 * max(1.0, abs(l0))


@given(cohorts(max_size=12))
def test_cox_loss_matches_direct_sum_property(cohort):
    time, event, score = cohort
    if not any(event):
        return
    l0 = cox_loss_grad(time, event, score)[0]
    assert l0 == pytest.approx(cox_direct(time, event, score), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# Cox regression


def test_cox_fit_no_covariates():
    beta, loss = cox_fit(np.zeros((3, 0)), [1.0, 2.0, 3.0], [1, 1, 1])
    assert beta.size == 0
    assert loss == pytest.approx(math.log(6))


def test_cox_initial_loss_is_log_risk_set_sizes():
    time = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    event = np.array([1, 0, 1, 1, 0])
    loss, _ = cox_loss_grad(time, event, np.zeros(5))
    assert loss == pytest.approx(math.log(5) + math.log(3) + math.log(2))


def test_cox_fit_methods_agree_on_six_patients():
    X = np.array([[0.5], [-1.2], [0.3], [2.0], [-0.4], [1.1]])
    time = np.array([3.0, 6.0, 2.0, 1.0, 5.0, 4.0])
    event = np.array([1, 1, 0, 1, 1, 0])
    b_newton, l_newton = cox_fit(X, time, event, "newton")
    b_grad, l_grad = cox_fit(X, time, event, "gradient")
    assert np.allclose(b_newton, b_grad, atol=1e-6)
    # independent optimiser on the direct-sum likelihood
    ref = optimize.minimize(lambda b: cox_direct(time, event, X @ b), np.zeros(1),
                            method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
    assert np.allclose(b_newton, ref.x, atol=1e-5)
    assert l_newton == pytest.approx(ref.fun, abs=1e-10)


def test_cox_fit_recovers_simulated_coefficients():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(2000, 2))
    t = rng.exponential(1.0 / np.exp(X @ [0.8, -0.5]))
    beta, _ = cox_fit(X, t, np.ones(2000, dtype=int))
    assert np.allclose(beta, [0.8, -0.5], atol=0.08)


# ---------------------------------------------------------------------------
# concordance


def test_c_index_perfect_and_reversed():
    t = np.arange(1.0, 6.0)
    e = np.ones(5)
    assert c_index(t, e, -t) == 1.0
    assert c_index(t, e, t) == 0.0


def test_c_index_hand_example():
    assert c_index([1, 2, 3], [1, 0, 1], [0.9, 0.5, 0.8]) == 1.0


def test_c_index_no_admissible_pairs():
    with pytest.raises(UndefinedMetricError):
        c_index([1.0, 2.0], [0, 0], [0.1, 0.2])


def test_c_index_brute_force_on_random_cohorts():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(2, 25))
        t = rng.integers(1, 10, size=n).astype(float)
        e = rng.random(n) < 0.6
        s = rng.integers(0, 4, size=n).astype(float)
        if not any(e[i] and t[i] < t.max() for i in range(n)):
            continue
        assert c_index(t, e, s) == c_index_brute(t, e, s)


@given(cohorts())
def test_c_index_negation_complement(cohort):
    time, event, score = cohort
    t, e, s = np.array(time), np.array(event), np.array(score)
    if len(np.unique(s)) < len(s):
        return
    try:
        c = c_index(t, e, s)
    except UndefinedMetricError:
        return
    assert c_index(t, e, -s) == pytest.approx(1.0 - c, abs=1e-12)


# ---------------------------------------------------------------------------
# Kaplan-Meier


def test_km_no_events_stays_at_one():
    km = km_estimate([1.0, 2.0, 3.0], [0, 0, 0])
    assert np.all(km.survival == 1.0)


def test_km_hand_product_limit():
    km = km_estimate([1.0, 2.0, 3.0], [1, 0, 1])
    assert km.survival_at(0.5) == 1.0
    assert km.survival_at(1.0) == 2 / 3
    assert km.survival_at(2.5) == 2 / 3
    assert km.survival_at(3.0) == 0.0
    assert km.n_at_risk.tolist() == [3, 2, 1]


def test_km_all_events_at_one_time():
    km = km_estimate([4.0] * 5, [1] * 5)
    assert km.time.tolist() == [4.0] and km.survival.tolist() == [0.0]


@given(cohorts(min_size=1))
def test_km_monotone_from_one(cohort):
    time, event, _ = cohort
    km = km_estimate(time, event)
    s = np.r_[1.0, km.survival]
    assert np.all(np.diff(s) <= 0)
    assert np.all((s >= 0) & (s <= 1))


def test_km_csv_columns(tmp_path):
    paths = write_km_csvs(tmp_path, [1, 2, 3, 4], [1, 0, 1, 1], [0, 0, 1, 1])
    assert [p.name for p in paths] == ["km_bin0.csv", "km_bin1.csv"]
    assert paths[0].read_text().splitlines()[0] == "time,survival,n_at_risk,n_events"


# ---------------------------------------------------------------------------
# log-rank


def test_logrank_identical_groups():
    chi2, p = logrank_test([1, 2, 3], [1, 0, 1], [1, 2, 3], [1, 0, 1])
    assert chi2 == 0.0 and p == 1.0


def test_logrank_hand_fixture():
    chi2, _ = logrank_test([1, 2], [1, 1], [3, 4], [1, 1])
    # per-time tables: t=1 (E=1/2, V=1/4), t=2 (E=1/3, V=2/9); later times add nothing
    expected = (2 - 5 / 6) ** 2 / (1 / 4 + 2 / 9)
    assert chi2 == pytest.approx(expected, abs=1e-12)
    assert chi2 == pytest.approx(2.88, abs=1e-2)


def test_logrank_symmetric():
    rng = np.random.default_rng(3)
    ta, tb = rng.exponential(size=15), rng.exponential(size=12) * 2
    ea, eb = rng.random(15) < 0.7, rng.random(12) < 0.7
    assert logrank_test(ta, ea, tb, eb)[0] == pytest.approx(logrank_test(tb, eb, ta, ea)[0],
                                                            rel=1e-12)


def test_logrank_needs_events():
    with pytest.raises(UndefinedMetricError):
        logrank_test([1, 2], [0, 0], [3], [0])


@given(cohorts(min_size=1))
def test_logrank_self_is_zero(cohort):
    time, event, _ = cohort
    if not any(event):
        return
    assert logrank_test(time, event, time, event)[0] == 0.0


# ---------------------------------------------------------------------------
# hazard bins


def test_bins_uniform_grid_sizes():
    bins = hazard_bins(np.arange(1, 101), "p33_66_100")
    assert np.bincount(bins).tolist() == [33, 33, 34]


def test_bins_all_equal_go_to_lowest():
    assert hazard_bins(np.full(10, 0.3), "p25_50_75_100").tolist() == [0] * 10


def test_bins_match_sort_oracle():
    rng = np.random.default_rng(4)
    for scheme, k in (("p50_100", 2), ("p33_66_100", 3), ("p25_50_75_100", 4)):
        s = rng.normal(size=37)
        bins = hazard_bins(s, scheme)
        order = np.argsort(s)
        expected = np.empty(37, dtype=int)
        starts = [37 * j // k for j in range(1, k)]
        for pos, i in enumerate(order):
            expected[i] = sum(pos >= c for c in starts)
        assert np.array_equal(bins, expected)


def test_bins_too_few_scores():
    with pytest.raises(ValueError):
        hazard_bins([0.1, 0.2], "p33_66_100")


@given(st.integers(4, 200), st.sampled_from([("p50_100", 2), ("p33_66_100", 3),
                                             ("p25_50_75_100", 4)]), st.integers(0, 10**6))
def test_bins_partition_balanced(n, scheme, seed):
    name, k = scheme
    s = np.random.default_rng(seed).permutation(n).astype(float)
    counts = np.bincount(hazard_bins(s, name), minlength=k)
    assert counts.size == k and counts.sum() == n
    assert counts.max() - counts.min() <= 1


def test_bin_comparison_labels():
    assert [c[2] for c in bin_comparisons("p33_66_100")] == [
        "[0,33] vs. (33,66]", "(33,66] vs. (66,100]"]
    assert [c[2] for c in bin_comparisons("p50_100")] == ["[0,50] vs. (50,100]"]


# ---------------------------------------------------------------------------
# classification


def test_cls_perfect_separation():
    labels = np.array([0, 1, 2, 0, 1, 2])
    probs = np.eye(3)[labels] * 0.8 + 0.2 / 3
    m = cls_metrics(probs, labels)
    assert m["micro_auc"] == 1.0 and m["f1_micro"] == 1.0
    assert m["auc_per_class"] == [1.0, 1.0, 1.0]


def test_cls_random_scores_near_half():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 3, size=3000)
    probs = rng.dirichlet(np.ones(3), size=3000)
    assert abs(cls_metrics(probs, labels)["micro_auc"] - 0.5) < 0.05


def test_auc_four_sample_pair_count():
    y = np.array([1, 0, 1, 0])
    s = np.array([0.9, 0.8, 0.3, 0.1])
    # positive/negative pairs: (0.9,0.8)+ (0.9,0.1)+ (0.3,0.8)- (0.3,0.1)+
    assert auc_score(y, s) == 3 / 4


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auc_score([1, 1, 1], [0.1, 0.2, 0.3])
    labels = np.array([0, 0, 1, 1])
    probs = np.array([[0.7, 0.2, 0.1]] * 4)
    assert cls_metrics(probs, labels)["auc_per_class"][2] is None


def test_cls_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        cls_metrics(np.array([[0.5, 0.6]]), np.array([0]))


def test_cls_metrics_match_sklearn():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 3, size=400)
    logits = rng.normal(size=(400, 3)) + 1.5 * np.eye(3)[labels]
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    probs = np.round(probs, 2)  # introduce score ties
    probs /= probs.sum(axis=1, keepdims=True)
    m = cls_metrics(probs, labels)
    onehot = np.eye(3)[labels]
    assert m["micro_auc"] == pytest.approx(skm.roc_auc_score(onehot, probs, average="micro"),
                                           abs=1e-12)
    assert m["average_precision"] == pytest.approx(
        skm.average_precision_score(onehot, probs, average="micro"), abs=1e-12)
    for c in range(3):
        assert m["auc_per_class"][c] == pytest.approx(skm.roc_auc_score(onehot[:, c], probs[:, c]),
                                                      abs=1e-12)
    pred = probs.argmax(axis=1)
    assert m["f1_micro"] == pytest.approx(skm.f1_score(labels, pred, average="micro"))
    assert m["f1_per_class"] == pytest.approx(list(skm.f1_score(labels, pred, average=None)))
    assert average_precision(onehot[:, 0], probs[:, 0]) == pytest.approx(
        skm.average_precision_score(onehot[:, 0], probs[:, 0]), abs=1e-12)
