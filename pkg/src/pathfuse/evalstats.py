"""Survival objectives and metrics, plus grade-classification metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats


class UndefinedMetricError(ValueError):
    """Raised when a likelihood, metric or test has nothing to be computed from."""


class CoxFitError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (last gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


def _cohort_arrays(time, event, score=None):
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event).astype(bool)
    if time.shape != event.shape or time.ndim != 1:
        raise ValueError("time and event must be 1-d arrays of equal length")
    if score is None:
        return time, event
    score = np.asarray(score, dtype=np.float64)
    if score.shape != time.shape:
        raise ValueError("score length does not match cohort")
    if not np.all(np.isfinite(score)):
        raise ValueError("scores must be finite")
    return time, event, score


def risk_set_matrix(time) -> np.ndarray:
    """R[i, j] = 1 when patient j is still at risk at patient i's time (t_j >= t_i)."""
    time = np.asarray(time, dtype=np.float64)
    return (time[None, :] >= time[:, None]).astype(np.float64)


def cox_loss_grad(time, event, score):
    """Negative Cox partial log-likelihood and its gradient in the scores.

    Tied event times share one risk set (Breslow). The log-sum-exp is shifted
    by the maximum score, so the loss is unchanged by adding a constant.
    """
    time, event, score = _cohort_arrays(time, event, score)
    if not event.any():
        raise UndefinedMetricError("partial likelihood needs at least one uncensored patient")
    R = risk_set_matrix(time)
    shift = score.max()
    w = np.exp(score - shift)
    denom = R @ w
    log_denom = np.log(denom) + shift
    loss = -np.sum(score[event] - log_denom[event])
    # d/dscore_k of sum_{i in U} log_denom_i = sum_{i in U, k in R_i} w_k / denom_i
    grad = -event.astype(np.float64) + w * (R[event] / denom[event, None]).sum(axis=0)
    return float(loss), grad


def _cox_beta_derivatives(X, time, event, beta):
    time, event = _cohort_arrays(time, event)
    eta = X @ beta
    loss, dscore = cox_loss_grad(time, event, eta)
    grad = X.T @ dscore
    R = risk_set_matrix(time)[event]
    w = np.exp(eta - eta.max())
    P = R * w[None, :]
    P /= P.sum(axis=1, keepdims=True)
    xbar = P @ X
    hess = (X * P.sum(axis=0)[:, None]).T @ X - xbar.T @ xbar
    return loss, grad, hess


def cox_fit(X, time, event, method: str = "newton", tol: float = 1e-8,
            max_iter: int | None = None, ridge: float = 1e-6):
    """Fit Cox regression coefficients by Newton-Raphson or gradient descent.

    Returns ``(beta, loss)``. Convergence is declared when the gradient norm of
    the negative partial log-likelihood drops below ``tol`` or, for Newton, when
    the step shrinks to roundoff level.
    """
    X = np.asarray(X, dtype=np.float64)
    time, event = _cohort_arrays(time, event)
    if X.ndim != 2 or X.shape[0] != time.size:
        raise ValueError("covariate rows must align with the cohort")
    beta = np.zeros(X.shape[1])
    if X.shape[1] == 0:
        return beta, cox_loss_grad(time, event, np.zeros(time.size))[0]

    if method == "newton":
        max_iter = 100 if max_iter is None else max_iter
        loss, grad, hess = _cox_beta_derivatives(X, time, event, beta)
        for _ in range(max_iter):
            gnorm = float(np.linalg.norm(grad))
            if gnorm < tol:
                return beta, loss
            step = np.linalg.solve(hess + ridge * np.eye(beta.size), grad)
            # on large cohorts roundoff floors the summed gradient above tol;
            # a vanishing Newton step means the optimum is reached anyway
            if np.linalg.norm(step) <= 1e-12 * max(1.0, float(np.linalg.norm(beta))):
                return beta, loss
            t = 1.0
            while True:
                cand = beta - t * step
                cand_loss = cox_loss_grad(time, event, X @ cand)[0]
                if cand_loss <= loss + 1e-12 * abs(loss) or t < 1e-10:
                    break
                t *= 0.5
            beta = cand
            loss, grad, hess = _cox_beta_derivatives(X, time, event, beta)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return beta, loss
        raise CoxFitError("Newton-Raphson did not converge", gnorm)

    if method == "gradient":
        max_iter = 100_000 if max_iter is None else max_iter
        loss, dscore = cox_loss_grad(time, event, X @ beta)
        grad = X.T @ dscore
        step = 1.0
        for _ in range(max_iter):
            gnorm = float(np.linalg.norm(grad))
            if gnorm < tol:
                return beta, loss
            # Armijo backtracking; the step is allowed to grow again afterwards
            while True:
                cand = beta - step * grad
                cand_loss, cand_dscore = cox_loss_grad(time, event, X @ cand)
                if cand_loss <= loss - 0.5 * step * gnorm**2 or step < 1e-12:
                    break
                step *= 0.5
            beta, loss, grad = cand, cand_loss, X.T @ cand_dscore
            step *= 2.0
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return beta, loss
        raise CoxFitError("gradient descent did not converge", gnorm)

    raise ValueError(f"unknown method {method!r}")


def c_index(time, event, score) -> float:
    """Harrell's concordance index; higher score means higher predicted hazard.

    A pair is admissible when the earlier time is an observed event. Equal
    scores on an admissible pair count one half.
    """
    time, event, score = _cohort_arrays(time, event, score)
    admissible = (time[:, None] < time[None, :]) & event[:, None]
    n_adm = int(admissible.sum())
    if n_adm == 0:
        raise UndefinedMetricError("no admissible pairs for the concordance index")
    diff = score[:, None] - score[None, :]
    concordant = int((admissible & (diff > 0)).sum())
    ties = int((admissible & (diff == 0)).sum())
    return (concordant + 0.5 * ties) / n_adm


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank


@dataclass
class KmCurve:
    """Product-limit survival estimate evaluated at every distinct observed time."""

    time: np.ndarray
    survival: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray

    def survival_at(self, t: float) -> float:
        idx = np.searchsorted(self.time, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "survival", "n_at_risk", "n_events"])
            for row in zip(self.time, self.survival, self.n_at_risk, self.n_events):
                writer.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])


def km_estimate(time, event) -> KmCurve:
    time, event = _cohort_arrays(time, event)
    if time.size == 0:
        raise ValueError("empty cohort")
    uniq = np.unique(time)
    n_at_risk = np.array([(time >= t).sum() for t in uniq])
    n_events = np.array([(event & (time == t)).sum() for t in uniq])
    survival = np.cumprod((n_at_risk - n_events) / n_at_risk)
    return KmCurve(uniq, survival, n_at_risk, n_events)


def logrank_test(time_a, event_a, time_b, event_b):
    """Two-group log-rank test. Returns ``(chi2, p)`` with one degree of freedom."""
    time_a, event_a = _cohort_arrays(time_a, event_a)
    time_b, event_b = _cohort_arrays(time_b, event_b)
    if time_a.size == 0 or time_b.size == 0:
        raise ValueError("both groups must be nonempty")
    time = np.concatenate([time_a, time_b])
    event = np.concatenate([event_a, event_b])
    if not event.any():
        raise UndefinedMetricError("log-rank test needs at least one event")
    observed = expected = variance = 0.0
    for t in np.unique(time[event]):
        n_a = int((time_a >= t).sum())
        n = int((time >= t).sum())
        d = int((event & (time == t)).sum())
        d_a = int((event_a & (time_a == t)).sum())
        observed += d_a
        expected += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if variance == 0.0:
        return 0.0, 1.0
    chi2 = (observed - expected) ** 2 / variance
    return float(chi2), float(stats.chi2.sf(chi2, df=1))


# ---------------------------------------------------------------------------
# hazard binning


BIN_SCHEMES = {
    "p50_100": 2,
    "p33_66_100": 3,
    "p25_50_75_100": 4,
}


def hazard_bins(scores, scheme: str = "p33_66_100") -> np.ndarray:
    """Assign each score to a percentile bin (0 = lowest hazard).

    Scores are ordered by value and then input index; bin ``j`` starts at sorted
    position ``floor(n*j/k)``. A run of equal scores that straddles a cut is
    placed wholly in the lower bin, so identical scores always share a bin.
    """
    if scheme not in BIN_SCHEMES:
        raise ValueError(f"unknown bin scheme {scheme!r}")
    k = BIN_SCHEMES[scheme]
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n < k:
        raise ValueError(f"scheme {scheme} needs at least {k} scores, got {n}")
    order = np.lexsort((np.arange(n), scores))
    sorted_scores = scores[order]
    cuts = [n * j // k for j in range(1, k)]
    pos_bin = np.searchsorted(cuts, np.arange(n), side="right")
    # a tied run takes the bin of its first member
    run_start = np.r_[True, sorted_scores[1:] != sorted_scores[:-1]]
    first_of_run = np.maximum.accumulate(np.where(run_start, np.arange(n), 0))
    labels = np.empty(n, dtype=int)
    labels[order] = pos_bin[first_of_run]
    return labels


def bin_comparisons(scheme: str) -> list[tuple[int, int, str]]:
    """Adjacent bin pairs compared in the stratification report."""
    edges = [0] + [int(e) for e in scheme[1:].split("_")]
    return [
        (j, j + 1,
         f"{'[' if j == 0 else '('}{edges[j]},{edges[j + 1]}] vs. ({edges[j + 1]},{edges[j + 2]}]")
        for j in range(len(edges) - 2)
    ]


# ---------------------------------------------------------------------------
# classification


def auc_score(y_true, score) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    y_true = np.asarray(y_true).astype(bool)
    score = np.asarray(score, dtype=np.float64)
    n_pos = int(y_true.sum())
    n_neg = y_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = stats.rankdata(score)
    return float((ranks[y_true].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(y_true, score) -> float:
    """Step-wise area under the precision-recall curve."""
    y_true = np.asarray(y_true).astype(bool)
    score = np.asarray(score, dtype=np.float64)
    n_pos = int(y_true.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs a positive sample")
    order = np.argsort(-score, kind="mergesort")
    s, y = score[order], y_true[order]
    # evaluate only at the last index of each run of tied scores
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_from_predictions(y_true, y_pred, cls: int) -> float:
    tp = np.sum((y_pred == cls) & (y_true == cls))
    fp = np.sum((y_pred == cls) & (y_true != cls))
    fn = np.sum((y_pred != cls) & (y_true == cls))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def cls_metrics(probs, labels) -> dict:
    """One-vs-rest AUCs, micro AUC, micro average precision and F1 scores."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError("probability rows must align with labels")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    n_cls = probs.shape[1]
    onehot = np.eye(n_cls, dtype=bool)[labels]
    auc_per_class = []
    for c in range(n_cls):
        try:
            auc_per_class.append(auc_score(onehot[:, c], probs[:, c]))
        except UndefinedMetricError:
            auc_per_class.append(None)
    pred = probs.argmax(axis=1)
    return {
        "auc_per_class": auc_per_class,
        "micro_auc": auc_score(onehot.ravel(), probs.ravel()),
        "average_precision": average_precision(onehot.ravel(), probs.ravel()),
        "f1_micro": float(np.mean(pred == labels)),
        "f1_per_class": [f1_from_predictions(labels, pred, c) for c in range(n_cls)],
    }


def write_km_csvs(out_dir, time, event, bins, prefix: str = "km") -> list[Path]:
    """One KM CSV per hazard bin."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for b in sorted(set(int(x) for x in bins)):
        sel = np.asarray(bins) == b
        path = out_dir / f"{prefix}_bin{b}.csv"
        km_estimate(np.asarray(time)[sel], np.asarray(event)[sel]).to_csv(path)
        paths.append(path)
    return paths
