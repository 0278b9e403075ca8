"""Co-smoothing scores and the few-shot protocol.

The co-smoothing score is the bits-per-spike log-likelihood improvement
of the predicted rates over the per-channel mean-rate predictor, pooled
over the held-out set:

    Q = sum_n sum_{i in test, t} [L(R) - L(rbar_n)] / (mu log 2)

with rbar_n the channel's mean rate over train trials and mu the total
test-split spike count of the included held-out channels.  Channels with
no test spikes are excluded and listed.  Per-neuron contributions (each
channel's share of Q) are reported alongside the total.  The few-shot
variant refits the latent-to-rate readout on k-trial subsets (Bernoulli
MLE, a Poisson GLM, or least squares) and scores each refit on the full
test split.

Likelihood families: "poisson" and "bernoulli" produce bits-per-spike Q
values; "gaussian" emitters are scored by mean squared error instead,
since a per-spike normalisation is undefined for real-valued data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptyScoreError, FitError
from .hmm import fewshot_emission_mle

LOG2 = np.log(2.0)

FAMILIES = ("poisson", "bernoulli", "gaussian")
REGRESSORS = ("bernoulli-mle", "poisson-glm", "linear-lsq")


@dataclass(frozen=True)
class FewShotRegressorSpec:
    """Which readout to refit from k trials, and its knobs."""

    family: str = "bernoulli-mle"
    l2_alpha: float = 1e-3  # poisson-glm only
    rate_floor: float = 1e-10

    def __post_init__(self):
        if self.family not in REGRESSORS:
            raise DomainError(f"unknown few-shot regressor {self.family!r}")
        if self.l2_alpha < 0 or self.rate_floor <= 0:
            raise DomainError("need l2_alpha >= 0 and rate_floor > 0")


@dataclass(frozen=True)
class CosmoothScore:
    q_total: float
    per_neuron: dict
    excluded_neurons: list


@dataclass(frozen=True)
class FewShotReport:
    k: int
    s: int
    scores: np.ndarray  # per-subset, failed subsets omitted
    mean: float
    sem: float
    n_failed: int = 0
    score_kind: str = "bits_per_spike"  # or "mse" for gaussian emitters


def loglik(family: str, rate: np.ndarray, count: np.ndarray, rate_floor: float = 1e-10) -> np.ndarray:
    """Pointwise log-likelihood (constants independent of the rate omitted).

    poisson:   x log r - r        (the x! term cancels in score differences)
    bernoulli: x log r + (1 - x) log(1 - r)
    gaussian:  -(x - r)^2 / 2
    """
    r = np.asarray(rate, dtype=np.float64)
    x = np.asarray(count, dtype=np.float64)
    if family == "poisson":
        if (r < 0).any():
            raise DomainError("negative rate passed to poisson loglik")
        rc = np.maximum(r, rate_floor)
        return x * np.log(rc) - rc
    if family == "bernoulli":
        if (r < 0).any() or (r > 1).any():
            raise DomainError("bernoulli rate outside [0, 1]")
        rc = np.clip(r, rate_floor, 1.0 - rate_floor)
        return x * np.log(rc) + (1.0 - x) * np.log1p(-rc)
    if family == "gaussian":
        return -0.5 * (x - r) ** 2
    raise DomainError(f"unknown likelihood family {family!r}")


def cosmoothing_q(
    rates: np.ndarray,
    test_counts: np.ndarray,
    null_rates: np.ndarray,
    family: str,
    rate_floor: float = 1e-10,
    channel_ids: np.ndarray | None = None,
) -> CosmoothScore:
    """Normalised log-likelihood score against the mean-rate null model.

    ``rates`` and ``test_counts`` are (S_test, T, N_target); ``null_rates``
    is the per-channel train mean.  The null predictor itself scores
    exactly zero.
    """
    R = np.asarray(rates, dtype=np.float64)
    X = np.asarray(test_counts)
    if R.shape != X.shape:
        raise DomainError(f"rates {R.shape} and counts {X.shape} disagree")
    nbar = np.asarray(null_rates, dtype=np.float64)
    n_target = R.shape[2]
    ids = np.arange(n_target) if channel_ids is None else np.asarray(channel_ids)
    mu = X.sum(axis=(0, 1)).astype(np.float64)

    ll_model = loglik(family, R, X, rate_floor)
    ll_null = loglik(family, np.broadcast_to(nbar, R.shape), X, rate_floor)
    contrib = (ll_model - ll_null).sum(axis=(0, 1))

    excluded = [int(ids[j]) for j in range(n_target) if mu[j] == 0]
    keep = mu > 0
    if not keep.any():
        raise EmptyScoreError("every held-out neuron was excluded (no test spikes)")
    mu_total = mu[keep].sum()
    per_neuron = {
        int(ids[j]): float(contrib[j] / (mu_total * LOG2))
        for j in range(n_target)
        if keep[j]
    }
    total = float(contrib[keep].sum() / (mu_total * LOG2))
    return CosmoothScore(q_total=total, per_neuron=per_neuron, excluded_neurons=excluded)


def poisson_glm_fit(
    features: np.ndarray,
    targets: np.ndarray,
    l2_alpha: float = 1e-3,
    rate_floor: float = 1e-10,
    max_iter: int = 100,
    gtol: float = 1e-8,
) -> tuple[np.ndarray, float, bool]:
    """Poisson GLM by damped Newton ascent.

    Maximises  sum_i [x_i eta_i - exp(eta_i)] - l2_alpha * n * ||w||^2
    with eta = w'z + b and an unpenalised offset.  Returns (w, b,
    converged); on non-convergence the best iterate is returned.
    All-zero targets short-circuit to w = 0, b = log(rate_floor).
    """
    Z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    x = np.asarray(targets, dtype=np.float64).reshape(-1)
    n, d = Z.shape
    if n < 1 or x.shape[0] != n:
        raise FitError(f"GLM needs aligned samples, got {Z.shape} vs {x.shape}")
    if not np.isfinite(Z).all():
        raise FitError("GLM features must be finite")
    if not x.any():
        return np.zeros(d), float(np.log(rate_floor)), True

    pen = 2.0 * l2_alpha * n

    def objective(w, b):
        eta = Z @ w + b
        return float(x @ eta - np.exp(eta).sum() - 0.5 * pen * (w @ w))

    w = np.zeros(d)
    b = float(np.log(max(x.mean(), rate_floor)))
    obj = objective(w, b)
    converged = False
    for _ in range(max_iter):
        eta = Z @ w + b
        mu = np.exp(eta)
        g_w = Z.T @ (x - mu) - pen * w
        g_b = float((x - mu).sum())
        grad = np.concatenate([g_w, [g_b]])
        if np.abs(grad).max() < gtol:
            converged = True
            break
        Hww = Z.T @ (mu[:, None] * Z) + pen * np.eye(d)
        Hwb = Z.T @ mu
        Hbb = mu.sum()
        Hess = np.empty((d + 1, d + 1))
        Hess[:d, :d] = Hww
        Hess[:d, d] = Hwb
        Hess[d, :d] = Hwb
        Hess[d, d] = Hbb
        try:
            step = np.linalg.solve(Hess + 1e-12 * np.eye(d + 1), grad)
        except np.linalg.LinAlgError:
            step = grad / max(Hbb, 1.0)
        # backtracking keeps the ascent monotone far from the optimum
        scale = 1.0
        for _ in range(40):
            w_try, b_try = w + scale * step[:d], b + scale * step[d]
            obj_try = objective(w_try, b_try)
            if np.isfinite(obj_try) and obj_try >= obj - 1e-12:
                w, b, obj = w_try, b_try, obj_try
                break
            scale *= 0.5
        else:
            break
    return w, float(b), converged


def linreg_fit(
    features: np.ndarray,
    targets: np.ndarray,
    mode: str = "min-norm",
    ridge_lambda: float = 0.0,
):
    """Least squares weights.

    "min-norm": minimum-l2-norm solution via SVD (numpy lstsq with the
    machine-epsilon cutoff); no offset.  "ridge": normal equations with
    lambda I on the weights and an unpenalised offset; returns (W, b).
    """
    Z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    Y = np.asarray(targets, dtype=np.float64)
    if Z.shape[0] < 1 or Y.shape[0] != Z.shape[0]:
        raise FitError(f"least squares needs aligned samples, got {Z.shape} vs {Y.shape}")
    if mode == "min-norm":
        W, *_ = np.linalg.lstsq(Z, Y, rcond=None)
        return W
    if mode == "ridge":
        zm = Z.mean(axis=0)
        ym = Y.mean(axis=0)
        Zc = Z - zm
        Yc = Y - ym
        d = Z.shape[1]
        W = np.linalg.solve(Zc.T @ Zc + ridge_lambda * np.eye(d), Zc.T @ Yc)
        b = ym - zm @ W
        return W, b
    raise DomainError(f"unknown linreg mode {mode!r}")


def fewshot_cosmoothing(
    latents: np.ndarray,
    dataset,
    plan,
    spec: FewShotRegressorSpec,
    family: str,
) -> FewShotReport:
    """Few-shot protocol: refit the k-out readout on each plan subset,
    score each refit on the full test split, report mean and SEM.

    ``latents`` is (S, T, D) aligned with the dataset's trial indexing;
    for HMM encoders D = M (posterior PMFs), for Gaussian emitters the
    smoothed means.  Failed subsets are excluded from the mean and
    counted.
    """
    if family not in FAMILIES:
        raise DomainError(f"unknown likelihood family {family!r}")
    lat = np.asarray(latents, dtype=np.float64)
    if lat.shape[:2] != dataset.counts.shape[:2]:
        raise DomainError(f"latents {lat.shape} not aligned with dataset {dataset.counts.shape}")
    kout = dataset.partition.k_out
    test_idx = dataset.test_indices
    X_test = dataset.counts[test_idx][:, :, kout]
    lat_test = lat[test_idx]
    S_test, T, n_k = X_test.shape
    D = lat.shape[2]

    train_counts = dataset.counts[dataset.train_indices][:, :, kout].astype(np.float64)
    null_rates = train_counts.mean(axis=(0, 1))  # 1/(T S_train) sum, per channel

    gaussian = family == "gaussian"
    if spec.family == "bernoulli-mle" and family == "bernoulli":
        scores, n_failed = _fewshot_mle_scores(lat, dataset, plan, X_test, null_rates, spec)
    else:
        flat_test = lat_test.reshape(S_test * T, D)
        scores = []
        n_failed = 0
        for j in range(plan.s):
            sub = plan.subsets[j]
            lat_k = lat[sub]
            X_k = dataset.counts[sub][:, :, kout].astype(np.float64)
            try:
                if spec.family == "bernoulli-mle":
                    B_hat = fewshot_emission_mle(lat_k, X_k)
                    R = lat_test @ B_hat
                elif spec.family == "poisson-glm":
                    Zk = lat_k.reshape(-1, D)
                    R = np.empty((S_test * T, n_k))
                    for n in range(n_k):
                        w, b, _ = poisson_glm_fit(
                            Zk, X_k.reshape(-1, n_k)[:, n],
                            l2_alpha=spec.l2_alpha, rate_floor=spec.rate_floor,
                        )
                        R[:, n] = np.exp(flat_test @ w + b)
                    R = R.reshape(S_test, T, n_k)
                else:  # linear-lsq
                    W = linreg_fit(lat_k.reshape(-1, D), X_k.reshape(-1, n_k), mode="min-norm")
                    R = (flat_test @ W).reshape(S_test, T, n_k)
                if gaussian:
                    scores.append(float(((X_test - R) ** 2).mean()))
                else:
                    score = cosmoothing_q(R, X_test, null_rates, family, spec.rate_floor, channel_ids=kout)
                    scores.append(score.q_total)
            except (FitError, EmptyScoreError, np.linalg.LinAlgError):
                n_failed += 1
    if not len(scores):
        raise EmptyScoreError("every few-shot subset failed")
    arr = np.asarray(scores, dtype=np.float64)
    sem = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return FewShotReport(
        k=plan.k,
        s=plan.s,
        scores=arr,
        mean=float(arr.mean()),
        sem=sem,
        n_failed=n_failed,
        score_kind="mse" if gaussian else "bits_per_spike",
    )


def _fewshot_mle_scores(lat, dataset, plan, X_test, null_rates, spec, chunk=128):
    """Vectorised Bernoulli-MLE scoring over plan subsets.

    Equivalent to fewshot_emission_mle + cosmoothing_q per subset, but
    evaluated in chunks so thousands of resamples stay cheap.
    """
    from .hmm import EMISSION_FLOOR

    kout = dataset.partition.k_out
    S_test, T, n_k = X_test.shape
    D = lat.shape[2]
    mu = X_test.sum(axis=(0, 1)).astype(np.float64)
    included = mu > 0
    if not included.any():
        raise EmptyScoreError("every k-out neuron was excluded (no test spikes)")
    mu_total = mu[included].sum()

    Xf = X_test.reshape(S_test * T, n_k)[:, included]
    w_inc = np.full(int(included.sum()), 1.0 / (mu_total * LOG2))
    rbar = np.clip(null_rates[included], spec.rate_floor, 1.0 - spec.rate_floor)
    # weighted null log-likelihood, identical for every subset
    const = float(((Xf.sum(axis=0) * np.log(rbar)) + ((1.0 - Xf).sum(axis=0) * np.log1p(-rbar))) @ w_inc)

    xi_flat = lat[dataset.test_indices].reshape(S_test * T, D)
    scores = np.empty(plan.s)
    for start in range(0, plan.s, chunk):
        subs = plan.subsets[start : start + chunk]
        xi_k = lat[subs]  # (c, k, T, D)
        X_k = dataset.counts[subs][:, :, :, kout].astype(np.float64)
        num = np.einsum("cktm,cktn->cmn", xi_k, X_k)
        den = xi_k.sum(axis=(1, 2))  # (c, D)
        starved = den <= 1e-12
        den = np.where(starved, 1.0, den)
        B_hat = num / den[:, :, None]
        if starved.any():
            fallback = X_k.mean(axis=(1, 2, 3))  # global mean rate per subset
            B_hat[starved] = fallback[np.argwhere(starved)[:, 0], None]
        B_hat = np.clip(B_hat, EMISSION_FLOOR, 1.0 - EMISSION_FLOOR)
        R = np.einsum("im,cmn->cin", xi_flat, B_hat[:, :, included])
        R = np.clip(R, spec.rate_floor, 1.0 - spec.rate_floor)
        ll = np.einsum("in,cin->c", Xf * w_inc, np.log(R))
        ll += np.einsum("in,cin->c", (1.0 - Xf) * w_inc, np.log1p(-R))
        scores[start : start + len(subs)] = ll - const
    return scores, 0
