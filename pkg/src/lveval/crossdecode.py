"""Pairwise latent decodability and cycle consistency.

Linear cross-decoding fits an affine map between two latent sets and
reports D = 1 - R^2 (coefficient of determination averaged uniformly
over target dimensions).  For PMF-valued latents (HMM posteriors) a
multinomial softmax decoder is fit against states sampled once from the
target PMFs, and the error is the mean Kullback-Leibler divergence
between predicted and target PMFs, in the written argument order
KL(p || xi) with a swap flag.

The column average of the pairwise error matrix, diagonal excluded,
proxies a model's distance to the (unobserved) ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import rel_entr

from .errors import DomainError
from .rng import substream

PMF_FLOOR = 1e-12


@dataclass(frozen=True)
class LinearDecode:
    """Affine decoding error for one ordered source -> target pair."""

    d: float
    r2_per_dim: np.ndarray
    constant_dims: list


@dataclass(frozen=True)
class CrossDecodeMatrix:
    model_ids: list
    D: np.ndarray  # (U, U), D[u][v] decodes v from u
    method: str  # "linear-r2" or "multinomial-kl"

    def column_averages(self) -> np.ndarray:
        """Mean decoding error of each model as a target, diagonal excluded."""
        U = self.D.shape[0]
        if U < 2:
            raise DomainError("column averages need at least two models")
        mask = ~np.eye(U, dtype=bool)
        return np.array([self.D[:, v][mask[:, v]].mean() for v in range(U)])


@dataclass(frozen=True)
class CycleScore:
    model_id: str
    d_r_to_z: float


def _affine_fit_r2(source: np.ndarray, target: np.ndarray) -> LinearDecode:
    Zs = np.asarray(source, dtype=np.float64)
    Zt = np.asarray(target, dtype=np.float64)
    if Zs.ndim != 2 or Zt.ndim != 2 or Zs.shape[0] != Zt.shape[0]:
        raise DomainError(f"latents misaligned: {Zs.shape} vs {Zt.shape}")
    n = Zs.shape[0]
    A = np.concatenate([Zs, np.ones((n, 1))], axis=1)
    W, *_ = np.linalg.lstsq(A, Zt, rcond=None)
    pred = A @ W
    resid = Zt - pred
    ss_res = (resid**2).sum(axis=0)
    centered = Zt - Zt.mean(axis=0)
    ss_tot = (centered**2).sum(axis=0)
    r2 = np.empty(Zt.shape[1])
    constant = []
    for j in range(Zt.shape[1]):
        if ss_tot[j] <= 0.0:
            # constant target dimension: defined as perfect iff reproduced
            r2[j] = 1.0 if np.abs(resid[:, j]).max() <= 1e-12 else 0.0
            constant.append(j)
        else:
            r2[j] = 1.0 - ss_res[j] / ss_tot[j]
    return LinearDecode(d=float(1.0 - r2.mean()), r2_per_dim=r2, constant_dims=constant)


def cross_decode_linear(source_latents: np.ndarray, target_latents: np.ndarray) -> LinearDecode:
    """Decoding error D = 1 - R^2 of an affine map from source to target.

    Latents are (n_samples, dim) matrices aligned over identical
    (trial, time) test samples.
    """
    return _affine_fit_r2(source_latents, target_latents)


def cycle_consistency(latents: np.ndarray, rate_predictions: np.ndarray, model_id: str = "") -> CycleScore:
    """Error of recovering a model's own latents from its rate predictions."""
    fit = _affine_fit_r2(rate_predictions, latents)
    return CycleScore(model_id=model_id, d_r_to_z=fit.d)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax_regression(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    l2: float = 1e-4,
    max_iter: int = 500,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Multinomial logistic regression by L-BFGS.

    Minimises mean cross-entropy + (l2 / 2) ||W||_F^2 with unpenalised
    offsets.  Returns (W (C, D), b (C,), converged).
    """
    Z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, d = Z.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0

    def fun(theta):
        W = theta[: n_classes * d].reshape(n_classes, d)
        b = theta[n_classes * d :]
        P = _softmax(Z @ W.T + b)
        ce = -np.log(np.clip(P[np.arange(n), y], 1e-300, None)).mean()
        obj = ce + 0.5 * l2 * (W**2).sum()
        G = (P - Y) / n  # (n, C)
        gW = G.T @ Z + l2 * W
        gb = G.sum(axis=0)
        return obj, np.concatenate([gW.reshape(-1), gb])

    theta0 = np.zeros(n_classes * d + n_classes)
    res = minimize(fun, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-14})
    W = res.x[: n_classes * d].reshape(n_classes, d)
    b = res.x[n_classes * d :]
    return W, b, bool(res.success)


def cross_decode_hmm(
    source_pmfs: np.ndarray,
    target_pmfs: np.ndarray,
    seed: int,
    l2: float = 1e-4,
    swap_kl: bool = False,
) -> float:
    """Multinomial decoding error between PMF latents.

    Hard targets are sampled once per (trial, time) sample from the
    target PMFs, a softmax-affine map is fit by cross-entropy, and the
    error is the mean KL divergence between predicted distribution and
    target PMF over the same samples.
    """
    P_s = np.asarray(source_pmfs, dtype=np.float64)
    P_t = np.asarray(target_pmfs, dtype=np.float64)
    if P_s.ndim != 2 or P_t.ndim != 2 or P_s.shape[0] != P_t.shape[0]:
        raise DomainError(f"PMF latents misaligned: {P_s.shape} vs {P_t.shape}")
    n, Mt = P_t.shape
    rng = substream(seed, "crossdecode-hard-targets")
    cum = np.cumsum(P_t, axis=1)
    cum /= cum[:, -1:]
    labels = (rng.random(n)[:, None] > cum).sum(axis=1)

    W, b, _ = fit_softmax_regression(P_s, labels, Mt, l2=l2)
    pred = _softmax(P_s @ W.T + b)

    q = np.clip(P_t, PMF_FLOOR, None)
    q /= q.sum(axis=1, keepdims=True)
    p = np.clip(pred, PMF_FLOOR, None)
    p /= p.sum(axis=1, keepdims=True)
    if swap_kl:
        p, q = q, p
    return float(rel_entr(p, q).sum(axis=1).mean())


def cross_decode_matrix(
    latents: dict[str, np.ndarray],
    method: str = "linear-r2",
    seed: int = 0,
    l2: float = 1e-4,
) -> CrossDecodeMatrix:
    """All ordered pairwise decoding errors over a model population.

    ``latents`` maps model id to its (n_samples, dim) latents (or PMFs
    for the multinomial method), aligned over the same test samples.
    """
    ids = list(latents.keys())
    U = len(ids)
    if U < 2:
        raise DomainError("cross-decoding needs at least two models")
    D = np.empty((U, U))
    for u, su in enumerate(ids):
        for v, sv in enumerate(ids):
            if method == "linear-r2":
                D[u, v] = cross_decode_linear(latents[su], latents[sv]).d
            elif method == "multinomial-kl":
                D[u, v] = cross_decode_hmm(latents[su], latents[sv], seed=seed, l2=l2)
            else:
                raise DomainError(f"unknown cross-decoding method {method!r}")
    return CrossDecodeMatrix(model_ids=ids, D=D, method=method)
