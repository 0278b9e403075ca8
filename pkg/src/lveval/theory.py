"""Closed-form few-shot predictions and their Monte Carlo oracles.

Three settings, each with a theory function and an MC counterpart:

* Two-state readout estimation in a stationary two-step Bernoulli
  emitter.  The time-independent ("good") student pools both steps into
  one estimate; the step-switching ("bad") student estimates each step
  separately.  Expected per-trial test log-likelihood (summed over the
  two steps) is L(B*) - 1/(2k) and L(B*) - 1/k respectively, with
  L(B*) = 2 (B* log B* + (1 - B*) log(1 - B*)).
* Minimum-norm least squares with one signal coordinate and p - 1
  extraneous coordinates of scale sigma_ext, in the proportional limit
  p/k -> gamma.  Underparameterised: risk = sigma_obs^2 gamma/(1 - gamma),
  independent of sigma_ext.  Overparameterised: bias
  gamma (gamma - 1) / (gamma - 1 + 1/sigma_ext^2)^2 plus variance
  sigma_obs^2 / (gamma - 1).
* Binary prototype classification with class-specific extraneous blocks:
  error H(sqrt(M k) / sigma_ext^2), H the standard normal tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import DomainError, SingularRegimeError
from .metrics import linreg_fit
from .rng import substream

BHAT_CLIP = 1e-6  # mirrors the emission floor used when scoring models


@dataclass(frozen=True)
class HmmTheoryConfig:
    B_star: float
    k: int
    T: int = 2
    student: str = "good"

    def __post_init__(self):
        if not 0.0 < self.B_star < 1.0:
            raise DomainError("B_star must lie strictly inside (0, 1)")
        if self.T != 2:
            raise DomainError("the two-step construction fixes T = 2")
        if self.student not in ("good", "bad"):
            raise DomainError(f"unknown student {self.student!r}")
        if self.k < 1:
            raise DomainError("k must be >= 1")


@dataclass(frozen=True)
class RidgelessConfig:
    p: int
    k: int
    sigma_obs: float
    sigma_ext: float

    @property
    def gamma(self) -> float:
        return self.p / self.k

    def __post_init__(self):
        if self.p < 1 or self.k < 1:
            raise DomainError("p and k must be >= 1")
        if self.sigma_obs < 0 or self.sigma_ext < 0:
            raise DomainError("noise scales must be >= 0")


@dataclass(frozen=True)
class PrototypeConfig:
    M: int
    k: int
    sigma_ext: float

    def __post_init__(self):
        if self.M < 1 or self.k < 1:
            raise DomainError("M and k must be >= 1")
        if self.sigma_ext <= 0:
            raise DomainError("sigma_ext must be > 0")


@dataclass(frozen=True)
class McEstimate:
    mean: float
    sem: float
    n_mc: int
    n_clipped: int = 0


def bernoulli_entropy_loss(B_star: float) -> float:
    """Per-step expected log-likelihood at the true parameter."""
    return B_star * np.log(B_star) + (1.0 - B_star) * np.log1p(-B_star)


def hmm_expected_loss_theory(cfg: HmmTheoryConfig) -> float:
    """Second-order expected test log-likelihood (per trial, both steps)."""
    base = cfg.T * bernoulli_entropy_loss(cfg.B_star)
    deficit = 1.0 / (2.0 * cfg.k) if cfg.student == "good" else 1.0 / cfg.k
    return base - deficit


def hmm_expected_loss_mc(cfg: HmmTheoryConfig, n_mc: int, seed: int) -> McEstimate:
    """Monte Carlo expected test log-likelihood of the k-shot readout.

    Draws spike totals C_t ~ Binomial(k, B*), forms the closed-form
    estimate per student, and evaluates the exact expected test
    log-likelihood at it.  Estimates hitting {0, 1} are clipped to
    [1e-6, 1 - 1e-6] and counted.
    """
    if n_mc < 1:
        raise DomainError("n_mc must be >= 1")
    rng = substream(seed, "hmm-fewshot-mc")
    B = cfg.B_star
    C1 = rng.binomial(cfg.k, B, size=n_mc)
    C2 = rng.binomial(cfg.k, B, size=n_mc)
    if cfg.student == "good":
        raw = (C1 + C2) / (2.0 * cfg.k)
        clipped = (raw <= 0.0) | (raw >= 1.0)
        r = np.clip(raw, BHAT_CLIP, 1.0 - BHAT_CLIP)
        L = 2.0 * (B * np.log(r) + (1.0 - B) * np.log1p(-r))
    else:
        raw1, raw2 = C1 / cfg.k, C2 / cfg.k
        clipped = (raw1 <= 0.0) | (raw1 >= 1.0) | (raw2 <= 0.0) | (raw2 >= 1.0)
        r1 = np.clip(raw1, BHAT_CLIP, 1.0 - BHAT_CLIP)
        r2 = np.clip(raw2, BHAT_CLIP, 1.0 - BHAT_CLIP)
        L = B * (np.log(r1) + np.log(r2)) + (1.0 - B) * (np.log1p(-r1) + np.log1p(-r2))
    return McEstimate(
        mean=float(L.mean()),
        sem=float(L.std(ddof=1) / np.sqrt(n_mc)),
        n_mc=n_mc,
        n_clipped=int(clipped.sum()),
    )


def ridgeless_risk_theory(cfg: RidgelessConfig) -> tuple[float, float, float]:
    """Limiting (bias, variance, risk) of the min-norm interpolator.

    gamma < 1: bias 0, variance sigma_obs^2 gamma / (1 - gamma), no
    sigma_ext dependence.  gamma > 1: bias
    gamma (gamma - 1) / (gamma - 1 + 1/sigma_ext^2)^2 and variance
    sigma_obs^2 / (gamma - 1), the value implied by the resolvent
    equation gamma c0 = 1 / ((gamma - 1) sigma_ext^2).
    """
    g = cfg.gamma
    if g == 1.0:
        raise SingularRegimeError("risk diverges at the interpolation threshold gamma = 1")
    if g < 1.0:
        B = 0.0
        V = cfg.sigma_obs**2 * g / (1.0 - g)
    else:
        if cfg.sigma_ext == 0.0:
            B = 0.0
        else:
            B = g * (g - 1.0) / (g - 1.0 + 1.0 / cfg.sigma_ext**2) ** 2
        V = cfg.sigma_obs**2 / (g - 1.0)
    return B, V, B + V


def ridgeless_risk_mc(cfg: RidgelessConfig, n_mc: int, seed: int) -> McEstimate:
    """Monte Carlo risk of min-norm least squares on the spiked design.

    Each draw samples the k x p design (signal coordinate plus
    extraneous noise), fits the interpolator, and evaluates the exact
    quadratic risk ||w_hat - w*||^2_Sigma.
    """
    if n_mc < 1:
        raise DomainError("n_mc must be >= 1")
    rng = substream(seed, "ridgeless-mc")
    p, k = cfg.p, cfg.k
    risks = np.empty(n_mc)
    for i in range(n_mc):
        z = rng.standard_normal(k)
        Z = np.empty((k, p))
        Z[:, 0] = z
        Z[:, 1:] = cfg.sigma_ext * rng.standard_normal((k, p - 1))
        y = z + cfg.sigma_obs * rng.standard_normal(k)
        w = linreg_fit(Z, y, mode="min-norm")
        risks[i] = (w[0] - 1.0) ** 2 + cfg.sigma_ext**2 * float(w[1:] @ w[1:])
    return McEstimate(
        mean=float(risks.mean()),
        sem=float(risks.std(ddof=1) / np.sqrt(n_mc)),
        n_mc=n_mc,
    )


def gaussian_tail(x) -> np.ndarray:
    """H(x) = P(Z > x) for standard normal Z, via the complementary
    error function (relative accuracy well below 1e-12)."""
    return 0.5 * erfc(np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def prototype_error_theory(cfg: PrototypeConfig) -> float:
    """Predicted few-shot error H(sqrt(M k) / sigma_ext^2)."""
    snr = np.sqrt(cfg.M * cfg.k) / cfg.sigma_ext**2
    return float(gaussian_tail(snr))


def prototype_error_mc(
    cfg: PrototypeConfig, n_mc: int, seed: int, n_test_per_class: int = 10
) -> McEstimate:
    """Empirical prototype-classifier error on the two-class construction.

    Class latents carry the teacher coordinate at +-1/sqrt(2) and a
    class-specific extraneous block of dimension M with per-coordinate
    scale sigma_ext.  Each draw builds the prototype rule from k samples
    per class and scores fresh samples.
    """
    if n_mc < 1:
        raise DomainError("n_mc must be >= 1")
    rng = substream(seed, "prototype-mc")
    M, k, s = cfg.M, cfg.k, cfg.sigma_ext
    half = 1.0 / np.sqrt(2.0)
    errs = np.empty(n_mc)
    for i in range(n_mc):
        xa_mean = np.zeros(2 * M + 1)
        xb_mean = np.zeros(2 * M + 1)
        xa_mean[0] = half
        xa_mean[1 : M + 1] = s * rng.standard_normal((k, M)).mean(axis=0)
        xb_mean[0] = -half
        xb_mean[M + 1 :] = s * rng.standard_normal((k, M)).mean(axis=0)
        w = xa_mean - xb_mean
        thr = 0.5 * (xa_mean + xb_mean)
        # score fresh samples; only the class's own block enters w'(x - thr)
        xa_scores = (
            (half - thr[0]) * w[0]
            + (s * rng.standard_normal((n_test_per_class, M)) - thr[1 : M + 1]) @ w[1 : M + 1]
            + (-thr[M + 1 :]) @ w[M + 1 :]
        )
        xb_scores = (
            (-half - thr[0]) * w[0]
            + (-thr[1 : M + 1]) @ w[1 : M + 1]
            + (s * rng.standard_normal((n_test_per_class, M)) - thr[M + 1 :]) @ w[M + 1 :]
        )
        errs[i] = 0.5 * ((xa_scores < 0).mean() + (xb_scores > 0).mean())
    return McEstimate(
        mean=float(errs.mean()),
        sem=float(errs.std(ddof=1) / np.sqrt(n_mc)),
        n_mc=n_mc,
    )
