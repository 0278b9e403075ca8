"""Linear-Gaussian state-space models.

z_0 ~ N(mu0, Sigma0), z_t ~ N(F z_{t-1} + b, G), x_t ~ N(H z_t + c, R).
Provides a randomly parameterised teacher, ancestral sampling, Kalman
filtering with the Rauch-Tung-Striebel smoother (innovations-form
log-likelihood), EM with closed-form M-steps, and the observation-mean
readout.

Because state covariances do not depend on the observed values, the
covariance recursions run once per parameter set and are shared across
trials; only the means are per-trial.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .datamodel import atomic_write_text
from .errors import CovarianceError, FitError, FormatError
from .rng import substream

MODEL_SCHEMA_VERSION = 1

_PARAM_NAMES = ("mu0", "Sigma0", "F", "b", "G", "H", "c", "R")


def _jitter_of(C: np.ndarray) -> float:
    d = C.shape[0]
    return 1e-10 * float(np.trace(C)) / d if d else 0.0


def _chol_factor(C: np.ndarray, what: str, time_index: int | None = None) -> np.ndarray:
    """Cholesky factor of a PSD matrix, tolerating semidefiniteness.

    Adds jitter 1e-10 * trace/dim first; falls back to an eigenvalue
    square root for exactly singular matrices (e.g. zero noise).
    """
    C = 0.5 * (C + C.T)
    try:
        return np.linalg.cholesky(C + _jitter_of(C) * np.eye(C.shape[0]))
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(C)
        scale = max(abs(w.max()), 1.0)
        if w.min() < -1e-8 * scale:
            raise CovarianceError(f"{what} is not positive semidefinite", time_index=time_index)
        return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class LgssmModel:
    """Parameter blocks (mu0, Sigma0, F, b, G, H, c, R)."""

    mu0: np.ndarray
    Sigma0: np.ndarray
    F: np.ndarray
    b: np.ndarray
    G: np.ndarray
    H: np.ndarray
    c: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in _PARAM_NAMES:
            a = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            arrays[name] = a
        M = arrays["mu0"].shape[0]
        N = arrays["c"].shape[0]
        expect = {
            "mu0": (M,), "Sigma0": (M, M), "F": (M, M), "b": (M,),
            "G": (M, M), "H": (N, M), "c": (N,), "R": (N, N),
        }
        for name, shape in expect.items():
            if arrays[name].shape != shape:
                raise FormatError(f"{name} has shape {arrays[name].shape}, expected {shape}")
        for name in ("Sigma0", "G", "R"):
            _chol_factor(arrays[name], name)  # PSD check
        for name, a in arrays.items():
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_states(self) -> int:
        return self.mu0.shape[0]

    @property
    def n_channels(self) -> int:
        return self.c.shape[0]

    def restrict(self, channels: np.ndarray) -> "LgssmModel":
        """Model with emission blocks restricted to the given channels."""
        idx = np.asarray(channels, dtype=np.int64)
        return LgssmModel(
            mu0=self.mu0, Sigma0=self.Sigma0, F=self.F, b=self.b, G=self.G,
            H=self.H[idx], c=self.c[idx], R=self.R[np.ix_(idx, idx)],
        )


@dataclass(frozen=True)
class GaussianTrajectory:
    """Smoothed means (S, T, M) and covariances (S, T, M, M)."""

    means: np.ndarray
    covs: np.ndarray


def spectral_radius(F: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(F)).max())


def make_random_teacher(M: int, N: int, seed: int) -> LgssmModel:
    """Random teacher: F rescaled to spectral radius 0.95, G = R = 0.1 I,
    H standard normal, mu0 = 0, Sigma0 = I, b = c = 0."""
    if M < 1 or N < 1:
        raise FormatError("teacher needs M, N >= 1")
    rng = substream(seed, "lgssm-teacher")
    F = rng.standard_normal((M, M))
    F *= 0.95 / spectral_radius(F)
    H = rng.standard_normal((N, M))
    return LgssmModel(
        mu0=np.zeros(M), Sigma0=np.eye(M), F=F, b=np.zeros(M),
        G=0.1 * np.eye(M), H=H, c=np.zeros(N), R=0.1 * np.eye(N),
    )


def sample_lgssm(model: LgssmModel, S: int, T: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sampling: returns (latents (S, T, M), observations (S, T, N))."""
    M, N = model.n_states, model.n_channels
    rng = substream(seed, "lgssm-sample")
    L0 = _chol_factor(model.Sigma0, "Sigma0")
    LG = _chol_factor(model.G, "G")
    LR = _chol_factor(model.R, "R")
    z = np.empty((S, T, M))
    z[:, 0] = model.mu0 + rng.standard_normal((S, M)) @ L0.T
    for t in range(1, T):
        z[:, t] = z[:, t - 1] @ model.F.T + model.b + rng.standard_normal((S, M)) @ LG.T
    x = z @ model.H.T + model.c + rng.standard_normal((S, T, N)) @ LR.T
    return z, x


def _kalman_gains(model: LgssmModel, T: int):
    """Filter/smoother covariance path, shared by every trial.

    Returns (K, P_pred, P_filt, J, S_chol) where S_chol holds Cholesky
    factors of the innovation covariances.
    """
    M = model.n_states
    F, G, H, R = model.F, model.G, model.H, model.R
    P_pred = np.empty((T, M, M))
    P_filt = np.empty((T, M, M))
    K = np.empty((T, M, H.shape[0]))
    S_chol = []
    P = model.Sigma0
    for t in range(T):
        if t > 0:
            P = F @ P_filt[t - 1] @ F.T + G
        P = 0.5 * (P + P.T)
        P_pred[t] = P
        S_t = H @ P @ H.T + R
        S_t = 0.5 * (S_t + S_t.T)
        try:
            L = np.linalg.cholesky(S_t + _jitter_of(S_t) * np.eye(S_t.shape[0]))
        except np.linalg.LinAlgError:
            raise CovarianceError("singular innovation covariance", time_index=t)
        S_chol.append(L)
        PHt = P @ H.T
        K[t] = np.linalg.solve(S_t + _jitter_of(S_t) * np.eye(S_t.shape[0]), PHt.T).T
        Pf = P - K[t] @ PHt.T
        P_filt[t] = 0.5 * (Pf + Pf.T)
    J = np.empty((T - 1, M, M))
    for t in range(T - 1):
        J[t] = np.linalg.solve(P_pred[t + 1], F @ P_filt[t]).T
    return K, P_pred, P_filt, J, S_chol


def kalman_smooth(
    model: LgssmModel, observations: np.ndarray, want_lag_one: bool = False
):
    """Forward filter plus RTS smoothing over a batch of trials.

    ``observations`` is (S, T, Nc) (or (T, Nc) for one trial) on the
    channels covered by the model.  Returns (GaussianTrajectory,
    per-trial log-likelihoods[, lag-one covariances (T-1, M, M)]).
    """
    x = np.asarray(observations, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    S, T, N = x.shape
    M = model.n_states
    F, H, b, c = model.F, model.H, model.b, model.c
    K, P_pred, P_filt, J, S_chol = _kalman_gains(model, T)

    m_filt = np.empty((S, T, M))
    loglik = np.zeros(S)
    m_pred = np.broadcast_to(model.mu0, (S, M))
    for t in range(T):
        if t > 0:
            m_pred = m_filt[:, t - 1] @ F.T + b
        resid = x[:, t] - m_pred @ H.T - c
        L = S_chol[t]
        y = solve_triangular(L, resid.T, lower=True)
        loglik -= 0.5 * (y * y).sum(axis=0)
        loglik -= 0.5 * N * np.log(2.0 * np.pi) + np.log(np.diag(L)).sum()
        m_filt[:, t] = m_pred + resid @ K[t].T

    m_smooth = np.empty_like(m_filt)
    P_smooth = np.empty((T, M, M))
    m_smooth[:, T - 1] = m_filt[:, T - 1]
    P_smooth[T - 1] = P_filt[T - 1]
    for t in range(T - 2, -1, -1):
        m_pred_next = m_filt[:, t] @ F.T + b
        m_smooth[:, t] = m_filt[:, t] + (m_smooth[:, t + 1] - m_pred_next) @ J[t].T
        P = P_filt[t] + J[t] @ (P_smooth[t + 1] - P_pred[t + 1]) @ J[t].T
        P_smooth[t] = 0.5 * (P + P.T)

    covs = np.broadcast_to(P_smooth, (S, T, M, M))
    traj = GaussianTrajectory(means=m_smooth, covs=covs)
    if want_lag_one:
        lag_one = np.empty((T - 1, M, M))
        for t in range(T - 1):
            lag_one[t] = P_smooth[t + 1] @ J[t].T  # Cov(z_{t+1}, z_t | X)
        return traj, loglik, lag_one
    return traj, loglik


def fit_em(
    train_obs: np.ndarray,
    M: int,
    n_iters: int = 50,
    init_seed: int = 0,
    diagonal_R: bool = True,
) -> tuple[LgssmModel, np.ndarray]:
    """EM with closed-form M-steps over all eight parameter blocks.

    Returns the fitted model and the log-likelihood trace (evaluated at
    the parameters entering each iteration).  The observation-noise
    M-step keeps R diagonal by default; a full residual covariance (one
    free parameter per channel pair) overfits badly on few-trial data.
    """
    x = np.asarray(train_obs, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 1:
        raise FitError("EM needs a non-empty (S, T, N) observation tensor")
    if M < 1:
        raise FitError("M must be >= 1")
    S, T, N = x.shape

    rng = substream(init_seed, "lgssm-em-init")
    F = rng.standard_normal((M, M))
    F *= 0.8 / max(spectral_radius(F), 1e-12)
    H = rng.standard_normal((N, M))
    model = LgssmModel(
        mu0=np.zeros(M), Sigma0=np.eye(M), F=F, b=np.zeros(M),
        G=np.eye(M), H=H, c=x.mean(axis=(0, 1)), R=np.eye(N) * max(x.var(), 1e-6),
    )

    trace = np.empty(n_iters)
    flat_x = x.reshape(S * T, N)
    Sxx = flat_x.T @ flat_x
    for it in range(n_iters):
        traj, loglik, lag_one = kalman_smooth(model, x, want_lag_one=True)
        trace[it] = loglik.sum()
        ms = traj.means  # (S, T, M)
        Ps = traj.covs[0]  # (T, M, M), shared across trials

        Ezz_t = S * Ps + np.einsum("stm,stn->tmn", ms, ms)  # sum over trials per t
        Ez_t = ms.sum(axis=0)  # (T, M)

        # dynamics block: pairs (z_{t-1} -> z_t), t = 1..T-1
        n_d = S * (T - 1)
        Szz1 = S * lag_one.sum(axis=0) + np.einsum("stm,stn->mn", ms[:, 1:], ms[:, :-1])
        Sz0z0 = Ezz_t[:-1].sum(axis=0)
        Szz_cur = Ezz_t[1:].sum(axis=0)
        Sz1 = Ez_t[1:].sum(axis=0)
        Sz0 = Ez_t[:-1].sum(axis=0)
        Suu = np.empty((M + 1, M + 1))
        Suu[:M, :M] = Sz0z0
        Suu[:M, M] = Sz0
        Suu[M, :M] = Sz0
        Suu[M, M] = n_d
        Syu = np.concatenate([Szz1, Sz1[:, None]], axis=1)  # (M, M+1)
        try:
            Wd = np.linalg.solve(Suu, Syu.T).T
        except np.linalg.LinAlgError as exc:
            raise FitError(
                "dynamics M-step is ill-posed (too few trials/steps); add jitter or data"
            ) from exc
        F_new, b_new = Wd[:, :M], Wd[:, M]
        Suy = np.concatenate([Szz1.T, Sz1[None, :]], axis=0)  # (M+1, M)
        G_new = (Szz_cur - Wd @ Suy) / n_d
        G_new = 0.5 * (G_new + G_new.T)

        # emission block: x_t on [z_t; 1] over all steps
        n_e = S * T
        Szz_all = Ezz_t.sum(axis=0)
        Sz_all = Ez_t.sum(axis=0)
        Sxz = np.einsum("stn,stm->nm", x, ms)
        Sx = flat_x.sum(axis=0)
        Suu_e = np.empty((M + 1, M + 1))
        Suu_e[:M, :M] = Szz_all
        Suu_e[:M, M] = Sz_all
        Suu_e[M, :M] = Sz_all
        Suu_e[M, M] = n_e
        Syu_e = np.concatenate([Sxz, Sx[:, None]], axis=1)  # (N, M+1)
        try:
            We = np.linalg.solve(Suu_e, Syu_e.T).T
        except np.linalg.LinAlgError as exc:
            raise FitError(
                "emission M-step is ill-posed (too few trials/steps); add jitter or data"
            ) from exc
        H_new, c_new = We[:, :M], We[:, M]
        Suy_e = np.concatenate([Sxz.T, Sx[None, :]], axis=0)  # (M+1, N)
        R_new = (Sxx - We @ Suy_e) / n_e
        R_new = 0.5 * (R_new + R_new.T)
        if diagonal_R:
            R_new = np.diag(np.diag(R_new))

        mu0_new = ms[:, 0].mean(axis=0)
        S0 = (S * Ps[0] + ms[:, 0].T @ ms[:, 0]) / S - np.outer(mu0_new, mu0_new)
        S0 = 0.5 * (S0 + S0.T)

        # keep covariance estimates strictly factorable
        for C in (G_new, R_new, S0):
            C += (_jitter_of(C) + 1e-12) * np.eye(C.shape[0])
        model = LgssmModel(
            mu0=mu0_new, Sigma0=S0, F=F_new, b=b_new, G=G_new, H=H_new, c=c_new, R=R_new
        )
    return model, trace


def predict_obs_means(model: LgssmModel, trajectory: GaussianTrajectory, channels: np.ndarray) -> np.ndarray:
    """Predicted observation means H_out @ smoothed_mean + c_out."""
    idx = np.asarray(channels, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= model.n_channels):
        raise IndexError(f"channels {idx} outside 0..{model.n_channels - 1}")
    return trajectory.means @ model.H[idx].T + model.c[idx]


def save_model(model: LgssmModel, path: str) -> None:
    payload = {"schema_version": MODEL_SCHEMA_VERSION, "M": model.n_states, "N": model.n_channels}
    for name in _PARAM_NAMES:
        payload[name] = np.asarray(getattr(model, name)).reshape(-1).tolist()
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_model(path: str) -> LgssmModel:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read LGSSM model at {path}: {exc}") from exc
    try:
        M, N = int(payload["M"]), int(payload["N"])
        shapes = {
            "mu0": (M,), "Sigma0": (M, M), "F": (M, M), "b": (M,),
            "G": (M, M), "H": (N, M), "c": (N,), "R": (N, N),
        }
        kwargs = {
            name: np.asarray(payload[name], dtype=np.float64).reshape(shapes[name])
            for name in _PARAM_NAMES
        }
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed LGSSM model file {path}: {exc}") from exc
    return LgssmModel(**kwargs)
