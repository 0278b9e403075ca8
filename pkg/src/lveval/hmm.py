"""Bernoulli-emission hidden Markov models.

Covers the teacher construction (noisy M-cycle), ancestral sampling,
exact smoothing by the scaled forward-backward recursion, Baum-Welch
EM, rate readout, the closed-form few-shot emission MLE, and the
traffic-graph export used for visualising state usage.

Emission matrices cover an ordered list of channels; columns follow the
ascending absolute channel index of the covered set.  Callers slice
columns to restrict a model to held-in channels.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .datamodel import atomic_write_text
from .errors import DegenerateLikelihoodError, FitError, FormatError
from .rng import substream

MODEL_SCHEMA_VERSION = 1
EMISSION_FLOOR = 1e-6  # keeps log-likelihoods finite downstream

_ATOL = 1e-12


@dataclass(frozen=True)
class HmmModel:
    """Transition matrix A (M x M, row-stochastic), Bernoulli emission
    matrix B (M x N, entries in [0, 1]) and initial distribution pi."""

    A: np.ndarray
    B: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        pi = np.asarray(self.pi, dtype=np.float64)
        m = A.shape[0]
        if A.shape != (m, m) or B.ndim != 2 or B.shape[0] != m or pi.shape != (m,):
            raise FormatError(f"inconsistent HMM shapes A{A.shape} B{B.shape} pi{pi.shape}")
        if (A < 0).any() or (pi < 0).any():
            raise FormatError("A and pi must be non-negative")
        if np.abs(A.sum(axis=1) - 1).max() > _ATOL:
            raise FormatError("rows of A must sum to 1 within 1e-12")
        if abs(pi.sum() - 1) > _ATOL:
            raise FormatError("pi must sum to 1 within 1e-12")
        if B.min() < 0 or B.max() > 1:
            raise FormatError("B entries must lie in [0, 1]")
        for name, arr in (("A", A), ("B", B), ("pi", pi)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_channels(self) -> int:
        return self.B.shape[1]

    def restrict(self, columns: np.ndarray) -> "HmmModel":
        """Model with B restricted to the given column indices."""
        return HmmModel(self.A, self.B[:, np.asarray(columns, dtype=np.int64)], self.pi)


@dataclass(frozen=True)
class HmmPosterior:
    """Smoothed state PMFs xi, shape (S, T, M), one row per time step,
    plus the per-trial observation log-likelihoods."""

    xi: np.ndarray
    trial_logliks: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi", np.ascontiguousarray(self.xi, dtype=np.float64))
        object.__setattr__(self, "trial_logliks", np.ascontiguousarray(self.trial_logliks, dtype=np.float64))


def make_cycle_teacher(M: int, epsilon: float, emission_seed: int, n_neurons: int) -> HmmModel:
    """Noisy M-cycle teacher: A[m, l] = (1[l = m+1 mod M] + eps) / (1 + M eps),
    uniform initial state, emission probabilities Unif(0, 1)."""
    if M < 2 or epsilon <= 0:
        raise FormatError("cycle teacher needs M >= 2 and epsilon > 0")
    A = np.full((M, M), epsilon)
    A[np.arange(M), (np.arange(M) + 1) % M] += 1.0
    A /= 1.0 + M * epsilon
    pi = np.full(M, 1.0 / M)
    B = substream(emission_seed, "cycle-teacher-emission").uniform(0.0, 1.0, size=(M, n_neurons))
    return HmmModel(A=A, B=B, pi=pi)


def sample_hmm(model: HmmModel, S: int, T: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sampling: returns (state paths (S, T), binary counts (S, T, N))."""
    M = model.n_states
    rng_path = substream(seed, "hmm-sample-path")
    rng_emit = substream(seed, "hmm-sample-emission")
    paths = np.empty((S, T), dtype=np.int64)
    cum = np.cumsum(model.A, axis=1)
    z = rng_path.choice(M, size=S, p=model.pi)
    paths[:, 0] = z
    for t in range(1, T):
        u = rng_path.random(S)
        z = (u[:, None] > cum[z]).sum(axis=1)
        paths[:, t] = z
    rates = model.B[paths]  # (S, T, N)
    counts = (rng_emit.random(rates.shape) < rates).astype(np.uint32)
    return paths, counts


def _emission_logweights(model: HmmModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step emission log-probabilities, shifted for the scaled recursion.

    Returns (weights w = exp(logp - shift), shift), shapes (S, T, M) and (S, T).
    Boundary emission probabilities (exactly 0 or 1) give -inf only when
    contradicted by the data; a step impossible under every state raises
    DegenerateLikelihoodError.
    """
    B = model.B
    safe = np.clip(B, 1e-300, 1.0 - 1e-16)
    logB = np.log(safe)
    log1mB = np.log1p(-safe)
    Xf = X.astype(np.float64)
    logp = Xf @ (logB - log1mB).T + log1mB.sum(axis=1)
    # exact-boundary emissions: impossible when the observation contradicts them
    zero_cols = B == 0.0
    one_cols = B == 1.0
    if zero_cols.any() or one_cols.any():
        impossible = (Xf @ zero_cols.T.astype(np.float64) + (1.0 - Xf) @ one_cols.T.astype(np.float64)) > 0
        logp = np.where(impossible, -np.inf, logp)
    shift = logp.max(axis=-1)
    dead = ~np.isfinite(shift)
    if dead.any():
        trial = int(np.argwhere(dead)[0][0])
        raise DegenerateLikelihoodError(
            f"zero likelihood under every state at trial index {trial}", trial=trial
        )
    w = np.exp(logp - shift[..., None])
    return w, shift


def posterior_batch(
    model: HmmModel, X: np.ndarray, want_pair_sums: bool = False
) -> tuple[HmmPosterior, np.ndarray | None]:
    """Scaled forward-backward over a batch of trials.

    X is (S, T, Nc) binary with Nc matching model.B's columns.  Returns
    the posterior and, when requested, the summed transition marginals
    sum_{s,t} p(z_t = i, z_{t+1} = j | X) used by the EM M-step.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    S, T, _ = X.shape
    M = model.n_states
    A, pi = model.A, model.pi
    w, shift = _emission_logweights(model, X)

    alpha = np.empty((S, T, M))
    c = np.empty((S, T))
    a = pi[None, :] * w[:, 0]
    c[:, 0] = a.sum(axis=1)
    _check_degenerate(c[:, 0])
    alpha[:, 0] = a / c[:, 0, None]
    for t in range(1, T):
        a = (alpha[:, t - 1] @ A) * w[:, t]
        c[:, t] = a.sum(axis=1)
        _check_degenerate(c[:, t])
        alpha[:, t] = a / c[:, t, None]

    xi = np.empty((S, T, M))
    pair_sums = np.zeros((M, M)) if want_pair_sums else None
    b = np.ones((S, M))
    xi[:, T - 1] = alpha[:, T - 1]
    for t in range(T - 2, -1, -1):
        wb = w[:, t + 1] * b
        if want_pair_sums:
            # p(z_t = i, z_{t+1} = j | X) = alpha_t[i] A[i,j] wb[j] / c_{t+1}
            scaled = wb / c[:, t + 1, None]
            pair_sums += (alpha[:, t].T @ scaled) * A
        b = (wb @ A.T) / c[:, t + 1, None]
        g = alpha[:, t] * b
        xi[:, t] = g / g.sum(axis=1, keepdims=True)

    logliks = np.log(c).sum(axis=1) + shift.sum(axis=1)
    return HmmPosterior(xi=xi, trial_logliks=logliks), pair_sums


def _check_degenerate(norms: np.ndarray) -> None:
    bad = np.flatnonzero(norms <= 0)
    if bad.size:
        raise DegenerateLikelihoodError(
            f"zero likelihood under every state at trial index {bad[0]}", trial=int(bad[0])
        )


def forward_backward(model: HmmModel, observations: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact smoothing for one trial: returns (xi (T, M), log-likelihood).

    ``observations`` is the trial's (T, Nc) binary counts on the channels
    covered by model.B.
    """
    post, _ = posterior_batch(model, np.asarray(observations)[None])
    return post.xi[0], float(post.trial_logliks[0])


def fit_em(
    train_counts: np.ndarray,
    M: int,
    n_iters: int = 50,
    init_seed: int = 0,
) -> tuple[HmmModel, np.ndarray]:
    """Baum-Welch EM on binary count data (S, T, Nc).

    Returns the fitted model and the per-iteration log-likelihood trace
    (evaluated at the parameters entering each iteration; non-decreasing
    up to floating-point slack).  Emission estimates are clipped to
    [1e-6, 1 - 1e-6].
    """
    X = np.asarray(train_counts)
    if X.ndim != 3 or X.shape[0] < 1:
        raise FitError("EM needs a non-empty (S, T, N) train tensor")
    if not np.isin(X, (0, 1)).all():
        raise FitError("Bernoulli EM expects binary-valued data")
    if M < 1:
        raise FitError("M must be >= 1")
    S, T, N = X.shape

    rng = substream(init_seed, "hmm-em-init")
    A = rng.dirichlet(np.ones(M), size=M)
    pi = rng.dirichlet(np.ones(M))
    B = rng.uniform(0.2, 0.8, size=(M, N))
    model = HmmModel(A=A, B=B, pi=pi)

    Xf = X.astype(np.float64)
    flat_X = Xf.reshape(S * T, N)
    trace = np.empty(n_iters)
    for it in range(n_iters):
        post, pair_sums = posterior_batch(model, X, want_pair_sums=True)
        trace[it] = post.trial_logliks.sum()
        gamma = post.xi  # (S, T, M)

        pi_new = gamma[:, 0].mean(axis=0)
        pi_new /= pi_new.sum()

        if M == 1:
            A_new = np.ones((1, 1))
        else:
            rows = pair_sums.sum(axis=1)
            A_new = model.A.copy()
            ok = rows > 1e-300
            A_new[ok] = pair_sums[ok] / rows[ok, None]

        occ = gamma.reshape(S * T, M).sum(axis=0)  # expected visits per state
        B_new = model.B.copy()
        ok = occ > 1e-300
        B_new[ok] = (gamma.reshape(S * T, M).T @ flat_X)[ok] / occ[ok, None]
        B_new = np.clip(B_new, EMISSION_FLOOR, 1.0 - EMISSION_FLOOR)

        model = HmmModel(A=A_new, B=B_new, pi=pi_new)
    return model, trace


def predict_rates(B: np.ndarray, posterior: HmmPosterior, columns: np.ndarray | None = None) -> np.ndarray:
    """Rate readout R[s, t, n] = sum_m B[m, n] xi[s, t, m].

    ``B`` may be a full emission matrix or a few-shot estimate; ``columns``
    optionally selects emission columns first.
    """
    B = np.asarray(B, dtype=np.float64)
    if columns is not None:
        cols = np.asarray(columns, dtype=np.int64)
        if cols.size and (cols.min() < 0 or cols.max() >= B.shape[1]):
            raise IndexError(f"emission columns {cols} outside 0..{B.shape[1] - 1}")
        B = B[:, cols]
    return posterior.xi @ B


def fewshot_emission_mle(posterior_xi: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Closed-form Bernoulli emission MLE from k trials.

    B_hat[m, n] = sum_{i,t} 1[x = 1] xi[i, t, m] / sum_{i,t} xi[i, t, m],
    clipped to [1e-6, 1 - 1e-6].  States with no posterior mass over the
    k trials fall back to the trials' global mean rate (with a warning).
    """
    xi = np.asarray(posterior_xi, dtype=np.float64)
    x = np.asarray(counts, dtype=np.float64)
    if xi.shape[:2] != x.shape[:2]:
        raise FormatError(f"posterior {xi.shape} and counts {x.shape} are misaligned")
    num = np.einsum("itm,itn->mn", xi, x)
    den = xi.sum(axis=(0, 1))
    starved = den <= 1e-12
    B_hat = np.empty_like(num)
    B_hat[~starved] = num[~starved] / den[~starved, None]
    if starved.any():
        warnings.warn(
            f"{int(starved.sum())} state(s) starved in few-shot MLE; using global mean rate",
            RuntimeWarning,
            stacklevel=2,
        )
        B_hat[starved] = x.mean()
    return np.clip(B_hat, EMISSION_FLOOR, 1.0 - EMISSION_FLOOR)


@dataclass(frozen=True)
class TrafficGraph:
    """Empirical visitation/transition fractions of a sampled HMM."""

    node_weight: np.ndarray  # (M,), sums to 1
    edge_weight: np.ndarray  # (M, M), sums to 1
    pruned: np.ndarray  # (M, M) bool, edge_weight < threshold
    prune_threshold: float

    def to_dot(self) -> str:
        """Graphviz digraph; pruned edges keep their data but are invisible."""
        lines = ["digraph hmm {"]
        for m, w in enumerate(self.node_weight):
            lines.append(f'  {m} [label="{m}", weight={w:.6f}];')
        M = self.node_weight.size
        for i in range(M):
            for j in range(M):
                w = self.edge_weight[i, j]
                if w == 0 and self.pruned[i, j]:
                    continue
                attrs = f"weight={w:.6f}"
                if self.pruned[i, j]:
                    attrs += ", style=invis"
                lines.append(f"  {i} -> {j} [{attrs}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def traffic_graph(
    model: HmmModel, n_trials: int, T: int, seed: int, threshold: float = 0.01
) -> TrafficGraph:
    """Node and edge traffic estimated from sampled state paths.

    Edges with weight below ``threshold`` are flagged pruned, not removed.
    """
    M = model.n_states
    rng = substream(seed, "traffic-graph")
    cum = np.cumsum(model.A, axis=1)
    visits = np.zeros(M)
    transitions = np.zeros((M, M))
    z = rng.choice(M, size=n_trials, p=model.pi)
    np.add.at(visits, z, 1.0)
    for _ in range(T - 1):
        u = rng.random(n_trials)
        z_next = (u[:, None] > cum[z]).sum(axis=1)
        np.add.at(transitions, (z, z_next), 1.0)
        np.add.at(visits, z_next, 1.0)
        z = z_next
    node_weight = visits / visits.sum()
    total = transitions.sum()
    edge_weight = transitions / total if total > 0 else transitions
    return TrafficGraph(
        node_weight=node_weight,
        edge_weight=edge_weight,
        pruned=edge_weight < threshold,
        prune_threshold=float(threshold),
    )


def save_model(model: HmmModel, path: str) -> None:
    payload = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "M": model.n_states,
        "N": model.n_channels,
        "A": model.A.reshape(-1).tolist(),
        "B": model.B.reshape(-1).tolist(),
        "pi": model.pi.tolist(),
    }
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_model(path: str) -> HmmModel:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read HMM model at {path}: {exc}") from exc
    try:
        M, N = int(payload["M"]), int(payload["N"])
        A = np.asarray(payload["A"], dtype=np.float64).reshape(M, M)
        B = np.asarray(payload["B"], dtype=np.float64).reshape(M, N)
        pi = np.asarray(payload["pi"], dtype=np.float64)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed HMM model file {path}: {exc}") from exc
    return HmmModel(A=A, B=B, pi=pi)
