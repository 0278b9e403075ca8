"""Independent reference implementations used only by the tests.

These deliberately avoid the library's recursions: HMM posteriors come
from explicit enumeration over all M^T state paths, and LGSSM smoothing
comes from conditioning the explicit joint Gaussian over all latents and
observations.  Both are exponential/cubic in the problem size and only
meant for tiny instances.
"""

import itertools

import numpy as np


def hmm_enumeration_posterior(A, B, pi, X):
    """Smoothed posteriors and log-likelihood by summing over every path.

    X is (T, N) binary.  Returns (xi (T, M), loglik).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    X = np.asarray(X)
    T, _ = X.shape
    M = A.shape[0]
    emit = np.empty((T, M))
    for t in range(T):
        emit[t] = np.prod(B ** X[t] * (1.0 - B) ** (1 - X[t]), axis=1)
    total = 0.0
    xi = np.zeros((T, M))
    for path in itertools.product(range(M), repeat=T):
        p = pi[path[0]] * emit[0, path[0]]
        for t in range(1, T):
            p *= A[path[t - 1], path[t]] * emit[t, path[t]]
        total += p
        for t in range(T):
            xi[t, path[t]] += p
    return xi / total, float(np.log(total))


def lgssm_joint_moments(model, T):
    """Mean and covariance of the stacked vector [z_0..z_{T-1}, x_0..x_{T-1}]."""
    M = model.mu0.shape[0]
    N = model.c.shape[0]
    F, G, H, R = model.F, model.G, model.H, model.R
    mu_z = np.empty((T, M))
    mu_z[0] = model.mu0
    for t in range(1, T):
        mu_z[t] = F @ mu_z[t - 1] + model.b
    P = [None] * T  # marginal covariances
    P[0] = model.Sigma0
    for t in range(1, T):
        P[t] = F @ P[t - 1] @ F.T + G
    Kzz = np.empty((T, T, M, M))
    for s in range(T):
        Kzz[s, s] = P[s]
        acc = P[s]
        for t in range(s + 1, T):
            acc = F @ acc  # Cov(z_t, z_s) for t > s
            Kzz[t, s] = acc
            Kzz[s, t] = acc.T
    mean = np.concatenate([mu_z.reshape(-1), (mu_z @ H.T + model.c).reshape(-1)])
    cov = np.zeros((T * (M + N), T * (M + N)))
    zdim = T * M
    for t in range(T):
        for s in range(T):
            cov[t * M : (t + 1) * M, s * M : (s + 1) * M] = Kzz[t, s]
            cov[zdim + t * N : zdim + (t + 1) * N, s * M : (s + 1) * M] = H @ Kzz[t, s]
            cov[s * M : (s + 1) * M, zdim + t * N : zdim + (t + 1) * N] = (H @ Kzz[t, s]).T
            block = H @ Kzz[t, s] @ H.T
            if t == s:
                block = block + R
            cov[zdim + t * N : zdim + (t + 1) * N, zdim + s * N : zdim + (s + 1) * N] = block
    return mean, cov, zdim


def lgssm_conditional_oracle(model, x):
    """Smoothed means/covariances and log-likelihood by joint-Gaussian
    conditioning.  x is one trial, shape (T, N)."""
    T = x.shape[0]
    M = model.mu0.shape[0]
    mean, cov, zdim = lgssm_joint_moments(model, T)
    mu_z, mu_x = mean[:zdim], mean[zdim:]
    Kzz = cov[:zdim, :zdim]
    Kzx = cov[:zdim, zdim:]
    Kxx = cov[zdim:, zdim:]
    resid = x.reshape(-1) - mu_x
    sol = np.linalg.solve(Kxx, resid)
    cond_mean = (mu_z + Kzx @ sol).reshape(T, M)
    cond_cov_full = Kzz - Kzx @ np.linalg.solve(Kxx, Kzx.T)
    cond_cov = np.empty((T, M, M))
    for t in range(T):
        cond_cov[t] = cond_cov_full[t * M : (t + 1) * M, t * M : (t + 1) * M]
    sign, logdet = np.linalg.slogdet(Kxx)
    loglik = -0.5 * (resid @ sol + logdet + resid.size * np.log(2.0 * np.pi))
    return cond_mean, cond_cov, float(loglik)


def random_hmm(rng, M, N):
    A = rng.dirichlet(np.ones(M), size=M)
    pi = rng.dirichlet(np.ones(M))
    B = rng.uniform(0.05, 0.95, size=(M, N))
    return A, B, pi


def cosmoothing_oracle(rates, counts, null_rates, family="bernoulli", floor=1e-10):
    """Direct triple-loop evaluation of the normalised score."""

    def pointwise(r, x):
        if family == "bernoulli":
            rc = min(max(r, floor), 1 - floor)
            return x * np.log(rc) + (1 - x) * np.log1p(-rc)
        if family == "poisson":
            rc = max(r, floor)
            return x * np.log(rc) - rc
        return -0.5 * (x - r) ** 2

    S, T, N = counts.shape
    total = 0.0
    per = {}
    for n in range(N):
        mu = counts[:, :, n].sum()
        if mu == 0:
            continue
        acc = 0.0
        for i in range(S):
            for t in range(T):
                x = counts[i, t, n]
                acc += pointwise(rates[i, t, n], x) - pointwise(null_rates[n], x)
        per[n] = acc / (mu * np.log(2.0))
        total += per[n]
    return total, per
