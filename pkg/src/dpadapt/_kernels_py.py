"""Pure-NumPy kernels; fallback for the compiled extension.

Matrix products go through np.einsum with optimize=False, which keeps
them off multithreaded BLAS: results are identical no matter how many
threads the process is allowed, which the reproducibility contract
requires. The compiled backend in _core.pyx implements the same
signatures with fixed left-to-right summation.
"""

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def affine(x, w, b):
    """x @ w + b for a (B,m) batch, (m,n) weight, (n,) bias."""
    return np.einsum("bm,mn->bn", x, w, optimize=False) + b


def matmul_nt(d, w):
    """d @ w.T: propagate a (B,n) delta back through an (m,n) weight."""
    return np.einsum("bn,mn->bm", d, w, optimize=False)


def matmul_tn(a, d):
    """a.T @ d: sum of per-example outer products, (B,m) x (B,n) -> (m,n)."""
    return np.einsum("bm,bn->mn", a, d, optimize=False)


def per_example_outer(a, d):
    """Stacked outer products a_i d_i^T, (B,m) x (B,n) -> (B,m,n)."""
    return np.einsum("bm,bn->bmn", a, d, optimize=False)


def row_sq_norms(x):
    """Squared L2 norm of each row of a 2-D array."""
    return np.einsum("bp,bp->b", x, x, optimize=False)


def gmm_log_components(x, means, variances, log_weights):
    """log pi_k + log N(x_i; mu_k, diag(var_k)) for every (i, k) pair.

    x: (B,d), means/variances: (K,d), log_weights: (K,). Returns (B,K).
    """
    # (B,K,d) broadcast; desk-scale dims keep the temporary small.
    diff = x[:, None, :] - means[None, :, :]
    quad = np.einsum("bkd,bkd->bk", diff / variances[None, :, :], diff, optimize=False)
    log_norm = -0.5 * (np.log(variances).sum(axis=1) + variances.shape[1] * LOG_2PI)
    return log_weights[None, :] + log_norm[None, :] - 0.5 * quad


def logsumexp_rows(m):
    """Row-wise log(sum(exp(m))) with max-subtraction."""
    hi = np.max(m, axis=1, keepdims=True)
    return (hi[:, 0] + np.log(np.sum(np.exp(m - hi), axis=1)))
