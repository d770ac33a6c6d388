"""Eigenanalysis of the FLARE communication matrix from (Q_h, K_h) alone.

W = Lambda_N A^T Lambda_M A is similar to J^T J with
J = Lambda_M^{1/2} A Lambda_N^{1/2}, so its M nonzero eigenvalues are the
eigenvalues of the M x M matrix J J^T and its eigenvectors are
Lambda_N^{1/2} J^T U Sigma^{-1}. Cost O(M^3 + M^2 N); everything runs in
float64.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError, InvalidValueError
from .mixer import exp_scores

SIGMA_TOL = 1e-12


@dataclass
class ScaledScores:
    a: np.ndarray          # (M, N) exp of globally shifted scores
    lambda_m: np.ndarray   # (M,) 1 / row sums of a
    lambda_n: np.ndarray   # (N,) 1 / column sums of a
    j: np.ndarray          # (M, N)


@dataclass
class SpectralResult:
    eigenvalues: np.ndarray    # (M,) descending
    eigenvectors: np.ndarray   # (N, M); column i pairs with eigenvalue i
    null: np.ndarray           # (M,) bool; True where sigma fell below tolerance


def scaled_scores(q_h, k_h):
    q_h = np.asarray(q_h, dtype=np.float64)
    k_h = np.asarray(k_h, dtype=np.float64)
    if q_h.ndim != 2 or k_h.ndim != 2 or q_h.shape[1] != k_h.shape[1]:
        raise DimensionError(f"expected Q (M, D) and K (N, D), got {q_h.shape}, {k_h.shape}")
    if not (np.isfinite(q_h).all() and np.isfinite(k_h).all()):
        raise InvalidValueError("non-finite Q or K")
    a = exp_scores(q_h, k_h)
    lambda_m = 1.0 / a.sum(axis=1)
    lambda_n = 1.0 / a.sum(axis=0)
    j = np.sqrt(lambda_m)[:, None] * a * np.sqrt(lambda_n)[None, :]
    return ScaledScores(a, lambda_m, lambda_n, j)


# ----------------------------------------------------------------------------
# symmetric eigensolver
# ----------------------------------------------------------------------------

def _round_robin(n):
    """Pairings covering every (p, q) once per sweep, n-1 rounds of disjoint pairs."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append(np.array(pairs, dtype=np.intp).T)
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def symmetric_eig(s, tol=1e-12, max_sweeps=100):
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Each sweep rotates every off-diagonal pair once; pairs are grouped into
    rounds of disjoint rotations that are applied together. Stops when the
    off-diagonal Frobenius norm is <= ``tol * ||S||_F``. Returns eigenvalues in
    descending order and orthonormal eigenvectors as columns.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"symmetric_eig needs a square matrix, got {s.shape}")
    n = s.shape[0]
    scale = np.abs(s).max() if s.size else 0.0
    if np.abs(s - s.T).max(initial=0.0) > 1e-8 * scale:
        raise InvalidValueError("symmetric_eig: matrix is not symmetric")
    a = 0.5 * (s + s.T)
    v = np.eye(n)
    if n <= 1:
        return a.diagonal().copy(), v
    fro = np.linalg.norm(a)
    target = tol * fro
    rounds = _round_robin(n)

    offdiag = ~np.eye(n, dtype=bool)

    def off_norm():
        return np.linalg.norm(a[offdiag])

    for _ in range(max_sweeps):
        if fro == 0.0 or off_norm() <= target:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * c
            # A <- G^T A G with G = [[c, s], [-s, c]] on each (p, q) plane
            ap, aq = a[p, :].copy(), a[q, :]
            a[p, :] = c[:, None] * ap - sn[:, None] * aq
            a[q, :] = sn[:, None] * ap + c[:, None] * aq
            ap, aq = a[:, p].copy(), a[:, q]
            a[:, p] = ap * c - aq * sn
            a[:, q] = ap * sn + aq * c
            vp, vq = v[:, p].copy(), v[:, q]
            v[:, p] = vp * c - vq * sn
            v[:, q] = vp * sn + vq * c
    else:
        res = off_norm()
        if res > target:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {res:.3e})",
                residual=res)
    w = a.diagonal().copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


# ----------------------------------------------------------------------------
# spectra
# ----------------------------------------------------------------------------

def flare_spectrum(q_h, k_h):
    """Eigenvalues (descending) and eigenvectors of W_h without forming it."""
    q_h, k_h = np.asarray(q_h), np.asarray(k_h)
    m, n = q_h.shape[0], k_h.shape[0]
    if m > n:
        raise DimensionError(f"flare_spectrum needs M <= N, got M={m}, N={n}")
    sc = scaled_scores(q_h, k_h)
    lam, u = symmetric_eig(sc.j @ sc.j.T)
    sigma = np.sqrt(np.clip(lam, 0.0, None))
    # sigma = sqrt(lambda) inherits sqrt(eps)-level noise from lambda, so
    # eigenvalues under the eigensolver's resolution count as zero too
    resolution = m * np.finfo(np.float64).eps * max(lam[0], 0.0)
    null = (sigma <= SIGMA_TOL * sigma[0]) | (lam <= resolution)
    inv = np.where(null, 0.0, 1.0 / np.where(null, 1.0, sigma))
    vecs = np.sqrt(sc.lambda_n)[:, None] * (sc.j.T @ u) * inv[None, :]
    return SpectralResult(eigenvalues=lam, eigenvectors=vecs, null=null)


def dense_spectrum_oracle(q_h, k_h, return_all=False):
    """Top-M eigenpairs of W_h via the dense symmetric N x N matrix J^T J.

    With ``return_all`` the full descending spectrum of J^T J is appended.
    """
    q_h, k_h = np.asarray(q_h), np.asarray(k_h)
    m = q_h.shape[0]
    sc = scaled_scores(q_h, k_h)
    jtj = sc.j.T @ sc.j
    w, vec = np.linalg.eigh(jtj)
    order = np.argsort(-w, kind="stable")
    w, vec = w[order], vec[:, order]
    vecs = np.sqrt(sc.lambda_n)[:, None] * vec
    if return_all:
        return w[:m], vecs[:, :m], w
    return w[:m], vecs[:, :m]


def effective_rank(eigenvalues, tau):
    """Number of eigenvalues >= tau * largest."""
    eig = np.asarray(eigenvalues, dtype=np.float64)
    if eig.size == 0 or eig[0] <= 0:
        raise InvalidValueError("effective_rank needs a positive leading eigenvalue")
    return int(np.count_nonzero(eig >= tau * eig[0]))
