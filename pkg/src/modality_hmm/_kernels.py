"""Log-space forward-backward, E-step and Viterbi kernels.

Two interchangeable implementations live here: loop kernels compiled with
numba, and a pure-numpy path vectorized across sequences.  The numba path is
used when numba imports and ``MODALITY_HMM_NUMBA`` is not set to ``0``.

Batched inputs share one layout:

    log_pi  (K,)        log initial distribution
    log_A   (K, K)      log transition matrix
    log_e   (N, T, K)   log emission factor per sequence, week and state
    obs     (N, T, S)   reported categories, -1 for missing (and for padding)
    lengths (N,)        true length of each sequence; rows past it are padding
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("MODALITY_HMM_NUMBA", "1").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _shift(x):
    m = np.max(x, axis=-1, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def forward_backward_np(log_pi, log_A, log_e, lengths):
    N, T, K = log_e.shape
    A = np.exp(log_A)
    la = np.empty((N, T, K))
    lb = np.zeros((N, T, K))
    la[:, 0] = log_pi + log_e[:, 0]
    with np.errstate(divide="ignore"):
        for t in range(1, T):
            m = _shift(la[:, t - 1])
            la[:, t] = np.log(np.exp(la[:, t - 1] - m) @ A) + m + log_e[:, t]
        for t in range(T - 2, -1, -1):
            v = log_e[:, t + 1] + lb[:, t + 1]
            m = _shift(v)
            nxt = np.log(np.exp(v - m) @ A.T) + m
            lb[:, t] = np.where((t >= lengths - 1)[:, None], 0.0, nxt)
    ll = _lse(la[np.arange(N), lengths - 1], axis=1)
    return la, lb, ll


def estep_np(log_pi, log_A, log_e, obs, lengths, n_categories):
    N, T, K = log_e.shape
    S = obs.shape[2]
    la, lb, ll = forward_backward_np(log_pi, log_A, log_e, lengths)
    valid = np.arange(T)[None, :] < lengths[:, None]
    llb = ll[:, None, None]
    gamma = np.exp(la + lb - llb)
    gamma[~valid] = 0.0
    start = gamma[:, 0].sum(axis=0)
    if T > 1:
        lxi = (
            la[:, :-1, :, None]
            + log_A[None, None]
            + (log_e[:, 1:] + lb[:, 1:])[:, :, None, :]
            - ll[:, None, None, None]
        )
        xi = np.exp(lxi)
        xi[~valid[:, 1:]] = 0.0
        trans = xi.sum(axis=(0, 1))
    else:
        trans = np.zeros((K, K))
    emis = np.zeros((S, K, n_categories))
    for s in range(S):
        for c in range(n_categories):
            emis[s, :, c] = gamma[obs[:, :, s] == c].sum(axis=0)
    return start, trans, emis, ll


def viterbi_np(log_pi, log_A, log_e):
    T, K = log_e.shape
    delta = log_pi + log_e[0]
    back = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + log_A
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(K)] + log_e[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = np.argmax(delta)
    logp = delta[path[-1]]
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(logp)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _lse_vec(x):
        m = -np.inf
        for v in x:
            if v > m:
                m = v
        if m == -np.inf:
            return -np.inf
        s = 0.0
        for v in x:
            s += np.exp(v - m)
        return m + np.log(s)

    @numba.njit(cache=True, nogil=True)
    def _forward_backward_one(log_pi, A, le, n, la, lb):
        # log-space recursions; each step factors out the max before exponentiating
        K = log_pi.shape[0]
        w = np.empty(K)
        for j in range(K):
            la[0, j] = log_pi[j] + le[0, j]
        for t in range(1, n):
            m = -np.inf
            for i in range(K):
                if la[t - 1, i] > m:
                    m = la[t - 1, i]
            if m == -np.inf:
                for j in range(K):
                    la[t, j] = -np.inf
                continue
            for i in range(K):
                w[i] = np.exp(la[t - 1, i] - m)
            for j in range(K):
                acc = 0.0
                for i in range(K):
                    acc += w[i] * A[i, j]
                la[t, j] = np.log(acc) + m + le[t, j]
        for j in range(K):
            lb[n - 1, j] = 0.0
        for t in range(n - 2, -1, -1):
            m = -np.inf
            for j in range(K):
                v = le[t + 1, j] + lb[t + 1, j]
                w[j] = v
                if v > m:
                    m = v
            if m == -np.inf:
                for i in range(K):
                    lb[t, i] = -np.inf
                continue
            for j in range(K):
                w[j] = np.exp(w[j] - m)
            for i in range(K):
                acc = 0.0
                for j in range(K):
                    acc += A[i, j] * w[j]
                lb[t, i] = np.log(acc) + m
        return _lse_vec(la[n - 1])

    @numba.njit(cache=True, nogil=True)
    def forward_backward_nb(log_pi, log_A, log_e, lengths):
        N, T, K = log_e.shape
        la = np.full((N, T, K), -np.inf)
        lb = np.zeros((N, T, K))
        ll = np.empty(N)
        A = np.exp(log_A)
        for s in range(N):
            ll[s] = _forward_backward_one(log_pi, A, log_e[s], lengths[s], la[s], lb[s])
        return la, lb, ll

    @numba.njit(cache=True, nogil=True)
    def estep_nb(log_pi, log_A, log_e, obs, lengths, n_categories):
        N, T, K = log_e.shape
        S = obs.shape[2]
        A = np.exp(log_A)
        start = np.zeros(K)
        trans = np.zeros((K, K))
        emis = np.zeros((S, K, n_categories))
        ll = np.empty(N)
        la = np.empty((T, K))
        lb = np.empty((T, K))
        fa = np.empty(K)
        fb = np.empty(K)
        for s in range(N):
            n = lengths[s]
            le = log_e[s]
            total = _forward_backward_one(log_pi, A, le, n, la, lb)
            ll[s] = total
            if total == -np.inf:
                continue
            for t in range(n):
                for i in range(K):
                    g = np.exp(la[t, i] + lb[t, i] - total)
                    if t == 0:
                        start[i] += g
                    for c in range(S):
                        k = obs[s, t, c]
                        if k >= 0:
                            emis[c, i, k] += g
                if t + 1 < n:
                    # xi[i, j] = exp(la[t, i] + log A[i, j] + le[t+1, j] + lb[t+1, j] - total),
                    # factored as fa[i] * A[i, j] * fb[j] * exp(ma + mb - total)
                    ma = -np.inf
                    mb = -np.inf
                    for i in range(K):
                        if la[t, i] > ma:
                            ma = la[t, i]
                        v = le[t + 1, i] + lb[t + 1, i]
                        fb[i] = v
                        if v > mb:
                            mb = v
                    for i in range(K):
                        fa[i] = np.exp(la[t, i] - ma)
                        fb[i] = np.exp(fb[i] - mb)
                    scale = np.exp(ma + mb - total)
                    for i in range(K):
                        for j in range(K):
                            trans[i, j] += fa[i] * A[i, j] * fb[j] * scale
        return start, trans, emis, ll

    @numba.njit(cache=True, nogil=True)
    def viterbi_nb(log_pi, log_A, log_e):
        T, K = log_e.shape
        delta = np.empty(K)
        new = np.empty(K)
        back = np.zeros((T, K), dtype=np.int64)
        for j in range(K):
            delta[j] = log_pi[j] + log_e[0, j]
        for t in range(1, T):
            for j in range(K):
                best = 0
                bv = delta[0] + log_A[0, j]
                for i in range(1, K):
                    v = delta[i] + log_A[i, j]
                    if v > bv:
                        bv = v
                        best = i
                back[t, j] = best
                new[j] = bv + log_e[t, j]
            for j in range(K):
                delta[j] = new[j]
        path = np.empty(T, dtype=np.int64)
        last = 0
        for j in range(1, K):
            if delta[j] > delta[last]:
                last = j
        path[T - 1] = last
        logp = delta[last]
        for t in range(T - 1, 0, -1):
            path[t - 1] = back[t, path[t]]
        return path, logp

else:  # pragma: no cover
    forward_backward_nb = estep_nb = viterbi_nb = None


if USE_NUMBA:
    forward_backward = forward_backward_nb
    estep = estep_nb
    _viterbi = viterbi_nb
else:
    forward_backward = forward_backward_np
    estep = estep_np
    _viterbi = viterbi_np


def viterbi(log_pi, log_A, log_e):
    path, logp = _viterbi(log_pi, log_A, log_e)
    return path, float(logp)


def get_backend(name: str | None = None):
    """Return ``(forward_backward, estep, viterbi)`` for ``'numba'`` or ``'numpy'``."""
    name = name or BACKEND
    if name == "numpy":
        return forward_backward_np, estep_np, viterbi_np
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        return forward_backward_nb, estep_nb, viterbi_nb
    raise ValueError(f"unknown backend {name!r}")
