"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public names at the bottom of the module dispatch on
:data:`goalrank._accel.USE_NUMBA`. Both variants are importable under
``*_numba`` / ``*_numpy`` so tests can check them against each other.

Activation codes: 0 = relu, 1 = tanh.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

RELU = 0
TANH = 1

ACTIVATIONS = {"relu": RELU, "tanh": TANH}


# ---------------------------------------------------------------------------
# fused broadcast hidden layer:  out[u,p,n] = sum_w v[w] * act(a[u,w] + b[u,n,w] + c[u,p,w])
# ---------------------------------------------------------------------------


def _act_numpy(z, code):
    if code == RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad_numpy(z, h, code):
    if code == RELU:
        return (z > 0.0).astype(z.dtype)
    return 1.0 - h * h


def fused_hidden_forward_numpy(a, b, c, v, code):
    z = a[:, None, None, :] + b[:, None, :, :] + c[:, :, None, :]
    h = _act_numpy(z, code)
    return h @ v


def fused_hidden_backward_numpy(a, b, c, v, code, g):
    z = a[:, None, None, :] + b[:, None, :, :] + c[:, :, None, :]
    h = _act_numpy(z, code)
    gv = np.einsum("upnw,upn->w", h, g)
    dz = (g[..., None] * v) * _act_grad_numpy(z, h, code)
    ga = dz.sum(axis=(1, 2))
    gb = dz.sum(axis=1)
    gc = dz.sum(axis=2)
    return ga, gb, gc, gv


@njit(fastmath=True)
def fused_hidden_forward_numba(a, b, c, v, code):
    U, W = a.shape
    N = b.shape[1]
    P = c.shape[1]
    out = np.zeros((U, P, N))
    ac = np.empty(W)
    for u in range(U):
        for p in range(P):
            for w in range(W):
                ac[w] = a[u, w] + c[u, p, w]
            for n in range(N):
                acc = 0.0
                if code == 0:
                    for w in range(W):
                        acc += v[w] * max(ac[w] + b[u, n, w], 0.0)
                else:
                    for w in range(W):
                        acc += v[w] * np.tanh(ac[w] + b[u, n, w])
                out[u, p, n] = acc
    return out


@njit(fastmath=True)
def fused_hidden_backward_numba(a, b, c, v, code, g):
    U, W = a.shape
    N = b.shape[1]
    P = c.shape[1]
    ga = np.zeros((U, W))
    gb = np.zeros((U, N, W))
    gc = np.zeros((U, P, W))
    gv = np.zeros(W)
    ac = np.empty(W)
    for u in range(U):
        for p in range(P):
            for w in range(W):
                ac[w] = a[u, w] + c[u, p, w]
            for n in range(N):
                gg = g[u, p, n]
                if gg == 0.0:
                    continue
                if code == 0:
                    for w in range(W):
                        z = ac[w] + b[u, n, w]
                        on = 1.0 if z > 0.0 else 0.0
                        gv[w] += gg * z * on
                        d = gg * v[w] * on
                        gb[u, n, w] += d
                        gc[u, p, w] += d
                else:
                    for w in range(W):
                        h = np.tanh(ac[w] + b[u, n, w])
                        gv[w] += gg * h
                        d = gg * v[w] * (1.0 - h * h)
                        gb[u, n, w] += d
                        gc[u, p, w] += d
        for p in range(P):
            for w in range(W):
                ga[u, w] += gc[u, p, w]
    return ga, gb, gc, gv


# ---------------------------------------------------------------------------
# ridge solves for one ALS half-step over CSR rows
# ---------------------------------------------------------------------------


def als_solve_rows_numpy(indptr, cols, targets, other, reg):
    n_rows = len(indptr) - 1
    k = other.shape[1]
    out = np.zeros((n_rows, k))
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n_rows), counts)
    X = other[cols]
    A = np.zeros((n_rows, k, k))
    np.add.at(A, rows, X[:, :, None] * X[:, None, :])
    rhs = np.zeros((n_rows, k))
    np.add.at(rhs, rows, X * targets[:, None])
    A += reg * np.eye(k)[None]
    nz = counts > 0
    if nz.any():
        out[nz] = np.linalg.solve(A[nz], rhs[nz][..., None])[..., 0]
    return out


@njit
def als_solve_rows_numba(indptr, cols, targets, other, reg):
    n_rows = len(indptr) - 1
    k = other.shape[1]
    out = np.zeros((n_rows, k))
    for r in range(n_rows):
        lo = indptr[r]
        hi = indptr[r + 1]
        if hi == lo:
            continue
        A = np.zeros((k, k))
        rhs = np.zeros(k)
        for j in range(lo, hi):
            x = other[cols[j]]
            t = targets[j]
            for i in range(k):
                rhs[i] += x[i] * t
                for m in range(k):
                    A[i, m] += x[i] * x[m]
        for i in range(k):
            A[i, i] += reg
        out[r] = np.linalg.solve(A, rhs)
    return out


# ---------------------------------------------------------------------------
# keyed standard-normal noise: a pure function of (seed, user, list items)
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO53 = float(2**53)


def _splitmix_numpy(x):
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def keyed_normal_numpy(seed, users, lists):
    users = np.asarray(users, dtype=np.int64).astype(np.uint64)
    lists = np.asarray(lists, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix_numpy(np.full(users.shape, np.uint64(seed), dtype=np.uint64))
        h = _splitmix_numpy(h ^ users)
        for t in range(lists.shape[1]):
            h = _splitmix_numpy(h ^ (lists[:, t] + np.uint64(1)))
        h2 = _splitmix_numpy(h)
    u1 = ((h >> np.uint64(11)).astype(np.float64) + 0.5) / _TWO53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) / _TWO53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@njit
def _splitmix_numba(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@njit
def _keyed_normal_numba(seed, users, lists):
    M, L = lists.shape
    out = np.empty(M)
    for m in range(M):
        h = _splitmix_numba(np.uint64(seed))
        h = _splitmix_numba(h ^ np.uint64(users[m]))
        for t in range(L):
            h = _splitmix_numba(h ^ (np.uint64(lists[m, t]) + np.uint64(1)))
        h2 = _splitmix_numba(h)
        u1 = (float(h >> np.uint64(11)) + 0.5) / 9007199254740992.0
        u2 = float(h2 >> np.uint64(11)) / 9007199254740992.0
        out[m] = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return out


def keyed_normal_numba(seed, users, lists):
    users = np.ascontiguousarray(users, dtype=np.int64)
    lists = np.ascontiguousarray(lists, dtype=np.int64)
    return _keyed_normal_numba(np.uint64(seed), users, lists)


# ---------------------------------------------------------------------------
# position-weighted utility plus pairwise interaction reward over many lists
# ---------------------------------------------------------------------------


def list_reward_numpy(utility, users, lists, position_weights, interaction):
    util = utility[users[:, None], lists]
    r = util @ position_weights
    L = lists.shape[1]
    for t in range(1, L):
        for s in range(t):
            r = r + interaction[lists[:, s], lists[:, t]]
    return r


@njit
def list_reward_numba(utility, users, lists, position_weights, interaction):
    M, L = lists.shape
    out = np.empty(M)
    for m in range(M):
        u = users[m]
        acc = 0.0
        for t in range(L):
            acc += position_weights[t] * utility[u, lists[m, t]]
        for t in range(1, L):
            for s in range(t):
                acc += interaction[lists[m, s], lists[m, t]]
        out[m] = acc
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _i64(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def _list_reward_numba_entry(utility, users, lists, position_weights, interaction):
    return list_reward_numba(_f64(utility), _i64(users), _i64(lists), _f64(position_weights), _f64(interaction))


def _list_reward_numpy_entry(utility, users, lists, position_weights, interaction):
    return list_reward_numpy(np.asarray(utility, dtype=np.float64), _i64(users), _i64(lists),
                             np.asarray(position_weights, dtype=np.float64), np.asarray(interaction, dtype=np.float64))


def _als_numba_entry(indptr, cols, targets, other, reg):
    return als_solve_rows_numba(_i64(indptr), _i64(cols), _f64(targets), _f64(other), float(reg))


if USE_NUMBA:
    fused_hidden_forward = fused_hidden_forward_numba
    fused_hidden_backward = fused_hidden_backward_numba
    als_solve_rows = _als_numba_entry
    keyed_normal = keyed_normal_numba
    list_reward = _list_reward_numba_entry
else:
    fused_hidden_forward = fused_hidden_forward_numpy
    fused_hidden_backward = fused_hidden_backward_numpy
    als_solve_rows = als_solve_rows_numpy
    keyed_normal = keyed_normal_numpy
    list_reward = _list_reward_numpy_entry
