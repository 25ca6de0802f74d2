"""Hot loops: Riccati and linear backward RK4, forward moment RK4, Euler paths.

Coefficients arrive pre-sampled with a stage axis: ``X[k, s]`` is the value on
step ``k`` at its left end (``s=0``), midpoint (``s=1``) and right end
(``s=2``). Matrix families indexed by noise channel carry that index right
after the stage axis, e.g. ``C[k, s, j]``.

Each public function dispatches to a numba kernel or a numpy implementation
according to ``_backend.USE_NUMBA``. Status codes: 0 ok, 1 singular control
weight, 2 blow-up.
"""

from __future__ import annotations

import numpy as np

from ._backend import njit, select

BLOWUP = 1e12
OK, SINGULAR, BLOWN_UP = 0, 1, 2


# ------------------------------------------------------------------ helpers


@njit
def _chol(K):
    m = K.shape[0]
    L = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            s = K[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not s > 0.0:
                    return L, False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L, True


@njit
def _chol_solve(L, B):
    m, r = B.shape
    X = B.copy()
    for c in range(r):
        for i in range(m):
            s = X[i, c]
            for k in range(i):
                s -= L[i, k] * X[k, c]
            X[i, c] = s / L[i, i]
        for i in range(m - 1, -1, -1):
            s = X[i, c]
            for k in range(i + 1, m):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return X


@njit
def _mm(X, Y):
    a, b = X.shape
    c = Y.shape[1]
    out = np.zeros((a, c))
    for i in range(a):
        for k in range(b):
            xik = X[i, k]
            for j in range(c):
                out[i, j] += xik * Y[k, j]
    return out


@njit
def _tmm(X, Y):
    """X^T Y"""
    b, a = X.shape
    c = Y.shape[1]
    out = np.zeros((a, c))
    for k in range(b):
        for i in range(a):
            xki = X[k, i]
            for j in range(c):
                out[i, j] += xki * Y[k, j]
    return out


@njit
def _mv(X, v):
    a, b = X.shape
    out = np.zeros(a)
    for i in range(a):
        s = 0.0
        for k in range(b):
            s += X[i, k] * v[k]
        out[i] = s
    return out


@njit
def _tmv(X, v):
    b, a = X.shape
    out = np.zeros(a)
    for k in range(b):
        vk = v[k]
        for i in range(a):
            out[i] += X[k, i] * vk
    return out


# ------------------------------------------------------------- Riccati RHS


@njit
def _riccati_rhs_nb(A, B, C, D, e, f, Q, N, P, phi):
    n = P.shape[0]
    S = _tmm(B, P)
    Km = N.copy()
    g = _tmv(B, phi)
    GP = _tmm(A, P) + _mm(P, A) + Q
    Gphi = _tmv(A, phi) + _mv(P, e)
    quad_f = 0.0
    for j in range(C.shape[0]):
        PC = _mm(P, C[j])
        PD = _mm(P, D[j])
        Pf = _mv(P, f[j])
        S += _tmm(D[j], PC)
        Km += _tmm(D[j], PD)
        g += _tmv(D[j], Pf)
        GP += _tmm(C[j], PC)
        Gphi += _tmv(C[j], Pf)
        for i in range(n):
            quad_f += f[j, i] * Pf[i]
    Km = 0.5 * (Km + Km.T)
    L, ok = _chol(Km)
    if not ok:
        return GP, Gphi, 0.0, False
    KS = _chol_solve(L, S)
    Kg = _chol_solve(L, g.reshape(-1, 1))[:, 0]
    GP -= _tmm(S, KS)
    Gphi -= _tmv(S, Kg)
    gKg = 0.0
    for i in range(g.shape[0]):
        gKg += g[i] * Kg[i]
    ephi = 0.0
    for i in range(n):
        ephi += e[i] * phi[i]
    Gc = ephi + 0.5 * quad_f - 0.5 * gKg
    GP = 0.5 * (GP + GP.T)
    return GP, Gphi, Gc, True


@njit
def _riccati_nb(A, B, C, D, e, f, Q, N, M, dt):
    K = A.shape[0]
    n = A.shape[2]
    P = np.zeros((K + 1, n, n))
    phi = np.zeros((K + 1, n))
    c = np.zeros(K + 1)
    Pmid = np.zeros((K, n, n))
    phimid = np.zeros((K, n))
    P[K] = 0.5 * (M + M.T)
    for k in range(K - 1, -1, -1):
        P1, f1, c1 = P[k + 1], phi[k + 1], c[k + 1]
        a1, b1, g1, ok = _riccati_rhs_nb(A[k, 2], B[k, 2], C[k, 2], D[k, 2], e[k, 2], f[k, 2], Q[k, 2], N[k, 2], P1, f1)
        if not ok:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        a2, b2, g2, ok = _riccati_rhs_nb(A[k, 1], B[k, 1], C[k, 1], D[k, 1], e[k, 1], f[k, 1], Q[k, 1], N[k, 1],
                                         P1 + 0.5 * dt * a1, f1 + 0.5 * dt * b1)
        if not ok:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        a3, b3, g3, ok = _riccati_rhs_nb(A[k, 1], B[k, 1], C[k, 1], D[k, 1], e[k, 1], f[k, 1], Q[k, 1], N[k, 1],
                                         P1 + 0.5 * dt * a2, f1 + 0.5 * dt * b2)
        if not ok:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        a4, b4, g4, ok = _riccati_rhs_nb(A[k, 0], B[k, 0], C[k, 0], D[k, 0], e[k, 0], f[k, 0], Q[k, 0], N[k, 0],
                                         P1 + dt * a3, f1 + dt * b3)
        if not ok:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        P0 = P1 + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        P0 = 0.5 * (P0 + P0.T)
        f0 = f1 + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        c0 = c1 + dt / 6.0 * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        if not (np.all(np.isfinite(P0)) and np.all(np.isfinite(f0)) and np.isfinite(c0)):
            return P, phi, c, Pmid, phimid, BLOWN_UP, k
        if np.max(np.abs(P0)) > BLOWUP or np.max(np.abs(f0)) > BLOWUP or abs(c0) > BLOWUP:
            return P, phi, c, Pmid, phimid, BLOWN_UP, k
        P[k], phi[k], c[k] = P0, f0, c0
        aL, bL, gL, ok = _riccati_rhs_nb(A[k, 0], B[k, 0], C[k, 0], D[k, 0], e[k, 0], f[k, 0], Q[k, 0], N[k, 0], P0, f0)
        if not ok:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        Pm = 0.5 * (P0 + P1) + dt / 8.0 * (a1 - aL)
        Pmid[k] = 0.5 * (Pm + Pm.T)
        phimid[k] = 0.5 * (f0 + f1) + dt / 8.0 * (b1 - bL)
    return P, phi, c, Pmid, phimid, OK, -1


def _riccati_rhs_np(A, B, C, D, e, f, Q, N, P, phi):
    PC = P @ C
    PD = P @ D
    Pf = np.einsum("ab,jb->ja", P, f)
    S = B.T @ P + np.einsum("jba,jbc->ac", D, PC)
    Km = N + np.einsum("jba,jbc->ac", D, PD)
    Km = 0.5 * (Km + Km.T)
    g = B.T @ phi + np.einsum("jba,jb->a", D, Pf)
    try:
        L = np.linalg.cholesky(Km)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(L)):
        return None
    KS = np.linalg.solve(Km, S)
    Kg = np.linalg.solve(Km, g)
    GP = A.T @ P + P @ A + Q + np.einsum("jba,jbc->ac", C, PC) - S.T @ KS
    Gphi = A.T @ phi + P @ e + np.einsum("jba,jb->a", C, Pf) - S.T @ Kg
    Gc = e @ phi + 0.5 * np.einsum("ja,ja->", f, Pf) - 0.5 * g @ Kg
    return 0.5 * (GP + GP.T), Gphi, Gc


def _riccati_np(A, B, C, D, e, f, Q, N, M, dt):
    K, n = A.shape[0], A.shape[2]
    P = np.zeros((K + 1, n, n))
    phi = np.zeros((K + 1, n))
    c = np.zeros(K + 1)
    Pmid = np.zeros((K, n, n))
    phimid = np.zeros((K, n))
    P[K] = 0.5 * (M + M.T)

    def rhs(k, s, Pv, fv):
        return _riccati_rhs_np(A[k, s], B[k, s], C[k, s], D[k, s], e[k, s], f[k, s], Q[k, s], N[k, s], Pv, fv)

    for k in range(K - 1, -1, -1):
        P1, f1, c1 = P[k + 1], phi[k + 1], c[k + 1]
        r1 = rhs(k, 2, P1, f1)
        if r1 is None:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        r2 = rhs(k, 1, P1 + 0.5 * dt * r1[0], f1 + 0.5 * dt * r1[1])
        if r2 is None:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        r3 = rhs(k, 1, P1 + 0.5 * dt * r2[0], f1 + 0.5 * dt * r2[1])
        if r3 is None:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        r4 = rhs(k, 0, P1 + dt * r3[0], f1 + dt * r3[1])
        if r4 is None:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        P0 = P1 + dt / 6.0 * (r1[0] + 2.0 * r2[0] + 2.0 * r3[0] + r4[0])
        P0 = 0.5 * (P0 + P0.T)
        f0 = f1 + dt / 6.0 * (r1[1] + 2.0 * r2[1] + 2.0 * r3[1] + r4[1])
        c0 = c1 + dt / 6.0 * (r1[2] + 2.0 * r2[2] + 2.0 * r3[2] + r4[2])
        if not (np.all(np.isfinite(P0)) and np.all(np.isfinite(f0)) and np.isfinite(c0)):
            return P, phi, c, Pmid, phimid, BLOWN_UP, k
        if max(np.abs(P0).max(), np.abs(f0).max(initial=0.0), abs(c0)) > BLOWUP:
            return P, phi, c, Pmid, phimid, BLOWN_UP, k
        P[k], phi[k], c[k] = P0, f0, c0
        rL = rhs(k, 0, P0, f0)
        if rL is None:
            return P, phi, c, Pmid, phimid, SINGULAR, k
        Pm = 0.5 * (P0 + P1) + dt / 8.0 * (r1[0] - rL[0])
        Pmid[k] = 0.5 * (Pm + Pm.T)
        phimid[k] = 0.5 * (f0 + f1) + dt / 8.0 * (r1[1] - rL[1])
    return P, phi, c, Pmid, phimid, OK, -1


riccati_backward = select(_riccati_nb, _riccati_np)


# ------------------------------------------- linear backward (fixed control)


@njit
def _linear_rhs_nb(Ah, bh, Ch, dh, A, C, Q, Pi, pi):
    G = _mm(Pi, Ah) + _tmm(A, Pi) + Q
    g = _mv(Pi, bh) + _tmv(A, pi)
    for j in range(C.shape[0]):
        G += _tmm(C[j], _mm(Pi, Ch[j]))
        g += _tmv(C[j], _mv(Pi, dh[j]))
    return G, g


@njit
def _linear_nb(Ah, bh, Ch, dh, A, C, Q, M, dt):
    K = Ah.shape[0]
    n = Ah.shape[2]
    Pi = np.zeros((K + 1, n, n))
    pi = np.zeros((K + 1, n))
    Pimid = np.zeros((K, n, n))
    pimid = np.zeros((K, n))
    Pi[K] = M
    for k in range(K - 1, -1, -1):
        P1, f1 = Pi[k + 1], pi[k + 1]
        a1, b1 = _linear_rhs_nb(Ah[k, 2], bh[k, 2], Ch[k, 2], dh[k, 2], A[k, 2], C[k, 2], Q[k, 2], P1, f1)
        a2, b2 = _linear_rhs_nb(Ah[k, 1], bh[k, 1], Ch[k, 1], dh[k, 1], A[k, 1], C[k, 1], Q[k, 1],
                                P1 + 0.5 * dt * a1, f1 + 0.5 * dt * b1)
        a3, b3 = _linear_rhs_nb(Ah[k, 1], bh[k, 1], Ch[k, 1], dh[k, 1], A[k, 1], C[k, 1], Q[k, 1],
                                P1 + 0.5 * dt * a2, f1 + 0.5 * dt * b2)
        a4, b4 = _linear_rhs_nb(Ah[k, 0], bh[k, 0], Ch[k, 0], dh[k, 0], A[k, 0], C[k, 0], Q[k, 0],
                                P1 + dt * a3, f1 + dt * b3)
        P0 = P1 + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        f0 = f1 + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        if not (np.all(np.isfinite(P0)) and np.all(np.isfinite(f0))):
            return Pi, pi, Pimid, pimid, BLOWN_UP
        if np.max(np.abs(P0)) > BLOWUP:
            return Pi, pi, Pimid, pimid, BLOWN_UP
        Pi[k], pi[k] = P0, f0
        aL, bL = _linear_rhs_nb(Ah[k, 0], bh[k, 0], Ch[k, 0], dh[k, 0], A[k, 0], C[k, 0], Q[k, 0], P0, f0)
        Pimid[k] = 0.5 * (P0 + P1) + dt / 8.0 * (a1 - aL)
        pimid[k] = 0.5 * (f0 + f1) + dt / 8.0 * (b1 - bL)
    return Pi, pi, Pimid, pimid, OK


def _linear_np(Ah, bh, Ch, dh, A, C, Q, M, dt):
    K, n = Ah.shape[0], Ah.shape[2]
    Pi = np.zeros((K + 1, n, n))
    pi = np.zeros((K + 1, n))
    Pimid = np.zeros((K, n, n))
    pimid = np.zeros((K, n))
    Pi[K] = M

    def rhs(k, s, Pv, fv):
        G = Pv @ Ah[k, s] + A[k, s].T @ Pv + Q[k, s] + np.einsum("jba,jbc->ac", C[k, s], Pv @ Ch[k, s])
        g = Pv @ bh[k, s] + A[k, s].T @ fv + np.einsum("jba,jb->a", C[k, s], np.einsum("ab,jb->ja", Pv, dh[k, s]))
        return G, g

    for k in range(K - 1, -1, -1):
        P1, f1 = Pi[k + 1], pi[k + 1]
        a1, b1 = rhs(k, 2, P1, f1)
        a2, b2 = rhs(k, 1, P1 + 0.5 * dt * a1, f1 + 0.5 * dt * b1)
        a3, b3 = rhs(k, 1, P1 + 0.5 * dt * a2, f1 + 0.5 * dt * b2)
        a4, b4 = rhs(k, 0, P1 + dt * a3, f1 + dt * b3)
        P0 = P1 + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        f0 = f1 + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        if not (np.all(np.isfinite(P0)) and np.all(np.isfinite(f0))) or np.abs(P0).max() > BLOWUP:
            return Pi, pi, Pimid, pimid, BLOWN_UP
        Pi[k], pi[k] = P0, f0
        aL, bL = rhs(k, 0, P0, f0)
        Pimid[k] = 0.5 * (P0 + P1) + dt / 8.0 * (a1 - aL)
        pimid[k] = 0.5 * (f0 + f1) + dt / 8.0 * (b1 - bL)
    return Pi, pi, Pimid, pimid, OK


linear_backward = select(_linear_nb, _linear_np)


# ------------------------------------------------------- forward moments


@njit
def _moment_rhs_nb(Ah, bh, Ch, dh, W, w, w0, m, S):
    dm = _mv(Ah, m) + bh
    ASm = _mm(Ah, S)
    dS = ASm + ASm.T
    n = m.shape[0]
    for a in range(n):
        for b in range(n):
            dS[a, b] += bh[a] * m[b] + m[a] * bh[b]
    for j in range(Ch.shape[0]):
        CS = _mm(Ch[j], S)
        dS += _mm(CS, Ch[j].T)
        Cm = _mv(Ch[j], m)
        for a in range(n):
            for b in range(n):
                dS[a, b] += Cm[a] * dh[j, b] + dh[j, a] * Cm[b] + dh[j, a] * dh[j, b]
    L = W.shape[0]
    dI = np.zeros(L)
    for l in range(L):
        s = w0[l]
        for a in range(n):
            s += w[l, a] * m[a]
            for b in range(n):
                s += W[l, a, b] * S[b, a]
        dI[l] = s
    return dm, dS, dI


@njit
def _moments_nb(Ah, bh, Ch, dh, W, w, w0, x0, dt):
    K = Ah.shape[0]
    n = x0.shape[0]
    L = W.shape[2]
    m = np.zeros((K + 1, n))
    S = np.zeros((K + 1, n, n))
    I = np.zeros(L)
    m[0] = x0
    for a in range(n):
        for b in range(n):
            S[0, a, b] = x0[a] * x0[b]
    for k in range(K):
        m0, S0 = m[k], S[k]
        am1, aS1, aI1 = _moment_rhs_nb(Ah[k, 0], bh[k, 0], Ch[k, 0], dh[k, 0], W[k, 0], w[k, 0], w0[k, 0], m0, S0)
        am2, aS2, aI2 = _moment_rhs_nb(Ah[k, 1], bh[k, 1], Ch[k, 1], dh[k, 1], W[k, 1], w[k, 1], w0[k, 1],
                                       m0 + 0.5 * dt * am1, S0 + 0.5 * dt * aS1)
        am3, aS3, aI3 = _moment_rhs_nb(Ah[k, 1], bh[k, 1], Ch[k, 1], dh[k, 1], W[k, 1], w[k, 1], w0[k, 1],
                                       m0 + 0.5 * dt * am2, S0 + 0.5 * dt * aS2)
        am4, aS4, aI4 = _moment_rhs_nb(Ah[k, 2], bh[k, 2], Ch[k, 2], dh[k, 2], W[k, 2], w[k, 2], w0[k, 2],
                                       m0 + dt * am3, S0 + dt * aS3)
        m[k + 1] = m0 + dt / 6.0 * (am1 + 2.0 * am2 + 2.0 * am3 + am4)
        S1 = S0 + dt / 6.0 * (aS1 + 2.0 * aS2 + 2.0 * aS3 + aS4)
        S[k + 1] = 0.5 * (S1 + S1.T)
        I += dt / 6.0 * (aI1 + 2.0 * aI2 + 2.0 * aI3 + aI4)
    return m, S, I


def _moments_np(Ah, bh, Ch, dh, W, w, w0, x0, dt):
    K, n = Ah.shape[0], x0.shape[0]
    m = np.zeros((K + 1, n))
    S = np.zeros((K + 1, n, n))
    I = np.zeros(W.shape[2])
    m[0] = x0
    S[0] = np.outer(x0, x0)

    def rhs(k, s, mv, Sv):
        A_, b_, C_, d_ = Ah[k, s], bh[k, s], Ch[k, s], dh[k, s]
        dm = A_ @ mv + b_
        AS = A_ @ Sv
        Cm = C_ @ mv
        dS = (AS + AS.T + np.outer(b_, mv) + np.outer(mv, b_)
              + np.einsum("jab,bc,jdc->ad", C_, Sv, C_)
              + np.einsum("ja,jb->ab", Cm, d_) + np.einsum("ja,jb->ab", d_, Cm) + np.einsum("ja,jb->ab", d_, d_))
        dI = np.einsum("lab,ba->l", W[k, s], Sv) + w[k, s] @ mv + w0[k, s]
        return dm, dS, dI

    for k in range(K):
        m0, S0 = m[k], S[k]
        r1 = rhs(k, 0, m0, S0)
        r2 = rhs(k, 1, m0 + 0.5 * dt * r1[0], S0 + 0.5 * dt * r1[1])
        r3 = rhs(k, 1, m0 + 0.5 * dt * r2[0], S0 + 0.5 * dt * r2[1])
        r4 = rhs(k, 2, m0 + dt * r3[0], S0 + dt * r3[1])
        m[k + 1] = m0 + dt / 6.0 * (r1[0] + 2.0 * r2[0] + 2.0 * r3[0] + r4[0])
        S1 = S0 + dt / 6.0 * (r1[1] + 2.0 * r2[1] + 2.0 * r3[1] + r4[1])
        S[k + 1] = 0.5 * (S1 + S1.T)
        I += dt / 6.0 * (r1[2] + 2.0 * r2[2] + 2.0 * r3[2] + r4[2])
    return m, S, I


forward_moments = select(_moments_nb, _moments_np)


# ------------------------------------------------------ path simulation


@njit
def _simulate_nb(Ah, bh, Ch, dh, x0, dW, dt):
    P, K, d = dW.shape
    n = x0.shape[0]
    x = np.empty((P, K + 1, n))
    for p in range(P):
        for a in range(n):
            x[p, 0, a] = x0[a]
        for k in range(K):
            for a in range(n):
                drift = bh[k, a]
                for b in range(n):
                    drift += Ah[k, a, b] * x[p, k, b]
                acc = x[p, k, a] + drift * dt
                for j in range(d):
                    vol = dh[k, j, a]
                    for b in range(n):
                        vol += Ch[k, j, a, b] * x[p, k, b]
                    acc += vol * dW[p, k, j]
                x[p, k + 1, a] = acc
    return x


def _simulate_np(Ah, bh, Ch, dh, x0, dW, dt):
    P, K, d = dW.shape
    x = np.empty((P, K + 1, x0.shape[0]))
    x[:, 0] = x0
    for k in range(K):
        xk = x[:, k]
        vol = np.einsum("jab,pb->pja", Ch[k], xk) + dh[k][None]
        x[:, k + 1] = xk + (xk @ Ah[k].T + bh[k]) * dt + np.einsum("pja,pj->pa", vol, dW[:, k])
    return x


simulate_affine = select(_simulate_nb, _simulate_np)
simulate_affine.__doc__ = "Left-point Euler paths of dx = (Ah x + bh) dt + sum_j (Ch_j x + dh_j) dW_j."


# -------------------------------------------- quadratic functionals of paths


@njit
def _quad_paths_nb(x, W, w, w0, dt):
    P = x.shape[0]
    K, L, n = w.shape
    out = np.zeros((P, L))
    for p in range(P):
        for k in range(K):
            for l in range(L):
                s = w0[k, l]
                for a in range(n):
                    xa = x[p, k, a]
                    s += w[k, l, a] * xa
                    for b in range(n):
                        s += W[k, l, a, b] * xa * x[p, k, b]
                out[p, l] += s * dt
    return out


def _quad_paths_np(x, W, w, w0, dt):
    xl = x[:, :-1]
    vals = np.einsum("pka,klab,pkb->pl", xl, W, xl, optimize=True)
    vals += np.einsum("pka,kla->pl", xl, w, optimize=True)
    vals += w0.sum(axis=0)[None]
    return vals * dt


quad_paths = select(_quad_paths_nb, _quad_paths_np)
quad_paths.__doc__ = "Per-path left-point sums of ``x^T W x + w.x + w0`` over the grid; shape (P, L)."
