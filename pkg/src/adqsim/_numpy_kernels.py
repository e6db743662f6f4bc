"""Vectorised numpy versions of the loop kernels in ``_numba_kernels``.

The position projection assembles the same linear systems densely and hands
them to LAPACK, so results agree with the loop kernels to rounding error.
"""
import math

import numpy as np

from ._kernel_params import (
    COMPLIANCE,
    CONTACT_COMPLIANCE,
    DT,
    GX,
    GY,
    GZ,
    ITERATIONS,
    JOINT_DAMPING,
    JOINT_DAMPING_RATE,
    JOINT_FRICTION,
    JOINT_FRICTION_SPEED,
    CANDIDATE_MARGIN,
    MAX_VERTEX_STEP,
    NEIGHBOR_SKIP,
    PULL_MASS,
    RADIUS,
    SURFACE_FRICTION,
    VELOCITY_DAMPING,
)

_SEG_EPS = 1e-14
_DEGENERATE_REL = 1e-10
_REDUNDANCY_SHIFT = 1e-1
_CONTACT_PASSES = 4


def _rowdot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _rownorm(a):
    return np.sqrt(_rowdot(a, a))


def _cross(a, b):
    return np.stack(
        (
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ),
        axis=-1,
    )


def segment_params(p, i, j):
    """Vectorised closest-point parameters for edge index arrays ``i`` and ``j``."""
    d1 = p[i + 1] - p[i]
    d2 = p[j + 1] - p[j]
    r = p[i] - p[j]
    a = _rowdot(d1, d1)
    e = _rowdot(d2, d2)
    f = _rowdot(d2, r)
    c = _rowdot(d1, r)
    b = _rowdot(d1, d2)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = a * e - b * b
        s = np.where(denom > _SEG_EPS * a * e, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = (b * s + f) / e
        low = t < 0.0
        high = t > 1.0
        s = np.where(low, np.clip(-c / a, 0.0, 1.0), np.where(high, np.clip((b - c) / a, 0.0, 1.0), s))
        t = np.where(low, 0.0, np.where(high, 1.0, t))
        a_small = a <= _SEG_EPS
        e_small = e <= _SEG_EPS
        # degenerate segments, same precedence as the scalar kernel
        s = np.where(e_small, np.clip(-c / a, 0.0, 1.0), s)
        t = np.where(e_small, 0.0, t)
        s = np.where(a_small, 0.0, s)
        t = np.where(a_small, np.clip(f / e, 0.0, 1.0), t)
        both = a_small & e_small
        s = np.where(both, 0.0, s)
        t = np.where(both, 0.0, t)
    return s, t


def _closest_diff(p, i, j, s, t):
    c1 = p[i] + s[:, None] * (p[i + 1] - p[i])
    c2 = p[j] + t[:, None] * (p[j + 1] - p[j])
    return c1 - c2


def _candidate_index(ne, skip):
    ii, jj = np.triu_indices(ne, k=skip + 1)
    return ii.astype(np.int64), jj.astype(np.int64)


def segment_distance_matrix_pairs(p, cutoff, skip):
    ne = p.shape[0] - 1
    ii, jj = _candidate_index(ne, int(skip))
    if ii.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    s, t = segment_params(p, ii, jj)
    diff = _closest_diff(p, ii, jj, s, t)
    hit = _rowdot(diff, diff) < cutoff * cutoff
    return np.stack((ii[hit], jj[hit]), axis=1)


def swept_pairs(x, p, cutoff, skip):
    ne = p.shape[0] - 1
    ii, jj = _candidate_index(ne, int(skip))
    if ii.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    hit = np.zeros(ii.size, dtype=bool)
    for q in (p, x):
        s, t = segment_params(q, ii, jj)
        diff = _closest_diff(q, ii, jj, s, t)
        hit |= _rowdot(diff, diff) < cutoff * cutoff
    return np.stack((ii[hit], jj[hit]), axis=1)


def pair_solid_angle(p, i, j):
    p1, p2, p3, p4 = p[i], p[i + 1], p[j], p[j + 1]
    r13 = p3 - p1
    r14 = p4 - p1
    r23 = p3 - p2
    r24 = p4 - p2
    r12 = p2 - p1
    r34 = p4 - p3
    triple = _rowdot(_cross(r34, r12), r13)
    scale = _rownorm(r34) * _rownorm(r12) * _rownorm(r13)
    n1 = _cross(r13, r14)
    n2 = _cross(r14, r24)
    n3 = _cross(r24, r23)
    n4 = _cross(r23, r13)
    m1, m2, m3, m4 = _rownorm(n1), _rownorm(n2), _rownorm(n3), _rownorm(n4)
    bad = (np.abs(triple) <= _DEGENERATE_REL * scale) | (scale == 0.0)
    bad |= (m1 < 1e-300) | (m2 < 1e-300) | (m3 < 1e-300) | (m4 < 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        n1 = n1 / m1[:, None]
        n2 = n2 / m2[:, None]
        n3 = n3 / m3[:, None]
        n4 = n4 / m4[:, None]
        omega = (
            np.arcsin(np.clip(_rowdot(n1, n2), -1.0, 1.0))
            + np.arcsin(np.clip(_rowdot(n2, n3), -1.0, 1.0))
            + np.arcsin(np.clip(_rowdot(n3, n4), -1.0, 1.0))
            + np.arcsin(np.clip(_rowdot(n4, n1), -1.0, 1.0))
        )
    omega = np.where(triple > 0.0, omega, -omega)
    return np.where(bad, 0.0, omega)


def writhe(p):
    ne = p.shape[0] - 1
    ii, jj = _candidate_index(ne, 1)
    if ii.size == 0:
        return 0.0
    return float(2.0 * np.sum(pair_solid_angle(p, ii, jj)) / (4.0 * math.pi))


def _scatter_average(target, idx, w, delta):
    """Jacobi update: ``delta`` rows (k, q, 3) averaged per vertex where w > 0."""
    n = target.shape[0]
    acc = np.zeros((n, 3))
    cnt = np.zeros(n)
    live = w != 0.0
    flat_idx = idx[live]
    np.add.at(acc, flat_idx, delta[live])
    np.add.at(cnt, flat_idx, 1.0)
    hit = cnt > 0.0
    target[hit] += acc[hit] / cnt[hit][:, None]


def _oriented(diff, n0):
    """Vectorised twin of the scalar oriented-normal helper."""
    d = _rownorm(diff)
    small = d < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        nrm = diff / d[:, None]
    flip = _rowdot(nrm, n0) < 0.0
    sign = np.where(flip, -1.0, 1.0)
    nrm = np.where(small[:, None], n0, nrm * sign[:, None])
    sd = np.where(small, 0.0, d * sign)
    ok = ~(small & np.all(n0 == 0.0, axis=1))
    return nrm, sd, ok


def _start_normals(x, pairs):
    if pairs.shape[0] == 0:
        return np.zeros((0, 3))
    i, j = pairs[:, 0], pairs[:, 1]
    s, t = segment_params(x, i, j)
    diff = _closest_diff(x, i, j, s, t)
    d = _rownorm(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where((d >= 1e-12)[:, None], diff / d[:, None], 0.0)


def _contact_terms(p, inv_mass, pairs, n0):
    i, j = pairs[:, 0], pairs[:, 1]
    s, t = segment_params(p, i, j)
    nrm, sd, ok = _oriented(_closest_diff(p, i, j, s, t), n0)
    g = np.stack((1.0 - s, s, -(1.0 - t), -t), axis=1)
    idx = np.stack((i, i + 1, j, j + 1), axis=1)
    w = inv_mass[idx]
    wsum = g[:, 0] * g[:, 0] * w[:, 0] + g[:, 1] * g[:, 1] * w[:, 1] + g[:, 2] * g[:, 2] * w[:, 2] + g[:, 3] * g[:, 3] * w[:, 3]
    return s, t, nrm, sd, ok, g, idx, w, wsum


def _project(p, inv_mass, rest, lam_e, lam_c, pairs, n0, alpha_t, alpha_c, two_r, max_move):
    n = p.shape[0]
    ne = n - 1
    ev = p[1:] - p[:-1]
    el = _rownorm(ev)
    d = inv_mass[:-1] + inv_mass[1:] + alpha_t
    ok = (el >= 1e-12) & (d != 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(ok[:, None], ev / el[:, None], 0.0)
    diag = np.where(ok, d, 1.0)
    rhs_e = np.where(ok, -(el - rest) - alpha_t * lam_e, 0.0)
    low = -inv_mass[1:-1] * _rowdot(u[:-1], u[1:])
    A = np.diag(diag) + np.diag(low, 1) + np.diag(low, -1)

    act = np.empty(0, dtype=np.int64)
    z = np.empty(0)
    if pairs.shape[0]:
        _s, _t, nrm, sd, ok_c, g, idx, w, wsum = _contact_terms(p, inv_mass, pairs, n0)
        live = ok_c & ~((sd >= two_r) & (lam_c <= 0.0)) & (wsum != 0.0)
        act = np.flatnonzero(live)
    if act.size:
        na = act.size
        nrm, g, idx, sd = nrm[act], g[act], idx[act], sd[act]
        rhs_c = -(sd - two_r) - alpha_c * lam_c[act]
        # constraint Jacobians over the flattened 3n coordinates
        Je = np.zeros((ne, n, 3))
        Je[np.arange(ne), np.arange(ne)] = -u
        Je[np.arange(ne), np.arange(1, n)] = u
        Je = Je.reshape(ne, 3 * n)
        G = np.zeros((na, n, 3))
        rows = np.repeat(np.arange(na), 4)
        np.add.at(G, (rows, idx.ravel()), (g[:, :, None] * nrm[:, None, :]).reshape(-1, 3))
        G = G.reshape(na, 3 * n)
        w3 = np.repeat(inv_mass, 3)
        B = (Je * w3) @ G.T
        D = (G * w3) @ G.T
        X = np.linalg.solve(A, B)
        y = np.linalg.solve(A, rhs_e)
        S = D - B.T @ X
        S[np.diag_indices(na)] += alpha_c + _REDUNDANCY_SHIFT * np.max(np.diag(S))
        r = rhs_c - B.T @ y
        z = np.linalg.solve(S, r)
        z = np.where(lam_c[act] + z < 0.0, -lam_c[act], z)
        rhs_e = rhs_e - B @ z
    dl = np.linalg.solve(A, rhs_e)
    dp = np.zeros((n, 3))
    dp[1:] += (inv_mass[1:] * dl)[:, None] * u
    dp[:-1] -= (inv_mass[:-1] * dl)[:, None] * u
    if act.size:
        delta = (inv_mass[idx] * g * z[:, None])[:, :, None] * nrm[:, None, :]
        np.add.at(dp, idx.ravel(), delta.reshape(-1, 3))
    big = float(np.max(_rownorm(dp)))
    scale = max_move / big if big > max_move else 1.0
    p += scale * dp
    lam_e += scale * dl
    if act.size:
        lam_c[act] += scale * z


def _contact_pass(p, inv_mass, lam_c, pairs, n0, alpha_c, two_r):
    """Sequential non-penetration sweep; Gauss-Seidel order forces a loop here."""
    for k in range(pairs.shape[0]):
        ij = pairs[k : k + 1]
        i, j = int(ij[0, 0]), int(ij[0, 1])
        s, t = segment_params(p, ij[:, 0], ij[:, 1])
        nrm, sd, ok = _oriented(_closest_diff(p, ij[:, 0], ij[:, 1], s, t), n0[k : k + 1])
        if not ok[0]:
            continue
        c = sd[0] - two_r
        if c >= 0.0 and lam_c[k] <= 0.0:
            continue
        s0, t0 = s[0], t[0]
        verts = (i, i + 1, j, j + 1)
        gs = (1.0 - s0, s0, -(1.0 - t0), -t0)
        ws = [inv_mass[q] for q in verts]
        wsum = sum(g * g * w for g, w in zip(gs, ws))
        if wsum == 0.0:
            continue
        dl = (-c - alpha_c * lam_c[k]) / (wsum + alpha_c)
        if lam_c[k] + dl < 0.0:
            dl = -lam_c[k]
        lam_c[k] += dl
        for q, g, w in zip(verts, gs, ws):
            p[q] += (w * g * dl) * nrm[0]


def pbd_substep(x, v, inv_mass, rest, pin, pull, target, prm):
    n = x.shape[0]
    ne = n - 1
    dt = prm[DT]
    iters = int(prm[ITERATIONS])
    g = np.array([prm[GX], prm[GY], prm[GZ]])
    alpha_t = prm[COMPLIANCE] / (dt * dt)
    alpha_c = prm[CONTACT_COMPLIANCE] / (dt * dt)
    radius = prm[RADIUS]
    skip = int(prm[NEIGHBOR_SKIP])
    mu = prm[SURFACE_FRICTION]
    keep = 1.0 - prm[VELOCITY_DAMPING]
    two_r = 2.0 * radius

    v = v.copy()
    free = inv_mass > 0.0
    v[free] = (v[free] + g * dt) * keep

    jd = prm[JOINT_DAMPING] * prm[JOINT_DAMPING_RATE]
    jf = prm[JOINT_FRICTION] * prm[JOINT_FRICTION_SPEED]
    a = np.arange(ne)
    b = a + 1
    wa = inv_mass[a]
    wb = inv_mass[b]
    wsum = wa + wb
    ev = x[b] - x[a]
    el = _rownorm(ev)
    rel = v[b] - v[a]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = ev / el[:, None]
        rn = _rowdot(rel, u)
        perp = rel - rn[:, None] * u
        pm = _rownorm(perp)
        ok = (wsum != 0.0) & (el >= 1e-12) & (pm >= 1e-15)
        red = np.minimum(jd * pm + jf, pm)
        f = red / pm
    if np.any(ok):
        a_ok, b_ok = a[ok], b[ok]
        idx = np.stack((a_ok, b_ok), axis=1)
        pf = perp[ok] * f[ok][:, None]
        delta = np.stack(
            ((pf * wa[ok][:, None]) / wsum[ok][:, None], -((pf * wb[ok][:, None]) / wsum[ok][:, None])),
            axis=1,
        )
        # a fixed endpoint still counts towards the average, as in the loop kernel
        _scatter_average_all(v, idx, delta)

    p = x + v * dt
    p[pin] = x[pin]
    p[pull] = target

    pairs = swept_pairs(x, p, two_r + prm[CANDIDATE_MARGIN], skip)
    n0 = _start_normals(x, pairs)
    lam_e = np.zeros(ne)
    lam_c = np.zeros(pairs.shape[0])
    for _ in range(iters):
        _project(p, inv_mass, rest, lam_e, lam_c, pairs, n0, alpha_t, alpha_c, two_r, radius)
    # quasi-static cap on free-vertex travel per step
    step = p - x
    mag = _rownorm(step)
    over = free & (mag > prm[MAX_VERTEX_STEP])
    if np.any(over):
        p[over] = x[over] + step[over] * (prm[MAX_VERTEX_STEP] / mag[over])[:, None]
    for _ in range(_CONTACT_PASSES):
        _contact_pass(p, inv_mass, lam_c, pairs, n0, alpha_c, two_r)

    v_new = (p - x) / dt

    active_mask = lam_c != 0.0
    active = int(np.count_nonzero(active_mask))
    if active:
        ap = pairs[active_mask]
        lam_a = lam_c[active_mask]
        s, t, nrm, _sd, ok_c, gg, idx, w, ws = _contact_terms(p, inv_mass, ap, n0[active_mask])
        vr = (
            gg[:, 0, None] * v_new[idx[:, 0]]
            + gg[:, 1, None] * v_new[idx[:, 1]]
            + gg[:, 2, None] * v_new[idx[:, 2]]
            + gg[:, 3, None] * v_new[idx[:, 3]]
        )
        vn = _rowdot(vr, nrm)
        tv = vr - vn[:, None] * nrm
        tm = _rownorm(tv)
        live = ok_c & (ws != 0.0) & (tm >= 1e-15)
        with np.errstate(divide="ignore", invalid="ignore"):
            red = np.minimum(mu * np.abs(lam_a) * ws / dt, tm)
            f = red / (tm * ws)
        if np.any(live):
            delta = -(w * gg * f[:, None])[:, :, None] * tv[:, None, :]
            _scatter_average(v_new, idx[live], w[live], delta[live])

    inv_dt2 = 1.0 / (dt * dt)
    force = prm[PULL_MASS] * g
    for e in range(max(pull - 1, 0), min(pull + 1, ne)):
        ev = p[e + 1] - p[e]
        el = math.sqrt(ev[0] * ev[0] + ev[1] * ev[1] + ev[2] * ev[2])
        if el < 1e-12:
            continue
        sgn = 1.0 if e + 1 == pull else -1.0
        force = force + sgn * lam_e[e] * (ev / el) * inv_dt2
    if active:
        touch = (pairs[:, 0] == pull) | (pairs[:, 0] + 1 == pull) | (pairs[:, 1] == pull) | (pairs[:, 1] + 1 == pull)
        sel = np.flatnonzero(touch & active_mask)
        if sel.size:
            s, t, nrm, _sd, ok_c, gg, idx, _w, _ws = _contact_terms(p, inv_mass, pairs[sel], n0[sel])
            gsum = np.where(idx == pull, gg, 0.0).sum(axis=1)
            for k in range(sel.size):
                if ok_c[k]:
                    force = force + lam_c[sel[k]] * gsum[k] * nrm[k] * inv_dt2
    return p, v_new, force, active


def _scatter_average_all(target, idx, delta):
    n = target.shape[0]
    acc = np.zeros((n, 3))
    cnt = np.zeros(n)
    np.add.at(acc, idx.ravel(), delta.reshape(-1, 3))
    np.add.at(cnt, idx.ravel(), 1.0)
    hit = cnt > 0.0
    target[hit] += acc[hit] / cnt[hit][:, None]


def chord_march(dense, chord, n_points):
    # inherently sequential; plain Python on the fallback path
    out = np.empty((n_points, 3))
    out[0] = dense[0]
    c = dense[0].astype(float).copy()
    k = 0
    placed = 1
    m = dense.shape[0]
    l2 = chord * chord
    while placed < n_points and k < m - 1:
        bvec = dense[k + 1] - c
        if float(bvec @ bvec) < l2:
            k += 1
            continue
        avec = dense[k] - c
        d = dense[k + 1] - dense[k]
        qa = float(d @ d)
        qb = 2.0 * float(avec @ d)
        qc = float(avec @ avec) - l2
        disc = max(qb * qb - 4.0 * qa * qc, 0.0)
        u = (-qb + math.sqrt(disc)) / (2.0 * qa)
        c = dense[k] + u * d
        out[placed] = c
        placed += 1
    return out, placed
