"""Loop kernels compiled with numba.

Each function here has a vectorised twin in ``_numpy_kernels`` that performs
the same arithmetic in the same order; ``kernels`` picks one at import time.
"""
import math

import numpy as np

from ._accel import njit
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


@njit
def _clamp01(a):
    if a < 0.0:
        return 0.0
    if a > 1.0:
        return 1.0
    return a


@njit
def segment_params(p, i, j):
    """Closest-point parameters (s, t) between edges i and j of ``p``."""
    d1x = p[i + 1, 0] - p[i, 0]
    d1y = p[i + 1, 1] - p[i, 1]
    d1z = p[i + 1, 2] - p[i, 2]
    d2x = p[j + 1, 0] - p[j, 0]
    d2y = p[j + 1, 1] - p[j, 1]
    d2z = p[j + 1, 2] - p[j, 2]
    rx = p[i, 0] - p[j, 0]
    ry = p[i, 1] - p[j, 1]
    rz = p[i, 2] - p[j, 2]
    a = d1x * d1x + d1y * d1y + d1z * d1z
    e = d2x * d2x + d2y * d2y + d2z * d2z
    f = d2x * rx + d2y * ry + d2z * rz
    if a <= _SEG_EPS and e <= _SEG_EPS:
        return 0.0, 0.0
    if a <= _SEG_EPS:
        return 0.0, _clamp01(f / e)
    c = d1x * rx + d1y * ry + d1z * rz
    if e <= _SEG_EPS:
        return _clamp01(-c / a), 0.0
    b = d1x * d2x + d1y * d2y + d1z * d2z
    denom = a * e - b * b
    if denom > _SEG_EPS * a * e:
        s = _clamp01((b * f - c * e) / denom)
    else:
        s = 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = _clamp01(-c / a)
    elif t > 1.0:
        t = 1.0
        s = _clamp01((b - c) / a)
    return s, t


@njit
def _closest_diff(p, i, j, s, t):
    cx = (p[i, 0] + s * (p[i + 1, 0] - p[i, 0])) - (p[j, 0] + t * (p[j + 1, 0] - p[j, 0]))
    cy = (p[i, 1] + s * (p[i + 1, 1] - p[i, 1])) - (p[j, 1] + t * (p[j + 1, 1] - p[j, 1]))
    cz = (p[i, 2] + s * (p[i + 1, 2] - p[i, 2])) - (p[j, 2] + t * (p[j + 1, 2] - p[j, 2]))
    return cx, cy, cz


@njit
def segment_distance_matrix_pairs(p, cutoff, skip):
    """Edge pairs (i, j), j > i + skip, whose segment distance is below ``cutoff``."""
    ne = p.shape[0] - 1
    cap = max(ne * ne // 2, 1)
    out = np.empty((cap, 2), dtype=np.int64)
    m = 0
    c2 = cutoff * cutoff
    for i in range(ne):
        for j in range(i + skip + 1, ne):
            s, t = segment_params(p, i, j)
            dx, dy, dz = _closest_diff(p, i, j, s, t)
            if dx * dx + dy * dy + dz * dz < c2:
                out[m, 0] = i
                out[m, 1] = j
                m += 1
    return out[:m].copy()


@njit
def swept_pairs(x, p, cutoff, skip):
    """Edge pairs closer than ``cutoff`` at the start ``x`` or the prediction ``p``."""
    ne = p.shape[0] - 1
    cap = max(ne * ne // 2, 1)
    out = np.empty((cap, 2), dtype=np.int64)
    m = 0
    c2 = cutoff * cutoff
    for i in range(ne):
        for j in range(i + skip + 1, ne):
            s, t = segment_params(p, i, j)
            dx, dy, dz = _closest_diff(p, i, j, s, t)
            hit = dx * dx + dy * dy + dz * dz < c2
            if not hit:
                s, t = segment_params(x, i, j)
                dx, dy, dz = _closest_diff(x, i, j, s, t)
                hit = dx * dx + dy * dy + dz * dz < c2
            if hit:
                out[m, 0] = i
                out[m, 1] = j
                m += 1
    return out[:m].copy()


@njit
def _unit_cross(ax, ay, az, bx, by, bz):
    cx = ay * bz - az * by
    cy = az * bx - ax * bz
    cz = ax * by - ay * bx
    nrm = math.sqrt(cx * cx + cy * cy + cz * cz)
    return cx, cy, cz, nrm


@njit
def _asin_clipped(v):
    if v > 1.0:
        v = 1.0
    elif v < -1.0:
        v = -1.0
    return math.asin(v)


@njit
def pair_solid_angle(p, i, j):
    """Signed solid-angle contribution of edges i and j (zero when degenerate)."""
    x1, y1, z1 = p[i, 0], p[i, 1], p[i, 2]
    x2, y2, z2 = p[i + 1, 0], p[i + 1, 1], p[i + 1, 2]
    x3, y3, z3 = p[j, 0], p[j, 1], p[j, 2]
    x4, y4, z4 = p[j + 1, 0], p[j + 1, 1], p[j + 1, 2]
    r13x, r13y, r13z = x3 - x1, y3 - y1, z3 - z1
    r14x, r14y, r14z = x4 - x1, y4 - y1, z4 - z1
    r23x, r23y, r23z = x3 - x2, y3 - y2, z3 - z2
    r24x, r24y, r24z = x4 - x2, y4 - y2, z4 - z2
    r12x, r12y, r12z = x2 - x1, y2 - y1, z2 - z1
    r34x, r34y, r34z = x4 - x3, y4 - y3, z4 - z3

    # sign from (r34 x r12) . r13, zeroed when the four points are coplanar
    cx = r34y * r12z - r34z * r12y
    cy = r34z * r12x - r34x * r12z
    cz = r34x * r12y - r34y * r12x
    triple = cx * r13x + cy * r13y + cz * r13z
    scale = (
        math.sqrt(r34x * r34x + r34y * r34y + r34z * r34z)
        * math.sqrt(r12x * r12x + r12y * r12y + r12z * r12z)
        * math.sqrt(r13x * r13x + r13y * r13y + r13z * r13z)
    )
    if abs(triple) <= _DEGENERATE_REL * scale or scale == 0.0:
        return 0.0

    n1x, n1y, n1z, m1 = _unit_cross(r13x, r13y, r13z, r14x, r14y, r14z)
    n2x, n2y, n2z, m2 = _unit_cross(r14x, r14y, r14z, r24x, r24y, r24z)
    n3x, n3y, n3z, m3 = _unit_cross(r24x, r24y, r24z, r23x, r23y, r23z)
    n4x, n4y, n4z, m4 = _unit_cross(r23x, r23y, r23z, r13x, r13y, r13z)
    if m1 < 1e-300 or m2 < 1e-300 or m3 < 1e-300 or m4 < 1e-300:
        return 0.0
    n1x, n1y, n1z = n1x / m1, n1y / m1, n1z / m1
    n2x, n2y, n2z = n2x / m2, n2y / m2, n2z / m2
    n3x, n3y, n3z = n3x / m3, n3y / m3, n3z / m3
    n4x, n4y, n4z = n4x / m4, n4y / m4, n4z / m4
    omega = (
        _asin_clipped(n1x * n2x + n1y * n2y + n1z * n2z)
        + _asin_clipped(n2x * n3x + n2y * n3y + n2z * n3z)
        + _asin_clipped(n3x * n4x + n3y * n4y + n3z * n4z)
        + _asin_clipped(n4x * n1x + n4y * n1y + n4z * n1z)
    )
    if triple > 0.0:
        return omega
    return -omega


@njit
def writhe(p):
    ne = p.shape[0] - 1
    total = 0.0
    for i in range(ne):
        for j in range(i + 2, ne):
            total += pair_solid_angle(p, i, j)
    return 2.0 * total / (4.0 * math.pi)


@njit
def _oriented(dx, dy, dz, n0, k):
    """Contact normal kept on the side the pair started the step on.

    Returns (nx, ny, nz, signed distance, usable).
    """
    d = math.sqrt(dx * dx + dy * dy + dz * dz)
    if d < 1e-12:
        if n0[k, 0] == 0.0 and n0[k, 1] == 0.0 and n0[k, 2] == 0.0:
            return 0.0, 0.0, 0.0, 0.0, False
        return n0[k, 0], n0[k, 1], n0[k, 2], 0.0, True
    nx, ny, nz = dx / d, dy / d, dz / d
    if nx * n0[k, 0] + ny * n0[k, 1] + nz * n0[k, 2] < 0.0:
        return -nx, -ny, -nz, -d, True
    return nx, ny, nz, d, True


@njit
def _start_normals(x, pairs):
    nc = pairs.shape[0]
    n0 = np.zeros((nc, 3))
    for k in range(nc):
        i = pairs[k, 0]
        j = pairs[k, 1]
        s, t = segment_params(x, i, j)
        dx, dy, dz = _closest_diff(x, i, j, s, t)
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        if d >= 1e-12:
            n0[k, 0] = dx / d
            n0[k, 1] = dy / d
            n0[k, 2] = dz / d
    return n0


@njit
def _tri_factor(diag, low):
    """LU factors of the symmetric tridiagonal matrix (diag, low)."""
    ne = diag.shape[0]
    m = np.empty(ne)
    cp = np.zeros(ne)
    m[0] = diag[0]
    for e in range(1, ne):
        cp[e - 1] = low[e] / m[e - 1]
        m[e] = diag[e] - low[e] * cp[e - 1]
    return m, cp


@njit
def _tri_solve(m, cp, low, rhs):
    ne = m.shape[0]
    y = np.empty(ne)
    y[0] = rhs[0] / m[0]
    for e in range(1, ne):
        y[e] = (rhs[e] - low[e] * y[e - 1]) / m[e]
    for e in range(ne - 2, -1, -1):
        y[e] = y[e] - cp[e] * y[e + 1]
    return y


@njit
def _cholesky_solve(S, r):
    na = S.shape[0]
    L = np.zeros((na, na))
    for a in range(na):
        acc = S[a, a]
        for k in range(a):
            acc -= L[a, k] * L[a, k]
        if acc <= 0.0:
            acc = 1e-300
        L[a, a] = math.sqrt(acc)
        for b in range(a + 1, na):
            acc = S[b, a]
            for k in range(a):
                acc -= L[b, k] * L[a, k]
            L[b, a] = acc / L[a, a]
    y = np.empty(na)
    for a in range(na):
        acc = r[a]
        for k in range(a):
            acc -= L[a, k] * y[k]
        y[a] = acc / L[a, a]
    for a in range(na - 1, -1, -1):
        acc = y[a]
        for k in range(a + 1, na):
            acc -= L[k, a] * y[k]
        y[a] = acc / L[a, a]
    return y


@njit
def _project(p, inv_mass, rest, lam_e, lam_c, pairs, n0, alpha_t, alpha_c, two_r, max_move):
    """One linearised projection of all edges and active contacts together.

    The edge block of the system is tridiagonal; active contacts enter
    through a Schur complement solved densely. Contacts that would pull
    are released by clamping their multiplier at zero.
    """
    ne = p.shape[0] - 1
    nc = pairs.shape[0]
    u = np.zeros((ne, 3))
    diag = np.empty(ne)
    rhs_e = np.empty(ne)
    low = np.zeros(ne)
    for e in range(ne):
        ex = p[e + 1, 0] - p[e, 0]
        ey = p[e + 1, 1] - p[e, 1]
        ez = p[e + 1, 2] - p[e, 2]
        el = math.sqrt(ex * ex + ey * ey + ez * ez)
        d = inv_mass[e] + inv_mass[e + 1] + alpha_t
        if el < 1e-12 or d == 0.0:
            diag[e] = 1.0
            rhs_e[e] = 0.0
            continue
        u[e, 0] = ex / el
        u[e, 1] = ey / el
        u[e, 2] = ez / el
        diag[e] = d
        rhs_e[e] = -(el - rest[e]) - alpha_t * lam_e[e]
    for e in range(1, ne):
        cos = u[e - 1, 0] * u[e, 0] + u[e - 1, 1] * u[e, 1] + u[e - 1, 2] * u[e, 2]
        low[e] = -inv_mass[e] * cos
    m, cp = _tri_factor(diag, low)

    act = np.empty(nc, dtype=np.int64)
    cn = np.empty((nc, 3))
    cg = np.empty((nc, 4))
    cv = np.empty((nc, 4), dtype=np.int64)
    rhs_c = np.empty(nc)
    na = 0
    for k in range(nc):
        i = pairs[k, 0]
        j = pairs[k, 1]
        s, t = segment_params(p, i, j)
        dx, dy, dz = _closest_diff(p, i, j, s, t)
        nx, ny, nz, sd, ok = _oriented(dx, dy, dz, n0, k)
        if not ok or (sd >= two_r and lam_c[k] <= 0.0):
            continue
        g0, g1, g2, g3 = 1.0 - s, s, -(1.0 - t), -t
        wsum = g0 * g0 * inv_mass[i] + g1 * g1 * inv_mass[i + 1] + g2 * g2 * inv_mass[j] + g3 * g3 * inv_mass[j + 1]
        if wsum == 0.0:
            continue
        act[na] = k
        cn[na, 0], cn[na, 1], cn[na, 2] = nx, ny, nz
        cg[na, 0], cg[na, 1], cg[na, 2], cg[na, 3] = g0, g1, g2, g3
        cv[na, 0], cv[na, 1], cv[na, 2], cv[na, 3] = i, i + 1, j, j + 1
        rhs_c[na] = -(sd - two_r) - alpha_c * lam_c[k]
        na += 1

    z = np.zeros(na)
    B = np.zeros((ne, na))
    if na > 0:
        for c in range(na):
            for q in range(4):
                v = cv[c, q]
                w = inv_mass[v]
                if w == 0.0:
                    continue
                gx = cg[c, q] * cn[c, 0]
                gy = cg[c, q] * cn[c, 1]
                gz = cg[c, q] * cn[c, 2]
                if v >= 1:
                    B[v - 1, c] += w * (u[v - 1, 0] * gx + u[v - 1, 1] * gy + u[v - 1, 2] * gz)
                if v < ne:
                    B[v, c] -= w * (u[v, 0] * gx + u[v, 1] * gy + u[v, 2] * gz)
        X = np.empty((ne, na))
        for c in range(na):
            X[:, c] = _tri_solve(m, cp, low, B[:, c])
        y = _tri_solve(m, cp, low, rhs_e)
        S = np.zeros((na, na))
        r = np.empty(na)
        for a in range(na):
            for b in range(a, na):
                acc = 0.0
                for qa in range(4):
                    va = cv[a, qa]
                    w = inv_mass[va]
                    if w == 0.0:
                        continue
                    for qb in range(4):
                        if cv[b, qb] == va:
                            acc += w * cg[a, qa] * cg[b, qb]
                dot = cn[a, 0] * cn[b, 0] + cn[a, 1] * cn[b, 1] + cn[a, 2] * cn[b, 2]
                acc *= dot
                for e in range(ne):
                    acc -= B[e, a] * X[e, b]
                S[a, b] = acc
                S[b, a] = acc
            acc = rhs_c[a]
            for e in range(ne):
                acc -= B[e, a] * y[e]
            r[a] = acc
        # neighbouring contact pairs can be near-duplicates; a small uniform
        # shift keeps the Schur complement positive definite
        dmax = 0.0
        for a in range(na):
            if S[a, a] > dmax:
                dmax = S[a, a]
        shift = alpha_c + _REDUNDANCY_SHIFT * dmax
        for a in range(na):
            S[a, a] += shift
        z = _cholesky_solve(S, r)
        for c in range(na):
            k = act[c]
            if lam_c[k] + z[c] < 0.0:
                z[c] = -lam_c[k]
        for e in range(ne):
            acc = rhs_e[e]
            for c in range(na):
                acc -= B[e, c] * z[c]
            rhs_e[e] = acc
    dl = _tri_solve(m, cp, low, rhs_e)

    dp = np.zeros((ne + 1, 3))
    for e in range(ne):
        wa = inv_mass[e]
        wb = inv_mass[e + 1]
        dp[e + 1, 0] += wb * dl[e] * u[e, 0]
        dp[e + 1, 1] += wb * dl[e] * u[e, 1]
        dp[e + 1, 2] += wb * dl[e] * u[e, 2]
        dp[e, 0] -= wa * dl[e] * u[e, 0]
        dp[e, 1] -= wa * dl[e] * u[e, 1]
        dp[e, 2] -= wa * dl[e] * u[e, 2]
    for c in range(na):
        for q in range(4):
            v = cv[c, q]
            f = inv_mass[v] * cg[c, q] * z[c]
            dp[v, 0] += f * cn[c, 0]
            dp[v, 1] += f * cn[c, 1]
            dp[v, 2] += f * cn[c, 2]
    # damped step: nearly redundant constraints must not fling vertices
    big = 0.0
    for v in range(ne + 1):
        mag = math.sqrt(dp[v, 0] * dp[v, 0] + dp[v, 1] * dp[v, 1] + dp[v, 2] * dp[v, 2])
        if mag > big:
            big = mag
    scale = 1.0
    if big > max_move:
        scale = max_move / big
    for v in range(ne + 1):
        p[v, 0] += scale * dp[v, 0]
        p[v, 1] += scale * dp[v, 1]
        p[v, 2] += scale * dp[v, 2]
    for e in range(ne):
        lam_e[e] += scale * dl[e]
    for c in range(na):
        lam_c[act[c]] += scale * z[c]


@njit
def _contact_pass(p, inv_mass, lam_c, pairs, n0, alpha_c, two_r):
    """Sequential non-penetration sweep over the candidate pairs.

    Runs after the coupled projection so that an over-constrained knot
    stretches its edges (and so reports tension) instead of letting strands
    pass through each other.
    """
    for k in range(pairs.shape[0]):
        i = pairs[k, 0]
        j = pairs[k, 1]
        s, t = segment_params(p, i, j)
        dx, dy, dz = _closest_diff(p, i, j, s, t)
        nx, ny, nz, sd, ok = _oriented(dx, dy, dz, n0, k)
        if not ok:
            continue
        c = sd - two_r
        if c >= 0.0 and lam_c[k] <= 0.0:
            continue
        g0, g1, g2, g3 = 1.0 - s, s, -(1.0 - t), -t
        w0 = inv_mass[i]
        w1 = inv_mass[i + 1]
        w2 = inv_mass[j]
        w3 = inv_mass[j + 1]
        wsum = g0 * g0 * w0 + g1 * g1 * w1 + g2 * g2 * w2 + g3 * g3 * w3
        if wsum == 0.0:
            continue
        dl = (-c - alpha_c * lam_c[k]) / (wsum + alpha_c)
        if lam_c[k] + dl < 0.0:
            dl = -lam_c[k]
        lam_c[k] += dl
        for q in range(4):
            if q == 0:
                v, g, w = i, g0, w0
            elif q == 1:
                v, g, w = i + 1, g1, w1
            elif q == 2:
                v, g, w = j, g2, w2
            else:
                v, g, w = j + 1, g3, w3
            f = w * g * dl
            p[v, 0] += f * nx
            p[v, 1] += f * ny
            p[v, 2] += f * nz


@njit
def pbd_substep(x, v, inv_mass, rest, pin, pull, target, prm):
    """Advance the chain by one solver step.

    Returns (positions, velocities, force on the pull grasp, active contacts).
    """
    n = x.shape[0]
    ne = n - 1
    dt = prm[DT]
    iters = int(prm[ITERATIONS])
    gx, gy, gz = prm[GX], prm[GY], prm[GZ]
    alpha_t = prm[COMPLIANCE] / (dt * dt)
    alpha_c = prm[CONTACT_COMPLIANCE] / (dt * dt)
    radius = prm[RADIUS]
    skip = int(prm[NEIGHBOR_SKIP])
    mu = prm[SURFACE_FRICTION]
    keep = 1.0 - prm[VELOCITY_DAMPING]

    v = v.copy()
    for i in range(n):
        if inv_mass[i] > 0.0:
            v[i, 0] = (v[i, 0] + gx * dt) * keep
            v[i, 1] = (v[i, 1] + gy * dt) * keep
            v[i, 2] = (v[i, 2] + gz * dt) * keep

    # joint damping / friction on the relative bending velocity of neighbours
    jd = prm[JOINT_DAMPING] * prm[JOINT_DAMPING_RATE]
    jf = prm[JOINT_FRICTION] * prm[JOINT_FRICTION_SPEED]
    dv = np.zeros((n, 3))
    cnt = np.zeros(n)
    for e in range(ne):
        a = e
        b = e + 1
        wa = inv_mass[a]
        wb = inv_mass[b]
        wsum = wa + wb
        if wsum == 0.0:
            continue
        ex = x[b, 0] - x[a, 0]
        ey = x[b, 1] - x[a, 1]
        ez = x[b, 2] - x[a, 2]
        el = math.sqrt(ex * ex + ey * ey + ez * ez)
        if el < 1e-12:
            continue
        ex, ey, ez = ex / el, ey / el, ez / el
        rx = v[b, 0] - v[a, 0]
        ry = v[b, 1] - v[a, 1]
        rz = v[b, 2] - v[a, 2]
        rn = rx * ex + ry * ey + rz * ez
        px = rx - rn * ex
        py = ry - rn * ey
        pz = rz - rn * ez
        pm = math.sqrt(px * px + py * py + pz * pz)
        if pm < 1e-15:
            continue
        red = jd * pm + jf
        if red > pm:
            red = pm
        f = red / pm
        dv[a, 0] += px * f * wa / wsum
        dv[a, 1] += py * f * wa / wsum
        dv[a, 2] += pz * f * wa / wsum
        dv[b, 0] -= px * f * wb / wsum
        dv[b, 1] -= py * f * wb / wsum
        dv[b, 2] -= pz * f * wb / wsum
        cnt[a] += 1.0
        cnt[b] += 1.0
    for i in range(n):
        if cnt[i] > 0.0:
            v[i, 0] += dv[i, 0] / cnt[i]
            v[i, 1] += dv[i, 1] / cnt[i]
            v[i, 2] += dv[i, 2] / cnt[i]

    p = x + v * dt
    p[pin, 0] = x[pin, 0]
    p[pin, 1] = x[pin, 1]
    p[pin, 2] = x[pin, 2]
    p[pull, 0] = target[0]
    p[pull, 1] = target[1]
    p[pull, 2] = target[2]

    pairs = swept_pairs(x, p, 2.0 * radius + prm[CANDIDATE_MARGIN], skip)
    nc = pairs.shape[0]
    n0 = _start_normals(x, pairs)
    lam_e = np.zeros(ne)
    lam_c = np.zeros(nc)
    two_r = 2.0 * radius
    for _ in range(iters):
        _project(p, inv_mass, rest, lam_e, lam_c, pairs, n0, alpha_t, alpha_c, two_r, radius)
    # quasi-static cap on free-vertex travel per step, so strands cannot cross
    # the contact band between two discrete checks
    cap = prm[MAX_VERTEX_STEP]
    for i in range(n):
        if inv_mass[i] == 0.0:
            continue
        dx = p[i, 0] - x[i, 0]
        dy = p[i, 1] - x[i, 1]
        dz = p[i, 2] - x[i, 2]
        mag = math.sqrt(dx * dx + dy * dy + dz * dz)
        if mag > cap:
            f = cap / mag
            p[i, 0] = x[i, 0] + dx * f
            p[i, 1] = x[i, 1] + dy * f
            p[i, 2] = x[i, 2] + dz * f
    for _ in range(_CONTACT_PASSES):
        _contact_pass(p, inv_mass, lam_c, pairs, n0, alpha_c, two_r)

    v_new = (p - x) / dt

    # Coulomb friction at contacts, bounded by the normal correction
    active = 0
    if nc > 0:
        dv = np.zeros((n, 3))
        cnt = np.zeros(n)
        for k in range(nc):
            if lam_c[k] == 0.0:
                continue
            active += 1
            i = pairs[k, 0]
            j = pairs[k, 1]
            s, t = segment_params(p, i, j)
            dx, dy, dz = _closest_diff(p, i, j, s, t)
            nx, ny, nz, d, ok = _oriented(dx, dy, dz, n0, k)
            if not ok:
                continue
            g0 = 1.0 - s
            g1 = s
            g2 = -(1.0 - t)
            g3 = -t
            w0 = inv_mass[i]
            w1 = inv_mass[i + 1]
            w2 = inv_mass[j]
            w3 = inv_mass[j + 1]
            wsum = g0 * g0 * w0 + g1 * g1 * w1 + g2 * g2 * w2 + g3 * g3 * w3
            if wsum == 0.0:
                continue
            vrx = g0 * v_new[i, 0] + g1 * v_new[i + 1, 0] + g2 * v_new[j, 0] + g3 * v_new[j + 1, 0]
            vry = g0 * v_new[i, 1] + g1 * v_new[i + 1, 1] + g2 * v_new[j, 1] + g3 * v_new[j + 1, 1]
            vrz = g0 * v_new[i, 2] + g1 * v_new[i + 1, 2] + g2 * v_new[j, 2] + g3 * v_new[j + 1, 2]
            vn = vrx * nx + vry * ny + vrz * nz
            tx = vrx - vn * nx
            ty = vry - vn * ny
            tz = vrz - vn * nz
            tm = math.sqrt(tx * tx + ty * ty + tz * tz)
            if tm < 1e-15:
                continue
            red = mu * abs(lam_c[k]) * wsum / dt
            if red > tm:
                red = tm
            f = red / (tm * wsum)
            for q in range(4):
                if q == 0:
                    idx, g, w = i, g0, w0
                elif q == 1:
                    idx, g, w = i + 1, g1, w1
                elif q == 2:
                    idx, g, w = j, g2, w2
                else:
                    idx, g, w = j + 1, g3, w3
                if w == 0.0:
                    continue
                dv[idx, 0] -= w * g * f * tx
                dv[idx, 1] -= w * g * f * ty
                dv[idx, 2] -= w * g * f * tz
                cnt[idx] += 1.0
        for i in range(n):
            if cnt[i] > 0.0:
                v_new[i, 0] += dv[i, 0] / cnt[i]
                v_new[i, 1] += dv[i, 1] / cnt[i]
                v_new[i, 2] += dv[i, 2] / cnt[i]

    # reaction on the pull grasp: constraint forces lambda * grad / dt^2 plus its own weight
    inv_dt2 = 1.0 / (dt * dt)
    fx = prm[PULL_MASS] * gx
    fy = prm[PULL_MASS] * gy
    fz = prm[PULL_MASS] * gz
    for e in range(max(pull - 1, 0), min(pull + 1, ne)):
        a = e
        b = e + 1
        ex = p[b, 0] - p[a, 0]
        ey = p[b, 1] - p[a, 1]
        ez = p[b, 2] - p[a, 2]
        el = math.sqrt(ex * ex + ey * ey + ez * ez)
        if el < 1e-12:
            continue
        sgn = 1.0 if b == pull else -1.0
        fx += sgn * lam_e[e] * ex / el * inv_dt2
        fy += sgn * lam_e[e] * ey / el * inv_dt2
        fz += sgn * lam_e[e] * ez / el * inv_dt2
    for k in range(nc):
        if lam_c[k] == 0.0:
            continue
        i = pairs[k, 0]
        j = pairs[k, 1]
        if pull != i and pull != i + 1 and pull != j and pull != j + 1:
            continue
        s, t = segment_params(p, i, j)
        dx, dy, dz = _closest_diff(p, i, j, s, t)
        nx, ny, nz, d, ok = _oriented(dx, dy, dz, n0, k)
        if not ok:
            continue
        g = 0.0
        if pull == i:
            g += 1.0 - s
        if pull == i + 1:
            g += s
        if pull == j:
            g -= 1.0 - t
        if pull == j + 1:
            g -= t
        fx += lam_c[k] * g * nx * inv_dt2
        fy += lam_c[k] * g * ny * inv_dt2
        fz += lam_c[k] * g * nz * inv_dt2
    force = np.empty(3)
    force[0] = fx
    force[1] = fy
    force[2] = fz
    return p, v_new, force, active


@njit
def chord_march(dense, chord, n_points):
    """Walk ``dense`` placing points at exact Euclidean spacing ``chord``.

    Returns (points, placed); ``placed < n_points`` means the polyline ran out.
    """
    m = dense.shape[0]
    out = np.empty((n_points, 3))
    out[0, 0] = dense[0, 0]
    out[0, 1] = dense[0, 1]
    out[0, 2] = dense[0, 2]
    cx, cy, cz = dense[0, 0], dense[0, 1], dense[0, 2]
    k = 0
    placed = 1
    l2 = chord * chord
    while placed < n_points and k < m - 1:
        bx = dense[k + 1, 0] - cx
        by = dense[k + 1, 1] - cy
        bz = dense[k + 1, 2] - cz
        if bx * bx + by * by + bz * bz < l2:
            k += 1
            continue
        ax = dense[k, 0] - cx
        ay = dense[k, 1] - cy
        az = dense[k, 2] - cz
        dx = dense[k + 1, 0] - dense[k, 0]
        dy = dense[k + 1, 1] - dense[k, 1]
        dz = dense[k + 1, 2] - dense[k, 2]
        qa = dx * dx + dy * dy + dz * dz
        qb = 2.0 * (ax * dx + ay * dy + az * dz)
        qc = ax * ax + ay * ay + az * az - l2
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0.0:
            disc = 0.0
        u = (-qb + math.sqrt(disc)) / (2.0 * qa)
        cx = dense[k, 0] + u * dx
        cy = dense[k, 1] + u * dy
        cz = dense[k, 2] + u * dz
        out[placed, 0] = cx
        out[placed, 1] = cy
        out[placed, 2] = cz
        placed += 1
    return out, placed
