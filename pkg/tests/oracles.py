"""Independent reference computations used by several test modules."""
import numpy as np


def quantize_branches(x, tau):
    """Direct three-branch ternary map, one scalar at a time."""
    if x > tau:
        return 1
    if x < -tau:
        return -1
    return 0


def gauss_writhe_quadrature(p, q=200):
    """Writhe of a polyline by Gauss-Legendre quadrature of the Gauss double integral.

    Adjacent and identical edges are skipped, matching the discrete definition.
    """
    xg, wg = np.polynomial.legendre.leggauss(q)
    s = 0.5 * (xg + 1.0)
    w = 0.5 * wg
    a = p[:-1]
    d = p[1:] - p[:-1]
    ne = a.shape[0]
    pts = (a[:, None, :] + s[None, :, None] * d[:, None, :]).reshape(-1, 3)
    tan = np.repeat(d, q, axis=0)
    ww = np.tile(w, ne)
    eid = np.repeat(np.arange(ne), q)
    total = 0.0
    for k in range(ne):
        sl = slice(k * q, (k + 1) * q)
        mask = np.abs(eid - k) > 1
        r = pts[sl][:, None, :] - pts[mask][None, :, :]
        cr = np.cross(tan[sl][:, None, :], tan[mask][None, :, :])
        num = np.einsum("ijk,ijk->ij", cr, r)
        den = np.linalg.norm(r, axis=2) ** 3
        total += np.sum(ww[sl][:, None] * ww[mask][None, :] * num / den)
    return total / (4.0 * np.pi)


def trefoil_polyline(n=64, gap=0.3):
    """Open trefoil: the standard (2, 3) parametrisation with a small gap cut out."""
    t = np.linspace(gap, 2.0 * np.pi - gap, n)
    return np.stack(
        (np.sin(t) + 2.0 * np.sin(2.0 * t), np.cos(t) - 2.0 * np.cos(2.0 * t), -np.sin(3.0 * t)), axis=1
    )
