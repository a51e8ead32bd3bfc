"""Quadrature on the reference triangle {(s, t): s, t >= 0, s + t <= 1}.

Weights sum to one (the rule computes averages); multiply by the element
area to integrate.
"""

from functools import lru_cache

import numpy as np

__all__ = ["triangle_rule"]


def _orbit3(a, b):
    # points with barycentric coordinates (a, b, b) and permutations
    return [(b, b), (a, b), (b, a)]


def _orbit6(a, b, c):
    bary = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    return [(l2, l3) for _, l2, l3 in bary]


def _degree6():
    # Dunavant's 12-point symmetric rule
    pts, wts = [], []
    for (a, b), w in [
        ((0.501426509658179, 0.249286745170910), 0.116786275726379),
        ((0.873821971016996, 0.063089014491502), 0.050844906370207),
    ]:
        pts += _orbit3(a, b)
        wts += [w] * 3
    pts += _orbit6(0.053145049844817, 0.310352451033784, 0.636502499121399)
    wts += [0.082851075618374] * 6
    wts = np.array(wts)
    return np.array(pts), wts / wts.sum()


def _degree8():
    # Dunavant's 16-point symmetric rule
    pts, wts = [(1 / 3, 1 / 3)], [0.144315607677787]
    for (a, b), w in [
        ((0.081414823414554, 0.459292588292723), 0.095091634267285),
        ((0.658861384496480, 0.170569307751760), 0.103217370534718),
        ((0.898905543365938, 0.050547228317031), 0.032458497623198),
    ]:
        pts += _orbit3(a, b)
        wts += [w] * 3
    pts += _orbit6(0.008394777409958, 0.263112829634638, 0.728492392955404)
    wts += [0.027230314174435] * 6
    wts = np.array(wts)
    return np.array(pts), wts / wts.sum()


def _collapsed_gauss(degree):
    # Duffy-collapsed tensor Gauss rule, exact for polynomials up to ``degree``
    n = degree // 2 + 2
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    s = u.ravel()
    t = (v * (1.0 - u)).ravel()
    wt = (wu * wv * (1.0 - u)).ravel() * 2.0
    return np.column_stack([s, t]), wt / wt.sum()


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Return ``(points, weights)`` exact for polynomials of total ``degree``.

    Degrees up to 2 use the 3-point interior rule, 3..6 and 7..8 Dunavant's
    12- and 16-point rules; higher degrees fall back to a collapsed Gauss
    product rule.
    """
    if degree <= 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        wts = np.full(3, 1 / 3)
    elif degree <= 6:
        pts, wts = _degree6()
    elif degree <= 8:
        pts, wts = _degree8()
    else:
        pts, wts = _collapsed_gauss(degree)
    pts.flags.writeable = False
    wts.flags.writeable = False
    return pts, wts
