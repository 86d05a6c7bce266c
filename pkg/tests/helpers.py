"""Shared independent oracles for the test suite.

Everything here is deliberately implemented with brute force or textbook
formulas, independent of the production code paths it checks.
"""

import numpy as np


def random_triangle(rng, min_area=1e-3, scale=2.0):
    """A non-degenerate triangle with vertices in [-scale, scale]^2."""
    while True:
        v = rng.uniform(-scale, scale, size=(3, 2))
        d1, d2 = v[1] - v[0], v[2] - v[0]
        area = abs(d1[0] * d2[1] - d1[1] * d2[0]) / 2.0
        if area > min_area:
            return v


def hat_function(vertices, i):
    """The P1 basis function on one cell: 1 at vertex i, 0 at the others."""
    mat = np.hstack([vertices, np.ones((3, 1))])
    rhs = np.zeros(3)
    rhs[i] = 1.0
    coeff = np.linalg.solve(mat, rhs)

    def phi(x):
        return coeff[0] * x[0] + coeff[1] * x[1] + coeff[2]

    return phi, coeff[:2]


def convex_hull_area(points):
    """Shoelace area of the convex hull (Andrew's monotone chain)."""
    pts = sorted(map(tuple, points))

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    hull = lower[:-1] + upper[:-1]
    area = 0.0
    for (x0, y0), (x1, y1) in zip(hull, hull[1:] + hull[:1]):
        area += x0 * y1 - x1 * y0
    return abs(area) / 2.0


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def circumcircle(v):
    """Center and squared radius of the circle through three points."""
    ax, ay = v[0]
    bx, by = v[1]
    cx, cy = v[2]
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    ux = ((ax ** 2 + ay ** 2) * (by - cy) + (bx ** 2 + by ** 2) * (cy - ay)
          + (cx ** 2 + cy ** 2) * (ay - by)) / d
    uy = ((ax ** 2 + ay ** 2) * (cx - bx) + (bx ** 2 + by ** 2) * (ax - cx)
          + (cx ** 2 + cy ** 2) * (bx - ax)) / d
    r2 = (ax - ux) ** 2 + (ay - uy) ** 2
    return np.array([ux, uy]), r2


def finite_difference_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        grad.ravel()[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_gradients_close(analytic, numeric, atol=1e-5, rtol=1e-4):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    bound = np.maximum(atol, rtol * np.abs(numeric))
    assert np.all(diff <= bound), (
        f"gradient mismatch: max diff {diff.max():.3e}, "
        f"worst allowed {bound[np.unravel_index(diff.argmax(), diff.shape)]:.3e}"
    )
