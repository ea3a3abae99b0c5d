"""Compactly supported radial basis parameterization of boundary curves.

A boundary curve is represented as a straight baseline between its two
endpoints plus a residual expansion in Wendland phi_{3,1} kernels placed
uniformly on the normalized parameter interval [0, 1]:

    p(xi) = (1 - xi) p1 + xi pn + sum_k w_k phi(|xi - c_k| / h)

The kernel has a closed-form derivative and antiderivative, so both the
occluded-area integral and its gradient with respect to the weights are
exact.  Three fitting routines are provided: an unconstrained least-squares
fit of 3D point sets (residuals against the chord baseline, parameterized
by cumulative chord length), an unconstrained 2D fit used for predicted
curves, and an inequality-constrained 2D fit (curve never below the samples)
solved as a convex QP with a primal active-set method.
"""

from dataclasses import dataclass, field

import numpy as np

from retractor.errors import InvalidParameterError, ShapeError


# ---------------------------------------------------------------------------
# Wendland phi_{3,1} kernel calculus.
#
# phi(r) = (1 - r)^4 (4r + 1) on [0, 1], zero outside.  Expanded:
# phi(r) = 4r^5 - 15r^4 + 20r^3 - 10r^2 + 1, which integrates to
# antideriv(c) = (2/3)c^6 - 3c^5 + 5c^4 - (10/3)c^3 + c with antideriv(1) = 1/3.


def wendland_phi(r):
    """Kernel value at radius |r| (compact support on [-1, 1])."""
    r = np.abs(np.asarray(r, dtype=float))
    t = np.maximum(1.0 - r, 0.0)
    return t ** 4 * (4.0 * r + 1.0)


def wendland_deriv(xi, center, h):
    """d/dxi of phi(|xi - center| / h).

    phi'(r) = -20 r (1 - r)^3 for r in [0, 1]; the sign of (xi - center)
    carries through the chain rule.
    """
    if h <= 0:
        raise InvalidParameterError(f"support radius must be positive, got {h}")
    u = (np.asarray(xi, dtype=float) - center) / h
    r = np.abs(u)
    t = np.maximum(1.0 - r, 0.0)
    return -20.0 * u * t ** 3 / h


def wendland_antideriv(c):
    """Integral of phi from 0 to c for c in [0, 1]; antideriv(1) = 1/3."""
    c = np.asarray(c, dtype=float)
    return c * (1.0 + c * c * (-10.0 / 3.0 + c * (5.0 + c * (-3.0 + (2.0 / 3.0) * c))))


def _signed_antideriv(r):
    """Integral of phi(|u|) du from 0 to r, for r in [-1, 1]."""
    return np.sign(r) * wendland_antideriv(np.abs(r))


def wendland_integral(xi_l, xi_h, center, h):
    """Exact integral of phi(|xi - center| / h) over [xi_l, xi_h].

    The substitution u = (xi - center)/h reduces the integral to the signed
    antiderivative evaluated at the clipped endpoints, scaled by h.
    Orientation follows the endpoints (xi_l > xi_h gives the negated value).
    """
    if h <= 0:
        raise InvalidParameterError(f"support radius must be positive, got {h}")
    r_l = np.clip((np.asarray(xi_l, dtype=float) - center) / h, -1.0, 1.0)
    r_h = np.clip((np.asarray(xi_h, dtype=float) - center) / h, -1.0, 1.0)
    return h * (_signed_antideriv(r_h) - _signed_antideriv(r_l))


# ---------------------------------------------------------------------------
# Kernel layout and design matrices.


@dataclass(frozen=True)
class KernelLayout:
    """m kernel centers uniformly spaced on [0, 1] with common support radius h.

    The default h = 2 / (m - 1) spans two center gaps, so neighboring kernels
    overlap and the design matrix stays well conditioned.
    """

    m: int
    h: float = None  # type: ignore[assignment]
    centers: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.m < 2:
            raise InvalidParameterError(f"need at least 2 kernels, got {self.m}")
        if self.h is None:
            object.__setattr__(self, "h", 2.0 / (self.m - 1))
        if self.h <= 0:
            raise InvalidParameterError(f"support radius must be positive, got {self.h}")
        object.__setattr__(self, "centers", np.linspace(0.0, 1.0, self.m))


def design_matrix(xi, layout):
    """Evaluate all kernels at the parameter values xi; shape (len(xi), m)."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return wendland_phi((xi[:, None] - layout.centers[None, :]) / layout.h)


def chord_parameters(points):
    """Normalized cumulative chord length of an ordered point sequence."""
    points = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seg.sum()
    if total <= 0:
        raise InvalidParameterError("points have zero total chord length")
    xi = np.concatenate(([0.0], np.cumsum(seg))) / total
    return xi


# ---------------------------------------------------------------------------
# 3D boundary fit.


@dataclass
class BoundaryParams3D:
    """Baseline endpoints plus m x 3 residual weights for a 3D curve."""

    weights: np.ndarray  # (m, 3)
    p1: np.ndarray  # (3,)
    pn: np.ndarray  # (3,)
    layout: KernelLayout

    def to_dict(self):
        return {
            "m": self.layout.m,
            "h": self.layout.h,
            "centers": self.layout.centers.tolist(),
            "weights": self.weights.tolist(),
            "baseline": [self.p1.tolist(), self.pn.tolist()],
        }

    @classmethod
    def from_dict(cls, d):
        layout = KernelLayout(m=int(d["m"]), h=float(d["h"]))
        return cls(
            weights=np.asarray(d["weights"], dtype=float),
            p1=np.asarray(d["baseline"][0], dtype=float),
            pn=np.asarray(d["baseline"][1], dtype=float),
            layout=layout,
        )


def fit_boundary_3d(points, layout, baseline=None, xi=None):
    """Least-squares residual fit of an ordered 3D point sequence.

    Parameters are assigned by normalized cumulative chord length unless an
    explicit `xi` array overrides them (useful when the sample parameters
    are known exactly; chord reassignment on resampled data is only
    approximately self-consistent).  Residuals are taken against the
    straight baseline between `baseline` endpoints (default: the first and
    last sample).  Passing a fixed baseline keeps weight vectors comparable
    across deformations of the same boundary.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"expected (n, 3) points, got {points.shape}")
    if len(points) < layout.m:
        raise InvalidParameterError(
            f"need at least m={layout.m} points, got {len(points)}"
        )
    if xi is None:
        xi = chord_parameters(points)
    else:
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (len(points),):
            raise ShapeError(f"xi must have shape ({len(points)},), got {xi.shape}")
        if xi[0] != 0.0 or xi[-1] != 1.0 or np.any(np.diff(xi) <= 0):
            raise InvalidParameterError("xi must increase from 0 to 1")
    if baseline is None:
        p1, pn = points[0], points[-1]
    else:
        p1 = np.asarray(baseline[0], dtype=float)
        pn = np.asarray(baseline[1], dtype=float)
    base = (1.0 - xi)[:, None] * p1 + xi[:, None] * pn
    phi = design_matrix(xi, layout)
    weights, *_ = np.linalg.lstsq(phi, points - base, rcond=None)
    return BoundaryParams3D(weights=weights, p1=p1.copy(), pn=pn.copy(), layout=layout)


def eval_curve_3d(params, xi):
    """Evaluate the baseline-plus-residual curve at parameters xi; (len(xi), 3)."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    base = (1.0 - xi)[:, None] * params.p1 + xi[:, None] * params.pn
    return base + design_matrix(xi, params.layout) @ params.weights


# ---------------------------------------------------------------------------
# 2D fits in the normalized image frame.


def fit_curve_2d(x, y, layout, ridge=1e-12):
    """Unconstrained least-squares weights for y(x) = sum_k w_k phi_k(x)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    phi = design_matrix(x, layout)
    q = phi.T @ phi
    q[np.diag_indices_from(q)] += ridge * np.trace(q) / layout.m
    return np.linalg.solve(q, phi.T @ y)


def eval_curve_2d(weights, layout, x):
    """Evaluate the 2D kernel expansion at x."""
    return design_matrix(x, layout) @ np.asarray(weights, dtype=float)


def fit_curve_2d_constrained(x, y, layout, tol=1e-8):
    """Least-squares fit with the curve constrained to lie on or above
    every sample: minimize ||Phi w - y||^2 subject to Phi w >= y.

    Solved as a strictly convex QP by a primal active-set method; the
    fitted curve conservatively over-covers the sampled silhouette.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ShapeError(f"x and y differ in shape: {x.shape} vs {y.shape}")
    if len(x) < layout.m:
        raise InvalidParameterError(
            f"need at least m={layout.m} samples, got {len(x)}"
        )
    phi = design_matrix(x, layout)
    q = phi.T @ phi
    q[np.diag_indices_from(q)] += 1e-10 * np.trace(q) / layout.m
    c = phi.T @ y
    return _active_set_qp(q, c, phi, y, tol=tol)


def _active_set_qp(q, c, a, b, tol=1e-8, max_iters=None):
    """Minimize (1/2) w'Qw - c'w subject to a_i' w >= b_i (rows of a).

    Textbook primal active-set iteration: solve the equality-constrained
    KKT system on the working set, step to the nearest blocking constraint,
    and drop the most negative multiplier at a constrained stationary point.
    Q must be positive definite (callers add a tiny ridge).
    """
    n_con, n = a.shape
    if max_iters is None:
        max_iters = 50 * (n + n_con)

    # Feasible start: shift the unconstrained minimizer along the vector of
    # kernel-row sums (strictly positive for overlapping kernels on [0, 1]).
    w = np.linalg.solve(q, c)
    slack = a @ w - b
    if slack.min() < 0:
        s = a.sum(axis=1)
        if s.min() <= 0:
            raise InvalidParameterError("kernel rows do not cover the samples")
        beta = np.max((b - a @ w) / s)
        w = w + (beta + 1e-12) * np.ones(n)

    working = []
    for _ in range(max_iters):
        if working:
            aw = a[working]
            k = len(working)
            kkt = np.block([[q, -aw.T], [aw, np.zeros((k, k))]])
            rhs = np.concatenate([c, b[np.asarray(working)]])
            sol = np.linalg.solve(kkt, rhs)
            w_star, mu = sol[:n], sol[n:]
        else:
            w_star = np.linalg.solve(q, c)
            mu = np.empty(0)

        d = w_star - w
        if np.linalg.norm(d) <= tol * max(1.0, np.linalg.norm(w)):
            # Stationary on the working set; check multiplier signs.
            if len(mu) == 0 or mu.min() >= -tol:
                return w_star
            working.pop(int(np.argmin(mu)))
            continue

        # Longest feasible step toward w_star.
        ad = a @ d
        viol = ad < -1e-14
        for i in working:
            viol[i] = False
        alpha = 1.0
        block = -1
        if viol.any():
            idx = np.where(viol)[0]
            ratios = (b[idx] - a[idx] @ w) / ad[idx]
            j = int(np.argmin(ratios))
            if ratios[j] < alpha:
                alpha = max(ratios[j], 0.0)
                block = int(idx[j])
        w = w + alpha * d
        if block >= 0:
            working.append(block)
    raise InvalidParameterError("active-set iteration limit exceeded")


# ---------------------------------------------------------------------------
# Occluded-area loss and gradient.


def occlusion_gradient(layout, intervals):
    """Gradient of the occluded area integral with respect to the weights.

    The loss L = integral over the union of intervals of y(x) dx is linear
    in w, so the gradient is the vector of per-kernel definite integrals.
    """
    g = np.zeros(layout.m)
    for lo, hi in intervals:
        if hi <= lo:
            continue
        g += wendland_integral(lo, hi, layout.centers, layout.h)
    return g


def occlusion_loss(weights, layout, intervals):
    """Occluded area under the curve: exactly w . occlusion_gradient."""
    return float(np.asarray(weights, dtype=float) @ occlusion_gradient(layout, intervals))
