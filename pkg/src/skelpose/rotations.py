"""3x3 rotation algebra.

Orthogonalization of arbitrary linear transforms into proper rotations
(column-wise Gram-Schmidt with an analytic backward pass), axis-angle
conversions and the geodesic distance between rotations.

Conventions: matrices act on column vectors, angles are radians in
[0, pi], axes are unit vectors.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInput, ShapeMismatch

# Intermediate Gram-Schmidt columns below this norm are treated as
# linearly dependent input.
DEGENERACY_EPS = 1e-12


class AxisAngle(NamedTuple):
    axis: np.ndarray
    angle: float


def _check33(m, name="matrix") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ShapeMismatch(f"{name} must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DegenerateInput(f"{name} has non-finite entries")
    return m


def _gs_pass(c1, c2, c3, check):
    """One modified Gram-Schmidt sweep over three column vectors.

    Returns every intermediate needed by the backward pass.
    """
    n1 = np.linalg.norm(c1)
    if check and n1 < DEGENERACY_EPS:
        raise DegenerateInput("first column norm below degeneracy threshold")
    q1 = c1 / n1

    d12 = q1 @ c2
    u2 = c2 - d12 * q1
    n2 = np.linalg.norm(u2)
    if check and n2 < DEGENERACY_EPS:
        raise DegenerateInput("second column is parallel to the first")
    q2 = u2 / n2

    d13 = q1 @ c3
    w3 = c3 - d13 * q1
    d23 = q2 @ w3
    u3 = w3 - d23 * q2
    n3 = np.linalg.norm(u3)
    if check and n3 < DEGENERACY_EPS:
        raise DegenerateInput("third column lies in the span of the first two")
    q3 = u3 / n3

    return {
        "c": (c1, c2, c3), "q": (q1, q2, q3), "n": (n1, n2, n3),
        "d12": d12, "d13": d13, "d23": d23, "w3": w3,
    }


def _gs_pass_backward(cache, gq1, gq2, gq3):
    """Backward of one sweep: grads on (q1,q2,q3) -> grads on (c1,c2,c3)."""
    c1, c2, c3 = cache["c"]
    q1, q2, q3 = cache["q"]
    n1, n2, n3 = cache["n"]
    w3 = cache["w3"]

    gq1 = gq1.copy()
    gq2 = gq2.copy()

    # q3 = u3 / n3
    gu3 = (gq3 - (gq3 @ q3) * q3) / n3
    # u3 = w3 - (q2.w3) q2
    gw3 = gu3 - (gu3 @ q2) * q2
    gq2 += -(cache["d23"]) * gu3 - (gu3 @ q2) * w3
    # w3 = c3 - (q1.c3) q1
    gc3 = gw3 - (gw3 @ q1) * q1
    gq1 += -(cache["d13"]) * gw3 - (gw3 @ q1) * c3
    # q2 = u2 / n2
    gu2 = (gq2 - (gq2 @ q2) * q2) / n2
    # u2 = c2 - (q1.c2) q1
    gc2 = gu2 - (gu2 @ q1) * q1
    gq1 += -(cache["d12"]) * gu2 - (gu2 @ q1) * c2
    # q1 = c1 / n1
    gc1 = (gq1 - (gq1 @ q1) * q1) / n1

    return gc1, gc2, gc3


def _gs_forward(m):
    """Two-sweep Gram-Schmidt over the columns of m plus determinant fix.

    The second sweep re-orthogonalizes the first sweep's output, keeping
    ||Q^T Q - I|| at machine precision even for poorly conditioned input
    ("twice is enough"). Returns (Q, cache) where cache allows exact
    backpropagation through both sweeps.
    """
    m = _check33(m)
    p1 = _gs_pass(m[:, 0], m[:, 1], m[:, 2], check=True)
    p2 = _gs_pass(*p1["q"], check=False)
    q1, q2, q3 = p2["q"]
    flip = float(np.dot(q3, np.cross(q1, q2))) < 0.0
    if flip:
        q3 = -q3
    rot = np.column_stack([q1, q2, q3])
    return rot, (p1, p2, flip)


def gram_schmidt(m) -> np.ndarray:
    """Orthonormalize a 3x3 transform into a proper rotation.

    Columns are orthogonalized in order c1 -> c2 -> c3; if the result is
    left-handed the third column is negated so det = +1.

    Raises DegenerateInput when any intermediate column norm falls below
    DEGENERACY_EPS (linearly dependent columns).
    """
    rot, _ = _gs_forward(m)
    return rot


def gram_schmidt_backward(m, upstream_grad) -> np.ndarray:
    """d(loss)/d(m) for Q = gram_schmidt(m), given d(loss)/d(Q).

    The determinant fix is piecewise constant and treated as such.
    """
    upstream_grad = _check33(upstream_grad, "upstream_grad")
    _, (p1, p2, flip) = _gs_forward(m)
    gq1 = upstream_grad[:, 0]
    gq2 = upstream_grad[:, 1]
    gq3 = -upstream_grad[:, 2] if flip else upstream_grad[:, 2]
    gq1, gq2, gq3 = _gs_pass_backward(p2, gq1, gq2, gq3)
    gc1, gc2, gc3 = _gs_pass_backward(p1, gq1, gq2, gq3)
    return np.column_stack([gc1, gc2, gc3])


def is_rotation(r, tol=1e-9) -> bool:
    """True when r is orthonormal with determinant +1 within tol."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    ortho = np.linalg.norm(r.T @ r - np.eye(3))
    return ortho < tol and abs(np.linalg.det(r) - 1.0) < tol


def from_axis_angle(axis, angle) -> np.ndarray:
    """Rodrigues formula: rotation by `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < DEGENERACY_EPS:
        raise DegenerateInput("axis has near-zero norm")
    x, y, z = axis / n
    c = math.cos(angle)
    s = math.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    outer = np.outer([x, y, z], [x, y, z])
    return c * np.eye(3) + (1.0 - c) * outer + s * k


def to_axis_angle(r) -> AxisAngle:
    """Axis and angle (in [0, pi]) of a rotation matrix.

    Near angle 0 the axis defaults to +x. Near angle pi the axis is
    recovered from the symmetric part (the skew part vanishes there),
    signed by the residual skew part when it is above noise level and
    otherwise by the first-nonzero-positive convention.
    """
    r = _check33(r)
    w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = float(np.linalg.norm(w))
    c = max(-1.0, min(1.0, (np.trace(r) - 1.0) / 2.0))
    angle = math.atan2(s, c)

    if angle < 1e-12:
        return AxisAngle(np.array([1.0, 0.0, 0.0]), 0.0)

    if s > 1e-7:
        axis = w / s
    else:
        # angle ~ pi: sym(r) = c I + (1-c) a a^T, so (sym(r) - c I)/(1-c)
        # is the rank-1 outer product of the axis.
        outer = ((r + r.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
        k = int(np.argmax(np.diag(outer)))
        axis = outer[:, k] / np.linalg.norm(outer[:, k])
        sign = axis @ w
        if abs(sign) > 1e-13:
            if sign < 0.0:
                axis = -axis
        else:
            for comp in axis:
                if abs(comp) > 1e-9:
                    if comp < 0.0:
                        axis = -axis
                    break
    axis = axis / np.linalg.norm(axis)
    return AxisAngle(axis, angle)


def geodesic_deg(r1, r2) -> float:
    """Angle of r1^T r2 in degrees: the geodesic metric on rotations."""
    r1 = _check33(r1, "r1")
    r2 = _check33(r2, "r2")
    return math.degrees(to_axis_angle(r1.T @ r2).angle)


def random_rotation(rng) -> np.ndarray:
    """Haar-uniform random rotation (normalized random quaternion)."""
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    ww, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - ww * z), 2 * (x * z + ww * y)],
        [2 * (x * y + ww * z), 1 - 2 * (x * x + z * z), 2 * (y * z - ww * x)],
        [2 * (x * z - ww * y), 2 * (y * z + ww * x), 1 - 2 * (x * x + y * y)],
    ])
