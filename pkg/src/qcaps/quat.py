"""Quaternion algebra on numpy arrays.

Quaternions are arrays whose last axis has length 4, ordered
``(w, x, y, z)``: the real part followed by the i, j, k imaginary parts.
Pure quaternions (zero real part) are stored as length-3 arrays holding
only the imaginary parts. Everything broadcasts over leading axes and is
dtype-preserving, so the same kernels serve float32 and float64 callers.

Rotors here carry the *full* rotation angle: a rotor built from angle
``theta`` rotates a pure quaternion by ``2*theta`` geometrically, because
the classical half-angle factor is folded into the stored angle.
"""

from __future__ import annotations

import numpy as np

# Smallest usable rotation-axis norm; below this the weight is unusable.
AXIS_EPS = 1e-8
# Rotor norm tolerance enforced by rotate().
UNIT_TOL = 1e-6
# Scalar residual tolerated on a rotated pure quaternion before clamping.
PURE_RESIDUAL_TOL = 1e-10


class DegenerateAxis(ValueError):
    """Rotation axis norm fell below AXIS_EPS (untrained or corrupted weight)."""


class NonUnitRotor(ValueError):
    """A quaternion passed as a rotor is not unit length within tolerance."""


def hamilton_product(q, p):
    """Hamilton product q*p. Non-commutative; norms multiply."""
    q = np.asarray(q)
    p = np.asarray(p)
    w1, x1, y1, z1 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    w2, x2, y2, z2 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def conjugate(q):
    """Quaternion conjugate: negate the imaginary parts."""
    q = np.asarray(q)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def norm(q):
    """Euclidean norm over the last axis (works for 4- and 3-component arrays)."""
    q = np.asarray(q)
    return np.sqrt((q * q).sum(axis=-1))


def normalize_rotor(theta, raw_axis):
    """Materialize the unit rotor [cos(theta), sin(theta)*axis/|axis|].

    ``theta`` broadcasts against the leading shape of ``raw_axis`` (last
    axis length 3). Raises DegenerateAxis if any axis norm is below
    AXIS_EPS; silently renormalizing a collapsed axis would corrupt the
    gradients of whoever owns the weight.
    """
    theta = np.asarray(theta)
    raw_axis = np.asarray(raw_axis)
    if raw_axis.shape[-1] != 3:
        raise ValueError(f"raw_axis must have a trailing axis of 3, got {raw_axis.shape}")
    n = norm(raw_axis)
    if np.any(n < AXIS_EPS) or not np.all(np.isfinite(n)):
        raise DegenerateAxis(f"axis norm below {AXIS_EPS:g} (min={np.min(n):g})")
    unit = raw_axis / n[..., None]
    w = np.cos(theta)
    xyz = np.sin(theta)[..., None] * unit
    return np.concatenate([w[..., None], xyz], axis=-1)


def rotate(rotor, r):
    """Rotate pure quaternion ``r`` (3 components) by unit ``rotor``.

    Computes the sandwich product rotor * [0, r] * conj(rotor) and returns
    the imaginary part. The scalar part of the result is analytically zero;
    it is clamped away after asserting the numerical residual is tiny.
    """
    rotor = np.asarray(rotor)
    r = np.asarray(r)
    rn = norm(rotor)
    if np.any(np.abs(rn - 1.0) > UNIT_TOL):
        raise NonUnitRotor(f"rotor norm deviates from 1 by {np.max(np.abs(rn - 1.0)):g}")
    pure = np.concatenate([np.zeros_like(r[..., :1]), r], axis=-1)
    out = hamilton_product(hamilton_product(rotor, pure), conjugate(rotor))
    # 32-bit inputs get the tolerance relaxed by 1e4, matching their ulp.
    tol = PURE_RESIDUAL_TOL * (1e4 if out.dtype == np.float32 else 1.0)
    assert np.all(np.abs(out[..., 0]) <= tol * np.maximum(1.0, norm(r))), (
        "rotation produced a non-negligible scalar residual"
    )
    return out[..., 1:]


def right_embed(q):
    """4x4 matrix M with M @ vec(p) == vec(q * p) for every quaternion p."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def left_embed(q):
    """4x4 matrix M with M @ vec(p) == vec(p * q) for every quaternion p."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, z, -y], axis=-1),
        np.stack([y, -z, w, x], axis=-1),
        np.stack([z, y, -x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def rotation_operator(theta, raw_axis):
    """Composed 4x4 operator M with M @ vec(u) == vec(w * u * conj(w)).

    ``w`` is the unit rotor from normalize_rotor. For a unit rotor the
    lower-right 3x3 block is a proper rotation matrix (det +1) and the
    scalar row/column reduce to identity.
    """
    w = normalize_rotor(theta, raw_axis)
    return left_embed(conjugate(w)) @ right_embed(w)


def rotor_rotation_matrix(theta, raw_axis):
    """3x3 rotation block of rotation_operator, in closed form.

    Acting on the imaginary parts of a pure quaternion this is exactly the
    sandwich product, with the scalar component structurally absent.
    """
    rot = normalize_rotor(theta, raw_axis)
    w, x, y, z = rot[..., 0], rot[..., 1], rot[..., 2], rot[..., 3]
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = 1.0 - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    rows = [
        np.stack([r00, r01, r02], axis=-1),
        np.stack([r10, r11, r12], axis=-1),
        np.stack([r20, r21, r22], axis=-1),
    ]
    return np.stack(rows, axis=-2)
