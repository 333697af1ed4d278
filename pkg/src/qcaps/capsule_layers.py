"""Quaternion capsule layers: vote computation and routed layer types.

A capsule's pose is a pure quaternion (3 imaginary components); a child
votes for a parent by rotating its pose with a learned rotor shared by
the (child type, parent type) pair. Routing then clusters votes into
parent poses per receptive field.

Routing runs over the 3 imaginary vote components only: the scalar part
of a rotated pure quaternion is identically zero, and carrying a
zero-variance dimension would degenerate the Gaussian cost. The
convolutional layer therefore applies the 3x3 rotation block, which is
exactly the composed 4x4 operator restricted to pure quaternions (the
equivalence is covered by tests).

The convolutional fast path never materializes the full
[positions x children x parents] vote tensor with windows copied out;
it walks the K*K kernel offsets and works on field-level slices, which
keeps every intermediate small enough to stay cache-resident.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import em_routing as em
from . import quat


class FieldTooSmall(ValueError):
    """Spatial extent smaller than the receptive-field kernel."""


class AlignmentError(ValueError):
    """Pose and activation grids disagree on batch/type/spatial extents."""


@dataclass
class CapsuleField:
    """A spatial grid of capsules: poses [B, T, 3, H, W] (pure-quaternion
    imaginary parts) and activations [B, T, H, W] in [0, 1]."""

    poses: ad.Node
    activations: ad.Node

    @property
    def types(self):
        return self.poses.shape[1]

    @property
    def spatial(self):
        return self.poses.shape[3], self.poses.shape[4]


@dataclass
class VoteBlock:
    """Votes [B, Ph, Pw, children, T_out, 3] plus the child activations
    aligned to the same (position, child) indexing."""

    votes: np.ndarray
    child_acts: np.ndarray


class CapsuleTransform:
    """Learned rotors between child and parent types, plus the per-parent
    routing offsets beta_a / beta_u.

    Rotors are stored reparameterized as (angle, raw 3-axis); the unit
    rotor is materialized in the forward pass, so optimizer updates can
    never break the unit-norm property. One rotor per (child type, parent
    type) pair by default, shared across spatial positions and kernel
    offsets; ``per_offset_shape`` switches on a distinct rotor per kernel
    offset for ablation.
    """

    def __init__(self, reg, name, t_in, t_out, rng, per_offset_shape=None):
        lead = tuple(per_offset_shape or ()) + (t_in, t_out)
        self.theta = reg.parameter(f"{name}.theta", rng.uniform(-np.pi, np.pi, size=lead))
        self.axis = reg.parameter(f"{name}.axis", rng.uniform(-1.0, 1.0, size=lead + (3,)))
        self.beta_a = reg.parameter(f"{name}.beta_a", np.zeros(t_out))
        self.beta_u = reg.parameter(f"{name}.beta_u", np.zeros(t_out))
        self.t_in = t_in
        self.t_out = t_out
        self.per_offset = per_offset_shape is not None

    def rotation_matrices(self):
        """Differentiable [..., t_in, t_out, 3, 3] rotation blocks."""
        axis_norms = np.sqrt((self.axis.value ** 2).sum(axis=-1))
        if np.any(axis_norms < quat.AXIS_EPS):
            raise quat.DegenerateAxis(
                f"{self.axis.name}: axis norm below {quat.AXIS_EPS:g}"
            )
        n2 = ad.reduce_sum(ad.square(self.axis), axis=-1, keepdims=True)
        unit = ad.divide(self.axis, ad.sqrt(n2))
        w = ad.cos(self.theta)
        s = ad.sin(self.theta)
        x = ad.multiply(s, unit[..., 0])
        y = ad.multiply(s, unit[..., 1])
        z = ad.multiply(s, unit[..., 2])
        two = 2.0
        xx, yy, zz = ad.square(x), ad.square(y), ad.square(z)
        xy, xz, yz = ad.multiply(x, y), ad.multiply(x, z), ad.multiply(y, z)
        wx, wy, wz = ad.multiply(w, x), ad.multiply(w, y), ad.multiply(w, z)
        one = 1.0
        rows = [
            ad.stack([one - two * (yy + zz), two * (xy - wz), two * (xz + wy)], axis=-1),
            ad.stack([two * (xy + wz), one - two * (xx + zz), two * (yz - wx)], axis=-1),
            ad.stack([two * (xz - wy), two * (yz + wx), one - two * (xx + yy)], axis=-1),
        ]
        return ad.stack(rows, axis=-2)


# ---------------------------------------------------------------------------
# reference path (numpy, used by tests and small-field verification)
# ---------------------------------------------------------------------------

def extract_receptive_fields(poses, activations, k, stride):
    """Valid (no-pad) sliding windows over a capsule field.

    poses: [B, M, 3, H, W], activations: [B, M, H, W] (numpy arrays).
    Returns (windowed poses [B, Ph, Pw, C, 3], windowed acts
    [B, Ph, Pw, C]) with child order (kernel row, kernel col, type),
    C = k*k*M.
    """
    poses = np.asarray(poses)
    activations = np.asarray(activations)
    b, m, _, h, w = poses.shape
    if h < k or w < k:
        raise FieldTooSmall(f"field {h}x{w} smaller than kernel {k}")
    ph = (h - k) // stride + 1
    pw = (w - k) // stride + 1
    wp = np.empty((b, ph, pw, k, k, m, 3), dtype=poses.dtype)
    wa = np.empty((b, ph, pw, k, k, m), dtype=activations.dtype)
    for i in range(k):
        ie = i + stride * (ph - 1) + 1
        for j in range(k):
            je = j + stride * (pw - 1) + 1
            # [B, M, 3, Ph, Pw] -> [B, Ph, Pw, M, 3]
            wp[:, :, :, i, j] = poses[:, :, :, i:ie:stride, j:je:stride].transpose(0, 3, 4, 1, 2)
            wa[:, :, :, i, j] = activations[:, :, i:ie:stride, j:je:stride].transpose(0, 2, 3, 1)
    return wp.reshape(b, ph, pw, k * k * m, 3), wa.reshape(b, ph, pw, k * k * m)


def compute_votes(windowed_poses, theta, raw_axis):
    """Reference vote computation via the full 4x4 rotation operator.

    windowed_poses: [B, Ph, Pw, C, 3] with C = k*k*M children. theta /
    raw_axis index (child type, parent type) or, per-offset, (k, k, child
    type, parent type). Returns a VoteBlock-shaped votes array
    [B, Ph, Pw, C, T, 3]; each vote is the rotated (still pure) child pose.
    """
    theta = np.asarray(theta)
    raw_axis = np.asarray(raw_axis)
    op = quat.rotation_operator(theta, raw_axis)     # [..., t_in, T, 4, 4]
    b, ph, pw, c, _ = windowed_poses.shape
    if op.ndim == 6:                                  # per-offset rotors
        kk = op.shape[0] * op.shape[1]
        m = op.shape[2]
        op = op.reshape(kk * m, op.shape[3], 4, 4)    # child-major like windows
    else:
        m = op.shape[0]
        kk = c // m
        op = np.tile(op, (kk, 1, 1, 1))               # same rotor at every offset
    if op.shape[0] != c:
        raise AlignmentError(f"{c} children incompatible with rotor table {op.shape}")
    pure = np.concatenate(
        [np.zeros_like(windowed_poses[..., :1]), windowed_poses], axis=-1
    )                                                 # [B, Ph, Pw, C, 4]
    rotated = np.einsum("ctij,bpqcj->bpqcti", op, pure)
    residual_tol = 1e-6 * max(1.0, float(np.abs(windowed_poses).max(initial=1.0)))
    assert np.all(np.abs(rotated[..., 0]) <= residual_tol), "votes must stay pure"
    return rotated[..., 1:]


def conv_capsule_layer_reference(poses, activations, transform_values, k, stride,
                                 iters=2, lam_base=em.LAMBDA_BASE,
                                 lam_growth=em.LAMBDA_GROWTH):
    """Per-position numpy routing; the oracle for the fast layer below.

    transform_values: dict with theta/axis/beta_a/beta_u arrays.
    """
    wp, wa = extract_receptive_fields(poses, activations, k, stride)
    block = VoteBlock(
        votes=compute_votes(wp, transform_values["theta"], transform_values["axis"]),
        child_acts=wa,
    )
    b, ph, pw, c, t, _ = block.votes.shape
    out_poses = np.empty((b, t, 3, ph, pw), dtype=block.votes.dtype)
    out_acts = np.empty((b, t, ph, pw), dtype=block.votes.dtype)
    for bi in range(b):
        for p in range(ph):
            for q in range(pw):
                mu, act = em.em_route(
                    block.votes[bi, p, q], block.child_acts[bi, p, q],
                    transform_values["beta_a"], transform_values["beta_u"],
                    iters=iters, lam_base=lam_base, lam_growth=lam_growth,
                )
                out_poses[bi, :, :, p, q] = mu
                out_acts[bi, :, p, q] = act
    return out_poses, out_acts


# ---------------------------------------------------------------------------
# fast differentiable layers
# ---------------------------------------------------------------------------

class ConvCapsLayer:
    """Convolutionally connected capsule layer with EM routing."""

    def __init__(self, reg, name, t_in, t_out, k, stride, rng,
                 iters=2, lam_base=em.LAMBDA_BASE, lam_growth=em.LAMBDA_GROWTH,
                 per_offset_rotors=False):
        shape = (k, k) if per_offset_rotors else None
        self.transform = CapsuleTransform(reg, name, t_in, t_out, rng, per_offset_shape=shape)
        self.k = k
        self.stride = stride
        self.iters = iters
        self.lam_base = lam_base
        self.lam_growth = lam_growth

    def __call__(self, field: CapsuleField) -> CapsuleField:
        return conv_capsule_layer(field, self)


def _slice_args(k_off, l_off, ph, pw, stride):
    he = k_off + stride * (ph - 1) + 1
    we = l_off + stride * (pw - 1) + 1
    return slice(k_off, he, stride), slice(l_off, we, stride)


def conv_capsule_layer(field: CapsuleField, layer: ConvCapsLayer) -> CapsuleField:
    """Gather receptive fields, compute rotor votes, route, repackage."""
    k, stride = layer.k, layer.stride
    b, m, _, h, w = field.poses.shape
    if h < k or w < k:
        raise FieldTooSmall(f"field {h}x{w} smaller than kernel {k}")
    ph = (h - k) // stride + 1
    pw = (w - k) // stride + 1
    t = layer.transform.t_out
    n_children = k * k * m

    u = ad.transpose(field.poses, (0, 3, 4, 1, 2))          # [B, H, W, M, 3]
    a = ad.transpose(field.activations, (0, 2, 3, 1))       # [B, H, W, M]
    rot = layer.transform.rotation_matrices()
    ones_m = ad.constant(np.ones((m, 1), dtype=field.poses.dtype))

    shared = not layer.transform.per_offset
    if shared:
        # votes for every child location once, stacked with their squares:
        # v6 [B, H, W, T, M, 6] = [votes | votes^2]
        rt = ad.transpose(rot, (1, 0, 2, 3))                 # [T, M, 3, 3]
        uu = ad.reshape(u, (b, h, w, 1, m, 3, 1))
        v = ad.reshape(ad.matmul(rt, uu), (b, h, w, t, m, 3))
        v6 = ad.concatenate([v, ad.square(v)], axis=-1)

        def piece(k_off, l_off):
            hs, ws = _slice_args(k_off, l_off, ph, pw, stride)
            return v6[:, hs, ws]

        # activation-weighted field sums over the type axis, then windows
        a_row = ad.reshape(a, (b, h, w, 1, 1, m))
        f_av6 = ad.reshape(ad.matmul(a_row, v6), (b, h, w, t, 6))
        f_v = ad.reshape(ad.matmul(ad.reshape(ones_m, (1, m)), v), (b, h, w, t, 3))
        sum_av6 = ad.window_sum(f_av6, k, stride)            # [B,Ph,Pw,T,6]
        sum_v = ad.window_sum(f_v, k, stride)
    else:
        # distinct rotor per kernel offset: votes exist only per slice
        cached = {}

        def piece(k_off, l_off):
            if (k_off, l_off) not in cached:
                hs, ws = _slice_args(k_off, l_off, ph, pw, stride)
                us = u[:, hs, ws]                                        # [B,Ph,Pw,M,3]
                rt = ad.transpose(rot[k_off, l_off], (1, 0, 2, 3))
                vv = ad.reshape(
                    ad.matmul(rt, ad.reshape(us, (b, ph, pw, 1, m, 3, 1))),
                    (b, ph, pw, t, m, 3),
                )
                cached[(k_off, l_off)] = ad.concatenate([vv, ad.square(vv)], axis=-1)
            return cached[(k_off, l_off)]

        sum_av6 = sum_v = None
        for k_off in range(k):
            for l_off in range(k):
                v6v = piece(k_off, l_off)
                hs, ws = _slice_args(k_off, l_off, ph, pw, stride)
                a_row = ad.reshape(a[:, hs, ws], (b, ph, pw, 1, 1, m))
                term_av6 = ad.reshape(ad.matmul(a_row, v6v), (b, ph, pw, t, 6))
                term_v = ad.reduce_sum(v6v[..., :3], axis=4)
                sum_av6 = term_av6 if sum_av6 is None else ad.add(sum_av6, term_av6)
                sum_v = term_v if sum_v is None else ad.add(sum_v, term_v)

    sum_a = ad.window_sum(ad.reduce_sum(a, axis=3), k, stride)           # [B,Ph,Pw]
    mean_v = ad.divide(sum_v, float(n_children))                         # [B,Ph,Pw,T,3]
    beta_a = layer.transform.beta_a
    beta_u = layer.transform.beta_u

    # iteration 0: responsibilities are uniform 1/T, so r' = a / T
    mass = ad.multiply(sum_a, 1.0 / t)                                   # [B,Ph,Pw]
    mass_col = ad.reshape(mass, (b, ph, pw, 1, 1))
    scaled = ad.multiply(sum_av6, 1.0 / t)
    mu, var, z = _moment_update(
        scaled[..., :3], scaled[..., 3:],
        mass_col, mean_v, beta_a, beta_u,
        em.iteration_lambda(0, layer.lam_base, layer.lam_growth),
    )

    for it in range(1, layer.iters):
        w1 = ad.divide(mu, var)                                          # [B,Ph,Pw,T,3]
        w2 = ad.divide(-0.5, var)
        gauss_const = ad.reduce_sum(
            ad.add(
                ad.multiply(ad.divide(ad.square(mu), var), 0.5),
                ad.multiply(ad.log(ad.multiply(var, 2.0 * np.pi)), 0.5),
            ),
            axis=-1,
        )                                                                # [B,Ph,Pw,T]
        w0 = ad.subtract(ad.log_sigmoid(z), gauss_const)
        w12c = ad.reshape(ad.concatenate([w1, w2], axis=-1), (b, ph, pw, t, 6, 1))
        w0c = ad.reshape(w0, (b, ph, pw, t, 1))

        sum_rv6 = sum_r = None
        for k_off in range(layer.k):
            for l_off in range(layer.k):
                vs6 = piece(k_off, l_off)
                logits = ad.add(
                    ad.reshape(ad.matmul(vs6, w12c), (b, ph, pw, t, m)), w0c
                )
                r = ad.softmax(logits, axis=3)                           # over parents
                hs, ws = _slice_args(k_off, l_off, ph, pw, stride)
                a_row = ad.reshape(a[:, hs, ws], (b, ph, pw, 1, 1, m))
                # fold child activations into the responsibilities so the
                # activation-weighted vote slices never materialize
                rra = ad.multiply(ad.reshape(r, (b, ph, pw, t, 1, m)), a_row)
                t_rv6 = ad.matmul(rra, vs6)                              # [B,Ph,Pw,T,1,6]
                t_r = ad.matmul(rra, ones_m)                             # [B,Ph,Pw,T,1,1]
                sum_rv6 = t_rv6 if sum_rv6 is None else ad.add(sum_rv6, t_rv6)
                sum_r = t_r if sum_r is None else ad.add(sum_r, t_r)

        mass_col = ad.reshape(sum_r, (b, ph, pw, t, 1))
        moments = ad.reshape(sum_rv6, (b, ph, pw, t, 6))
        mu, var, z = _moment_update(
            moments[..., :3], moments[..., 3:],
            mass_col, mean_v, beta_a, beta_u,
            em.iteration_lambda(it, layer.lam_base, layer.lam_growth),
        )

    act = ad.sigmoid(z)
    poses_out = ad.transpose(mu, (0, 3, 4, 1, 2))                        # [B,T,3,Ph,Pw]
    acts_out = ad.transpose(act, (0, 3, 1, 2))                           # [B,T,Ph,Pw]
    return CapsuleField(poses=poses_out, activations=acts_out)


def _moment_update(sum_wv, sum_wv2, mass_col, mean_v, beta_a, beta_u, lam):
    """Shared M-step arithmetic on accumulated weighted sums.

    sum_wv / sum_wv2: [B,Ph,Pw,T,3] weighted vote / squared-vote sums;
    mass_col: [B,Ph,Pw,T,1] or [B,Ph,Pw,1,1] raw responsibility mass.
    The variance comes from the expanded second moment
    sum w(V-mu)^2 = sum wV^2 - 2 mu sum wV + mu^2 sum w, which matches the
    direct form exactly in infinite precision and to ~1e-13 in float64.
    """
    denom = ad.add(mass_col, em.EPS_MASS)
    mu = ad.divide(ad.add(sum_wv, ad.multiply(mean_v, em.EPS_MASS)), denom)
    second = ad.add(
        ad.subtract(sum_wv2, ad.multiply(ad.multiply(mu, sum_wv), 2.0)),
        ad.multiply(ad.square(mu), mass_col),
    )
    var = ad.add(ad.divide(second, denom), em.EPS_VAR)
    cost = ad.multiply(
        ad.add(ad.reshape(beta_u, (-1, 1)), ad.multiply(ad.log(var), 0.5)),
        mass_col,
    )
    z = ad.multiply(
        ad.subtract(beta_a, ad.reduce_sum(cost, axis=-1)), lam
    )
    return mu, var, z


class ClassCapsLayer:
    """Fully connected head: every capsule at every position votes for
    every class; one routing pass over all children jointly."""

    def __init__(self, reg, name, t_in, n_classes, rng,
                 iters=2, lam_base=em.LAMBDA_BASE, lam_growth=em.LAMBDA_GROWTH,
                 coordinate_addition=False):
        self.transform = CapsuleTransform(reg, name, t_in, n_classes, rng)
        self.iters = iters
        self.lam_base = lam_base
        self.lam_growth = lam_growth
        self.coordinate_addition = coordinate_addition

    def __call__(self, field: CapsuleField):
        return class_capsule_layer(field, self)


def class_capsule_layer(field: CapsuleField, layer: ClassCapsLayer):
    """Returns (class activations [B, C], class poses [B, C, 3])."""
    b, m, _, h, w = field.poses.shape
    c = layer.transform.t_out
    u = ad.transpose(field.poses, (0, 3, 4, 1, 2))       # [B, H, W, M, 3]
    a = ad.transpose(field.activations, (0, 2, 3, 1))    # [B, H, W, M]
    rot = layer.transform.rotation_matrices()            # [M, C, 3, 3]
    uu = ad.reshape(u, (b, h, w, m, 1, 3, 1))
    votes = ad.reshape(ad.matmul(rot, uu), (b, h, w, m, c, 3))
    if layer.coordinate_addition:
        coords = np.zeros((1, h, w, 1, 1, 3), dtype=votes.dtype)
        coords[0, :, :, 0, 0, 0] = (np.arange(h, dtype=votes.dtype) / max(h, 1))[:, None]
        coords[0, :, :, 0, 0, 1] = (np.arange(w, dtype=votes.dtype) / max(w, 1))[None, :]
        votes = ad.add(votes, ad.constant(coords))
    votes_flat = ad.reshape(votes, (b, h * w * m, c, 3))
    acts_flat = ad.reshape(a, (b, h * w * m))
    mu, act = em.em_route_nodes(
        votes_flat, acts_flat, layer.transform.beta_a, layer.transform.beta_u,
        iters=layer.iters, lam_base=layer.lam_base, lam_growth=layer.lam_growth,
    )
    return act, mu
