"""Capsule layer tests: windowing, vote contracts, fast-vs-reference
routing equivalence, and gradient flow through a full layer."""

import numpy as np
import pytest

from qcaps import autodiff as ad
from qcaps import capsule_layers as cl
from qcaps import em_routing as em
from qcaps import quat
from qcaps.nn_blocks import Registry


def make_field(rng, b=2, m=3, h=7, w=7, dtype=np.float64):
    poses = rng.normal(size=(b, m, 3, h, w)).astype(dtype)
    acts = rng.uniform(0.05, 1.0, size=(b, m, h, w)).astype(dtype)
    return poses, acts


def field_nodes(poses, acts):
    return cl.CapsuleField(poses=ad.constant(poses), activations=ad.constant(acts))


def make_conv_layer(reg_dtype, t_in, t_out, k, stride, seed, per_offset=False, iters=2):
    reg = Registry(dtype=reg_dtype)
    rng = np.random.default_rng(seed)
    layer = cl.ConvCapsLayer(
        reg, "caps", t_in, t_out, k, stride, rng,
        iters=iters, per_offset_rotors=per_offset,
    )
    return reg, layer


# ---------------------------------------------------------------------------
# receptive fields
# ---------------------------------------------------------------------------

def test_window_arithmetic():
    rng = np.random.default_rng(0)
    poses, acts = make_field(rng, b=1, m=2, h=16, w=16)
    wp, wa = cl.extract_receptive_fields(poses, acts, 5, 1)
    assert wp.shape == (1, 12, 12, 5 * 5 * 2, 3)
    assert wa.shape == (1, 12, 12, 50)
    # the chain used by the pinned architecture: 16 -> 12 -> 8 -> 4
    for size, expect in [(16, 12), (12, 8), (8, 4)]:
        p2, a2 = make_field(rng, b=1, m=1, h=size, w=size)
        wp2, _ = cl.extract_receptive_fields(p2, a2, 5, 1)
        assert wp2.shape[1] == expect


def test_window_identity_for_k1():
    rng = np.random.default_rng(1)
    poses, acts = make_field(rng, b=1, m=2, h=3, w=3)
    wp, wa = cl.extract_receptive_fields(poses, acts, 1, 1)
    np.testing.assert_array_equal(wp[0, :, :, 0], poses[0, 0].transpose(1, 2, 0))
    np.testing.assert_array_equal(wa[0, :, :, 1], acts[0, 1])


def test_window_child_ordering_row_col_type():
    # field whose pose value encodes (h, w, type) so ordering is visible
    m, h, w = 2, 3, 3
    poses = np.zeros((1, m, 3, h, w))
    for t in range(m):
        for i in range(h):
            for j in range(w):
                poses[0, t, :, i, j] = [i, j, t]
    acts = np.ones((1, m, h, w))
    wp, _ = cl.extract_receptive_fields(poses, acts, 2, 1)
    # child index c = (row * k + col) * m + t
    np.testing.assert_array_equal(wp[0, 0, 0, 0], [0, 0, 0])
    np.testing.assert_array_equal(wp[0, 0, 0, 1], [0, 0, 1])
    np.testing.assert_array_equal(wp[0, 0, 0, 2], [0, 1, 0])
    np.testing.assert_array_equal(wp[0, 0, 0, 4], [1, 0, 0])
    np.testing.assert_array_equal(wp[0, 1, 1, 7], [2, 2, 1])


def test_field_too_small():
    rng = np.random.default_rng(2)
    poses, acts = make_field(rng, h=3, w=3)
    with pytest.raises(cl.FieldTooSmall):
        cl.extract_receptive_fields(poses, acts, 5, 1)


# ---------------------------------------------------------------------------
# votes
# ---------------------------------------------------------------------------

def test_identity_rotors_copy_poses():
    rng = np.random.default_rng(3)
    poses, acts = make_field(rng, b=1, m=2, h=4, w=4)
    wp, _ = cl.extract_receptive_fields(poses, acts, 3, 1)
    theta = np.zeros((2, 4))
    axis = rng.uniform(-1, 1, size=(2, 4, 3))
    votes = cl.compute_votes(wp, theta, axis)
    for t in range(4):
        np.testing.assert_allclose(votes[..., t, :], wp, atol=1e-12)


def test_vote_matches_quat_rotation():
    wp = np.zeros((1, 1, 1, 1, 3))
    wp[0, 0, 0, 0] = [1.0, 0.0, 0.0]
    votes = cl.compute_votes(wp, np.array([[np.pi / 4]]), np.array([[[0.0, 0.0, 1.0]]]))
    np.testing.assert_allclose(votes[0, 0, 0, 0, 0], [0, 1, 0], atol=1e-12)


def test_vote_norm_preservation():
    rng = np.random.default_rng(4)
    poses, acts = make_field(rng, b=2, m=3, h=5, w=5, dtype=np.float32)
    wp, _ = cl.extract_receptive_fields(poses, acts, 3, 1)
    theta = rng.uniform(-np.pi, np.pi, size=(3, 4)).astype(np.float32)
    axis = rng.uniform(-1, 1, size=(3, 4, 3)).astype(np.float32)
    votes = cl.compute_votes(wp, theta, axis)
    vote_norms = np.linalg.norm(votes, axis=-1)
    child_norms = np.linalg.norm(wp, axis=-1)[..., None]
    assert np.max(np.abs(vote_norms - child_norms)) <= 1e-5


def test_graph_votes_match_reference_operator():
    """The layer's 3x3 rotation block equals the 4x4 operator on pure poses."""
    rng = np.random.default_rng(5)
    reg = Registry(dtype=np.float64)
    tf = cl.CapsuleTransform(reg, "tf", 3, 4, rng)
    poses, acts = make_field(rng, b=1, m=3, h=4, w=4)
    wp, _ = cl.extract_receptive_fields(poses, acts, 4, 1)  # single window
    ref = cl.compute_votes(wp, tf.theta.value, tf.axis.value)[0, 0, 0]  # [C, T, 3]

    rot = tf.rotation_matrices()  # [M, T, 3, 3] graph node
    u = wp[0, 0, 0].reshape(4, 4, 3, 3)  # [k, k, M, 3]
    got = np.einsum("mtij,klmj->klmti", rot.value, u).reshape(-1, 4, 3)
    assert np.max(np.abs(got - ref)) <= 1e-12


def test_degenerate_axis_propagates():
    rng = np.random.default_rng(6)
    reg = Registry(dtype=np.float64)
    tf = cl.CapsuleTransform(reg, "tf", 2, 2, rng)
    tf.axis.value[0, 0] = 0.0
    with pytest.raises(quat.DegenerateAxis):
        tf.rotation_matrices()


# ---------------------------------------------------------------------------
# conv capsule layer
# ---------------------------------------------------------------------------

def run_fast_layer(poses, acts, layer):
    out = cl.conv_capsule_layer(field_nodes(poses, acts), layer)
    return out.poses.value, out.activations.value


def transform_values(layer):
    tf = layer.transform
    return {
        "theta": tf.theta.value, "axis": tf.axis.value,
        "beta_a": tf.beta_a.value, "beta_u": tf.beta_u.value,
    }


@pytest.mark.parametrize("stride", [1, 2])
def test_fast_layer_matches_reference(stride):
    rng = np.random.default_rng(7)
    poses, acts = make_field(rng, b=2, m=3, h=7, w=7)
    _, layer = make_conv_layer(np.float64, 3, 4, 3, stride, seed=11)
    got_p, got_a = run_fast_layer(poses, acts, layer)
    exp_p, exp_a = cl.conv_capsule_layer_reference(
        poses, acts, transform_values(layer), 3, stride, iters=2
    )
    np.testing.assert_allclose(got_p, exp_p, atol=1e-9)
    np.testing.assert_allclose(got_a, exp_a, atol=1e-9)


def test_fast_layer_matches_reference_three_iters():
    rng = np.random.default_rng(8)
    poses, acts = make_field(rng, b=1, m=2, h=6, w=6)
    _, layer = make_conv_layer(np.float64, 2, 3, 3, 1, seed=12, iters=3)
    got_p, got_a = run_fast_layer(poses, acts, layer)
    exp_p, exp_a = cl.conv_capsule_layer_reference(
        poses, acts, transform_values(layer), 3, 1, iters=3
    )
    np.testing.assert_allclose(got_p, exp_p, atol=1e-9)
    np.testing.assert_allclose(got_a, exp_a, atol=1e-9)


def test_fast_layer_per_offset_rotors_match_reference():
    rng = np.random.default_rng(9)
    poses, acts = make_field(rng, b=1, m=2, h=5, w=5)
    _, layer = make_conv_layer(np.float64, 2, 3, 3, 1, seed=13, per_offset=True)
    got_p, got_a = run_fast_layer(poses, acts, layer)
    exp_p, exp_a = cl.conv_capsule_layer_reference(
        poses, acts, transform_values(layer), 3, 1, iters=2
    )
    np.testing.assert_allclose(got_p, exp_p, atol=1e-9)
    np.testing.assert_allclose(got_a, exp_a, atol=1e-9)


def test_identity_rotors_all_children_same_pose():
    rng = np.random.default_rng(10)
    b, m, h, w = 1, 3, 5, 5
    pose = np.array([0.4, -0.2, 0.9])
    poses = np.tile(pose[None, None, :, None, None], (b, m, 1, h, w))
    acts = np.ones((b, m, h, w))
    _, layer = make_conv_layer(np.float64, m, 2, 5, 1, seed=14)
    layer.transform.theta.value[:] = 0.0
    out_p, _ = run_fast_layer(poses, acts, layer)
    for t in range(2):
        np.testing.assert_allclose(out_p[0, t, :, 0, 0], pose, atol=1e-9)


def test_zero_child_acts_cap_parent_activation():
    rng = np.random.default_rng(11)
    poses, _ = make_field(rng, b=1, m=2, h=5, w=5)
    acts = np.zeros((1, 2, 5, 5))
    _, layer = make_conv_layer(np.float64, 2, 3, 5, 1, seed=15)
    _, out_a = run_fast_layer(poses, acts, layer)
    lam = em.iteration_lambda(1)
    bound = 1.0 / (1.0 + np.exp(-lam * layer.transform.beta_a.value))
    assert np.all(out_a <= bound[None, :, None, None] + 1e-12)


def test_layer_outputs_in_range_and_finite():
    rng = np.random.default_rng(12)
    for trial in range(100):
        b = int(rng.integers(1, 3))
        m = int(rng.integers(1, 4))
        h = int(rng.integers(3, 6))
        _, layer = make_conv_layer(np.float32, m, 2, 3, 1, seed=100 + trial)
        poses, acts = make_field(rng, b=b, m=m, h=h, w=h, dtype=np.float32)
        out_p, out_a = run_fast_layer(poses, acts, layer)
        assert np.all(np.isfinite(out_p))
        assert np.all(out_a >= 0) and np.all(out_a <= 1)


def test_child_permutation_with_rotor_reindexing_is_equivariant():
    rng = np.random.default_rng(13)
    poses, acts = make_field(rng, b=1, m=4, h=3, w=3)
    _, layer = make_conv_layer(np.float64, 4, 2, 3, 1, seed=16)
    base_p, base_a = run_fast_layer(poses, acts, layer)

    perm = rng.permutation(4)
    _, layer2 = make_conv_layer(np.float64, 4, 2, 3, 1, seed=17)
    layer2.transform.theta.value[:] = layer.transform.theta.value[perm]
    layer2.transform.axis.value[:] = layer.transform.axis.value[perm]
    layer2.transform.beta_a.value[:] = layer.transform.beta_a.value
    layer2.transform.beta_u.value[:] = layer.transform.beta_u.value
    got_p, got_a = run_fast_layer(poses[:, perm], acts[:, perm], layer2)
    np.testing.assert_allclose(got_p, base_p, atol=1e-10)
    np.testing.assert_allclose(got_a, base_a, atol=1e-10)


def test_float32_layer_tracks_float64_reference():
    rng = np.random.default_rng(19)
    poses, acts = make_field(rng, b=1, m=3, h=6, w=6, dtype=np.float32)
    _, layer32 = make_conv_layer(np.float32, 3, 4, 3, 1, seed=23)
    got_p, got_a = run_fast_layer(poses, acts, layer32)
    exp_p, exp_a = cl.conv_capsule_layer_reference(
        poses.astype(np.float64), acts.astype(np.float64),
        {k: v.astype(np.float64) for k, v in transform_values(layer32).items()},
        3, 1, iters=2,
    )
    np.testing.assert_allclose(got_p, exp_p, atol=2e-4)
    np.testing.assert_allclose(got_a, exp_a, atol=2e-4)


def test_conv_layer_gradients():
    rng = np.random.default_rng(14)
    reg, layer = make_conv_layer(np.float64, 2, 2, 3, 1, seed=18)
    poses, acts = make_field(rng, b=1, m=2, h=4, w=4)
    pose_p = reg.parameter("in.poses", poses)
    act_p = reg.parameter("in.acts", acts)

    def build():
        field = cl.CapsuleField(poses=pose_p, activations=act_p)
        out = cl.conv_capsule_layer(field, layer)
        return ad.reduce_sum(ad.square(out.poses)) + ad.reduce_sum(ad.square(out.activations))

    err = ad.finite_difference_check(build, reg.trainable(), max_coords_per_param=24)
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# class capsule layer
# ---------------------------------------------------------------------------

def make_class_layer(t_in, n_classes, seed, coordinate_addition=False):
    reg = Registry(dtype=np.float64)
    rng = np.random.default_rng(seed)
    layer = cl.ClassCapsLayer(
        reg, "cls", t_in, n_classes, rng, coordinate_addition=coordinate_addition
    )
    return reg, layer


def test_class_layer_shapes():
    rng = np.random.default_rng(15)
    poses, acts = make_field(rng, b=2, m=16, h=4, w=4)
    _, layer = make_class_layer(16, 5, seed=19)
    act, mu = cl.class_capsule_layer(field_nodes(poses, acts), layer)
    assert act.value.shape == (2, 5)
    assert mu.value.shape == (2, 5, 3)


def test_class_layer_matches_reference_routing():
    rng = np.random.default_rng(16)
    poses, acts = make_field(rng, b=1, m=3, h=2, w=2)
    _, layer = make_class_layer(3, 4, seed=20)
    act, mu = cl.class_capsule_layer(field_nodes(poses, acts), layer)

    wp = poses.transpose(0, 3, 4, 1, 2).reshape(1, 1, 1, -1, 3)
    votes = cl.compute_votes(wp, layer.transform.theta.value, layer.transform.axis.value)
    exp_mu, exp_act = em.em_route(
        votes[0, 0, 0], acts.transpose(0, 2, 3, 1).reshape(-1),
        layer.transform.beta_a.value, layer.transform.beta_u.value, iters=2,
    )
    np.testing.assert_allclose(act.value[0], exp_act, atol=1e-10)
    np.testing.assert_allclose(mu.value[0], exp_mu, atol=1e-10)


def test_class_layer_position_permutation_invariance():
    rng = np.random.default_rng(17)
    b, m, h, w = 1, 4, 3, 3
    # identical content at every position: any spatial shuffle is a no-op
    cell_p = rng.normal(size=(m, 3))
    cell_a = rng.uniform(0.2, 1.0, size=m)
    poses = np.tile(cell_p[None, :, :, None, None], (b, 1, 1, h, w))
    acts = np.tile(cell_a[None, :, None, None], (b, 1, h, w))
    _, layer = make_class_layer(4, 3, seed=21)
    act1, _ = cl.class_capsule_layer(field_nodes(poses, acts), layer)

    perm = rng.permutation(h * w)
    poses2 = poses.reshape(b, m, 3, h * w)[:, :, :, perm].reshape(b, m, 3, h, w)
    acts2 = acts.reshape(b, m, h * w)[:, :, perm].reshape(b, m, h, w)
    act2, _ = cl.class_capsule_layer(field_nodes(poses2, acts2), layer)
    np.testing.assert_allclose(act1.value, act2.value, atol=1e-12)


def test_coordinate_addition_changes_votes_only_when_enabled():
    rng = np.random.default_rng(18)
    poses, acts = make_field(rng, b=1, m=2, h=3, w=3)
    _, plain = make_class_layer(2, 3, seed=22)
    _, coord = make_class_layer(2, 3, seed=22, coordinate_addition=True)
    a1, _ = cl.class_capsule_layer(field_nodes(poses, acts), plain)
    a2, _ = cl.class_capsule_layer(field_nodes(poses, acts), coord)
    assert not np.allclose(a1.value, a2.value)
