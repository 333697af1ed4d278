"""End-to-end gradient verification harness.

Three targets, from narrow to broad: the rotor rotation block in
isolation, routing unrolled for two iterations, and the miniature
network through its loss. All run in float64; each row reports the worst
relative disagreement between reverse mode and central differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import capsule_layers as cl
from . import em_routing as em
from . import model as qmodel
from . import objective as obj
from .nn_blocks import Registry

DEFAULT_TOLERANCES = {
    "rotor_rotation": 1e-6,
    "em_routing_unrolled": 1e-4,
    "miniature_network": 1e-4,
}


def check_rotor_rotation(seed=0):
    """Norm of rotated poses differentiated w.r.t. rotor angle and axis."""
    rng = np.random.default_rng(seed)
    reg = Registry(dtype=np.float64)
    tf = cl.CapsuleTransform(reg, "tf", 3, 4, rng)
    poses = reg.parameter("poses", rng.normal(size=(5, 1, 1, 3, 1)))

    def build():
        rot = tf.rotation_matrices()            # [3, 4, 3, 3]
        votes = ad.matmul(rot, poses)           # broadcast -> [5, 3, 4, 3, 1]
        return ad.reduce_sum(ad.sqrt(ad.reduce_sum(ad.square(votes), axis=-2) + 1e-9))

    return ad.finite_difference_check(build, [tf.theta, tf.axis, poses])


def check_em_routing(seed=0, iters=2):
    rng = np.random.default_rng(seed)
    votes = ad.Parameter(rng.normal(size=(6, 3, 3)), name="votes")
    acts = ad.Parameter(rng.uniform(0.2, 0.9, size=6), name="acts")
    beta_a = ad.Parameter(rng.normal(size=3), name="beta_a")
    beta_u = ad.Parameter(rng.normal(scale=0.3, size=3), name="beta_u")

    def build():
        mu, act = em.em_route_nodes(votes, acts, beta_a, beta_u, iters=iters)
        return ad.add(ad.reduce_sum(ad.square(mu)), ad.reduce_sum(ad.square(act)))

    return ad.finite_difference_check(build, [votes, acts, beta_a, beta_u])


def check_miniature_network(seed=0, coords_per_param=6):
    net = qmodel.init_parameters(qmodel.miniature_arch(), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    images = rng.normal(size=(2, 1, 8, 8))
    labels = np.array([0, 2])

    def build():
        acts, _ = net.forward(images, train=False)
        return obj.spread_loss_nodes(acts, labels, 0.4)

    return ad.finite_difference_check(
        build, net.registry.trainable(), max_coords_per_param=coords_per_param,
        seed=seed,
    )


def run_gradcheck(tolerances=None, seed=0, negate_component=None):
    """All three checks as report rows: (name, max relative error,
    tolerance, passed). ``negate_component`` deliberately corrupts one
    result so callers can verify failures are surfaced, not swallowed."""
    tol = dict(DEFAULT_TOLERANCES)
    if tolerances:
        tol.update(tolerances)
    results = {
        "rotor_rotation": check_rotor_rotation(seed),
        "em_routing_unrolled": check_em_routing(seed),
        "miniature_network": check_miniature_network(seed),
    }
    if negate_component:
        results[negate_component] = 1.0
    rows = []
    for name, err in results.items():
        rows.append({
            "component": name,
            "max_rel_error": float(err),
            "tolerance": tol[name],
            "passed": bool(err <= tol[name]),
        })
    return rows
