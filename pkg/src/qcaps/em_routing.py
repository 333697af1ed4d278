"""EM routing-by-agreement between capsule layers.

Votes from child capsules are clustered into parent poses by alternating
M- and E-steps; parent activations come from how cheaply (in Gaussian
description length) each parent explains its assigned votes.

Two implementations live here with identical arithmetic:

* ``m_step`` / ``e_step`` / ``em_route``: plain numpy on a single routing
  instance, the reference everything else is validated against;
* ``em_route_nodes``: the same recurrence built out of autodiff
  primitives, batched over leading axes, unrolling all iterations so
  gradients flow through the full recurrence.

Pinned constants: ``EPS_VAR`` floors the per-dimension variance,
``EPS_MASS`` is blended into the responsibility mass so the weighted mean
degrades to the unweighted vote mean when no child supports a parent. The
per-iteration inverse temperature is ``lam_base * (1 + lam_growth * t)``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

EPS_VAR = 1e-6
EPS_MASS = 1e-8
LAMBDA_BASE = 0.01
LAMBDA_GROWTH = 1.0


class EmptyChildren(ValueError):
    """Routing needs at least one child capsule."""


def iteration_lambda(t, lam_base=LAMBDA_BASE, lam_growth=LAMBDA_GROWTH):
    return lam_base * (1.0 + lam_growth * t)


def m_step(r, child_acts, votes, beta_a, beta_u, lam):
    """One M-step on a single routing instance.

    r: [N, J] responsibilities, child_acts: [N], votes: [N, J, H],
    beta_a/beta_u: [J]. Returns (mu [J, H], var [J, H], act [J]).

    The activation cost multiplies the raw (un-floored) mass, so parents
    with zero child support land exactly at sigmoid(lam * beta_a).
    """
    rp = r * child_acts[:, None]                        # [N, J]
    mass = rp.sum(axis=0)                               # [J]
    vote_mean = votes.mean(axis=0)                      # [J, H]
    mu = ((rp[:, :, None] * votes).sum(axis=0) + EPS_MASS * vote_mean) / (
        mass[:, None] + EPS_MASS
    )
    diff2 = (votes - mu[None]) ** 2
    var = (rp[:, :, None] * diff2).sum(axis=0) / (mass[:, None] + EPS_MASS) + EPS_VAR
    cost = (beta_u[:, None] + 0.5 * np.log(var)) * mass[:, None]
    act = _sigmoid(lam * (beta_a - cost.sum(axis=1)))
    return mu, var, act


def e_step(mu, var, act, votes):
    """Responsibilities from current parent Gaussians, in the log domain."""
    diff2 = (votes - mu[None]) ** 2                     # [N, J, H]
    logp = (-diff2 / (2.0 * var[None]) - 0.5 * np.log(2.0 * np.pi * var[None])).sum(axis=2)
    logits = np.log(np.maximum(act, 1e-300))[None] + logp
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def em_route(votes, child_acts, beta_a, beta_u, iters=2,
             lam_base=LAMBDA_BASE, lam_growth=LAMBDA_GROWTH):
    """Full routing pass: returns (parent poses [J, H], parent acts [J])."""
    votes = np.asarray(votes)
    if votes.ndim != 3 or votes.shape[0] == 0:
        raise EmptyChildren(f"votes must be [children, parents, dims], got {votes.shape}")
    if iters < 1:
        raise ValueError("need at least one routing iteration")
    n, j, _ = votes.shape
    child_acts = np.asarray(child_acts)
    r = np.full((n, j), 1.0 / j, dtype=votes.dtype)
    mu = var = act = None
    for t in range(iters):
        lam = iteration_lambda(t, lam_base, lam_growth)
        mu, var, act = m_step(r, child_acts, votes, beta_a, beta_u, lam)
        if t < iters - 1:
            r = e_step(mu, var, act, votes)
    return mu, act


def _sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# differentiable version
# ---------------------------------------------------------------------------

def em_route_nodes(votes, child_acts, beta_a, beta_u, iters=2,
                   lam_base=LAMBDA_BASE, lam_growth=LAMBDA_GROWTH):
    """Routing as an unrolled autodiff graph, batched over leading axes.

    votes: Node [..., N, J, H]; child_acts: Node [..., N];
    beta_a / beta_u: Node [J]. Returns (mu [..., J, H], act [..., J]).

    Materializes the [..., N, J, H] intermediates directly, which is the
    right trade for fully-connected layers and small test instances; the
    convolutional layers use a window-sliced formulation instead.
    """
    n, j, h = votes.shape[-3:]
    if n == 0:
        raise EmptyChildren("votes must have at least one child")
    lead = votes.shape[:-3]
    dtype = votes.dtype

    acts_col = ad.reshape(child_acts, lead + (n, 1))
    # log of the activation-scaled uniform start: r' = a_i / J
    rp = ad.multiply(acts_col, ad.constant(np.full((n, j), 1.0 / j, dtype=dtype)))
    mu = act = None
    z = None
    for t in range(iters):
        lam = iteration_lambda(t, lam_base, lam_growth)
        mu, var, act, z = _m_step_nodes(rp, votes, beta_a, beta_u, lam, lead, dtype)
        if t < iters - 1:
            r = _e_step_nodes(mu, var, z, votes)
            rp = ad.multiply(acts_col, r)
    return mu, act


def _m_step_nodes(rp, votes, beta_a, beta_u, lam, lead, dtype):
    """rp: [..., N, J]. Returns (mu, var, act, pre-sigmoid logit)."""
    mass = ad.reduce_sum(rp, axis=-2)                              # [..., J]
    vote_mean = ad.reduce_mean(votes, axis=-3)                     # [..., J, H]
    weighted = ad.reduce_sum(
        ad.multiply(ad.reshape(rp, rp.shape + (1,)), votes), axis=-3
    )                                                              # [..., J, H]
    denom = ad.reshape(mass, mass.shape + (1,)) + EPS_MASS
    mu = ad.divide(weighted + ad.multiply(vote_mean, EPS_MASS), denom)
    diff = ad.subtract(votes, ad.reshape(mu, lead + (1,) + mu.shape[len(lead):]))
    var = ad.divide(
        ad.reduce_sum(ad.multiply(ad.reshape(rp, rp.shape + (1,)), ad.square(diff)), axis=-3),
        denom,
    ) + EPS_VAR
    cost = ad.multiply(
        ad.add(ad.reshape(beta_u, (-1, 1)), ad.multiply(ad.log(var), 0.5)),
        ad.reshape(mass, mass.shape + (1,)),
    )
    z = ad.multiply(ad.subtract(beta_a, ad.reduce_sum(cost, axis=-1)), lam)
    return mu, var, ad.sigmoid(z), z


def _e_step_nodes(mu, var, z, votes):
    """Log-domain responsibilities; log(act) comes stably from the logit z."""
    lead_shape = mu.shape[:-2]
    mu_b = ad.reshape(mu, lead_shape + (1,) + mu.shape[len(lead_shape):])
    var_b = ad.reshape(var, lead_shape + (1,) + var.shape[len(lead_shape):])
    diff2 = ad.square(ad.subtract(votes, mu_b))
    logp = ad.reduce_sum(
        ad.subtract(
            ad.divide(diff2, ad.multiply(var_b, -2.0)),
            ad.multiply(ad.log(ad.multiply(var_b, 2.0 * np.pi)), 0.5),
        ),
        axis=-1,
    )                                                              # [..., N, J]
    log_act = ad.log_sigmoid(z)                                    # [..., J]
    logits = ad.add(ad.reshape(log_act, lead_shape + (1,) + log_act.shape[len(lead_shape):]), logp)
    return ad.softmax(logits, axis=-1)
