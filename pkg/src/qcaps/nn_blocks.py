"""Convolutional building blocks and the two primary-capsule branches.

The pose branch and the activation branch are fully isolated sub-networks
that produce spatially aligned grids: one carrying the three imaginary
components of each primary capsule's pose, the other its existence
probability. Keeping strides and kernel sizes coherent between the two is
what guarantees the alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .capsule_layers import AlignmentError, CapsuleField

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # fraction of the running statistic kept per update


class Registry:
    """Central store for a model's parameters and persistent state arrays.

    Parameter names are unique; state arrays (batch-norm running
    statistics) live alongside so checkpoints capture the whole model.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, ad.Parameter] = {}
        self.state: dict[str, np.ndarray] = {}

    def parameter(self, name, value, trainable=True):
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = ad.Parameter(np.asarray(value, dtype=self.dtype), name=name, trainable=trainable)
        self.params[name] = p
        return p

    def buffer(self, name, value):
        if name in self.state:
            raise ValueError(f"duplicate state name: {name}")
        arr = np.asarray(value, dtype=self.dtype)
        self.state[name] = arr
        return arr

    def trainable(self):
        return [p for p in self.params.values() if p.trainable]


def kaiming_uniform(rng, shape, fan_in):
    """Uniform fill on +-sqrt(6/fan_in), the relu-gain bound."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv:
    """Bias-free 2-D cross-correlation; batch norm supplies the shift."""

    def __init__(self, reg, name, cin, cout, k, stride, padding, rng, init="kaiming"):
        shape = (cout, cin, k, k)
        fan_in = cin * k * k
        if init == "kaiming":
            w = kaiming_uniform(rng, shape, fan_in)
        else:
            w = xavier_uniform(rng, shape, fan_in, cout * k * k)
        self.w = reg.parameter(f"{name}.w", w)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, stride=self.stride, padding=self.padding)


class BatchNorm:
    """Per-channel batch normalization over [B, C, H, W].

    Training mode normalizes with batch statistics and folds them into the
    running estimates; inference mode uses the running estimates. The
    running variance stores the same biased batch variance used for
    normalization, so inference reproduces training output exactly when
    the statistics agree.
    """

    def __init__(self, reg, name, channels):
        self.scale = reg.parameter(f"{name}.scale", np.ones(channels))
        self.shift = reg.parameter(f"{name}.shift", np.zeros(channels))
        self.running_mean = reg.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = reg.buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x, train):
        c = x.shape[1]
        shape = (1, c, 1, 1)
        if train:
            mean = ad.reduce_mean(x, axis=(0, 2, 3), keepdims=True)
            var = ad.reduce_mean(ad.square(ad.subtract(x, mean)), axis=(0, 2, 3), keepdims=True)
            m = BN_MOMENTUM
            self.running_mean *= m
            self.running_mean += (1.0 - m) * mean.value.reshape(-1)
            self.running_var *= m
            self.running_var += (1.0 - m) * var.value.reshape(-1)
        else:
            mean = ad.constant(self.running_mean.reshape(shape))
            var = ad.constant(self.running_var.reshape(shape))
        norm = ad.divide(ad.subtract(x, mean), ad.sqrt(var + BN_EPS))
        return ad.add(
            ad.multiply(norm, ad.reshape(self.scale, shape)),
            ad.reshape(self.shift, shape),
        )


class ResidualBlock:
    """conv3x3(s) -> bn -> relu -> conv3x3(1) -> bn, plus a strided 1x1
    projection skip; the sum passes through a final relu. Same padding
    throughout, so spatial extent shrinks only by the stride."""

    def __init__(self, reg, name, cin, cout, stride, rng):
        self.conv1 = Conv(reg, f"{name}.conv1", cin, cout, 3, stride, 1, rng)
        self.bn1 = BatchNorm(reg, f"{name}.bn1", cout)
        self.conv2 = Conv(reg, f"{name}.conv2", cout, cout, 3, 1, 1, rng)
        self.bn2 = BatchNorm(reg, f"{name}.bn2", cout)
        self.skip = Conv(reg, f"{name}.skip", cin, cout, 1, stride, 0, rng)
        self.bn_skip = BatchNorm(reg, f"{name}.bn_skip", cout)

    def __call__(self, x, train):
        main = self.bn1(self.conv1(x), train)
        main = self.bn2(self.conv2(ad.relu(main)), train)
        shortcut = self.bn_skip(self.skip(x), train)
        return ad.relu(ad.add(main, shortcut))


# ---------------------------------------------------------------------------
# branches
# ---------------------------------------------------------------------------

@dataclass
class BranchOutput:
    """Spatially aligned pose and activation grids for primary capsules."""

    pose: ad.Node        # [B, N, 3, H, W]
    activation: ad.Node  # [B, N, H, W]


class PoseBranch:
    """Two residual blocks, then 1x1 conv to N*3 channels and batch norm."""

    def __init__(self, reg, name, cin, channels, types, rng):
        c1, c2 = channels
        self.block1 = ResidualBlock(reg, f"{name}.block1", cin, c1, 1, rng)
        self.block2 = ResidualBlock(reg, f"{name}.block2", c1, c2, 2, rng)
        self.head = Conv(reg, f"{name}.head", c2, types * 3, 1, 1, 0, rng, init="xavier")
        self.bn = BatchNorm(reg, f"{name}.bn", types * 3)
        self.types = types

    def __call__(self, x, train):
        h = self.block2(self.block1(x, train), train)
        h = self.bn(self.head(h), train)
        b, _, hh, ww = h.shape
        return ad.reshape(h, (b, self.types, 3, hh, ww))


class ActivationBranch:
    """One stride-2 residual block, 1x1 conv to N channels, bn, sigmoid."""

    def __init__(self, reg, name, cin, channels, types, rng):
        self.block = ResidualBlock(reg, f"{name}.block", cin, channels, 2, rng)
        self.head = Conv(reg, f"{name}.head", channels, types, 1, 1, 0, rng, init="xavier")
        self.bn = BatchNorm(reg, f"{name}.bn", types)

    def __call__(self, x, train):
        h = self.block(x, train)
        return ad.sigmoid(self.bn(self.head(h), train))


class SharedTrunk:
    """Non-branched variant: one trunk of two residual blocks feeding both
    the pose head and the activation head."""

    def __init__(self, reg, name, cin, channels, types, rng):
        c1, c2 = channels
        self.block1 = ResidualBlock(reg, f"{name}.block1", cin, c1, 1, rng)
        self.block2 = ResidualBlock(reg, f"{name}.block2", c1, c2, 2, rng)
        self.pose_head = Conv(reg, f"{name}.pose_head", c2, types * 3, 1, 1, 0, rng, init="xavier")
        self.pose_bn = BatchNorm(reg, f"{name}.pose_bn", types * 3)
        self.act_head = Conv(reg, f"{name}.act_head", c2, types, 1, 1, 0, rng, init="xavier")
        self.act_bn = BatchNorm(reg, f"{name}.act_bn", types)
        self.types = types

    def __call__(self, x, train):
        h = self.block2(self.block1(x, train), train)
        pose = self.pose_bn(self.pose_head(h), train)
        b, _, hh, ww = pose.shape
        pose = ad.reshape(pose, (b, self.types, 3, hh, ww))
        act = ad.sigmoid(self.act_bn(self.act_head(h), train))
        return BranchOutput(pose=pose, activation=act)


def assemble_primary_capsules(branches: BranchOutput) -> CapsuleField:
    """Group the aligned grids into one capsule field."""
    pb, pt, _, ph, pw = branches.pose.shape
    ab, at, ah, aw = branches.activation.shape
    if (pb, pt, ph, pw) != (ab, at, ah, aw):
        raise AlignmentError(
            f"pose grid {branches.pose.shape} does not align with "
            f"activation grid {branches.activation.shape}"
        )
    return CapsuleField(poses=branches.pose, activations=branches.activation)
