"""Full network assembly: branches, capsule stack, census, gradcheck prey.

One architecture serves every dataset; only the input channel count and
the class count change. The miniature variant exists so gradient checks
and CI can run the complete pipeline in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import capsule_layers as cl
from . import nn_blocks as nn


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 2
    input_size: int = 32
    num_classes: int = 5
    primary_types: int = 96
    pose_channels: tuple = (32, 64)
    act_channels: int = 32
    conv_caps: tuple = ((16, 5, 1), (16, 5, 1), (16, 5, 1))  # (types, kernel, stride)
    branched: bool = True
    routing_iters: int = 2
    lam_base: float = 0.01
    lam_growth: float = 1.0
    per_offset_rotors: bool = False
    coordinate_addition: bool = False


DATASET_CHANNELS = {
    "smallnorb": (2, 5),
    "mnist": (1, 10),
    "fashionmnist": (1, 10),
    "svhn": (3, 10),
    "cifar10": (3, 10),
    "synthetic": (1, 3),
}


def arch_for_dataset(name, **overrides):
    if name not in DATASET_CHANNELS:
        raise ValueError(f"unknown dataset {name!r}; pick one of {sorted(DATASET_CHANNELS)}")
    cin, classes = DATASET_CHANNELS[name]
    return replace(ArchSpec(), in_channels=cin, num_classes=classes, **overrides)


def miniature_arch(**overrides):
    """Tiny end-to-end network: 8x8 input, 4 primary types, one 2-type
    convolutional capsule layer, 3 classes."""
    base = ArchSpec(
        in_channels=1,
        input_size=8,
        num_classes=3,
        primary_types=4,
        pose_channels=(4, 8),
        act_channels=4,
        conv_caps=((2, 3, 1),),
    )
    return replace(base, **overrides)


class QuatCapsNet:
    """Pose/activation branches feeding a stack of routed capsule layers."""

    def __init__(self, arch: ArchSpec, seed=0, dtype=np.float32):
        self.arch = arch
        self.registry = nn.Registry(dtype=dtype)
        rng = np.random.default_rng(seed)
        reg = self.registry
        n = arch.primary_types
        if arch.branched:
            self.pose_branch = nn.PoseBranch(reg, "pose", arch.in_channels,
                                             arch.pose_channels, n, rng)
            self.act_branch = nn.ActivationBranch(reg, "act", arch.in_channels,
                                                  arch.act_channels, n, rng)
            self.trunk = None
        else:
            trunk_channels = (arch.pose_channels[1], n)
            self.trunk = nn.SharedTrunk(reg, "trunk", arch.in_channels,
                                        trunk_channels, n, rng)
        self.conv_caps = []
        t_in = n
        for i, (types, k, stride) in enumerate(arch.conv_caps, start=1):
            layer = cl.ConvCapsLayer(
                reg, f"caps{i}", t_in, types, k, stride, rng,
                iters=arch.routing_iters, lam_base=arch.lam_base,
                lam_growth=arch.lam_growth,
                per_offset_rotors=arch.per_offset_rotors,
            )
            self.conv_caps.append(layer)
            t_in = types
        self.class_caps = cl.ClassCapsLayer(
            reg, "class", t_in, arch.num_classes, rng,
            iters=arch.routing_iters, lam_base=arch.lam_base,
            lam_growth=arch.lam_growth,
            coordinate_addition=arch.coordinate_addition,
        )

    def primary_field(self, images, train):
        x = images if isinstance(images, ad.Node) else ad.constant(
            np.asarray(images, dtype=self.registry.dtype)
        )
        if self.trunk is not None:
            return nn.assemble_primary_capsules(self.trunk(x, train))
        branches = nn.BranchOutput(
            pose=self.pose_branch(x, train),
            activation=self.act_branch(x, train),
        )
        return nn.assemble_primary_capsules(branches)

    def forward(self, images, train=False, return_fields=False):
        """Class activations [B, C] and class poses [B, C, 3]."""
        field_ = self.primary_field(images, train)
        fields = [field_]
        for layer in self.conv_caps:
            field_ = layer(field_)
            fields.append(field_)
        acts, poses = self.class_caps(field_)
        if return_fields:
            return acts, poses, fields
        return acts, poses

    # -- bookkeeping -------------------------------------------------------

    def parameters(self):
        return list(self.registry.params.values())

    def parameter_count(self):
        """Census of trainable parameters grouped by top-level module."""
        groups = {}
        for name, p in self.registry.params.items():
            if not p.trainable:
                continue
            groups.setdefault(name.split(".")[0], 0)
            groups[name.split(".")[0]] += p.value.size
        total = sum(groups.values())
        transform_pairs = 0
        for layer in self.conv_caps:
            tf = layer.transform
            transform_pairs += tf.theta.value.size
        transform_pairs += self.class_caps.transform.theta.value.size
        report = {
            "modules": dict(sorted(groups.items())),
            "total": int(total),
            "transform_pairs": int(transform_pairs),
            "rotor_transform_params": int(transform_pairs * 4),
            "matrix_transform_params": int(transform_pairs * 16),
            "transform_param_ratio": 4 / 16,
        }
        return report


def init_parameters(arch: ArchSpec, seed=0, dtype=np.float32) -> QuatCapsNet:
    """Freshly initialized model; bit-identical for a fixed seed."""
    return QuatCapsNet(arch, seed=seed, dtype=dtype)
