"""Shared builders for random block weights."""

import numpy as np
import pytest

from hednet.blocks import (ConvNorm, DedBlockSpec, EncDecWeights,
                           ResidualWeights, SedBlockSpec)
from hednet.ops import ConvWeights, NormParams


def rand_norm(rng, c):
    return NormParams(rng.standard_normal(c) * 0.3 + 1.0,
                      rng.standard_normal(c) * 0.1,
                      rng.standard_normal(c) * 0.1,
                      rng.random(c) * 0.5 + 0.5)


def rand_convnorm(rng, k, c_in, c_out=None, scale=0.3, identity_norm=False):
    c_out = c_in if c_out is None else c_out
    norm = NormParams.identity(c_out) if identity_norm \
        else rand_norm(rng, c_out)
    return ConvNorm(ConvWeights(rng.standard_normal((k, c_in, c_out)) * scale),
                    norm)


def rand_res(rng, k, c, with_proj=False, identity_norm=False):
    proj = rand_convnorm(rng, 1, c, identity_norm=identity_norm) \
        if with_proj else None
    return ResidualWeights(rand_convnorm(rng, k, c, identity_norm=identity_norm),
                           rand_convnorm(rng, k, c, identity_norm=identity_norm),
                           proj)


def sed_weights(rng, spec: SedBlockSpec, identity_norm=False):
    k = 3 ** spec.ndim
    c = spec.channels
    stages = tuple(tuple(rand_res(rng, k, c, identity_norm=identity_norm)
                         for _ in range(spec.m))
                   for _ in range(spec.scales))
    downs = tuple(rand_convnorm(rng, spec.down_spec(i).num_offsets, c,
                                identity_norm=identity_norm)
                  for i in range(spec.scales - 1))
    ups = tuple(rand_convnorm(rng, spec.down_spec(i).num_offsets, c,
                              identity_norm=identity_norm)
                for i in range(spec.scales - 1))
    return EncDecWeights(stages, downs, ups)


def ded_weights(rng, spec: DedBlockSpec, identity_norm=False):
    c = spec.channels
    stages = tuple(tuple(rand_res(rng, 9, c, identity_norm=identity_norm)
                         for _ in range(spec.m))
                   for _ in range(spec.scales))
    downs = tuple(rand_res(rng, 9, c, with_proj=True,
                           identity_norm=identity_norm)
                  for _ in range(spec.scales - 1))
    ups = tuple(rand_convnorm(rng, 4, c, identity_norm=identity_norm)
                for _ in range(spec.scales - 1))
    return EncDecWeights(stages, downs, ups)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
