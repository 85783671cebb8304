"""
One ambiguity-eliminator block
==============================

The block pools a query foreground prototype with attention weights taken
from a discriminative mask, mixes it with the support prototype, and adds
the result to every pixel of both feature streams.
"""

import numpy as np

from aenet import tensorcore as tc
from aenet.ae import AEBlock, ae_forward
from aenet.synth import GeneratorConfig, draw_episode

rng = np.random.default_rng(0)
cfg = GeneratorConfig(C=16, H=16, W=16, sigma=2.0, noise_std=0.05)
ep = draw_episode(cfg, "novel", 3)
sup = ep.supports[0]

block = AEBlock.init(rng, cfg.C)
out = ae_forward(block, ep.query_feat, sup.feat, sup.mask)

print("mixing weight alpha:", round(out.alpha.item(), 4))
print("attention weights sum to", out.weights.value.sum())

# the block's discriminative mask lives on the query grid
disc = out.m_disc.value.reshape(cfg.H, cfg.W)
print("disc mask range", disc.min(), disc.max())

# an identity-initialised block leaves both streams untouched
quiet = AEBlock.init(rng, cfg.C, identity=True)
same = ae_forward(quiet, ep.query_feat, sup.feat, sup.mask)
print("identity block changes query by", np.abs(same.f_q.value - ep.query_feat).max())

# gradients reach every parameter of the block
loss = tc.add(tc.sum(tc.mul(out.f_q, out.f_q)), tc.sum(tc.mul(out.f_s, out.f_s)))
loss.backward()
print("params with nonzero grad:", sum(bool(np.any(p.grad)) for p in block.params()), "of", len(block.params()))
