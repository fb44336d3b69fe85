"""
Fusing two sub-networks, step by step
=====================================

Builds a two-branch model, looks at the shapes flowing into the fusion
module, computes every loss term on one batch and takes one SGD step.
Runs in a few seconds.
"""

import numpy as np

from ffl import Config, iterate, load_dataset
from ffl.losses import total_loss
from ffl.model import feature_shapes
from ffl.nn import count_parameters
from ffl.trainer import SGD, build_model

# default config: 2 branches sharing a stem and the first two stages
cfg = Config()
model = build_model(cfg)
print("feature maps entering fusion:", feature_shapes(model.ensemble, cfg.in_channels, cfg.image_size))
print("fusion M, N:", model.head.cfg.M, model.head.cfg.N)
print("ensemble params:", count_parameters(model.ensemble), " fusion head params:", count_parameters(model.head))

# one batch from the synthetic blob task
batch = next(iterate(load_dataset(cfg.dataset_spec("train")), cfg.data.batch_size, shuffle=True))
logits = model.train()(batch.images)
print("branch logits:", [z.shape for z in logits.z], " fused logits:", logits.z_f.shape)

# the ensemble logit is the plain mean of the branch logits
np.testing.assert_allclose(logits.z_e.data, np.mean([z.data for z in logits.z], axis=0), atol=1e-6)

# cross-entropy on every classifier plus T^2-weighted ensemble->fused and fused->branch KL
bd = total_loss(logits, batch.onehot, cfg.distill_config())
print(f"ce branches {bd.ce_sub_sum:.4f}  ce fused {bd.ce_fused:.4f}  ekd {bd.ekd:.4f}  fkd {bd.fkd:.4f}")
print(f"total {bd.total:.4f}  (assembly gap {bd.identity_error():.1e})")

# one optimizer step moves the trunk, both branches and the fusion head together
before = model.state_dict()
opt = SGD(model.named_parameters(), lr=cfg.train.lr)
opt.zero_grad()
bd.loss.backward()
opt.step()
params = list(model.named_parameters())
moved = [n for n, p in params if not np.array_equal(before[n], p.data)]
print(f"{len(moved)} of {len(params)} parameters changed after one step")
