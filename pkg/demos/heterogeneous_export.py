"""
Two different networks, one fusion module, one deployable branch
================================================================

Trains two independent sub-networks of different width and depth (their
last feature maps differ in channels and spatial size), then exports the
smaller one as a stand-alone network and checks it predicts exactly as it
did inside the ensemble.
"""

import tempfile
from pathlib import Path

import numpy as np

from ffl import Config, load_dataset, train
from ffl import checkpoint as ckpt_io
from ffl.model import feature_shapes
from ffl.nn import count_parameters
from ffl.tensor import Tensor
from ffl.trainer import evaluate, export_branch, restore_model

cfg = Config().override([
    "model.mode=case2",
    "model.branch_stages=[[8, 16, 32], [12, 24]]",  # 4x4x32 and 8x8x24 maps at 16x16 input
    "data.samples=1000",
    "data.test_samples=500",
    "train.epochs=3",
    "train.milestones=[2]",
])
out = Path(tempfile.mkdtemp(prefix="ffl-demo-"))
result = train(cfg, out_dir=out)
print("feature maps:", feature_shapes(result.model.ensemble, cfg.in_channels, cfg.image_size))
print(f"fused error {result.final.fused_err:.1f}%  branch errors {result.final.branch_err}")

# the 8x8 branch is strided down by a learned adapter before concatenation
print("adapters:", [type(a).__name__ for a in result.model.head.adapters])

# export branch 1 and compare logits on the test split
ckpt = ckpt_io.load_checkpoint(out / "final.ckpt")
ckpt_io.save_checkpoint(export_branch(ckpt, 1), out / "branch1.ckpt")
single, single_cfg = restore_model(ckpt_io.load_checkpoint(out / "branch1.ckpt"))
test = load_dataset(cfg.dataset_spec("test"))
x = Tensor(test.images)
inside = result.model.eval()(x).z[1].data
alone = single.eval()(x).z[0].data
print("bit-exact:", np.array_equal(inside, alone), " params:", count_parameters(single))
print(f"stand-alone error {evaluate(single, test).branch_err[0]:.1f}%")
