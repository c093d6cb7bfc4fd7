"""
The vision-language gate
========================

Per position and channel the gate mixes a squashed visual embedding with a
squashed word embedding. Moving the gate bias shifts the mix from text to
vision.
"""

import numpy as np

from vqla.model import ModelConfig, gate_values, gvle_fuse, init_params
from vqla.tensor import Tensor

cfg = ModelConfig(dim=8, depth=1, heads=1, text_len=6, visual="features", feature_len=6, feature_dim=4,
                  dtype="float64")
params = init_params(cfg, seed=0)
rng = np.random.default_rng(0)
f = Tensor(rng.normal(size=(1, 6, 8)))
e = Tensor(rng.normal(size=(1, 6, 8)))
visual = np.tanh(f.data @ params["gate.visual.w"].data)
text = np.tanh(e.data @ params["gate.text.w"].data)

for bias in (-30, -2, 0, 2, 30):
    params["gate.b"].data[...] = bias
    out = gvle_fuse(f, e, params).data
    w = gate_values(f, e, params).data
    print(f"bias {bias:+3d}: mean gate {w.mean():.3f}  |out-visual| {np.abs(out - visual).max():.2e}"
          f"  |out-text| {np.abs(out - text).max():.2e}")
