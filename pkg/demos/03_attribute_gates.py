"""
Attribute gates over a feature grid
===================================

The attribute head turns a [H, W, d] feature grid into S spatial gates
and S gated copies of the grid. Internally: a per-location two-layer
MLP scores c channels, the channel vector is L2-normalized per
location, and S groups of c/S channels are mean-reduced, rescaled to
unit variance, and pushed through a softplus into strictly positive
gates (saliency fields, not signed masks). Even untrained, the gates
span an order of magnitude across the grid; training shapes that
contrast instead of having to create it.

Here we fake a feature grid with two synthetic "parts" (a blob in the
top-left and one in the bottom-right) and show that the gates are (a)
spatially structured rather than flat, and (b) different from each
other, which is what the diversity loss later amplifies.
"""

import numpy as np

from attrvit.attributes import AttributeConfig, attribute_features, init_attribute_params
from attrvit.tensor import Tensor

rng = np.random.default_rng(1)
h = w = 8
d = 16

# Two bump patterns carried on disjoint channel halves.
yy, xx = np.mgrid[0:h, 0:w]
top_left = np.exp(-(((yy - 2) ** 2 + (xx - 2) ** 2) / 4.0))
bottom_right = np.exp(-(((yy - 5) ** 2 + (xx - 5) ** 2) / 4.0))

grid = rng.normal(scale=0.05, size=(h, w, d))
grid[..., : d // 2] += top_left[..., None]
grid[..., d // 2 :] += bottom_right[..., None]

cfg = AttributeConfig(hidden_dim=8, attributes=2)
params = init_attribute_params(d, cfg, rng)
out = attribute_features(Tensor(grid), params, cfg)

gates = out.gates.data  # [S, H, W]
print("gate shapes:", gates.shape, "gated feature shapes:", out.features.data.shape)
for s in range(cfg.attributes):
    g = gates[s]
    print(f"gate {s}: min={g.min():+.3f} max={g.max():+.3f} spread={g.std():.3f}")

corr = np.corrcoef(gates[0].ravel(), gates[1].ravel())[0, 1]
print(f"correlation between the two gates: {corr:+.3f}")

# The gated features are literally gate * grid, broadcast over channels.
manual = gates[0][..., None] * grid
print("broadcast identity holds:", np.allclose(manual, out.features.data[0]))
