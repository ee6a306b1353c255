"""Inside the two feature extractors.

Runs a toy batch through both backbones, then opens up the windowed
attention machinery: the window partition, the cyclic shift, and the region
mask that keeps shifted windows from attending across pre-shift seams.
"""

import numpy as np

from dualstage import fusion, swin, vit
from dualstage.tensor import Tensor

model = fusion.build_model(vit.ViTConfig(), swin.SwinConfig(), seed=0, dtype=np.float32)
images = Tensor(np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32))

f_v = vit.vit_forward(images, model.vit, model.vit_config)
f_s = swin.swin_forward(images, model.swin, model.swin_config)
print("first-stage features :", f_v.data.shape)   # (2, 32)
print("second-stage features:", f_s.data.shape)   # (2, 48)
logits = fusion.forward(images, model)
print("fused logits         :", logits.data.shape, f"({len(model.vocabulary)} labels)")

# --- patch grid and windows ---------------------------------------------------
grid = Tensor(np.arange(64, dtype=np.float64).reshape(8, 8, 1))
windows = swin.window_partition(grid, 4)
print("\n8x8 grid -> windows  :", windows.data.shape, "(4 windows of 16 tokens)")
print("window 0 token ids   :", windows.data[0, :, 0].astype(int).tolist())

rolled = swin.cyclic_shift(grid, 2)
print("after cyclic shift 2 :", rolled.data[:3, :3, 0].astype(int).tolist())

# --- the shift mask -----------------------------------------------------------
mask = swin.build_shift_mask(8, 4, 2)
print("\nshift mask           :", mask.data.shape, "entries 0 or -inf")
for w in range(4):
    blocked = int(np.isneginf(mask.data[w]).sum())
    print(f"  window {w}: {blocked:3d} of 256 pairs masked")

# visualize which tokens of the last window may attend to token 0
allowed = ~np.isneginf(mask.data[3, 0])
print("window 3, token 0 can attend to:", np.nonzero(allowed)[0].tolist())
