"""
A tour through the network
==========================

Follow one stereo pair through the feature extractor, the discrepancy volume,
the depth branch that gates volume channels, and the disparity attention that
filters the aggregated volume before the final regression.
"""

import torch

from dvanet.backbone import BackboneConfig, extract_features, regress_depth
from dvanet.model import DVANet, ModelConfig, count_parameters
from dvanet.training import generate_synthetic_scene
from dvanet.volume import apply_hierarchy_attention, build_discrepancy_volume, group_reduce

torch.manual_seed(0)

# %%
# Parameter counts for the full configuration and the reduced ones used in tests.
for name, cfg in (("full", ModelConfig.full()), ("toy", ModelConfig.toy()), ("micro", ModelConfig.micro())):
    print(f"{name:5s} {count_parameters(DVANet(cfg)) / 1e6:6.3f} M parameters")

# %%
# A synthetic planar scene gives us a rectified pair with exact ground truth.
scene = generate_synthetic_scene("planar", 128, 64, 16, seed=1)
left = torch.from_numpy(scene.left_image)[None]
right = torch.from_numpy(scene.right_image)[None]
# A narrow backbone that still emits the full 128 feature channels.
model = DVANet(ModelConfig(BackboneConfig(base_channels=8), max_disp=16, hourglass_widths=(32, 32))).eval()

# %%
# Shared-weight features at quarter resolution, plus the early map the depth branch reads.
with torch.no_grad():
    f_l, f_r, low = extract_features(model.features, left, right)
print("features", tuple(f_l.shape), "early map", tuple(low.shape))

# %%
# The discrepancy volume subtracts right features shifted by each candidate
# disparity. Grouped averaging then brings the channel count down to 32.
with torch.no_grad():
    vol = build_discrepancy_volume(f_l, f_r, 16 // 4)
    vol32 = group_reduce(vol)
print("raw volume", tuple(vol.shape), "-> grouped", tuple(vol32.shape))

# %%
# The depth branch produces 32 logits per pixel. Their softmax expectation is a
# normalized depth map, and their sigmoid gates the 32 volume channels.
with torch.no_grad():
    f_att = model.depth_branch(low)
    depth = regress_depth(f_att, (64, 128))
    gated, a_c = apply_hierarchy_attention(vol32, f_att, return_weights=True)
print(f"normalized depth in [{depth.min():.3f}, {depth.max():.3f}], "
      f"channel gates in [{a_c.min():.3f}, {a_c.max():.3f}]")

# %%
# The full forward pass returns the final disparity, the prior disparity from
# the attention branch, the depth map and (on request) both attention tensors.
with torch.no_grad():
    out = model(left, right, return_attention=True)
print("D_1", tuple(out.disp.shape), "D_0", tuple(out.disp_prior.shape))
print("A_d sums to one per pixel:", bool(((out.disparity_attention.sum(2) - 1).abs() < 1e-6).all()))
