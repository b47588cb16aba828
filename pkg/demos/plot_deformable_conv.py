"""
Deformable convolution as shifted sampling
==========================================

A deformable 3x3 convolution samples its nine taps at learned fractional
offsets instead of the fixed grid. With zero offsets it is an ordinary
convolution; a constant offset simply moves where the kernel looks.
"""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch
import torch.nn.functional as F

from alignps import DeformConv2d, deform_conv2d

torch.manual_seed(0)
x = torch.zeros(1, 1, 24, 24)
x[..., 8:16, 10:14] = 1.0  # a bright bar
w = torch.full((1, 1, 3, 3), 1.0 / 9)

# zero offsets reproduce the plain convolution
zero = torch.zeros(1, 18, 24, 24)
print("max |dconv - conv| at zero offset:",
      float((deform_conv2d(x, w, zero) - F.conv2d(x, w, padding=1)).abs().max()))

# every tap shifted by (dx, dy) = (3, 0) pixels: the response moves left by 3
shift = torch.zeros(1, 18, 24, 24)
shift[:, 0::2] = 3.0
moved = deform_conv2d(x, w, shift)

# fractional offsets interpolate bilinearly between neighbours
half = torch.zeros(1, 18, 24, 24)
half[:, 1::2] = 2.5
blurred = deform_conv2d(x, w, half)

fig, axes = plt.subplots(1, 4, figsize=(10, 3))
for ax, img, title in zip(axes, [x, F.conv2d(x, w, padding=1), moved, blurred],
                          ["input", "zero offset", "dx = 3", "dy = 2.5"]):
    ax.imshow(img[0, 0].numpy(), cmap="gray")
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
out = os.environ.get("DEMO_OUT", ".")
fig.savefig(os.path.join(out, "deformable_conv.png"), dpi=100)

# the layer predicts its own offsets; they start at zero, so a fresh layer is a plain conv
layer = DeformConv2d(1, 4)
print("fresh layer offsets are zero:", bool((layer.offset_conv(x) == 0).all()))
