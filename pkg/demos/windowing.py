"""
Hounsfield windows as input channels
====================================

Three overlapping HU windows turn one CT slide into three [0, 1] channels.
The lung mask is stacked as a fourth channel.
"""

import numpy as np

from ctlab import DEFAULT_WINDOWS, assemble_input, window_normalize

# a few landmark intensities: air, healthy lung, ground glass, soft tissue
hu = np.array([-1000, -850, -650, -450, -300, -150, 40])
for w in DEFAULT_WINDOWS:
    print(f"window [{w.lo}, {w.hi}]:", np.round(window_normalize(hu, w), 3))

# a synthetic 64x64 slide: a lung-like disc with a brighter patch inside
yy, xx = np.mgrid[:64, :64]
lung = ((yy - 32) ** 2 + (xx - 32) ** 2 < 24 ** 2).astype(np.uint8)
slide = np.where(lung, -700, 30).astype(np.int16)
slide[28:36, 28:36] = -350

x = assemble_input(slide, lung)
print("input tensor", x.shape, x.dtype)
for c, name in enumerate(["wide", "low", "high", "lung"]):
    print(f"  {name:5s} patch mean {x[c, 28:36, 28:36].mean():.3f}  lung mean {x[c][lung == 1].mean():.3f}")
