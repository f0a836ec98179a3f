"""Regenerates wavelet_input.png and wavelet_golden.json with PyWavelets.

Band layout in the golden file: ll, lh, hl, hh, each [3, H/2, W/2], where
lh = (top - bottom) / 2 of each 2x2 block, hl = (left - right) / 2 and
hh = (anti-diagonal difference) / 2.
"""
import json

import numpy as np
import pywt
from PIL import Image

rng = np.random.default_rng(20240611)
h, w = 12, 16
yy, xx = np.mgrid[0:h, 0:w]
base = np.stack([
    128 + 100 * np.sin(xx / 3.0),
    128 + 100 * np.cos(yy / 2.0),
    (xx * 16 + yy * 5) % 256,
], axis=-1)
img = np.clip(base + rng.integers(-20, 21, size=base.shape), 0, 255).astype(np.uint8)
Image.fromarray(img, "RGB").save("wavelet_input.png")

x = img.astype(np.float64).transpose(2, 0, 1) / 255.0
ll, lh, hl, hh = [], [], [], []
for c in range(3):
    ca, (ch, cv, cd) = pywt.dwt2(x[c], "haar")
    ll.append(ca)
    lh.append(ch)
    hl.append(cv)
    hh.append(cd)
out = {k: {"shape": list(np.shape(v)), "data": np.asarray(v).ravel().tolist()}
       for k, v in (("ll", ll), ("lh", lh), ("hl", hl), ("hh", hh))}
with open("wavelet_golden.json", "w") as f:
    json.dump(out, f)
