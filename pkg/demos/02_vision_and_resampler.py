# # From pixels to 32 vision tokens
#
# The vision tower cuts an image into 14x14 patches (224 px -> 256 tokens,
# 420 px -> 900). A resampler with 32 learned queries condenses any number
# of tokens to a fixed-length prefix for the language model.

import numpy as np

from prefixmm import autodiff as ad
from prefixmm.resampler import Resampler
from prefixmm.synthetic import shape_image
from prefixmm.vision import VideoClip, VisionTower, interpolate_pos_embed

rng = np.random.default_rng(0)
tower = VisionTower(rng, d_vision=64, depth=1, n_heads=4, base_grid=(16, 16), max_frames=4)
resampler = Resampler(rng, d_vision=64, d_model=128, n_queries=32)

img = shape_image("red", "top left", "circle", resolution=224)
with ad.no_grad():
    raw = tower.encode(img)
    print("224 px image:", raw.count, "raw tokens ->", resampler(raw).shape)

# ## Raising the resolution
# The positional grid is resized by bilinear interpolation; 16x16 becomes 30x30.

tower.pos_embed.data = interpolate_pos_embed(tower.pos_embed.data, (30, 30))
with ad.no_grad():
    raw = tower.encode(shape_image("blue", "bottom right", "square", resolution=420))
    print("420 px image:", raw.count, "raw tokens ->", resampler(raw).shape)

# ## Video
# Frames are encoded one by one, tagged with a frame-index embedding and
# concatenated; the resampler still returns 32 tokens.

tower.pos_embed.data = interpolate_pos_embed(tower.pos_embed.data, (16, 16))
clip = VideoClip([shape_image("green", p, "circle", resolution=224) for p in ("top left", "top right", "bottom right")])
with ad.no_grad():
    raw = tower.encode(clip)
    print("3-frame clip:", raw.count, "raw tokens ->", resampler(raw).shape)
