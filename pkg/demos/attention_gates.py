"""Look inside CBAM on a synthetic malignant patch.

Builds a small feature map from a generated image, runs channel and spatial
attention with random weights, and prints what each gate does. Then repeats
with all-zero weights, where both gates sit at exactly one half.
"""
import numpy as np

from histoattn import attention as attn
from histoattn import ops
from histoattn.data import render_patch
from histoattn.preprocess import PreprocessConfig, normalize, prepare
from histoattn.tensor import Tensor

rng = np.random.default_rng(0)
img = render_patch(rng, 1, (64, 64), "400X")
x = normalize(prepare(img, PreprocessConfig(target_size=(32, 32), clahe_tiles=(4, 4)))).data[None]
print("input", x.shape, f"mean {x.mean():.3f}")

# a fixed random conv turns the grey patch into 8 feature channels
w = rng.normal(size=(8, 1, 3, 3)) / 3
f = ops.relu(ops.conv2d(x, w, stride=1, padding=1))

cp = attn.init_channel(8, None, rng, lambda r, s, fan: r.normal(size=s) / np.sqrt(fan))
sp = attn.init_spatial(rng, lambda r, s, fan: r.normal(size=s) / np.sqrt(fan))
m_c, f_c = attn.channel_attention(f, cp)
m_s, out = attn.spatial_attention(f_c, sp)

print("reduction ratio", cp.reduction_ratio)
print("channel gate  ", np.round(m_c.data[0], 3))
print(f"spatial gate   min {m_s.data.min():.3f}  max {m_s.data.max():.3f}")
energy_in = (f.data ** 2).sum(axis=(2, 3))[0]
energy_out = (out.data ** 2).sum(axis=(2, 3))[0]
print("energy kept per channel", np.round(energy_out / np.maximum(energy_in, 1e-12), 3))

# zero weights: sigmoid(0) = 1/2 twice
zc = attn.ChannelAttentionParams(Tensor(np.zeros_like(cp.w0.data)),
                                 Tensor(np.zeros_like(cp.w1.data)), cp.reduction_ratio)
zs = attn.SpatialAttentionParams(Tensor(np.zeros((1, 2, 7, 7))))
same = np.array_equal(attn.cbam(f, zc, zs).data, 0.25 * f.data)
print("zero weights give f / 4 exactly:", same)
