"""Binary-coding quantization of one weight matrix, step by step."""

import numpy as np

from bcqtune import bcq
from bcqtune.bcq import QuantConfig
from bcqtune.qlinear import QuantLinear

rng = np.random.default_rng(0)
w = rng.standard_normal((6, 16))

# %% one bit: alpha is the mean absolute value of the group, the signs are sign(w)
alpha, b = bcq.quantize_group_onebit(w[0])
print("row 0 alpha", round(alpha, 4), "mean |w|", round(np.abs(w[0]).mean(), 4))
print("signs", b.astype(int))

# %% greedy: each extra plane quantizes what the previous planes left over
for q in (1, 2, 3):
    m = bcq.quantize(w, QuantConfig(q=q))
    print(f"greedy q={q}  mse {bcq.mse(bcq.dequantize(m), w):.5f}")

# %% alternating refinement on top of greedy; the MSE never goes up
history = []
alt = bcq.refine_alternating(bcq.quantize(w, QuantConfig(q=3)), w, 15, history)
print("alternating q=3 mse per half-step:", np.round(history[:7], 5), "...")
print("final", round(bcq.mse(bcq.dequantize(alt), w), 5))

# %% groups: g=4 gives every 4 consecutive weights of a row their own scale
grouped = bcq.quantize(w, QuantConfig(q=2, g=4))
print("scales per plane", grouped.scales[0].values.shape, "mse", round(bcq.mse(bcq.dequantize(grouped), w), 5))

# %% bit planes are packed 64 signs per word, least significant bit first
plane = grouped.planes[0]
print("packed words", plane.words.shape, hex(int(plane.words[0, 0])))
print("first signs", plane.signs[0, :8], "-> low byte", format(int(plane.words[0, 0]) & 0xFF, "08b")[::-1])

# %% the layer never builds the dense matrix; the lookup-table kernel gives the same answer
layer = QuantLinear(grouped, np.zeros(6))
x = rng.standard_normal((2, 16))
y = layer.forward(x)
print("forward vs dense", np.abs(y - x @ bcq.dequantize(grouped).T).max())
print("LUT mu=4 vs forward", np.abs(layer.forward_lut(x, 4) - y).max())
