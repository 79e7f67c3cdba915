"""Regenerates ssim.json: reference SSIM values from scikit-image.

Images are 16x16 RGB with values k/255 so they are exact in f32.
"""
import json

import numpy as np
from skimage.metrics import structural_similarity

rng = np.random.default_rng(7)


def q(x):
    return np.round(np.clip(x, 0, 1) * 255) / 255


def ref(a, b):
    return float(structural_similarity(
        a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, K1=0.01, K2=0.03))


cases = []
a = q(rng.random((16, 16, 3)))
cases.append(("noise_vs_noise", a, q(rng.random((16, 16, 3)))))
cases.append(("noise_vs_perturbed", a, q(a + 0.1 * rng.standard_normal(a.shape))))
yy, xx = np.mgrid[0:16, 0:16] / 15.0
grad = np.stack([xx, yy, 0.5 * (xx + yy)], axis=2)
cases.append(("gradient_vs_shifted", q(grad), q(grad * 0.8 + 0.1)))
const = np.full((16, 16, 3), 64 / 255)
cases.append(("constant_vs_negation", const, 1.0 - const))
cases.append(("identical", a, a))

out = [{"name": n, "a": x.ravel().tolist(), "b": y.ravel().tolist(), "ssim": ref(x, y)} for n, x, y in cases]
with open("ssim.json", "w") as f:
    json.dump({"width": 16, "height": 16, "cases": out}, f)
for c in out:
    print(c["name"], c["ssim"])
