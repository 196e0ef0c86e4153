"""
Hard projection versus free embeddings in prompt inversion
==========================================================

Runs the same inversion twice, once snapping to the nearest vocabulary token
after every step and once leaving embeddings continuous. The continuous run
reaches a lower training loss; the projected one stays a valid token sequence.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from digression.backend.checkpoint import load_bundled
from digression.corpus import bundled_corpus_dir
from digression.inversion import InversionConfig, projection_ablation
from digression.masking import load_pair

backend = load_bundled()
root = bundled_corpus_dir()
x, m = load_pair(root / "images" / "0000.png", root / "masks" / "0000.png", backend)
runs = projection_ablation(backend, x, m, InversionConfig(steps=200))


def smooth(v, k=20):
    return np.convolve(v, np.ones(k) / k, mode="valid")


for name, res in runs.items():
    print(f"{name:>10}: first 10% {np.mean(res.losses[:20]):.3f}, last 10% {np.mean(res.losses[-20:]):.3f}")
    plt.plot(smooth(res.losses), label=name)
plt.xlabel("step")
plt.ylabel("masked noise residual (smoothed)")
plt.legend()
plt.tight_layout()
plt.savefig("projection_ablation.png", dpi=120)
