"""
Where in the trajectory do hidden states line up?
=================================================

Collects self-attention outputs over a grid of timesteps for the first three
corpus images, takes the first principal component per layer and plots the
cosine of each timestep's state with it. Dips mark timesteps where the state
departs from the dominant direction.
"""

import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from digression.backend.checkpoint import load_bundled
from digression.corpus import bundled_corpus_dir
from digression.masking import load_pair, make_context
from digression.timesteps import collect_hidden_trajectory, eigenfeature_similarity, extreme_resolution_layers

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_timesteps")
out.mkdir(parents=True, exist_ok=True)
backend = load_bundled()
root = bundled_corpus_dir()
layers = extreme_resolution_layers(backend)
grid = list(range(20, 1001, 20))

bundles = []
for k, image_id in enumerate(("0000", "0001", "0002")):
    x, m = load_pair(root / "images" / f"{image_id}.png", root / "masks" / f"{image_id}.png", backend)
    traj = collect_hidden_trajectory(backend, make_context(x, m)[None], m.latent, backend.null_embedding(8), grid, 2)
    for b in traj:
        b.provenance["example"] = (k, b.provenance.get("noise_seed"))
    bundles += traj

report = eigenfeature_similarity(bundles, layers)
for layer in layers:
    curve = report.curves[layer]
    lo = int(curve.argmin())
    print(f"{layer}: explained variance {report.explained_variance.get(layer, float('nan')):.3g}, "
          f"lowest cosine {curve[lo]:.3f} at t={report.timesteps[lo]}")
    plt.plot(report.timesteps, curve, label=layer)
plt.axvspan(700, 740, color="gray", alpha=0.2)
plt.xlabel("timestep")
plt.ylabel("cosine with PC1")
plt.legend()
plt.tight_layout()
plt.savefig(out / "eigenfeature.png", dpi=120)
