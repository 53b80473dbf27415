"""How the server mixes one layer across clients.

Run: python3 demos/01_fusion_weights.py
"""
import numpy as np

from pfedcfr import fusion
from pfedcfr.fusion import SimilarityParams

rng = np.random.default_rng(0)

# Four clients. Clients 0 and 1 hold nearly the same layer; 2 and 3 sit far away.
base_a, base_b = rng.normal(size=6), rng.normal(size=6) + 4.0
layers = [base_a, base_a + 0.05 * rng.normal(size=6), base_b, base_b + 0.05 * rng.normal(size=6)]

# A small sigma makes the kernel sharp, so only close neighbours get weight.
p = SimilarityParams(alpha_t=0.5, sigma=5.0)
fused, w = fusion.personalized_fuse_layer(layers, p)
np.set_printoptions(precision=4, suppress=True)
print("weight matrix (row n = how client n's layer is rebuilt):")
print(w)
print("row sums:", w.sum(axis=1))

# Each fused layer stays inside the convex hull of the uploads.
for n, f in enumerate(fused):
    print(f"client {n}: moved {np.linalg.norm(f - layers[n]):.4f}")

# The generic rule ignores similarity and gives everyone the same mean.
print("generic layer:", fusion.generic_fuse_layer(layers))

# At the default hyperparameters every cross weight is about alpha_t / sigma = 0.01.
_, w_default = fusion.personalized_fuse_layer(layers, SimilarityParams())
print("default weights, client 0:", w_default[0])
