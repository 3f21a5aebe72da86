"""Auditing privacy: reconstruct a client's secret sample from the
gradients the server observes, under different sharing policies.

The attacker sees the single-batch gradient of whatever parameters a
method shares, knows the architecture, and fits a dummy input (plus a
soft label) so its gradients match. Sharing fewer layers leaves the
attacker guessing the private ones.

Run:  python demos/05_gradient_inversion.py
"""

import numpy as np

from fedmdcg.attack import AttackConfig, dlg_attack
from fedmdcg.models import ModelSpec, ClientModel, init_classifier, init_extractor
from fedmdcg.rng import RngStream

spec = ModelSpec("mlp", (1, 1, 8), 4, noise_dim=8, generator_hidden=16)
victim = ClientModel(init_extractor(spec, RngStream("victim/ext", 0)),
                     init_classifier(spec, RngStream("victim/clf", 0)))

rng = np.random.default_rng(1)
secret_x = rng.random((1, 1, 1, 8))
secret_y = rng.integers(0, 4, 1)
print("secret sample:", np.round(secret_x.reshape(-1), 3), "label", secret_y[0])

CASES = [
    ("all",        "full model shared (FedAvg-style)"),
    ("extractor",  "feature extractor shared (FedPer-style)"),
    ("classifier", "classifier shared (LG-FedAvg / generator pipeline)"),
]

print("\nrunning 300 gradient-matching steps per case...\n")
for target, label in CASES:
    cfg = AttackConfig(steps=300, lr=0.1, target=target, seed=7)
    result = dlg_attack(spec, victim, secret_x, secret_y, cfg)
    print(f"{label}")
    print(f"  shared gradients observed: {target}")
    print(f"  reconstruction: {np.round(result.x_rec.reshape(-1), 3)}")
    print(f"  PSNR {result.psnr_db:6.2f} dB   "
          f"match loss {result.match_loss:.2e}\n")

print("reading: above ~25 dB the sample is essentially recovered; below")
print("~10 dB the reconstruction carries little of the original. sharing")
print("only the classifier (what the generator pipeline uploads) keeps the")
print("attacker far from the data even though the gradients match well.")
