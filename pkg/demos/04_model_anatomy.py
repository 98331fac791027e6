"""Model anatomy: parameter counts per variant, forward shapes, attention
properties, and the joint loss."""

import numpy as np

from featref import ModelConfig, Tensor, build_model, count_parameters, forward_full
from featref.model import classification_loss, proposal_loss, total_loss

print("learnable parameters by variant (defaults, K = 3):")
for variant in ("basic", "fr", "fr_fc", "fr_concat"):
    cfg = ModelConfig(n_classes=3, variant=variant)
    print(f"  {variant:<10} {count_parameters(cfg):>12,}")
print(f"  {'fr, K=4':<10} {count_parameters(ModelConfig(n_classes=4)):>12,}")

cfg = ModelConfig(n_classes=3, variant="fr")
params = build_model(cfg, seed=0)
print(f"\nbuilt model: {params.n_parameters():,} parameters in "
      f"{len(params.names())} tensors")
print("first tensors:", ", ".join(params.names()[:6]), "...")

rng = np.random.default_rng(1)
u = Tensor(rng.standard_normal((4, 1, 28, 28)).astype(np.float32))
v = Tensor(rng.standard_normal((4, 1, 28, 28)).astype(np.float32))
out = forward_full(params, u, v, training=False)

print(f"\nshared feature: {tuple(out.shared.shape)}")
print(f"attention rows sum to one: "
      f"{[float(a.data.sum(1).mean()) for a in out.attention]}")
print(f"detector probabilities:\n{np.round(out.detector_probs.data, 3)}")
print(f"refined feature: {tuple(out.refined.shape)}, logits: {tuple(out.logits.shape)}")

labels = np.array([0, 1, 2, 0])
l_prop = proposal_loss(out.detector_probs, labels, 3)
l_cls = classification_loss(out.logits, labels)
joint = total_loss(l_prop, l_cls, cfg.proposal_weight)
print(f"\nproposal loss {l_prop.item():.4f}, classification loss {l_cls.item():.4f}, "
      f"joint (lambda={cfg.proposal_weight}) {joint.item():.4f}")
