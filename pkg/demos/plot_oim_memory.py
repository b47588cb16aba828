"""
The re-id memory: lookup table, circular queue and temperature
==============================================================

Labeled identities keep one running unit vector each in a lookup table;
unlabeled people go into a first-in first-out queue. A feature's class
probability is a softmax over its similarity to every entry of both.
"""
import numpy as np
import torch
import torch.nn.functional as F

from alignps import ReidMemory, oim_loss, triplet_loss, update_memory
from alignps.reid import oim_logits

torch.manual_seed(0)
L, D, Q = 4, 8, 5
mem = ReidMemory(L, D, Q, momentum=0.5, temperature=0.1, seed=0)

# every identity is a fixed direction; observations are noisy copies
codes = F.normalize(torch.randn(L, D), dim=1)
for step in range(30):
    ids = torch.randint(0, L, (3,))
    feats = F.normalize(codes[ids] + 0.3 * torch.randn(3, D), dim=1)
    unlabeled = F.normalize(torch.randn(2, D), dim=1)
    update_memory(mem, torch.cat([feats, unlabeled]), ids.tolist() + [-1, -1])

print("LUT row norms:", mem.lut.norm(dim=1).numpy().round(6))
print("queue filled:", mem.filled, "of", mem.queue_size)
print("cosine(LUT row, true code):", (mem.lut * codes).sum(1).numpy().round(3))

# probabilities cover LUT and queue together and sum to one
x = F.normalize(codes[2:3] + 0.2 * torch.randn(1, D), dim=1)
for tau in (1.0, 0.1, 0.03):
    mem.temperature = tau
    p = torch.softmax(oim_logits(x, mem), dim=1)[0]
    print(f"tau {tau:<5} p(id 2) {float(p[2]):.3f}  sum {float(p.sum()):.6f}  argmax {int(p.argmax())}")
mem.temperature = 0.1

# the OIM loss rewards matching the right row; the triplet term pulls same-id features together
labels = torch.tensor([0, 0, 1, 1])
feats = F.normalize(codes[labels] + 0.3 * torch.randn(4, D), dim=1)
print("OIM loss:", float(oim_loss(feats, labels, mem)))
print("triplet loss (with LUT rows):", float(triplet_loss(feats, labels, 0.3, mem.lut)))
print("triplet loss, shuffled labels:", float(triplet_loss(feats, labels[torch.tensor(np.array([0, 2, 1, 3]))], 0.3)))
