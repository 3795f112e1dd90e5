"""Gradient reversal in isolation, then inside the stage-1 objective.

Run: python3 demos/02_grl_mechanics.py
"""
import numpy as np

from langembed import losses
from langembed import tensor as T
from langembed.model import CLASSIFIERS, PROJECTION, ModelGraph

# Identity forward, -lambda times the upstream gradient backward.
x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
y = T.grad_reverse(x, 0.5)
T.sum_all(T.mul(y, T.Tensor(np.array([1.0, 1.0, 2.0])))).backward()
print("forward", y.data, "grad", x.grad)

# With SAT on, the speaker head itself still minimizes the speaker loss, while
# the projection receives the opposite gradient and learns to hide speakers.
rng = np.random.default_rng(0)
frames = rng.normal(size=(4, 20, 24))
y_spk = np.array([0, 9, 17, 40])
grads = {}
for sat in (False, True):
    m = ModelGraph(24, 6, 48, 56, seed=0)
    m.set_trainable(PROJECTION, CLASSIFIERS)
    h = m.project(m.encode(frames))
    _, spk = m.forward_heads(h, sat_enabled=sat, lam=1.0)
    losses.speaker_loss(spk, y_spk).backward()
    grads[sat] = {name: m[name].grad.copy() for name in ("proj.w", "cls.spk.w")}

for name in ("proj.w", "cls.spk.w"):
    on, off = grads[True][name].ravel(), grads[False][name].ravel()
    cos = on @ off / (np.linalg.norm(on) * np.linalg.norm(off))
    print(f"{name:10s} cosine(SAT on, SAT off) = {cos:+.3f}")

# Uniform logits give ln K, the level an adversary is pushed towards.
for k in (6, 8, 48):
    v = float(T.softmax_cross_entropy(T.Tensor(np.zeros((1, k))), [0]).data)
    print(f"uniform cross-entropy over {k} classes = {v:.4f} (ln {k} = {np.log(k):.4f})")
