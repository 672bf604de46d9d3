"""The synaptic gate itself: a trainable matrix maps each attention output
row to a sigmoid relevance map r = sigmoid(a @ w_s), and the reinforced
output o = a * r is what flows onward. Gate modes make the mechanism
switchable for ablation.

Run: python demos/02_resonance_gate.py
"""

import numpy as np

from synres import numcore as nc
from synres.model import GateMode, resonance_gate

a = nc.tensor([[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]])
w_s = nc.tensor([[2.0, 0.0], [0.0, 2.0]])

r, o = resonance_gate(a, w_s, GateMode.LEARNED)
print("attention output a:\n", a.data)
print("relevance r = sigmoid(a @ w_s):\n", np.round(r.data, 4))
print("reinforced o = a * r:\n", np.round(o.data, 4))

# a zero gate matrix is maximally undecided: every relevance is 0.5
r0, o0 = resonance_gate(a, nc.zeros(2, 2), GateMode.LEARNED)
print("\nzero w_s -> r is 0.5 everywhere, o halves a:", np.allclose(o0.data, 0.5 * a.data))

# forced_ones and disabled both bypass the gate; they differ only in whether
# w_s stays a (frozen) graph participant
r1, o1 = resonance_gate(a, w_s, GateMode.FORCED_ONES)
_, o2 = resonance_gate(a, w_s, GateMode.DISABLED)
print("forced_ones returns a itself:", o1 is a)
print("disabled matches bitwise:", bool((o1.data == o2.data).all()))

# gradients flow into w_s only in learned mode
graph = nc.GradGraph()
graph.watch(w_s)
_, o3 = resonance_gate(a, w_s, GateMode.LEARNED, graph=graph)
nc.backward(graph, nc.frobenius_sq(o3, graph))
print("\nlearned-mode gradient on w_s:\n", np.round(w_s.grad, 4))
