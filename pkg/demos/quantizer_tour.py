"""A guided tour of the cascaded quantizer on a tiny hand-made example.

Run with: python3 demos/quantizer_tour.py
"""

import numpy as np

from treequant.quantizer import (cage_loss, extract_tree, make_quantizer,
                                 quantize_cascade, ste_backward)
from treequant.rng import SeededRng

rng = SeededRng(7)

# Two levels: 4 fine codes feeding into 2 coarse codes.
q = make_quantizer(rng, dim=2, sizes=[4, 2], alpha=1.0, beta=1.0, init_std=1.0)

print("codebook sizes:", q.level_sizes)
for book in q.codebooks:
    print(f"  level {book.level}:\n{book.entries.value}")

# Quantize one embedding: level 1 searches with e, level 2 searches with the
# level-1 winner, producing a fine-to-coarse path of indices.
e = np.array([0.4, -0.3], dtype=np.float32)
trace = quantize_cascade(q, e)
print("\ninput e:", e)
print("chosen path (fine -> coarse):", trace.indices)
print("chosen codes:", [c.round(3) for c in trace.codes])
print("fused z = e + alpha * mean(codes):", trace.fused.round(3))

# The two penalties are numerically equal in the forward pass; they only
# differ in which side the gradient reaches.
loss = cage_loss(trace, beta=q.beta)
print(f"\nl_quant = {loss.l_quant:.6f}")
print(f"l_commit = {loss.l_commit:.6f}  (same number, different gradient route)")
print(f"l_cage = l_quant + beta * l_commit = {loss.l_cage:.6f}")

# Straight-through routing: the task gradient reaches e scaled by (1 + alpha)
# and never touches the codebooks; the penalties move codes toward inputs and
# inputs toward codes.
grad_z = np.array([1.0, 0.0], dtype=np.float32)
grad_e, code_grads, _ = ste_backward(trace, q, grad_z, weight_cage=1.0)
print("\ngrad_z:", grad_z, "-> grad_e:", grad_e.round(3))
for (level, idx), g in code_grads.items():
    print(f"  codebook level {level}, row {idx} gets {g.round(3)}")

# Freezing the quantizer turns the assignments into an explicit category tree.
entities = rng.stream("demo-entities").normal(size=(8, 2)).astype(np.float32)
tree = extract_tree(q, entities)
print("\ntree over 8 entities:")
print("  per-entity paths:\n", tree.paths)
print("  level-1 -> level-2 parents:", tree.parents[0])
