"""
Three ways to get the same gradient
===================================

A tiny SegNode is differentiated by the adjoint method, by backprop through
the unrolled solver, and by central finite differences in float64. The three
must agree; the adjoint is the only one whose memory does not grow with the
number of solver steps.
"""
from segnode.bench import gradient_triangle

# 8 RK4 steps, 200 randomly chosen parameter coordinates.
res = gradient_triangle(steps=8, samples=200)
print(res.format())

# With fewer steps the adjoint's backward reconstruction of the state drifts
# further from the forward trajectory, so its agreement with the direct
# gradient loosens, while direct and finite differences stay tight.
for steps in (2, 4, 16):
    r = gradient_triangle(steps=steps, samples=50)
    print(f"steps={steps:2d} adjoint/direct={r.adjoint_vs_direct:.2e} direct/fd={r.direct_vs_fd:.2e}")
