"""
Activation memory versus solver steps
=====================================

Peak logical activation memory of one training step, for the adjoint and
the direct backward, as the RK4 step count grows. A smaller network than the
desk one keeps this quick.
"""
from segnode.bench import TINY_CONFIG, memory_law, parameter_table

for row in memory_law(TINY_CONFIG, [2, 4, 8, 16]):
    print(row.format())

table = parameter_table(TINY_CONFIG)
print(f"parameters: segnode={table['segnode']} baseline={table['baseline']} "
      f"reduction={table['reduction_percent']:.1f}%")
