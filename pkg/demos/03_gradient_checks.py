"""Gradient checking tour
=======================

Every differentiable primitive is finite-difference checked; the whole-model
check drives a small residual net end to end through the loss.  This demo
runs one seed per primitive in both dtypes (the full gate in the test suite
uses 20 seeds).
"""

from voxelseg.gradcheck import format_results, run_gradient_suite

# float32: loose step and bound, whole-model check included
r32 = run_gradient_suite(float64=False, seeds=[0], include_model=True)
print(format_results(r32))
print()

# float64: tight bound; the model check is slow here, the test suite covers it
r64 = run_gradient_suite(float64=True, seeds=[0], include_model=False)
print(format_results(r64))
