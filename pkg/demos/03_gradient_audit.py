"""Finite-difference audit of the autodiff engine, op by op and end to end.

    python demos/03_gradient_audit.py [--ops-only]
"""
import sys

from cife.gradsuite import format_table, run_suite

results = run_suite(include_end_to_end="--ops-only" not in sys.argv)
print(format_table(results))
print("all within 1e-4:", all(r.passed for r in results))
