"""Software-defined GNSS tracking laboratory.

Synthetic L1 C/A scenarios, scalar and vector tracking loops, an
INS/GNSS error-state filter, and a run harness that ties them together
at two levels of fidelity (raw samples or statistical measurement
models).
"""

__version__ = "0.1.0"
