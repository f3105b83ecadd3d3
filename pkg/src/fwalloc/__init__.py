"""Frank-Wolfe policy optimization for frame-level bit allocation.

The package trains a continuous-control agent to pick per-frame QP offsets
for a synthetic GOP encoder under a hard bit budget.  Everything runs on
plain NumPy; no deep-learning framework is required.
"""

__version__ = "0.1.0"
