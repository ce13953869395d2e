"""Desk-scale cross-age reference-based face restoration.

Identity-conditioned diffusion restoration trained on synthetic
identity/age-factored faces, with a training-free age-control inference
stack (age-aware gradient guidance plus token-targeted attention boost)
and an evaluation harness.
"""

__version__ = "0.1.0"
