"""Causal debiasing policy optimization on a 1-D collision micro-world.

The package trains a tiny autoregressive answer policy on counterfactual
multiple-choice questions about a deterministic collision world, and compares
group-relative policy optimization (KL toward a reference) against a
causally debiased variant (KL pushed away from a frozen bias model).
"""

__version__ = "0.1.0"
