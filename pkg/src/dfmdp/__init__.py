"""Predict-then-optimize for MDPs with missing parameters.

Trains feature-to-parameter predictive models either against a supervised
loss (two-stage) or end-to-end through the MDP solution map
(decision-focused), and scores policies with importance-sampling OPE.
"""

__version__ = "0.1.0"
