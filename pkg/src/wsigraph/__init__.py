"""Patch-graph survival modelling for whole-slide images.

Tiles slides into patches, wires patches into 8-neighbour grid graphs,
trains a 4-layer GCN with a Cox partial-likelihood head and scores it
with Harrell's C-index and ROC/AUC under k-fold cross-validation.
"""

__version__ = "0.1.0"
