"""Hierarchical graph network for compositional question answering.

Answers are sets of discontiguous document nodes (sentences and retained
HTML elements). The package covers the full desk-scale pipeline: BPE
tokenization, document packing, three-level graph construction, a
transformer encoder plus graph propagation layers with reverse-mode
autodiff, pre-training objectives, Adam training, and set-based metrics.
"""

__version__ = "0.1.0"
