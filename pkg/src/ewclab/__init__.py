"""Desk-scale continual-learning laboratory.

Sequentially trains a small patch-based segmentation network on a pair of
synthetic tasks and compares fine-tuning, an L2 anchor penalty, elastic
weight consolidation and joint multi-task training, with fully seeded,
reproducible numerics.
"""

__version__ = "0.1.0"
