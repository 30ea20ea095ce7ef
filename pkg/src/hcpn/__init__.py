"""Hierarchical co-attention propagation network for zero-shot video object segmentation."""
