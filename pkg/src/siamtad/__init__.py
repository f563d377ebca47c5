"""Siamese identification-verification toolkit for temporal action detection.

A self-contained numpy implementation: differentiable tensor ops with a
gradient tape, the siamese C3D-style network with identification and
verification heads, joint-loss training on synthetic clips, and a
proposal -> classify -> NMS -> mAP detection pipeline.
"""

__version__ = "0.1.0"
