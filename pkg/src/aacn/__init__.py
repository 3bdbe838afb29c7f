"""Part-attention descriptors for person re-identification.

Pose-guided part attention, attention-aware feature alignment, visibility
weighted composition and a CMC/mAP matching harness, all runnable at toy
scale on synthetic data.
"""

__version__ = "0.1.0"
