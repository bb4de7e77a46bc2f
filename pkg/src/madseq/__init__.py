"""Masked autodecoding of multi-task vision sequences.

Detection, segmentation, keypoint and captioning annotations are encoded as
token sequences over one shared vocabulary and decoded by a single
image-conditioned transformer, either in one bidirectional pass followed by
optional re-mask refinement or autoregressively as a baseline.

"""

__version__ = "0.1"
