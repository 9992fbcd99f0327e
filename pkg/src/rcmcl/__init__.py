"""Robust cross-modal contrastive learning at desk scale.

Three modality encoders (image-like, skeleton, point-set) are pre-trained
without labels using cross-modal contrastive alignment, intra-modal
redundancy reduction, masked-skeleton reconstruction, and a gated-fusion
alignment objective; a robustness harness evaluates the result under
modality dropout and input corruption.
"""

__version__ = "0.1.0"
