"""Multimodal domain generalisation for egocentric action recognition.

Encoders over appearance, motion and audio embeddings, a cross-modal
contrastive alignment with a text anchor, consistency-weighted audio fusion,
and leave-one-domain-out evaluation, built on a small numpy autodiff core.
"""
__version__ = "0.1.0"
