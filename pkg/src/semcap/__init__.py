"""Desk-scale image captioning with retrieved semantic cues.

The pipeline: a seeded embedding provider retrieves the closest training
sentences for an image, their non-stop words become semantic cues, a
slot-augmented cross-attention stack filters the cues and recovers missing
words, a learnable position codebook orders the surviving semantics, and a
gated transformer decoder fuses visual and semantic tokens into a caption.

Everything runs on a small reverse-mode tensor engine (semcap.tensor) whose
hot kernels live in semcap._kernels (compiled core when available, numpy
fallback otherwise).
"""

__version__ = "0.1.0"
