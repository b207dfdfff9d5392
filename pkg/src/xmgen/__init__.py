"""xmgen: cross-modal spectrogram synthesis at desk scale.

A diffusion backbone is pretrained on an abundant source spectrogram
modality, adapted to scarce target modalities through guidance embeddings
fitted against the frozen backbone, and sampled under progressive
low-frequency anchoring to a reference sample.
"""

__version__ = "0.1.0"
