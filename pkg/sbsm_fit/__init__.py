"""SBSM-Fit: deformable articulated quadruped fitting by analysis-by-synthesis.

Provides:
- bank: semantic bank of skinned base shapes (cosine-similarity queries)
- skeleton: quadruped skeleton instantiation, skinning and LBS
- render: hard z-buffer rasterizer, soft silhouettes and Lambertian shading
- objective: reconstruction losses, regularizers and the mask discriminator
- fit: the three-stage fit with multi-hypothesis viewpoints
- synth / features / metrics / fileio / cli: synthetic data, PCA features,
  evaluation metrics, file formats and the command line
"""

__version__ = "0.1.0"
