"""Sketch colorization engine: Pix2Pix / CycleGAN with built-in autodiff, SSIM and FID.

Submodules are imported explicitly (``from inkgan import tensor``) so that the
CLI can configure BLAS thread counts before numpy is first loaded.
"""

__version__ = "0.1.0"
