"""Variable-rate extreme image compression toolkit.

Images are compressed by downscaling with a continuous factor ``s >= 1``,
running a pluggable anchor codec on the low-resolution result, and restoring
the original resolution at decode time with a degradation-aware latent
diffusion model conditioned on the codec type, codec quality, and rescaling
factor. Setting ``s = 1`` and disabling the restoration decoder degenerates
to the bare anchor codec, bit for bit.
"""

__version__ = "0.1.0"
