"""Masked conditional diffusion for inpainting sequences of gridded precipitation fields.

Subpackages and modules:

* ``tensor``: float64 reverse-mode autodiff with 3D convolutions and AdamW/EMA.
* ``schedule``: linear and cosine noise schedules.
* ``condition``: data transforms, condition channels, augmentation and dropout.
* ``unet``: the conditional 3D U-Net denoiser.
* ``diffusion``: forward process, v-prediction algebra, losses, masked samplers.
* ``baselines``: temporal linear interpolation and Laplace fill.
* ``metrics``: hole-domain metrics, bootstrap intervals, sensitivity analysis.
* ``synthgen``: synthetic fields, swath masks and auxiliary inputs.
* ``config``, ``gridfile``, ``pipeline``, ``render``, ``cli``: runs and file formats.
"""

__version__ = "0.1.0"
