"""Learned ultrasound image stitching trained on diffusion-generated synthetic pairs.

Modules: ``geometry`` (affine algebra, warps, condition patches), ``phantomgen``
(sector-FOV phantom sequences), ``diffusion`` (DDPM), ``sspgm`` (ControlNet
outpainting and pair generation), ``ism`` (affine regressor), ``baselines``,
``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
