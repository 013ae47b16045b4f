"""Reference-based super-resolution with learned LR-to-HR correspondence.

Submodules:

- ``descriptors``: dense descriptor grids, matching and correlation volumes
- ``contrastive``: matcher networks and their margin / distillation training
- ``homography``: projective transforms, synthetic warps, ground-truth fields
- ``aggregation``: correspondence-anchored deformable aggregation
- ``image_sr`` / ``video_sr``: the x4 restoration networks
- ``data``: manifests, synthetic pairs, benchmarks, toy clips
- ``metrics`` / ``evaluate``: PSNR, SSIM, AEE and dataset reports
- ``cli``: the ``refsr`` command
"""
from .descriptors import (ConfigurationError, ContractViolation, CorrelationVolume, CorrespondenceField,
                          DescriptorGrid, correlation_volume, match)
from .homography import Homography
from .metrics import aee, psnr, ssim

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "ContractViolation", "CorrelationVolume", "CorrespondenceField",
           "DescriptorGrid", "Homography", "aee", "correlation_volume", "match", "psnr", "ssim"]
