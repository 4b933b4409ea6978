"""Coarse-to-fine organ segmentation on CT-like volumes.

Superpixel candidates from a random-forest cascade are refined by a patch
ConvNet, multi-scale region ConvNets, 3D Gaussian smoothing and a superpixel
CRF. Everything runs on numpy; see :mod:`organseg.pipeline` for the full
cross-validation driver and :mod:`organseg.cli` for the command line.
"""

from importlib import resources

from .volume import Mask, PhantomSpec, Volume, make_phantom, read_volume, write_volume

__all__ = [
    "Mask",
    "PhantomSpec",
    "Volume",
    "bundled_config_path",
    "make_phantom",
    "read_volume",
    "write_volume",
]

__version__ = "0.1.0"


def bundled_config_path():
    """Path of the bundled 16-phantom cross-validation config."""
    return resources.files(__name__) / "data" / "phantom16.cfg"
