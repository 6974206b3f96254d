"""Mesh-proxy editing of dynamic objects in monocular video.

Stages: synthetic scenes (``scenes``), Gaussian splatting (``render``), deformation
fields (``deformation``), joint reconstruction (``recon``), mesh extraction
(``mesh``), edit propagation (``propagation``), control-data preparation
(``controls``), and metrics (``metrics``).
"""

from .estimators import EditPropagator, ProxyReconstructor, ReferenceAugmenter, TextureSimulator
from .geometry import CameraPose, GaussianSet, InvalidArgument, TriMesh
from .propagation import EditSpec, GridConfig
from .recon import ReconConfig, ReconResult
from .scenes import FrameBundle, make_scene

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "EditPropagator", "EditSpec", "FrameBundle", "GaussianSet", "GridConfig",
    "InvalidArgument", "ProxyReconstructor", "ReconConfig", "ReconResult", "ReferenceAugmenter",
    "TextureSimulator", "TriMesh", "make_scene",
]
