"""Statistical shape modelling of knee bones and point-level tissue mechanics."""

from .mesh import TriMesh, load_mesh, save_mesh
from .pointset import PointSet, load_pointset, save_pointset
from .volume import LabelVolume, extract_surface, largest_component, load_label_volume, save_label_volume

__version__ = "0.1.0"

__all__ = [
    "LabelVolume",
    "PointSet",
    "TriMesh",
    "extract_surface",
    "largest_component",
    "load_label_volume",
    "load_mesh",
    "load_pointset",
    "save_label_volume",
    "save_mesh",
    "save_pointset",
]
