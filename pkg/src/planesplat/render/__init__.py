"""Software splatting renderer."""
from .backend import DEFAULT as BACKEND, available
from .core import (
    ALL_CHANNELS,
    ProjectedField,
    ProjectedSplat,
    RenderedMaps,
    blend_features,
    project,
    project_field,
    render,
    splat_transpose,
)

__all__ = [
    "ALL_CHANNELS", "BACKEND", "ProjectedField", "ProjectedSplat", "RenderedMaps", "available",
    "blend_features", "project", "project_field", "render", "splat_transpose",
]
