"""
Domain models package for SpecSplat.

This package contains splat sets, cameras, datasets, render buffers,
deformation fields and the pydantic schemas of every file format.
"""

from .buffers import RenderBuffers
from .camera import Camera, Dataset, Frame, look_at
from .deformation import DeformationField, ResidualTuple
from .ray import Ray, SplatHit
from .scene import Scene
from .splat import EnvSplat, SplatPrimitive, SplatSet

__all__ = [
    "Camera",
    "Dataset",
    "DeformationField",
    "EnvSplat",
    "Frame",
    "Ray",
    "RenderBuffers",
    "ResidualTuple",
    "Scene",
    "SplatHit",
    "SplatPrimitive",
    "SplatSet",
    "look_at",
]
