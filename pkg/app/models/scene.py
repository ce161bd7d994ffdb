"""
Scene model
===========

The canonical scene: main splats, environment splats and one residual
field per set. Treated as an immutable value; updates build a new Scene.
"""

from typing import NamedTuple

from app.models.deformation import DeformationField
from app.models.splat import SplatSet


class Scene(NamedTuple):
    main: SplatSet
    env: SplatSet
    main_field: DeformationField
    env_field: DeformationField

    @property
    def n_main(self) -> int:
        return self.main.count

    @property
    def n_env(self) -> int:
        return self.env.count

    def detached(self) -> "Scene":
        return Scene(self.main.detached(), self.env.detached(), self.main_field.detached(), self.env_field.detached())
