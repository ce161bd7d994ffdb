"""
Render buffers
==============

Per-pixel outputs of one rasterized view. Fields hold ndarrays for plain
renders and `Var`s while training.
"""

from dataclasses import dataclass

import numpy as np

from app.core import autodiff as ad


@dataclass
class RenderBuffers:
    """Diffuse color, expected depth, blended normal, alpha_spec, transmittance and alpha."""

    diffuse: "ad.ArrayLike"              # (H, W, 3)
    depth: "ad.ArrayLike"                # (H, W)
    normal: "ad.ArrayLike"               # (H, W, 3)
    alpha_spec: "ad.ArrayLike"           # (H, W)
    final_transmittance: "ad.ArrayLike"  # (H, W)
    alpha: "ad.ArrayLike"                # (H, W)

    @property
    def height(self) -> int:
        return int(np.shape(ad.value(self.depth))[0])

    @property
    def width(self) -> int:
        return int(np.shape(ad.value(self.depth))[1])

    def numpy(self) -> "RenderBuffers":
        return RenderBuffers(
            diffuse=np.asarray(ad.value(self.diffuse)),
            depth=np.asarray(ad.value(self.depth)),
            normal=np.asarray(ad.value(self.normal)),
            alpha_spec=np.asarray(ad.value(self.alpha_spec)),
            final_transmittance=np.asarray(ad.value(self.final_transmittance)),
            alpha=np.asarray(ad.value(self.alpha)),
        )

    def mask(self, threshold: float) -> np.ndarray:
        return np.asarray(ad.value(self.alpha)) > threshold
