"""
Deformation models
==================

Weights of a time-conditioned residual network and the residual tuple it
predicts for each splat.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.core import autodiff as ad

MAIN = "main"
ENV = "env"

# dp(3) ds(2) dr(4) do(1) [dtint(1)]
OUTPUT_WIDTH = {MAIN: 11, ENV: 10}


def encoded_width(dims: int, freqs: int) -> int:
    return dims * (2 * freqs + 1)


@dataclass
class DeformationField:
    """MLP over encoded (canonical center, time) predicting raw-parameter residuals."""

    kind: str
    pos_freqs: int
    time_freqs: int
    weights: List["ad.ArrayLike"] = field(default_factory=list)
    biases: List["ad.ArrayLike"] = field(default_factory=list)

    @property
    def input_width(self) -> int:
        return encoded_width(3, self.pos_freqs) + encoded_width(1, self.time_freqs)

    @property
    def output_width(self) -> int:
        return OUTPUT_WIDTH[self.kind]

    @property
    def hidden_widths(self) -> List[int]:
        return [int(np.shape(ad.value(w))[1]) for w in self.weights[:-1]]

    @property
    def layer_shapes(self) -> List[tuple]:
        return [tuple(np.shape(ad.value(w))) for w in self.weights]

    @classmethod
    def create(
        cls,
        kind: str,
        pos_freqs: int = 6,
        time_freqs: int = 4,
        hidden_layers: int = 4,
        hidden_width: int = 64,
        rng: Optional[np.random.Generator] = None,
    ) -> "DeformationField":
        """Glorot-uniform hidden layers and an all-zero output head (identity deformation)."""
        if kind not in OUTPUT_WIDTH:
            raise ValueError(f"unknown field kind '{kind}'")
        rng = rng if rng is not None else np.random.default_rng(0)
        field_ = cls(kind=kind, pos_freqs=pos_freqs, time_freqs=time_freqs)
        widths = [field_.input_width] + [hidden_width] * hidden_layers
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            field_.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            field_.biases.append(np.zeros(fan_out))
        field_.weights.append(np.zeros((widths[-1], OUTPUT_WIDTH[kind])))
        field_.biases.append(np.zeros(OUTPUT_WIDTH[kind]))
        return field_

    def check_shapes(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty lists of equal length")
        width = self.input_width
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            ws, bs = np.shape(ad.value(w)), np.shape(ad.value(b))
            if len(ws) != 2 or ws[0] != width or bs != (ws[1],):
                raise ValueError(f"layer {i} has shape {ws}/{bs}, expected input width {width}")
            width = ws[1]
        if width != self.output_width:
            raise ValueError(f"output width {width} does not match kind '{self.kind}'")

    def detached(self) -> "DeformationField":
        return DeformationField(
            kind=self.kind,
            pos_freqs=self.pos_freqs,
            time_freqs=self.time_freqs,
            weights=[np.array(ad.value(w), dtype=np.float64) for w in self.weights],
            biases=[np.array(ad.value(b), dtype=np.float64) for b in self.biases],
        )


@dataclass
class ResidualTuple:
    """Per-splat raw-parameter residuals; rows follow the queried points."""

    dp: "ad.ArrayLike"
    ds: "ad.ArrayLike"
    dr: "ad.ArrayLike"
    do_: "ad.ArrayLike"
    dtint: Optional["ad.ArrayLike"] = None

    def is_finite(self) -> bool:
        parts = [self.dp, self.ds, self.dr, self.do_] + ([self.dtint] if self.dtint is not None else [])
        return all(np.isfinite(ad.value(p)).all() for p in parts)
