"""Training objective: per-domain transcription losses, encoder consistency and
their weighted combination

    L_total = (L_v + L_m) / 2 + w * L_CNS
"""

from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from altlora import ContractError, DimensionError, from_dict
from altlora.numerics import (
    Tensor,
    absolute,
    add,
    as_tensor,
    cross_entropy,
    mul,
    scale,
    sub,
    sum_,
)
from altlora.synthdata import PAD

STRATEGIES = ("voc", "mix", "random", "both", "cns")
CNS_KINDS = ("L1", "L2")


@dataclass
class LossConfig:
    """Strategy with its consistency kind (L1 or L2) and weight w >= 0

    cns_kind and weight only take effect when strategy is cns.
    """

    strategy: str = "cns"
    cns_kind: str = "L2"
    weight: float = 1.0

    def __post_init__(self):
        self.weight = float(self.weight)

        if self.strategy not in STRATEGIES:
            raise ContractError(
                f"Error, unknown strategy {self.strategy!r}, expected one of {', '.join(STRATEGIES)}"
            )
        if self.cns_kind not in CNS_KINDS:
            raise ContractError(f"Error, cns_kind must be L1 or L2, got {self.cns_kind!r}")
        if not self.weight >= 0.0:
            raise ContractError(f"Error, consistency weight must be >= 0, got {self.weight}")

    @property
    def cell_id(self) -> str:
        """Grid cell name: the strategy, or cns-<kind>-w<weight>"""

        if self.strategy != "cns":
            return self.strategy
        return f"cns-{self.cns_kind.lower()}-w{self.weight:g}"

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        return from_dict(cls, data, "loss")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    alt_v: float
    alt_m: float
    cns: float
    total: float

    def to_dict(self) -> dict:
        return {
            "L_v": self.alt_v,
            "L_m": self.alt_m,
            "L_CNS": self.cns,
            "L_total": self.total,
        }


def alt_loss(logits: Tensor, y) -> Tensor:
    """Cross-entropy of the shifted targets y, PAD positions excluded"""

    return cross_entropy(logits, y, ignore_index=PAD)


def consistency_loss(
    E_v: Tensor, E_m: Tensor, kind: str = "L2", mask: Optional[np.ndarray] = None
) -> Tensor:
    """Mean over the valid frames' elements of |E_v - E_m| (L1) or (E_v - E_m)^2 (L2)

    mask marks valid frames and has the shape of E without the feature axis.
    An empty mask gives 0 with a zero gradient.
    """

    if E_v.shape != E_m.shape:
        raise DimensionError(f"consistency_loss: {E_v.shape} doesn't match {E_m.shape}")
    if kind not in CNS_KINDS:
        raise ContractError(f"Error, consistency kind must be L1 or L2, got {kind!r}")

    if mask is None:
        mask = np.ones(E_v.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != E_v.shape[:-1]:
        raise DimensionError(f"consistency_loss: mask {mask.shape} doesn't fit {E_v.shape}")

    diff = sub(E_v, E_m)
    penalty = absolute(diff) if kind == "L1" else mul(diff, diff)
    masked = mul(penalty, Tensor(mask[..., None].astype(np.float64)))

    count = int(mask.sum()) * E_v.shape[-1]
    if count == 0:
        return scale(sum_(masked), 0.0)

    return scale(sum_(masked), 1.0 / count)


Scalar = Union[float, Tensor]


def combined_loss(L_v: Scalar, L_m: Scalar, L_cns: Scalar, w: float) -> Scalar:
    """(L_v + L_m) / 2 + w * L_cns, for floats or differentiable scalars"""

    if w < 0:
        raise ContractError(f"Error, consistency weight must be >= 0, got {w}")

    if not any(isinstance(term, Tensor) for term in (L_v, L_m, L_cns)):
        return (L_v + L_m) / 2 + w * L_cns

    return add(
        scale(add(as_tensor(L_v), as_tensor(L_m)), 0.5),
        scale(as_tensor(L_cns), w),
    )
