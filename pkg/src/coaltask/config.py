"""Model configuration shared by the DA and MTL fitters."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import InvalidArgumentError

VARIANTS = ("full", "diag", "full+x", "diag+x", "data")


@dataclass
class ModelConfig:
    model: str = "da"                 # "da" | "mtl"
    variant: str = "full"
    sigma2: float = 1.0               # root prior scale (and IW scale for sampling)
    rho2: float = 1.0                 # regression noise variance
    em_iters: int = 20
    holdout_fraction: float = 0.1     # 0 disables held-out iteration selection
    seed: int = 0
    task_kind: str = "classification"

    def __post_init__(self):
        if self.model not in ("da", "mtl"):
            raise InvalidArgumentError(f"unknown model {self.model!r}")
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {self.variant!r}")
        if self.sigma2 <= 0 or self.rho2 <= 0:
            raise InvalidArgumentError("sigma2 and rho2 must be positive")
        if self.em_iters < 1:
            raise InvalidArgumentError("em_iters must be at least 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise InvalidArgumentError("holdout_fraction must be in [0, 1)")
        if self.task_kind not in ("regression", "classification"):
            raise InvalidArgumentError(f"unknown task kind {self.task_kind!r}")

    @property
    def diagonal(self) -> bool:
        """Diagonal covariance mode (diag variants; the data variant clusters
        input summaries, which always carry diagonal variances)."""
        return self.variant in ("diag", "diag+x", "data")

    @property
    def models_inputs(self) -> bool:
        return self.variant in ("full+x", "diag+x", "data")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
