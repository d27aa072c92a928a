"""Differential-privacy output perturbation for client updates.

The agent clips the update delta (trained minus received weights) to an
L2 ball of radius ``clip_norm`` and adds i.i.d. Laplace noise with scale
clip_norm / epsilon per coordinate. Noise is applied to the delta only,
never to raw data. Per-round epsilons compose additively across rounds
(basic composition), which is what experiment reports show as the total
budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidPrivacyConfig
from .params import ParameterVector, l2_norm

MECHANISMS = ("none", "laplace")


@dataclass(frozen=True)
class PrivacyConfig:
    mechanism: str = "none"
    epsilon: Optional[float] = None
    clip_norm: Optional[float] = None
    noise_seed: Optional[int] = None

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise InvalidPrivacyConfig(f"mechanism must be one of {MECHANISMS}")
        if self.mechanism == "laplace":
            if self.epsilon is None or self.epsilon <= 0:
                raise InvalidPrivacyConfig("laplace mechanism needs epsilon > 0")
            if self.clip_norm is None or self.clip_norm <= 0:
                raise InvalidPrivacyConfig("laplace mechanism needs clip_norm > 0")

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "epsilon": self.epsilon,
            "clip_norm": self.clip_norm,
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


def clip_to_norm(delta: ParameterVector, clip_norm: float) -> ParameterVector:
    """Scale the delta onto the L2 ball of the given radius if it is outside."""
    norm = l2_norm(delta)
    if norm <= clip_norm:
        return delta
    return ParameterVector(delta.layout, delta.values * (clip_norm / norm))


def apply_dp(delta: ParameterVector, privacy: PrivacyConfig) -> ParameterVector:
    """Clip then perturb an update delta according to the privacy config."""
    if privacy.mechanism == "none":
        return delta
    clipped = clip_to_norm(delta, privacy.clip_norm)
    rng = np.random.default_rng(privacy.noise_seed)
    scale = privacy.clip_norm / privacy.epsilon
    noise = rng.laplace(0.0, scale, size=len(clipped))
    return ParameterVector(clipped.layout, clipped.values + noise)
