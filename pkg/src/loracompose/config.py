"""Run configuration for the guidance loop and the mask/fusion stage."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .errors import InvalidSpec

OVERLAP_RULES = ("average", "priority")


def check_keys(doc: Mapping[str, Any], allowed: Iterable[str], where: str) -> None:
    """Reject config documents containing keys outside the documented schema."""
    unknown = set(doc) - set(allowed)
    if unknown:
        raise InvalidSpec(f"unknown key(s) in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class GuidanceConfig:
    """Settings for the per-step contrastive latent optimization.

    ``step_scale`` is the base step size of the latent update; the applied
    step decays linearly over the run. ``refinement_steps`` are the sampler
    indices at which the update is repeated ``inner_iterations`` times, and
    no updates happen at or past ``cutoff_step``.
    """

    temperature: float = 0.5
    step_scale: float = 20.0
    refinement_steps: frozenset = field(default_factory=lambda: frozenset({0, 10, 20}))
    inner_iterations: int = 5
    cutoff_step: int = 25
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "refinement_steps", frozenset(int(s) for s in self.refinement_steps))
        if self.temperature <= 0:
            raise InvalidSpec("guidance temperature must be > 0")
        if self.step_scale < 0:
            raise InvalidSpec("guidance step_scale must be >= 0")
        if self.inner_iterations < 1:
            raise InvalidSpec("guidance inner_iterations must be >= 1")
        if self.cutoff_step < 0:
            raise InvalidSpec("guidance cutoff_step must be >= 0")
        bad = [s for s in self.refinement_steps if not 0 <= s < self.cutoff_step]
        if bad:
            raise InvalidSpec(f"refinement steps {sorted(bad)} outside [0, cutoff_step)")

    def validate_for_run(self, total_steps: int) -> None:
        if self.cutoff_step > total_steps:
            raise InvalidSpec(
                f"cutoff_step {self.cutoff_step} exceeds total sampler steps {total_steps}"
            )

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "GuidanceConfig":
        check_keys(
            doc,
            ["temperature", "step_scale", "refinement_steps", "inner_iterations", "cutoff_step", "enabled"],
            "guidance",
        )
        kwargs = dict(doc)
        if "refinement_steps" in kwargs:
            kwargs["refinement_steps"] = frozenset(kwargs["refinement_steps"])
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "step_scale": self.step_scale,
            "refinement_steps": sorted(self.refinement_steps),
            "inner_iterations": self.inner_iterations,
            "cutoff_step": self.cutoff_step,
            "enabled": self.enabled,
        }


@dataclass(frozen=True)
class MaskConfig:
    """Settings for attention-derived binary masks and latent fusion."""

    threshold: float = 0.5
    upsample: str = "nearest"
    overlap_rule: str = "average"
    enabled: bool = True

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise InvalidSpec("mask threshold must lie in (0, 1)")
        if self.upsample != "nearest":
            raise InvalidSpec(f"unsupported mask upsample mode: {self.upsample!r}")
        if self.overlap_rule not in OVERLAP_RULES:
            raise InvalidSpec(f"overlap_rule must be one of {OVERLAP_RULES}")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "MaskConfig":
        check_keys(doc, ["threshold", "upsample", "overlap_rule", "enabled"], "mask")
        return cls(**doc)

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "upsample": self.upsample,
            "overlap_rule": self.overlap_rule,
            "enabled": self.enabled,
        }
