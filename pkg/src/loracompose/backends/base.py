"""Denoiser backend contract and the domain types it exchanges.

A backend bundles a tokenizer, a prompt encoder that honors per-adapter
text-encoder deltas, a denoising step that can capture cross-attention,
reverse-mode differentiation of attention-derived losses with respect to
the latent, and a deterministic sampler step. The toy backend implements
the full contract on CPU; adapters for real diffusion checkpoints plug in
behind the same interface.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Optional, Protocol, Sequence

import torch

from ..errors import ContractViolation

if TYPE_CHECKING:
    from ..composition import PromptVariant
    from ..lora import LoRASet


class Tokenizer(Protocol):
    """Minimal tokenizer surface the composition layer relies on."""

    max_length: int

    def normalize(self, text: str) -> list[str]:
        """Split text into the normalized words token spans are built from."""

    def encode(self, text: str) -> list[int]:
        """Token ids for the full text."""

    def word_token_spans(self, text: str) -> list[list[int]]:
        """Token indices contributed by each normalized word, in order."""

    def decode(self, token_ids: Sequence[int]) -> str:
        """Text for a token-id subsequence (used for span round-trips)."""


@dataclass(frozen=True)
class LatentState:
    """Spatial latent being denoised, plus its position in the sampling schedule.

    ``timestep_index`` counts completed sampler steps: 0 is the initial
    (noisiest) latent and ``total_steps`` marks a fully sampled one.
    """

    data: torch.Tensor
    timestep_index: int = 0

    def with_data(self, data: torch.Tensor) -> "LatentState":
        return replace(self, data=data)

    def advanced(self, data: torch.Tensor) -> "LatentState":
        return LatentState(data=data, timestep_index=self.timestep_index + 1)


@dataclass(frozen=True)
class PromptEmbedding:
    """Encoded prompt for one variant; ``encoder_lora`` names the text-encoder patch used."""

    data: torch.Tensor
    variant_id: int
    encoder_lora: Optional[str] = None

    @property
    def length(self) -> int:
        return int(self.data.shape[0])


@dataclass(frozen=True)
class AttentionRecord:
    """One cross-attention layer's head-averaged map at a spatial resolution.

    ``map`` has shape (h*w, l); each row is a softmax distribution over the
    l prompt tokens observed from one spatial location.
    """

    layer_id: str
    head_count: int
    resolution: tuple[int, int]
    map: torch.Tensor


@dataclass(frozen=True)
class StepOutput:
    """Noise prediction for one denoiser evaluation plus any captured attention."""

    noise_prediction: torch.Tensor
    records: list[AttentionRecord] = field(default_factory=list)


class DenoiserBackend(abc.ABC):
    """Contract every denoiser backend implements.

    Instances are confined to one generation at a time; run parallel
    generations on distinct instances. Adapter patching is scoped to each
    call: compute under patched weights, always restore on exit.
    """

    tokenizer: Tokenizer
    latent_shape: tuple[int, int, int]
    attention_resolution: tuple[int, int]

    @abc.abstractmethod
    def total_steps(self) -> int:
        """Number of sampler steps in the configured schedule."""

    @abc.abstractmethod
    def initial_latent(self, seed: int) -> LatentState:
        """Seeded unit-Gaussian latent at timestep_index 0."""

    @abc.abstractmethod
    def encode_prompt(self, variant: "PromptVariant", lora_set: "LoRASet") -> PromptEmbedding:
        """Encode a variant's text, patching the text encoder with the active
        adapter's text-encoder deltas when it has any."""

    @abc.abstractmethod
    def denoise_step(
        self, z: LatentState, embedding: PromptEmbedding, lora_set: "LoRASet", capture: bool = False
    ) -> StepOutput:
        """One denoiser evaluation under the patched weights.

        When ``capture`` is set, all cross-attention maps at the capture
        resolution are returned; capturing must not perturb the prediction.
        """

    @abc.abstractmethod
    def grad_wrt_latent(
        self,
        z: LatentState,
        passes: Sequence[tuple[PromptEmbedding, "LoRASet"]],
        loss_fn: Callable[[list[list[AttentionRecord]]], torch.Tensor],
    ) -> tuple[torch.Tensor, float]:
        """Exact reverse-mode gradient of a scalar attention loss w.r.t. ``z.data``.

        Runs one captured denoise per entry of ``passes`` on the shared
        latent, applies ``loss_fn`` to the per-pass record lists, and
        differentiates. Returns (gradient, loss value).
        """

    @abc.abstractmethod
    def sampler_step(self, z: LatentState, noise_prediction: torch.Tensor) -> LatentState:
        """Deterministic sampler update advancing one schedule position."""

    @abc.abstractmethod
    def decode(self, z: LatentState) -> "object":
        """Decode a latent into an image array (uint8, HxW or HxWx3)."""


def require_scalar(value: torch.Tensor, what: str) -> torch.Tensor:
    if not isinstance(value, torch.Tensor) or value.dim() != 0:
        raise ContractViolation(f"{what} must be a scalar tensor, got {value!r}")
    return value
