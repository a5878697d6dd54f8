"""Exception and warning types shared across the package."""


class LoraComposeError(Exception):
    """Base class for all package errors."""


class InvalidSpec(LoraComposeError):
    """A composition spec or manifest violates its invariants."""


class SpanNotFound(LoraComposeError):
    """A concept text does not occur as a contiguous token span in the prompt."""


class PromptTooLong(LoraComposeError):
    """Trigger insertion pushed a prompt past the tokenizer's max length."""


class AdapterMismatch(LoraComposeError):
    """Adapter tensors are incompatible with the target layer shapes or keys."""


class UnsupportedFormat(LoraComposeError):
    """An adapter file does not follow a recognized key scheme."""


class NumericalFailure(LoraComposeError):
    """Non-finite values appeared where finite math was required."""


class ContractViolation(LoraComposeError):
    """A caller broke an operation's preconditions (shape, scalarity, ratio)."""


class ScheduleExhausted(LoraComposeError):
    """A sampler step was requested past the end of the noise schedule."""


class ResolutionUnavailable(LoraComposeError):
    """No captured attention record exists at the requested resolution."""


class ZeroVector(LoraComposeError):
    """Cosine similarity was requested for a zero-norm vector."""


class EmptyGroup(LoraComposeError):
    """A concept group with no members reached the contrastive loss."""


class ExtractorUnavailable(LoraComposeError):
    """The requested feature extractor cannot be constructed in this environment."""


class BackendUnavailable(LoraComposeError):
    """The requested denoiser backend cannot be constructed in this environment."""


class DegenerateMapWarning(UserWarning):
    """An all-zero attention map was thresholded; a zero mask was returned."""


class MissingAlphaWarning(UserWarning):
    """An adapter file lacked a per-layer alpha; alpha=rank was assumed."""
