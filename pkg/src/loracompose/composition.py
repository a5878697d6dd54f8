"""Prompt breakdown: variants, token spans, concept groups, mask token sources.

A composition request names concepts in a base prompt and binds each to a
LoRA adapter. From that we derive one prompt variant per adapter (the
adapter's trigger word inserted next to its concept) plus the untouched
original, and group the (variant, token) coordinates that refer to the
same concept. Groups drive the contrastive loss downstream: members of a
group are positives, members of different groups are negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import yaml

from .backends.base import Tokenizer
from .config import GuidanceConfig, MaskConfig, check_keys
from .errors import InvalidSpec, PromptTooLong, SpanNotFound

BINDING_KINDS = ("content", "style")

_EDGE_PUNCT = ".,;:!?()[]{}\"'`"


def normalize_word(word: str) -> str:
    """Lowercase a word and strip edge punctuation; may come back empty."""
    return word.lower().strip(_EDGE_PUNCT)


def normalize_words(text: str) -> list[str]:
    """Normalized form of each whitespace word, 1:1 with ``text.split()``."""
    return [normalize_word(w) for w in text.split()]


@dataclass(frozen=True)
class ConceptBinding:
    """Binds one concept of the prompt to one adapter.

    Content bindings must name a contiguous word span of the base prompt;
    style bindings apply to the image as a whole and carry no span.
    """

    concept_text: str
    lora_id: str
    kind: str = "content"

    def __post_init__(self):
        if self.kind not in BINDING_KINDS:
            raise InvalidSpec(f"binding kind must be one of {BINDING_KINDS}, got {self.kind!r}")
        if self.kind == "content" and not self.concept_text.strip():
            raise InvalidSpec("content binding needs a non-empty concept_text")


@dataclass(frozen=True)
class CompositionSpec:
    """A full composition request: prompt, bindings, seed, and stage configs."""

    base_prompt: str
    bindings: tuple[ConceptBinding, ...]
    seed: int = 0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)

    def __post_init__(self):
        object.__setattr__(self, "bindings", tuple(self.bindings))
        if not self.content_bindings:
            raise InvalidSpec("at least one content binding is required")
        ids = [b.lora_id for b in self.bindings]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("lora_ids must be distinct across bindings")
        texts = [b.concept_text for b in self.content_bindings]
        if len(set(texts)) != len(texts):
            raise InvalidSpec("content concept texts must be distinct")

    @property
    def content_bindings(self) -> list[ConceptBinding]:
        return [b for b in self.bindings if b.kind == "content"]

    @property
    def style_bindings(self) -> list[ConceptBinding]:
        return [b for b in self.bindings if b.kind == "style"]

    def binding_for(self, lora_id: str) -> ConceptBinding:
        for b in self.bindings:
            if b.lora_id == lora_id:
                return b
        raise KeyError(lora_id)

    def as_dict(self) -> dict:
        return {
            "prompt": self.base_prompt,
            "concepts": [
                {"text": b.concept_text, "lora": b.lora_id, "kind": b.kind} for b in self.bindings
            ],
            "seed": self.seed,
            "guidance": self.guidance.as_dict(),
            "mask": self.mask.as_dict(),
        }


@dataclass(frozen=True)
class PromptVariant:
    """One prompt of the breakdown.

    Variant 0 is the original prompt with no adapter; each other variant
    carries exactly one adapter and that adapter's trigger word inserted
    into the text. ``token_spans`` maps every content concept to its token
    indices under this variant's tokenization; ``trigger_span`` holds the
    inserted trigger's token indices.
    """

    variant_id: int
    text: str
    active_lora: Optional[str]
    token_spans: dict[str, list[int]]
    trigger_span: Optional[list[int]] = None


@dataclass(frozen=True)
class ConceptGroup:
    """All (variant_id, token_index) coordinates attending to one concept."""

    concept_text: str
    members: tuple[tuple[int, int], ...]


def _find_spans(prompt_words: list[str], spec: CompositionSpec, tokenizer: Tokenizer) -> dict[str, tuple[int, int]]:
    """Locate each content concept as a word-range of the prompt.

    Bindings claim the leftmost occurrence not already claimed; ranges are
    half-open over word positions.
    """
    norm_prompt = [_norm_word(w, tokenizer) for w in prompt_words]
    claimed: list[tuple[int, int]] = []
    spans: dict[str, tuple[int, int]] = {}
    for binding in spec.content_bindings:
        concept_words = [w for w in (_norm_word(c, tokenizer) for c in binding.concept_text.split()) if w]
        if not concept_words:
            raise SpanNotFound(f"concept {binding.concept_text!r} has no tokenizable words")
        n = len(concept_words)
        found = None
        for start in range(0, len(norm_prompt) - n + 1):
            if norm_prompt[start : start + n] != concept_words:
                continue
            if any(start < c_end and start + n > c_start for c_start, c_end in claimed):
                continue
            found = (start, start + n)
            break
        if found is None:
            raise SpanNotFound(
                f"concept {binding.concept_text!r} does not occur unclaimed in prompt {' '.join(prompt_words)!r}"
            )
        claimed.append(found)
        spans[binding.concept_text] = found
    return spans


def _norm_word(word: str, tokenizer: Tokenizer) -> str:
    normed = tokenizer.normalize(word)
    return normed[0] if normed else ""


def _token_spans_for(words: list[str], word_ranges: Mapping[str, tuple[int, int]], tokenizer: Tokenizer) -> dict[str, list[int]]:
    text = " ".join(words)
    per_word = tokenizer.word_token_spans(text)
    spans: dict[str, list[int]] = {}
    for concept, (start, end) in word_ranges.items():
        spans[concept] = [t for w in range(start, end) for t in per_word[w]]
    return spans


def _check_length(text: str, tokenizer: Tokenizer) -> None:
    if len(tokenizer.encode(text)) > tokenizer.max_length:
        raise PromptTooLong(f"prompt exceeds tokenizer max length {tokenizer.max_length}: {text!r}")


def resolve_triggers(spec: CompositionSpec, triggers: Optional[Mapping[str, str]] = None) -> dict[str, str]:
    """Trigger word per adapter; defaults to the adapter id itself."""
    out = {b.lora_id: b.lora_id for b in spec.bindings}
    if triggers:
        out.update({k: v for k, v in triggers.items() if k in out})
    return out


def build_variants(
    spec: CompositionSpec,
    tokenizer: Tokenizer,
    triggers: Optional[Mapping[str, str]] = None,
) -> list[PromptVariant]:
    """Build the original prompt plus one trigger-inserted variant per binding.

    Content triggers go immediately before their concept span; style
    triggers are appended to the prompt tail. Insertion is verbatim (no
    article fixups), and prompt text is canonicalized to single-space word
    separation so removing a trigger word reproduces variant 0 exactly.
    """
    trig = resolve_triggers(spec, triggers)
    base_words = spec.base_prompt.split()
    word_ranges = _find_spans(base_words, spec, tokenizer)

    base_text = " ".join(base_words)
    _check_length(base_text, tokenizer)
    variants = [
        PromptVariant(
            variant_id=0,
            text=base_text,
            active_lora=None,
            token_spans=_token_spans_for(base_words, word_ranges, tokenizer),
        )
    ]

    vid = 1
    for binding in spec.content_bindings:
        start, _ = word_ranges[binding.concept_text]
        words = base_words[:start] + [trig[binding.lora_id]] + base_words[start:]
        shifted = {
            concept: (s + 1, e + 1) if s >= start else (s, e)
            for concept, (s, e) in word_ranges.items()
        }
        text = " ".join(words)
        _check_length(text, tokenizer)
        per_word = tokenizer.word_token_spans(text)
        variants.append(
            PromptVariant(
                variant_id=vid,
                text=text,
                active_lora=binding.lora_id,
                token_spans=_token_spans_for(words, shifted, tokenizer),
                trigger_span=list(per_word[start]),
            )
        )
        vid += 1

    for binding in spec.style_bindings:
        words = base_words + [trig[binding.lora_id]]
        text = " ".join(words)
        _check_length(text, tokenizer)
        per_word = tokenizer.word_token_spans(text)
        variants.append(
            PromptVariant(
                variant_id=vid,
                text=text,
                active_lora=binding.lora_id,
                token_spans=_token_spans_for(words, word_ranges, tokenizer),
                trigger_span=list(per_word[len(words) - 1]),
            )
        )
        vid += 1

    return variants


def build_groups(variants: Sequence[PromptVariant], spec: CompositionSpec) -> list[ConceptGroup]:
    """One group per content concept: its tokens from every variant, plus the
    trigger tokens from the concept's own applied variant."""
    applied = {v.active_lora: v for v in variants if v.active_lora is not None}
    groups = []
    for binding in spec.content_bindings:
        members: list[tuple[int, int]] = []
        own = applied[binding.lora_id]
        for variant in variants:
            for tok in variant.token_spans.get(binding.concept_text, []):
                members.append((variant.variant_id, tok))
            if variant.variant_id == own.variant_id and own.trigger_span:
                members.extend((variant.variant_id, t) for t in own.trigger_span)
        members.sort()
        groups.append(ConceptGroup(concept_text=binding.concept_text, members=tuple(members)))
    return groups


def mask_token_sources(
    spec: CompositionSpec, variants: Sequence[PromptVariant]
) -> dict[str, list[tuple[int, int]]]:
    """Tokens whose attention seeds each content adapter's mask.

    Only the adapter's own applied variant contributes: its trigger tokens
    followed by its concept tokens.
    """
    applied = {v.active_lora: v for v in variants if v.active_lora is not None}
    sources: dict[str, list[tuple[int, int]]] = {}
    for binding in spec.content_bindings:
        own = applied[binding.lora_id]
        toks = [(own.variant_id, t) for t in (own.trigger_span or [])]
        toks += [(own.variant_id, t) for t in own.token_spans[binding.concept_text]]
        sources[binding.lora_id] = toks
    return sources


class _WordNormalizer:
    """Just enough of the tokenizer protocol to locate concept spans in text."""

    max_length = 10**9

    @staticmethod
    def normalize(text: str) -> list[str]:
        return [w for w in normalize_words(text) if w]


def combined_prompt_text(spec: CompositionSpec, triggers: Optional[Mapping[str, str]] = None) -> str:
    """Prompt with every trigger inserted at once (single-branch baselines)."""
    trig = resolve_triggers(spec, triggers)
    base_words = spec.base_prompt.split()
    word_ranges = _find_spans(base_words, spec, _WordNormalizer)  # type: ignore[arg-type]
    inserts = sorted(
        ((word_ranges[b.concept_text][0], trig[b.lora_id]) for b in spec.content_bindings),
        reverse=True,
    )
    words = list(base_words)
    for pos, trigger in inserts:
        words.insert(pos, trigger)
    words += [trig[b.lora_id] for b in spec.style_bindings]
    return " ".join(words)


SPEC_KEYS = ("prompt", "concepts", "seed", "guidance", "mask")
CONCEPT_KEYS = ("text", "lora", "kind")


def spec_from_dict(doc: Mapping[str, Any]) -> CompositionSpec:
    """Parse the composition config document; unknown keys are rejected."""
    check_keys(doc, SPEC_KEYS, "composition spec")
    if "prompt" not in doc or "concepts" not in doc:
        raise InvalidSpec("composition spec requires 'prompt' and 'concepts'")
    bindings = []
    for i, entry in enumerate(doc["concepts"]):
        if not isinstance(entry, Mapping):
            raise InvalidSpec(f"concepts[{i}] must be a mapping")
        check_keys(entry, CONCEPT_KEYS, f"concepts[{i}]")
        if "text" not in entry or "lora" not in entry:
            raise InvalidSpec(f"concepts[{i}] requires 'text' and 'lora'")
        bindings.append(
            ConceptBinding(
                concept_text=str(entry["text"]),
                lora_id=str(entry["lora"]),
                kind=str(entry.get("kind", "content")),
            )
        )
    return CompositionSpec(
        base_prompt=str(doc["prompt"]),
        bindings=tuple(bindings),
        seed=int(doc.get("seed", 0)),
        guidance=GuidanceConfig.from_dict(doc.get("guidance", {})),
        mask=MaskConfig.from_dict(doc.get("mask", {})),
    )


def load_spec(source: Union[str, Path, Mapping[str, Any]]) -> CompositionSpec:
    """Load a CompositionSpec from a YAML/JSON document path or a parsed mapping."""
    if isinstance(source, Mapping):
        return spec_from_dict(source)
    doc = yaml.safe_load(Path(source).read_text())
    if not isinstance(doc, Mapping):
        raise InvalidSpec(f"{source}: top-level document must be a mapping")
    return spec_from_dict(doc)
