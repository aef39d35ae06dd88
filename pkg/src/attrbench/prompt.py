"""Caption decomposition and attribute-directed text editing.

Captions follow the pattern ⟨domain⟩ of ⟨adjectives⟩ ⟨subject⟩ ⟨action⟩
⟨background⟩. Edits are token-level splices recorded as aligned span pairs,
so every edit can be reverted exactly and the edited-token indices are known
for attention guidance. A rule-based editor is the default; an external
language model can propose candidates through a small HTTP client, with every
candidate validated against the same splice rules.
"""

from __future__ import annotations

import difflib
import json
import logging
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum

log = logging.getLogger(__name__)

_PUNCT = ".,!?;:'\"()"


class PromptError(ValueError):
    pass


class PromptBackendError(RuntimeError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokenizer; punctuation is stripped from tokens."""
    out = []
    for word in text.lower().split():
        word = word.strip(_PUNCT)
        if word:
            out.append(word)
    return out


def detokenize(tokens) -> str:
    return " ".join(tokens)


class AttributeKind(Enum):
    COLOR = "color"
    MATERIAL = "material"
    STYLE = "style"
    WEATHER = "weather"


DEFAULT_ATTRIBUTE_VOCAB: dict[AttributeKind, tuple[str, ...]] = {
    AttributeKind.COLOR: (
        "red", "blue", "green", "yellow", "white", "black", "brown", "purple",
    ),
    AttributeKind.MATERIAL: ("wooden", "metallic", "stone", "glass", "plastic"),
    AttributeKind.STYLE: (
        "watercolor painting", "pencil sketch", "digital painting", "oil painting",
    ),
    AttributeKind.WEATHER: ("heavy rain", "snowfall", "dense fog", "night"),
}

WEATHER_PHRASES = {
    "heavy rain": ("under", "a", "heavy", "downpour"),
    "snowfall": ("in", "heavy", "snowfall"),
    "dense fog": ("in", "dense", "fog"),
    "night": ("at", "night"),
}

ARTICLES = {"a", "an", "the", "two", "three", "some"}
ACTIONS = {
    "on", "in", "at", "under", "over", "near", "beside", "by",
    "standing", "sitting", "lying", "laying", "walking", "running", "flying",
    "parked", "resting", "floating",
}
EXTRA_ADJECTIVES = {"leather", "soft", "small", "large", "big", "little", "fluffy", "shiny"}
FORM_NOUNS = {"model", "sculpture", "statue", "figure"}
ANIMATE_SUBJECTS = {
    "cat", "dog", "horse", "sheep", "cow", "bird", "person", "man", "woman",
}

_STYLE_WORDS = {w for phrase in DEFAULT_ATTRIBUTE_VOCAB[AttributeKind.STYLE] for w in phrase.split()}
_WEATHER_WORDS = {w for phrase in WEATHER_PHRASES.values() for w in phrase}


def adjective_words(vocab=None) -> set[str]:
    vocab = vocab or DEFAULT_ATTRIBUTE_VOCAB
    return (
        set(vocab[AttributeKind.COLOR])
        | set(vocab[AttributeKind.MATERIAL])
        | EXTRA_ADJECTIVES
    )


DEFAULT_VOCAB: tuple[str, ...] = tuple(
    dict.fromkeys(
        ["<pad>", "<unk>", "of"]
        + sorted(ARTICLES)
        + ["photo", "image", "picture", "painting", "sketch"]
        + list(DEFAULT_ATTRIBUTE_VOCAB[AttributeKind.COLOR])
        + ["gray"]
        + list(DEFAULT_ATTRIBUTE_VOCAB[AttributeKind.MATERIAL])
        + sorted(_STYLE_WORDS)
        + sorted(_WEATHER_WORDS)
        + sorted(ACTIONS)
        + sorted(EXTRA_ADJECTIVES)
        + sorted(FORM_NOUNS)
        + sorted(ANIMATE_SUBJECTS)
        + ["circle", "square", "triangle", "backdrop", "background", "ground", "grass", "sky"]
    )
)


class Tokenizer:
    """Word→id map over a fixed vocabulary; unknown words map to <unk>."""

    def __init__(self, vocab=DEFAULT_VOCAB):
        self.vocab = tuple(vocab) if vocab else DEFAULT_VOCAB
        if "<unk>" not in self.vocab:
            self.vocab = ("<unk>",) + self.vocab
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.unk = self.index["<unk>"]

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk) for w in tokenize(text)]

    def decode(self, ids) -> list[str]:
        return [self.vocab[i] for i in ids]

    def __len__(self):
        return len(self.vocab)


Span = tuple[int, int]  # token index range, end exclusive


@dataclass(frozen=True)
class PromptParts:
    """Decomposed caption; spans index into ``raw`` and are disjoint/ordered."""

    raw: tuple[str, ...]
    domain: Span | None
    adjectives: tuple[Span, ...]
    subject: Span
    action: Span | None
    background: Span | None

    def text(self, span: Span | None) -> str:
        return "" if span is None else detokenize(self.raw[span[0] : span[1]])

    @property
    def domain_text(self) -> str:
        return self.text(self.domain)

    @property
    def subject_text(self) -> str:
        return self.text(self.subject)

    @property
    def adjective_texts(self) -> tuple[str, ...]:
        return tuple(self.text(s) for s in self.adjectives)

    @property
    def action_text(self) -> str:
        return self.text(self.action)

    @property
    def background_text(self) -> str:
        return self.text(self.background)

    def reassemble(self) -> str:
        return detokenize(self.raw)


def decompose_caption(text: str, vocab=None) -> PromptParts:
    """Split a caption into domain / adjectives / subject / action / background."""
    toks = tokenize(text)
    if not toks:
        raise PromptError("empty caption")
    adjset = adjective_words(vocab)

    i = 0
    domain_end = 0
    # consume leading "<article>? <words> of" groups as the domain
    while True:
        j = i
        if j < len(toks) and toks[j] in ARTICLES:
            j += 1
        k = j
        while k < len(toks) and toks[k] not in ARTICLES and toks[k] != "of" and toks[k] not in adjset and toks[k] not in ACTIONS:
            k += 1
        if k < len(toks) and toks[k] == "of" and k > j:
            domain_end = k
            i = k + 1
        else:
            break
    domain = (0, domain_end) if domain_end > 0 else None

    if i < len(toks) and toks[i] in ARTICLES:
        i += 1
    adjectives = []
    while i < len(toks) and toks[i] in adjset:
        adjectives.append((i, i + 1))
        i += 1
    while i < len(toks) and toks[i] == "and":
        i += 1
        while i < len(toks) and toks[i] in adjset:
            adjectives.append((i, i + 1))
            i += 1
    if i >= len(toks) or toks[i] in ACTIONS:
        raise PromptError(f"no recognizable subject noun in {text!r}")
    subject = (i, i + 1)
    i += 1
    while i < len(toks) and toks[i] in FORM_NOUNS:
        i += 1

    action = None
    if i < len(toks) and toks[i] in ACTIONS:
        action = (i, i + 1)
        i += 1
    while i < len(toks) and (toks[i] in ARTICLES or toks[i] in ACTIONS):
        i += 1
    background = (i, len(toks)) if i < len(toks) else None

    return PromptParts(
        raw=tuple(toks),
        domain=domain,
        adjectives=tuple(adjectives),
        subject=subject,
        action=action,
        background=background,
    )


@dataclass(frozen=True)
class EditRequest:
    """A token-level splice between a source and a target caption.

    ``segments`` aligns source spans with their target replacements;
    ``edit_indices`` lists every target token produced by a replacement.
    Reverting the splices must reproduce the source exactly.
    """

    source: tuple[str, ...]
    target: tuple[str, ...]
    segments: tuple[tuple[Span, Span], ...]
    kind: AttributeKind
    value: str

    def __post_init__(self):
        if not self.segments:
            raise PromptError("edit declares no changed spans")
        if self.reverted() != self.source:
            raise PromptError("edit segments do not splice back to the source")
        if not self.edit_indices:
            raise PromptError("edit produced no target tokens")
        if max(self.edit_indices) >= len(self.target):
            raise PromptError("edit indices out of target bounds")

    @property
    def edit_indices(self) -> tuple[int, ...]:
        out = []
        for (_, (t0, t1)) in self.segments:
            out.extend(range(t0, t1))
        return tuple(out)

    @property
    def source_text(self) -> str:
        return detokenize(self.source)

    @property
    def target_text(self) -> str:
        return detokenize(self.target)

    def reverted(self) -> tuple[str, ...]:
        """Splice the source spans back over their target replacements."""
        out = []
        t_cursor = 0
        for (s0, s1), (t0, t1) in sorted(self.segments, key=lambda p: p[1][0]):
            out.extend(self.target[t_cursor:t0])
            out.extend(self.source[s0:s1])
            t_cursor = t1
        out.extend(self.target[t_cursor:])
        return tuple(out)


def _article_for(word: str) -> str:
    return "an" if word[:1] in "aeiou" else "a"


def edit_attribute(parts: PromptParts, kind: AttributeKind, value: str, vocab=None) -> EditRequest:
    """Rule-based caption edit for one attribute value.

    Color replaces (or inserts) an adjective; material additionally appends a
    form noun after the subject; style prefixes a style phrase; weather
    appends a weather phrase after the background.
    """
    vocab = vocab or DEFAULT_ATTRIBUTE_VOCAB
    if value not in vocab[kind]:
        raise PromptError(
            f"unknown {kind.value} value {value!r}; vocabulary: {list(vocab[kind])}"
        )
    src = list(parts.raw)
    colors = set(vocab[AttributeKind.COLOR])
    materials = set(vocab[AttributeKind.MATERIAL])

    if kind is AttributeKind.COLOR:
        color_spans = [s for s in parts.adjectives if parts.text(s) in colors]
        if color_spans:
            i = color_spans[-1][0]
            target = src[:i] + [value] + src[i + 1 :]
            segments = (((i, i + 1), (i, i + 1)),)
        else:
            i = parts.subject[0]
            target = src[:i] + [value] + src[i:]
            segments = (((i, i), (i, i + 1)),)
        return EditRequest(tuple(src), tuple(target), segments, kind, value)

    if kind is AttributeKind.MATERIAL:
        replace_spans = [
            s for s in parts.adjectives if parts.text(s) in colors | materials
        ]
        segments = []
        target = list(src)
        shift = 0
        if replace_spans:
            i = replace_spans[-1][0]
            target[i] = value
            segments.append(((i, i + 1), (i, i + 1)))
            adj_pos = i
        else:
            i = parts.subject[0]
            target = target[:i] + [value] + target[i:]
            segments.append(((i, i), (i, i + 1)))
            adj_pos = i
            shift = 1
        # fix the article preceding the (new) adjective
        art = adj_pos - 1
        if art >= 0 and src[art] in {"a", "an"}:
            want = _article_for(target[adj_pos])
            if target[art] != want:
                target[art] = want
                segments.append(((art, art + 1), (art, art + 1)))
        subj_end = parts.subject[1] + shift
        noun = "sculpture" if parts.subject_text in ANIMATE_SUBJECTS else "model"
        target = target[:subj_end] + [noun] + target[subj_end:]
        segments.append(((parts.subject[1], parts.subject[1]), (subj_end, subj_end + 1)))
        segments = tuple(sorted(segments, key=lambda p: p[1][0]))
        return EditRequest(tuple(src), tuple(target), segments, kind, value)

    if kind is AttributeKind.STYLE:
        phrase = ["a"] + value.split() + ["of"]
        target = phrase + src
        segments = (((0, 0), (0, len(phrase))),)
        return EditRequest(tuple(src), tuple(target), segments, kind, value)

    # weather: append a phrase, preserving all original tokens in order
    phrase = list(WEATHER_PHRASES[value])
    n = len(src)
    target = src + phrase
    segments = (((n, n), (n, n + len(phrase))),)
    return EditRequest(tuple(src), tuple(target), segments, kind, value)


INSTRUCTION_TEMPLATES: dict[AttributeKind, str] = {
    AttributeKind.COLOR: (
        "I want to change the color of the object in the source image. "
        "Please generate all possible target text prompts given the source text "
        "prompt describing the source image. For example, the source is \"a cat\", "
        "you can generate \"a blue cat\"."
    ),
    AttributeKind.MATERIAL: (
        "I want to change the material of the object in the source image. "
        "Please generate all possible target text prompts given the source text "
        "prompt describing the source image. For example, source is \"a cat\", "
        "you can generate \"a wooden cat sculpture\"."
    ),
    AttributeKind.STYLE: (
        "I want to change the image style of source images without perturbing the "
        "content. Please generate all possible target text prompts given the source "
        "text prompt describing the source image. For example, source is 'a cat', "
        "you can generate 'a watercolor cat'."
    ),
    AttributeKind.WEATHER: (
        "I want to change the weather or season condition of the source image. "
        "Please generate all possible target text prompts given the source text "
        "prompt that describes the source image, only changing the weather "
        "conditions, or adding a description of the weather if not already present."
    ),
}


def render_instruction(kind: AttributeKind) -> str:
    return INSTRUCTION_TEMPLATES[kind]


_MAX_SEGMENTS = {
    AttributeKind.COLOR: 1,
    AttributeKind.MATERIAL: 3,
    AttributeKind.STYLE: 1,
    AttributeKind.WEATHER: 1,
}


def diff_edit(source_tokens, target_tokens, kind: AttributeKind, value: str) -> EditRequest:
    """Build an EditRequest from a raw token diff; rejects rephrasings."""
    sm = difflib.SequenceMatcher(None, list(source_tokens), list(target_tokens), autojunk=False)
    segments = []
    for op, s0, s1, t0, t1 in sm.get_opcodes():
        if op != "equal":
            segments.append(((s0, s1), (t0, t1)))
    if not segments:
        raise PromptError("candidate is identical to the source")
    if len(segments) > _MAX_SEGMENTS[kind]:
        raise PromptError(
            f"candidate changes {len(segments)} spans; "
            f"{kind.value} edits allow at most {_MAX_SEGMENTS[kind]}"
        )
    return EditRequest(tuple(source_tokens), tuple(target_tokens), tuple(segments), kind, value)


def _infer_value(kind: AttributeKind, segments, target, vocab) -> str:
    """Recover which vocabulary value a candidate edit introduced."""
    new_tokens = [target[i] for (_, (t0, t1)) in segments for i in range(t0, t1)]
    if kind in (AttributeKind.COLOR, AttributeKind.MATERIAL):
        hits = [w for w in new_tokens if w in vocab[kind]]
        if len(hits) == 1:
            return hits[0]
    else:
        joined = " ".join(new_tokens)
        for value in vocab[kind]:
            phrase = " ".join(WEATHER_PHRASES[value]) if kind is AttributeKind.WEATHER else value
            if phrase in joined:
                return value
    raise PromptError(f"candidate does not introduce exactly one {kind.value} vocabulary value")


class LanguageClientInterface:
    """Contract: (instruction template, source caption) → candidate captions."""

    def candidates(self, template: str, caption: str) -> list[str]:
        raise NotImplementedError


class StubLanguageClient(LanguageClientInterface):
    def __init__(self, responses: list[str]):
        self.responses = list(responses)
        self.calls: list[tuple[str, str]] = []

    def candidates(self, template: str, caption: str) -> list[str]:
        self.calls.append((template, caption))
        return list(self.responses)


class HttpLanguageClient(LanguageClientInterface):
    """POSTs {template, caption} JSON and expects {candidates: [...]} back."""

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries

    def candidates(self, template: str, caption: str) -> list[str]:
        payload = json.dumps({"template": template, "caption": caption}).encode("utf-8")
        last_err = None
        for _ in range(self.retries + 1):
            req = urllib.request.Request(
                self.url, data=payload, headers={"Content-Type": "application/json"}
            )
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                return [str(c) for c in body.get("candidates", [])]
            except (urllib.error.URLError, OSError, ValueError) as err:
                last_err = err
        raise PromptBackendError(f"language backend unreachable: {last_err}")


def llm_edit(
    client: LanguageClientInterface, caption: str, kind: AttributeKind, vocab=None
) -> list[EditRequest]:
    """Validated edit candidates from an external language model.

    Candidates that rephrase the caption, touch the subject noun, or change
    more spans than the attribute allows are dropped (with a logged reason).
    """
    use_vocab = vocab or DEFAULT_ATTRIBUTE_VOCAB
    parts = decompose_caption(caption, vocab)
    template = render_instruction(kind)
    raw_candidates = client.candidates(template, caption)
    out = []
    for cand in raw_candidates:
        try:
            probe = diff_edit(parts.raw, tuple(tokenize(cand)), kind, value=kind.value)
            value = _infer_value(kind, probe.segments, probe.target, use_vocab)
            cand_parts = decompose_caption(cand, vocab)
            if cand_parts.subject_text != parts.subject_text:
                raise PromptError(
                    f"subject changed from {parts.subject_text!r} to {cand_parts.subject_text!r}"
                )
            out.append(EditRequest(probe.source, probe.target, probe.segments, kind, value))
        except PromptError as err:
            log.info("dropping candidate %r: %s", cand, err)
    return out


def caption_for_object(color_name: str, class_name: str, background_name: str = "gray backdrop") -> str:
    """Template caption for a synthetic scene's salient object."""
    return f"a photo of a {color_name} {class_name} on the {background_name}"
