"""Report parsing, sentence segmentation, tokenization and token masking.

Reports are plain UTF-8 with case-insensitive "FINDINGS:" and
"IMPRESSION:" section headers. The tokenizer lowercases, splits on
whitespace, and treats every punctuation character as its own token
against a fixed closed vocabulary (unknown words map to [UNK]).

Vocab file format: one token per line, line number = id, and the first
five lines are exactly the special tokens below.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .volume import MaskPlan, _round_half_up

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_FINDINGS_RE = re.compile(r"findings\s*:", re.IGNORECASE)
_IMPRESSION_RE = re.compile(r"impression\s*:", re.IGNORECASE)


class ReportFormatError(ValueError):
    """Report text is missing a required section header."""


class VocabError(ValueError):
    """Vocabulary file or construction violates the format contract."""


@dataclass
class Vocab:
    tokens: list

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise VocabError(
                f"first five vocab entries must be {SPECIAL_TOKENS}, got {self.tokens[:5]}"
            )
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("vocab entries must be unique")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    @classmethod
    def from_words(cls, words) -> "Vocab":
        """Build a vocab from an iterable of surface tokens; specials prepended."""
        seen = dict.fromkeys(w for w in words if w not in SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + list(seen))

    @classmethod
    def from_file(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        tokens = [t for t in tokens if t != ""]
        return cls(tokens)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")


def split_report(text: str) -> tuple:
    """Split into (findings_text, impression_text) on the section headers."""
    fm = _FINDINGS_RE.search(text)
    if fm is None:
        raise ReportFormatError("report has no FINDINGS: header")
    im = _IMPRESSION_RE.search(text, fm.end())
    if im is None:
        return text[fm.end():].strip(), ""
    return text[fm.end():im.start()].strip(), text[im.end():].strip()


def split_sentences(findings: str) -> list:
    """Split at '.', '!' or '?' followed by whitespace or end of text.

    A period between two digits (e.g. "1.5") never ends a sentence.
    Each sentence keeps its terminator; empty fragments are dropped.
    """
    sentences = []
    start = 0
    n = len(findings)
    for i, ch in enumerate(findings):
        if ch not in ".!?":
            continue
        if i + 1 < n and not findings[i + 1].isspace():
            continue
        if (
            ch == "."
            and 0 < i < n - 1
            and findings[i - 1].isdigit()
            and findings[i + 1].isdigit()
        ):
            continue
        piece = findings[start:i + 1].strip()
        if piece:
            sentences.append(piece)
        start = i + 1
    tail = findings[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def tokenize(text: str, vocab: Vocab, with_specials: bool = False) -> list:
    """Lowercase, split words/punctuation, and map to vocab ids."""
    ids = [vocab.id_of(tok) for tok in _TOKEN_RE.findall(text.lower())]
    if with_specials:
        ids = [CLS_ID] + ids + [SEP_ID]
    return ids


def detokenize(ids, vocab: Vocab) -> str:
    """Inverse of tokenize up to casing and whitespace normalization."""
    parts = []
    for i in ids:
        tok = vocab.token_of(int(i))
        if tok in SPECIAL_TOKENS:
            continue
        if parts and len(tok) == 1 and not tok.isalnum():
            parts[-1] += tok  # punctuation attaches to the preceding word
        else:
            parts.append(tok)
    return " ".join(parts)


def mask_tokens(tokens, gamma: float, rng: Rng, vocab: Vocab | None = None,
                bert_style: bool = False) -> tuple:
    """Mask round(gamma * n_maskable) token positions.

    [CLS]/[SEP]/[PAD] are never maskable. Default behaviour replaces
    every chosen position with [MASK]; bert_style enables the 80/10/10
    variant (mask / random token / keep), which needs the vocab for the
    random-token draw.

    Returns (input_ids, MaskPlan over token positions, target_ids).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"mask fraction must be in [0, 1], got {gamma}")
    tokens = list(int(t) for t in tokens)
    maskable = [i for i, t in enumerate(tokens) if t not in (CLS_ID, SEP_ID, PAD_ID)]
    n_m = _round_half_up(gamma * len(maskable))
    chosen = [maskable[j] for j in rng.subset(len(maskable), n_m)]

    input_ids = list(tokens)
    for pos in chosen:
        if bert_style:
            if vocab is None:
                raise ValueError("bert_style masking needs the vocab")
            roll = rng.uniform(1)[0]
            if roll < 0.8:
                input_ids[pos] = MASK_ID
            elif roll < 0.9:
                input_ids[pos] = len(SPECIAL_TOKENS) + rng.below(len(vocab) - len(SPECIAL_TOKENS))
            # else: keep the original token
        else:
            input_ids[pos] = MASK_ID
    plan = MaskPlan.from_masked(len(tokens), np.asarray(chosen, dtype=np.int64))
    return input_ids, plan, tokens


@dataclass
class ReportBundle:
    """A report prepared for one training step."""

    findings_text: str
    impression_text: str
    tokens: list                 # [CLS] findings impression [SEP], original ids
    sentences: list              # per findings sentence, ids with specials
    token_mask: MaskPlan
    input_ids: list = field(default_factory=list)   # tokens with [MASK] applied
    target_ids: list = field(default_factory=list)  # original ids


def build_report_bundle(text: str, vocab: Vocab, gamma: float, rng: Rng,
                        bert_style: bool = False) -> ReportBundle:
    findings, impression = split_report(text)
    body = findings if not impression else f"{findings} {impression}"
    tokens = tokenize(body, vocab, with_specials=True)
    sentences = [tokenize(s, vocab, with_specials=True) for s in split_sentences(findings)]
    input_ids, plan, target_ids = mask_tokens(tokens, gamma, rng, vocab, bert_style)
    return ReportBundle(findings, impression, tokens, sentences, plan, input_ids, target_ids)
