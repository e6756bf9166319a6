"""Template-based syllogism prompts with aligned clean/corrupted token sequences."""

from __future__ import annotations

import json
import random
import string
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .tokenizer import Tokenizer, TokenizerError


class SyllogismKind(str, Enum):
    SIMPLE = "ss"
    OPPOSITE = "os"
    COMPLEX = "cs"
    COMPLEX_OPPOSITE = "cos"


# Placeholders: {A} {B} {C} letters, {T1} stated value, {T2} distractor value.
# Every letter mention is a placeholder, including the lowercase "statement A".
TEMPLATES: dict[SyllogismKind, tuple[str, ...]] = {
    SyllogismKind.SIMPLE: (
        "Statement {A} is {T1}. Statement {B} has the same truth value as {A}. Statement {B} is",
        "Statement {A} is {T1}. Statement {B} matches statement {A}. Statement {B} is",
        "Statement {A} is {T1}. Statement {B} must match {A}. Statement {C} doesn't matter. Statement {B} is",
    ),
    SyllogismKind.OPPOSITE: (
        "Statement {B} has the opposite truth value of {A}. Statement {A} is {T1}. Statement {B} is",
        "Statement {A} and statement {B} are opposites. Statement {A} is {T1}. Statement {B} is",
    ),
    SyllogismKind.COMPLEX: (
        "Statement {A} is {T1}. Statement {B} has same truth value as {A}. Statement {C} is {T2}. Statement {B} is",
    ),
    SyllogismKind.COMPLEX_OPPOSITE: (
        "Statement {A} is {T1}. Statement {B} has the opposite truth value of {A}. Statement {C} is {T2}. Statement {B} is",
        # without C's stated value this variant would leave the answer undetermined
        "Statement {A} and {B} are opposites. Statement {C} is {T1}. Statement {C} has the same truth value as {A}. Statement {B} is",
        "Statement {A} is {T1}. Statement {A} and {B} are opposites. Statement {C} is {T2}. Statement {B} is",
    ),
}

# default variant per kind (1-based)
DEFAULT_TEMPLATE = {
    SyllogismKind.SIMPLE: 2,
    SyllogismKind.OPPOSITE: 2,
    SyllogismKind.COMPLEX: 1,
    SyllogismKind.COMPLEX_OPPOSITE: 1,
}

NEGATES = {SyllogismKind.OPPOSITE, SyllogismKind.COMPLEX_OPPOSITE}

CORRUPTIONS = ("flip", "resample-letters", "mean")


@dataclass(frozen=True)
class BinaryPair:
    positive_word: str
    negative_word: str
    positive_id: int
    negative_id: int

    @property
    def label(self) -> str:
        return f"{self.positive_word.strip()}/{self.negative_word.strip()}"

    def opposite(self, word: str) -> str:
        return self.negative_word if word == self.positive_word else self.positive_word

    def id_of(self, word: str) -> int:
        return self.positive_id if word == self.positive_word else self.negative_id


PAIR_WORDS = {
    "true/false": ("true", "false"),
    "good/bad": ("good", "bad"),
    "positive/negative": ("positive", "negative"),
    "correct/incorrect": ("correct", "incorrect"),
    "right/wrong": ("right", "wrong"),
}


def make_pair(tokenizer: Tokenizer, positive: str, negative: str) -> BinaryPair:
    """Both words get a leading space; raises TokenizerError naming a multi-token word."""
    pos = " " + positive.strip()
    neg = " " + negative.strip()
    pid = tokenizer.single_token_id(pos)
    nid = tokenizer.single_token_id(neg)
    if pid == nid:
        raise TokenizerError(f"pair words share a token id: {pos!r}, {neg!r}")
    return BinaryPair(pos, neg, pid, nid)


def parse_pair(tokenizer: Tokenizer, text: str) -> BinaryPair:
    key = text.lower()
    if key in PAIR_WORDS:
        return make_pair(tokenizer, *PAIR_WORDS[key])
    pos, sep, neg = text.partition("/")
    if not sep:
        raise ValueError(f"pair must look like 'positive/negative', got {text!r}")
    return make_pair(tokenizer, pos, neg)


def usable_letters(tokenizer: Tokenizer) -> list[str]:
    """Capital letters whose leading-space form is one token."""
    out = []
    for c in string.ascii_uppercase:
        try:
            tokenizer.single_token_id(" " + c)
        except TokenizerError:
            continue
        out.append(c)
    return out


@dataclass
class SyllogismInstance:
    clean_tokens: list[int]
    corrupted_tokens: list[int]
    correct_id: int
    incorrect_id: int
    letters: dict[str, str]
    truth_assignment: dict[str, str]
    clean_text: str = ""
    corrupted_text: str = ""

    @property
    def correct_word(self) -> str:
        return self.truth_assignment["answer"]


@dataclass
class SyllogismDataset:
    kind: SyllogismKind
    template_index: int
    pair: BinaryPair
    instances: list[SyllogismInstance]
    seed: int
    corruption: str = "flip"
    prepend_eot: bool = False
    _arrays: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def seq_len(self) -> int:
        return len(self.instances[0].clean_tokens)

    def _arr(self, name, fn):
        if name not in self._arrays:
            self._arrays[name] = np.array([fn(i) for i in self.instances], dtype=np.int64)
        return self._arrays[name]

    @property
    def clean(self) -> np.ndarray:
        return self._arr("clean", lambda i: i.clean_tokens)

    @property
    def corrupted(self) -> np.ndarray:
        return self._arr("corrupted", lambda i: i.corrupted_tokens)

    @property
    def correct_ids(self) -> np.ndarray:
        return self._arr("correct", lambda i: i.correct_id)

    @property
    def incorrect_ids(self) -> np.ndarray:
        return self._arr("incorrect", lambda i: i.incorrect_id)

    @property
    def answer_is_positive(self) -> np.ndarray:
        return self.correct_ids == self.pair.positive_id

    def subset(self, n: int) -> "SyllogismDataset":
        return SyllogismDataset(self.kind, self.template_index, self.pair, self.instances[:n], self.seed,
                                self.corruption, self.prepend_eot)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for inst in self.instances:
                row = {
                    "clean": inst.clean_tokens,
                    "corrupted": inst.corrupted_tokens,
                    "correct": inst.correct_id,
                    "incorrect": inst.incorrect_id,
                    "letters": inst.letters,
                    "truth": inst.truth_assignment,
                    "clean_text": inst.clean_text,
                    "corrupted_text": inst.corrupted_text,
                    "seed": self.seed,
                    "kind": self.kind.value,
                    "template_index": self.template_index,
                    "pair": asdict(self.pair),
                    "corruption": self.corruption,
                    "prepend_eot": self.prepend_eot,
                }
                f.write(json.dumps(row) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "SyllogismDataset":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        if not rows:
            raise ValueError(f"{path}: empty dataset file")
        first = rows[0]
        instances = [
            SyllogismInstance(r["clean"], r["corrupted"], r["correct"], r["incorrect"], r["letters"],
                              r["truth"], r.get("clean_text", ""), r.get("corrupted_text", ""))
            for r in rows
        ]
        return cls(SyllogismKind(first["kind"]), first["template_index"], BinaryPair(**first["pair"]),
                   instances, first["seed"], first.get("corruption", "flip"), first.get("prepend_eot", False))


def _fill(template: str, letters: dict[str, str], t1: str, t2: str) -> str:
    # truth words carry their own leading space
    return template.format(A=letters["A"], B=letters["B"], C=letters["C"], T1=t1.strip(), T2=t2.strip())


def _truths(kind: SyllogismKind, pair: BinaryPair, stated: str) -> dict[str, str]:
    answer = pair.opposite(stated) if kind in NEGATES else stated
    # the distractor always states the wrong answer
    return {"T1": stated, "T2": pair.opposite(answer), "answer": answer}


def render(kind: SyllogismKind, template_index: int, letters: dict[str, str], truths: dict[str, str]) -> str:
    return _fill(TEMPLATES[kind][template_index - 1], letters, truths["T1"], truths["T2"])


def corrupt_truths(pair: BinaryPair, truths: dict[str, str]) -> dict[str, str]:
    """Flip every truth-value word; applying it twice restores the input."""
    return {k: pair.opposite(v) for k, v in truths.items()}


def corrupt(instance: SyllogismInstance, tokenizer: Tokenizer, kind: SyllogismKind, template_index: int,
            pair: BinaryPair, prepend_eot: bool = False) -> list[int]:
    """Flip-truth-values corruption of an instance's clean prompt."""
    flipped = corrupt_truths(pair, instance.truth_assignment)
    text = render(kind, template_index, instance.letters, flipped)
    toks = tokenizer.encode(text)
    return ([tokenizer.eot_id] + toks) if prepend_eot else toks


def generate(
    tokenizer: Tokenizer,
    kind: SyllogismKind | str,
    pair: BinaryPair,
    n: int,
    seed: int = 0,
    template_index: int | None = None,
    corruption: str = "flip",
    prepend_eot: bool = False,
) -> SyllogismDataset:
    kind = SyllogismKind(kind)
    if n < 1:
        raise ValueError("n must be >= 1")
    if template_index is None:
        template_index = DEFAULT_TEMPLATE[kind]
    if not 1 <= template_index <= len(TEMPLATES[kind]):
        raise ValueError(f"template_index {template_index} invalid for {kind.name} (1..{len(TEMPLATES[kind])})")
    if corruption not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {corruption!r}; choose from {CORRUPTIONS}")
    letters_pool = usable_letters(tokenizer)
    if len(letters_pool) < 3:
        raise TokenizerError("fewer than three single-token capital letters in vocabulary")
    rng = random.Random(seed)
    prefix = [tokenizer.eot_id] if prepend_eot else []

    def encode(text: str) -> list[int]:
        return prefix + tokenizer.encode(text)

    instances = []
    length = None
    for _ in range(n):
        a, b, c = rng.sample(letters_pool, 3)
        letters = {"A": a, "B": b, "C": c}
        stated = rng.choice((pair.positive_word, pair.negative_word))
        truths = _truths(kind, pair, stated)
        clean_text = render(kind, template_index, letters, truths)
        if corruption == "resample-letters":
            a2, b2, c2 = rng.sample(letters_pool, 3)
            cor_letters = {"A": a2, "B": b2, "C": c2}
            cor_text = render(kind, template_index, cor_letters, truths)
        else:
            # "mean" corruption needs no prompt; keep flipped prompts aligned anyway
            cor_text = render(kind, template_index, letters, corrupt_truths(pair, truths))
        clean, cor = encode(clean_text), encode(cor_text)
        if len(clean) != len(cor):
            raise TokenizerError(f"clean/corrupted lengths differ: {clean_text!r} vs {cor_text!r}")
        if length is None:
            length = len(clean)
        elif len(clean) != length:
            raise TokenizerError(f"non-uniform prompt length for {clean_text!r}")
        answer = truths["answer"]
        instances.append(
            SyllogismInstance(clean, cor, pair.id_of(answer), pair.id_of(pair.opposite(answer)),
                              letters, truths, clean_text, cor_text)
        )
    return SyllogismDataset(kind, template_index, pair, instances, seed, corruption, prepend_eot)
