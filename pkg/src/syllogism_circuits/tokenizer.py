"""Byte-level BPE compatible with the GPT-2 ``vocab.json`` / ``merges.txt`` files."""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import regex

# GPT-2 pre-tokenization pattern
_PAT = regex.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")

END_OF_TEXT = "<|endoftext|>"


class TokenizerError(ValueError):
    pass


@lru_cache(maxsize=None)
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable unicode character table used by GPT-2."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


class Tokenizer:
    def __init__(self, vocab: dict[str, int], merges: list[tuple[str, str]]):
        self.encoder = dict(vocab)
        self.decoder = {i: s for s, i in self.encoder.items()}
        if sorted(self.decoder) != list(range(len(self.decoder))):
            raise TokenizerError("vocabulary ids must be dense in [0, n_vocab)")
        self.ranks = {pair: i for i, pair in enumerate(merges)}
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        missing = [c for c in self.byte_encoder.values() if c not in self.encoder]
        if missing:
            raise TokenizerError(f"vocabulary lacks {len(missing)} single-byte tokens")
        self._cache: dict[str, list[str]] = {}

    @classmethod
    def from_files(cls, vocab_path, merges_path) -> "Tokenizer":
        vocab = json.loads(Path(vocab_path).read_text(encoding="utf-8"))
        merges = []
        for line in Path(merges_path).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#version"):
                continue
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(vocab, merges)

    @property
    def n_vocab(self) -> int:
        return len(self.encoder)

    def _bpe(self, word: str) -> list[str]:
        if word in self._cache:
            return self._cache[word]
        parts = list(word)
        while len(parts) > 1:
            best = None
            best_rank = None
            for i in range(len(parts) - 1):
                r = self.ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = (parts[i], parts[i + 1]), r
            if best is None:
                break
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and (parts[i], parts[i + 1]) == best:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        self._cache[word] = parts
        return parts

    def encode(self, text: str) -> list[int]:
        ids = []
        for piece in _PAT.findall(text):
            word = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            ids.extend(self.encoder[p] for p in self._bpe(word))
        return ids

    def decode_bytes(self, ids) -> bytes:
        text = "".join(self.decoder[int(i)] for i in ids)
        return bytes(self.byte_decoder[c] for c in text)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def token_str(self, token_id: int) -> str:
        return self.decode([token_id])

    def single_token_id(self, text: str) -> int:
        ids = self.encode(text)
        if len(ids) != 1:
            raise TokenizerError(f"{text!r} is not a single token (encodes to {len(ids)} tokens: {ids})")
        return ids[0]

    @property
    def eot_id(self) -> int:
        if END_OF_TEXT not in self.encoder:
            raise TokenizerError("vocabulary has no end-of-text token")
        return self.encoder[END_OF_TEXT]
