"""Caption tokenization and vocabulary handling.

The tokenizer applies a frozen, ordered list of Treebank-style rules instead
of binding an external toolkit, so tokenization is bit-stable everywhere:

1. lowercase the sentence;
2. pad these punctuation characters with spaces so each becomes its own
   token: . , ! ? ; : ( ) [ ] { } " # $ % & @ * + = ~ | < > / \\
3. split the n't contraction off its verb ("don't" -> "do n't");
4. split 's 're 'll 've 'd 'm off the preceding word ("it's" -> "it 's");
5. detach a word-final apostrophe ("dogs'" -> "dogs '");
6. split on whitespace.

Hyphens inside words are kept.  The reserved tokens <PAD>/<SOS>/<EOS>/<UNK>
can never be produced: rule 2 splits their angle brackets apart.
"""

import re

from .errors import VocabError

PAD, SOS, EOS, UNK = "<PAD>", "<SOS>", "<EOS>", "<UNK>"
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, SOS, EOS, UNK)

_PUNCT = re.compile(r'([.,!?;:()\[\]{}"#$%&@*+=~|<>/\\])')
_NT = re.compile(r"(?<=[a-z])(n't)\b")
_CLITIC = re.compile(r"(?<=[a-z])('(?:s|re|ll|ve|d|m))\b")
_FINAL_APOSTROPHE = re.compile(r"(?<=[a-z])'(?![a-z])")


def tokenize(sentence):
    """Tokenize a caption into lowercase Treebank-style tokens."""
    s = sentence.lower()
    s = _PUNCT.sub(r" \1 ", s)
    s = _NT.sub(r" \1", s)
    s = _CLITIC.sub(r" \1", s)
    s = _FINAL_APOSTROPHE.sub(" ' ", s)
    return s.split()


class Vocabulary:
    """Bidirectional token<->id map with the four reserved leading ids."""

    def __init__(self, tokens):
        self.tokens = list(RESERVED) + list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, token_lists, min_count=1):
        """Build from a corpus of token lists: frequency desc, then lexicographic."""
        counts = {}
        for toks in token_lists:
            for tok in toks:
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(
            (tok for tok, c in counts.items() if c >= min_count and tok not in RESERVED),
            key=lambda tok: (-counts[tok], tok),
        )
        return cls(kept)

    def token_to_id(self, token):
        return self.index.get(token, UNK_ID)

    def id_to_token(self, idx):
        if not 0 <= idx < len(self.tokens):
            raise VocabError(f"token id {idx} out of range (vocab size {len(self.tokens)})")
        return self.tokens[idx]

    def encode(self, tokens, max_len):
        """Map tokens to ids, append <EOS>, truncate to max_len keeping the <EOS>."""
        ids = [self.token_to_id(t) for t in tokens]
        if len(ids) + 1 > max_len:
            ids = ids[:max_len - 1]
        return ids + [EOS_ID]

    def decode(self, ids, keep_unk=False):
        """Join non-reserved tokens; <UNK> is dropped unless keep_unk is set."""
        out = []
        for idx in ids:
            tok = self.id_to_token(int(idx))
            if tok in (PAD, SOS, EOS):
                continue
            if tok == UNK and not keep_unk:
                continue
            out.append(tok)
        return " ".join(out)

    def save(self, path):
        # one non-reserved token per line; line number = id - 4
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])
