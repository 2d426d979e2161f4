"""Core conversation/document types, tokenization, vocabulary, and encoder inputs.

The input template for a conversation ``q_1 .. q_n`` is::

    [CLS] q_1 [SEP] q_2 [SEP] ... q_n [SEP]

Every utterance owns the [SEP] immediately following it, so utterance-level
predictions can be read off the hidden state at that position.  When the
template exceeds ``max_len``, leading tokens of the earliest utterances are
removed first; the final utterance is never touched.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"

SPECIAL_TOKENS = (CLS_TOKEN, SEP_TOKEN, PAD_TOKEN, UNK_TOKEN)

CLS_ID = 0
SEP_ID = 1
PAD_ID = 2
UNK_ID = 3

_STRIP_CHARS = string.punctuation + "‘’“”"


class DataError(ValueError):
    """Malformed input data (bad JSON line, bad vocabulary file, ...)."""


def tokenize(text: str) -> list[str]:
    """Split text into lowercase word tokens.

    Whitespace-delimited, with leading/trailing punctuation stripped from
    each piece; internal punctuation (hyphens, apostrophes) is kept, so
    "real-time" stays a single token.  Pieces that are pure punctuation
    disappear.  Deterministic; empty input yields an empty list.
    """
    out = []
    for piece in text.lower().split():
        word = piece.strip(_STRIP_CHARS)
        if word:
            out.append(word)
    return out


def to_word_set(tokens: Iterable[str]) -> set[str]:
    """Collapse a token sequence into its set of distinct tokens."""
    return set(tokens)


@dataclass(frozen=True)
class Conversation:
    """An ordered multi-turn search conversation.

    The last query is the current search intent.  ``reformulated_last``, when
    present, is a self-contained rewrite of that last query.
    """

    conv_id: str
    queries: tuple[str, ...]
    reformulated_last: str | None = None
    source_tag: str = ""

    def __post_init__(self) -> None:
        queries = tuple(" ".join(q.split()) for q in self.queries)
        if not queries or any(not q for q in queries):
            raise DataError(
                f"conversation {self.conv_id!r}: queries must be non-empty strings"
            )
        object.__setattr__(self, "queries", queries)

    def __len__(self) -> int:
        return len(self.queries)

    @property
    def last_query(self) -> str:
        return self.queries[-1]


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.doc_id or not self.text:
            raise DataError(f"document {self.doc_id!r}: doc_id and text required")


class Vocabulary:
    """Frozen bijection between word tokens and dense integer ids.

    Ids 0..3 are reserved for [CLS], [SEP], [PAD], [UNK] in that order.
    Unknown words map to [UNK] on encode.
    """

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise DataError(
                "vocabulary must start with the four special tokens "
                f"{SPECIAL_TOKENS}, got {tuple(tokens[:4])!r}"
            )
        self._id_to_token = list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def token_to_id(self, token: str) -> int:
        """Id of ``token``, or the [UNK] id if out of vocabulary."""
        return self._token_to_id.get(token, UNK_ID)

    def id_to_token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self._token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    @property
    def tokens(self) -> list[str]:
        return list(self._id_to_token)

    def content_hash(self) -> str:
        """SHA-256 of the serialized token list; used to guard checkpoints."""
        blob = "\n".join(self._id_to_token).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def build_vocabulary(texts: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from raw texts.

    Words are counted after tokenization; those below ``min_freq`` are left
    out and will encode as [UNK].  Ordering is frequency-descending with
    alphabetical tie-break, so the result is reproducible.
    """
    counts: dict[str, int] = {}
    for text in texts:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


def save_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in vocab.tokens:
            fh.write(token + "\n")


def load_vocabulary(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    if tokens and tokens[-1] == "":
        tokens.pop()
    return Vocabulary(tokens)


@dataclass
class ModelInput:
    """Token ids for one conversation plus special-token bookkeeping.

    ``sep_positions[i]`` is the index of the [SEP] that closes surviving
    utterance ``i``; ``utterance_spans[i]`` is the half-open (start, end)
    range of that utterance's own tokens.  ``dropped_utterances`` counts how
    many leading utterances truncation removed entirely.
    """

    token_ids: list[int]
    cls_position: int = 0
    sep_positions: list[int] = field(default_factory=list)
    utterance_spans: list[tuple[int, int]] = field(default_factory=list)
    truncated: bool = False
    dropped_utterances: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def num_utterances(self) -> int:
        return len(self.sep_positions)


class OversizedFinalQuery(ValueError):
    """The final utterance plus [CLS]/[SEP] cannot fit within max_len."""


def truncate_front(
    utterance_ids: list[list[int]], max_len: int
) -> tuple[list[list[int]], int, bool]:
    """Trim leading tokens until the [CLS]+utterances+[SEP]s template fits.

    Tokens are removed from the front of the earliest utterances.  An
    utterance's [SEP] is dropped only together with its last token, so a
    removal that exactly consumes an utterance also drops its separator.
    The final utterance is never modified.

    Returns (surviving utterances, count of fully dropped utterances,
    truncated flag).  Raises OversizedFinalQuery when even the final
    utterance alone cannot fit.
    """
    n = len(utterance_ids)
    total = 1 + sum(len(u) + 1 for u in utterance_ids)
    if total <= max_len:
        return [list(u) for u in utterance_ids], 0, False
    if len(utterance_ids[-1]) + 2 > max_len:
        raise OversizedFinalQuery(
            f"final utterance has {len(utterance_ids[-1])} tokens; "
            f"[CLS] + utterance + [SEP] cannot fit in max_len={max_len}"
        )
    overflow = total - max_len
    kept: list[list[int]] = []
    dropped = 0
    for i, utt in enumerate(utterance_ids):
        if overflow <= 0 or i == n - 1:
            kept.append(list(utt))
            continue
        if overflow >= len(utt):
            # whole utterance goes, separator included
            overflow -= len(utt) + 1
            dropped += 1
        else:
            kept.append(list(utt[overflow:]))
            overflow = 0
    return kept, dropped, True


def build_model_input(
    conversation: Conversation, vocab: Vocabulary, max_len: int
) -> ModelInput:
    """Encode a conversation as ``[CLS] q_1 [SEP] ... q_n [SEP]`` token ids.

    Unknown words map to [UNK].  If the template exceeds ``max_len`` the
    leading context is truncated (see :func:`truncate_front`) and the
    ``truncated`` flag is set.  Deterministic and side-effect free.
    """
    if max_len < 8:
        raise ValueError(f"max_len must be >= 8, got {max_len}")
    utterance_ids = [vocab.encode(tokenize(q)) for q in conversation.queries]
    kept, dropped, truncated = truncate_front(utterance_ids, max_len)

    token_ids = [CLS_ID]
    sep_positions: list[int] = []
    spans: list[tuple[int, int]] = []
    for utt in kept:
        start = len(token_ids)
        token_ids.extend(utt)
        spans.append((start, len(token_ids)))
        sep_positions.append(len(token_ids))
        token_ids.append(SEP_ID)
    return ModelInput(
        token_ids=token_ids,
        cls_position=0,
        sep_positions=sep_positions,
        utterance_spans=spans,
        truncated=truncated,
        dropped_utterances=dropped,
    )


# ---------------------------------------------------------------------------
# JSON-lines interchange formats
# ---------------------------------------------------------------------------


def _iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def read_conversations(path) -> list[Conversation]:
    """Read conversations from JSON-lines: one object per line with keys
    conv_id, queries, and optional reformulated_last / source_tag."""
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            out.append(
                Conversation(
                    conv_id=str(obj["conv_id"]),
                    queries=tuple(obj["queries"]),
                    reformulated_last=obj.get("reformulated_last"),
                    source_tag=obj.get("source_tag", ""),
                )
            )
        except (KeyError, TypeError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: bad conversation record: {exc}") from exc
    return out


def write_conversations(conversations: Iterable[Conversation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for conv in conversations:
            obj: dict = {"conv_id": conv.conv_id, "queries": list(conv.queries)}
            if conv.reformulated_last is not None:
                obj["reformulated_last"] = conv.reformulated_last
            if conv.source_tag:
                obj["source_tag"] = conv.source_tag
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_corpus(path) -> list[Document]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            out.append(Document(doc_id=str(obj["doc_id"]), text=str(obj["text"])))
        except (KeyError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: bad document record: {exc}") from exc
    return out


def write_corpus(documents: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(json.dumps({"doc_id": doc.doc_id, "text": doc.text}) + "\n")
