"""Construction of self-supervised training instances from raw conversations.

Three signals are derived per conversation:

* topic labels -- a noise session sampled from another conversation is
  grafted in front of the context; grafted utterances are labelled 1, raw
  utterances 0.  The graft length k follows the reciprocal distribution
  p_k = (1/k) / sum_{i<=m} (1/i) over the noise session length m.
* a coreference label -- the terms the reformulated last query restores
  (set difference of the two queries' word sets) are traced back to front
  through the context; the most recent utterance sharing a term is marked.
* a bag-of-words target over the vocabulary, 1 at every word occurring in
  the raw conversation (noise and special/unknown tokens excluded).

All randomness flows through an explicit numpy Generator, so instance
construction is reproducible and embarrassingly parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import (
    CLS_ID,
    Conversation,
    DataError,
    ModelInput,
    Vocabulary,
    build_model_input,
    to_word_set,
    tokenize,
)


@dataclass(frozen=True)
class PerturbedConversation:
    """A raw conversation with k noise utterances grafted in front."""

    conversation: Conversation
    topic_labels: np.ndarray  # 1 for grafted noise, 0 for raw; length k + n
    k: int
    noise_source_id: str


@dataclass(frozen=True)
class CoreferenceLabel:
    """One-hot referent marker over context utterances 1..n-1 (or all-zero)."""

    label: np.ndarray
    reformulation_terms: frozenset[str]
    found: bool

    @property
    def referent_index(self) -> int | None:
        """0-based index of the referred utterance, if any."""
        if not self.found:
            return None
        return int(np.argmax(self.label))


@dataclass(frozen=True)
class BowTarget:
    """Binary vector over the vocabulary: 1 where a word occurs in context."""

    vector: np.ndarray

    @property
    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.vector)


@dataclass(frozen=True)
class LossMask:
    topic: bool
    coref: bool
    wr: bool
    kd: bool

    def as_dict(self) -> dict:
        return {"topic": self.topic, "coref": self.coref, "wr": self.wr, "kd": self.kd}


@dataclass
class TrainingInstance:
    """Everything a post-training step needs for one conversation.

    ``model_input`` encodes the (possibly perturbed, possibly truncated)
    conversation.  ``topic_labels`` align with the surviving utterances of
    ``model_input``.  ``coref_label`` stays in the raw conversation's frame;
    ``raw_offset`` says how many surviving utterances precede the raw ones,
    so the raw context's separator rows sit at
    ``raw_offset .. raw_offset + n_raw - 2`` of the sep list.
    """

    conv_id: str
    model_input: ModelInput
    bow_target: BowTarget
    loss_mask: LossMask
    n_raw: int
    k: int = 0
    raw_offset: int = 0
    topic_labels: np.ndarray | None = None
    coref_label: CoreferenceLabel | None = None
    teacher_input: ModelInput | None = None
    noise_source_id: str | None = None


def reciprocal_probabilities(m: int) -> np.ndarray:
    """p_k = (1/k) / H_m for k = 1..m, where H_m is the m-th harmonic number."""
    if m < 1:
        raise ValueError(f"noise session length must be >= 1, got {m}")
    inv = 1.0 / np.arange(1, m + 1)
    return inv / inv.sum()


def sample_noise_length(m: int, rng: np.random.Generator) -> int:
    """Sample k in [1, m] with probability proportional to 1/k."""
    p = reciprocal_probabilities(m)
    return int(rng.choice(np.arange(1, m + 1), p=p))


def build_perturbed_conversation(
    raw: Conversation, noise: Conversation, rng: np.random.Generator
) -> PerturbedConversation:
    """Graft the first k queries of ``noise`` in front of ``raw``.

    k is sampled from the reciprocal distribution over the noise session
    length, which keeps long noise sessions from drowning the raw context.
    """
    if noise.conv_id == raw.conv_id:
        raise ValueError(
            f"noise conversation must differ from the raw one ({raw.conv_id!r})"
        )
    k = sample_noise_length(len(noise), rng)
    queries = noise.queries[:k] + raw.queries
    labels = np.concatenate(
        [np.ones(k, dtype=np.int64), np.zeros(len(raw), dtype=np.int64)]
    )
    merged = Conversation(
        conv_id=raw.conv_id,
        queries=queries,
        reformulated_last=raw.reformulated_last,
        source_tag=raw.source_tag,
    )
    return PerturbedConversation(
        conversation=merged, topic_labels=labels, k=k, noise_source_id=noise.conv_id
    )


def derive_reformulation_terms(q_n: str, q_star_n: str) -> frozenset[str]:
    """Words the rewrite adds: set(tokens(q*_n)) minus set(tokens(q_n))."""
    return frozenset(to_word_set(tokenize(q_star_n)) - to_word_set(tokenize(q_n)))


def locate_referred_query(
    conversation: Conversation, terms: frozenset[str] | set[str]
) -> CoreferenceLabel:
    """Scan context utterances back to front for the first one sharing a term.

    "Sharing" means a non-empty intersection with ``terms``.  The result is
    a one-hot vector over utterances 1..n-1; all-zero with ``found=False``
    when the terms are empty or nothing matches.
    """
    n = len(conversation)
    if n < 2:
        raise ValueError("coreference lookup needs at least 2 utterances")
    label = np.zeros(n - 1, dtype=np.int64)
    terms = frozenset(terms)
    if terms:
        for idx in range(n - 2, -1, -1):
            if to_word_set(tokenize(conversation.queries[idx])) & terms:
                label[idx] = 1
                return CoreferenceLabel(label=label, reformulation_terms=terms, found=True)
    return CoreferenceLabel(label=label, reformulation_terms=terms, found=False)


def build_bow_target(conversation: Conversation, vocab: Vocabulary) -> BowTarget:
    """Binary occurrence vector over the vocabulary for the raw queries.

    Special ids (including [UNK], which would be an unknowable target) stay 0.
    """
    vector = np.zeros(len(vocab), dtype=np.int64)
    for query in conversation.queries:
        for token in to_word_set(tokenize(query)):
            idx = vocab.token_to_id(token)
            if idx > 3:
                vector[idx] = 1
    return BowTarget(vector=vector)


def _base_conversation_id(conv_id: str) -> str:
    """Strip a per-turn suffix like ``_t04`` so prefixes of one dialogue group."""
    head, sep, tail = conv_id.rpartition("_t")
    if sep and tail.isdigit():
        return head
    return conv_id


def build_training_instance(
    raw: Conversation,
    noise_pool: Sequence[Conversation],
    vocab: Vocabulary,
    max_len: int,
    rng: np.random.Generator,
    perturb_prob: float = 1.0,
) -> TrainingInstance:
    """Assemble one post-training instance.

    The coreference label and the bag-of-words target are computed on the
    raw conversation; the encoder input is the perturbed conversation when
    a graft is applied.  The loss mask records which signals are usable:
    coreference needs a reformulation, a located referent, and a context
    that survived truncation intact.
    """
    n_raw = len(raw)

    perturbed: PerturbedConversation | None = None
    if noise_pool and perturb_prob > 0 and rng.random() < perturb_prob:
        base = _base_conversation_id(raw.conv_id)
        candidates = [
            c for c in noise_pool if _base_conversation_id(c.conv_id) != base
        ]
        if not candidates:
            raise ValueError(
                f"noise pool has no conversation outside dialogue {base!r}"
            )
        noise = candidates[int(rng.integers(len(candidates)))]
        perturbed = build_perturbed_conversation(raw, noise, rng)

    encoded_conv = perturbed.conversation if perturbed else raw
    model_input = build_model_input(encoded_conv, vocab, max_len)
    dropped = model_input.dropped_utterances
    k = perturbed.k if perturbed else 0
    raw_offset = max(k - dropped, 0)
    raw_intact = dropped <= k  # no raw utterance lost to truncation

    topic_labels = None
    if perturbed is not None:
        topic_labels = perturbed.topic_labels[dropped:]

    coref_label = None
    teacher_input = None
    if raw.reformulated_last is not None:
        teacher_input = build_model_input(
            Conversation(raw.conv_id, (raw.reformulated_last,)), vocab, max_len
        )
        if n_raw >= 2:
            terms = derive_reformulation_terms(raw.last_query, raw.reformulated_last)
            coref_label = locate_referred_query(raw, terms)

    mask = LossMask(
        topic=topic_labels is not None,
        coref=bool(coref_label is not None and coref_label.found and raw_intact),
        wr=True,
        kd=teacher_input is not None,
    )
    return TrainingInstance(
        conv_id=raw.conv_id,
        model_input=model_input,
        bow_target=build_bow_target(raw, vocab),
        loss_mask=mask,
        n_raw=n_raw,
        k=k,
        raw_offset=raw_offset,
        topic_labels=topic_labels,
        coref_label=coref_label,
        teacher_input=teacher_input,
        noise_source_id=perturbed.noise_source_id if perturbed else None,
    )


def build_instances(
    conversations: Sequence[Conversation],
    noise_pool: Sequence[Conversation],
    vocab: Vocabulary,
    max_len: int,
    seed: int,
    perturb_prob: float = 1.0,
    variants: int = 1,
) -> list[TrainingInstance]:
    """Build ``variants`` instances per conversation, reproducibly.

    The graft is stochastic, so multiple draws per conversation act as data
    augmentation.  Each instance draws from its own generator keyed by
    (seed, position, variant), so the output is independent of construction
    order or parallelism.
    """
    if variants < 1:
        raise ValueError("variants must be >= 1")
    out = []
    for variant in range(variants):
        for idx, conv in enumerate(conversations):
            rng = np.random.default_rng([seed, idx, variant])
            out.append(
                build_training_instance(
                    conv, noise_pool, vocab, max_len, rng, perturb_prob=perturb_prob
                )
            )
    return out


# ---------------------------------------------------------------------------
# Instance interchange format (JSON-lines) and summary statistics
# ---------------------------------------------------------------------------


def _model_input_to_obj(mi: ModelInput) -> dict:
    return {
        "token_ids": list(mi.token_ids),
        "cls_position": mi.cls_position,
        "sep_positions": list(mi.sep_positions),
        "utterance_spans": [list(span) for span in mi.utterance_spans],
        "truncated": mi.truncated,
        "dropped_utterances": mi.dropped_utterances,
    }


def _model_input_from_obj(obj: dict) -> ModelInput:
    return ModelInput(
        token_ids=list(obj["token_ids"]),
        cls_position=obj["cls_position"],
        sep_positions=list(obj["sep_positions"]),
        utterance_spans=[tuple(span) for span in obj["utterance_spans"]],
        truncated=obj["truncated"],
        dropped_utterances=obj["dropped_utterances"],
    )


def write_instances(instances: Sequence[TrainingInstance], path) -> None:
    """Serialize instances as JSON-lines with explicit integer label arrays."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            obj = {
                "conv_id": inst.conv_id,
                "input": _model_input_to_obj(inst.model_input),
                "n_raw": inst.n_raw,
                "k": inst.k,
                "raw_offset": inst.raw_offset,
                "topic_labels": None
                if inst.topic_labels is None
                else [int(x) for x in inst.topic_labels],
                "coref_label": None
                if inst.coref_label is None
                else [int(x) for x in inst.coref_label.label],
                "coref_found": bool(inst.coref_label.found)
                if inst.coref_label is not None
                else False,
                "reformulation_terms": sorted(inst.coref_label.reformulation_terms)
                if inst.coref_label is not None
                else [],
                "bow": [int(x) for x in inst.bow_target.vector],
                "teacher_input": None
                if inst.teacher_input is None
                else _model_input_to_obj(inst.teacher_input),
                "loss_mask": inst.loss_mask.as_dict(),
                "noise_source_id": inst.noise_source_id,
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_instances(path) -> list[TrainingInstance]:
    """Read instances from JSON-lines; a ``.gz`` suffix selects the cache."""
    import gzip

    opener = gzip.open if str(path).endswith(".gz") else open
    out = []
    with opener(path, "rt", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(_instance_from_obj(obj))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad instance record: {exc}") from exc
    return out


def _instance_from_obj(obj: dict) -> TrainingInstance:
    coref = None
    if obj["coref_label"] is not None:
        coref = CoreferenceLabel(
            label=np.asarray(obj["coref_label"], dtype=np.int64),
            reformulation_terms=frozenset(obj["reformulation_terms"]),
            found=obj["coref_found"],
        )
    mask = LossMask(**obj["loss_mask"])
    return TrainingInstance(
        conv_id=obj["conv_id"],
        model_input=_model_input_from_obj(obj["input"]),
        bow_target=BowTarget(vector=np.asarray(obj["bow"], dtype=np.int64)),
        loss_mask=mask,
        n_raw=obj["n_raw"],
        k=obj["k"],
        raw_offset=obj["raw_offset"],
        topic_labels=None
        if obj["topic_labels"] is None
        else np.asarray(obj["topic_labels"], dtype=np.int64),
        coref_label=coref,
        teacher_input=None
        if obj["teacher_input"] is None
        else _model_input_from_obj(obj["teacher_input"]),
        noise_source_id=obj["noise_source_id"],
    )


def instance_statistics(instances: Sequence[TrainingInstance]) -> dict:
    """Summary report: counts, coref coverage, and the k histogram against
    the reciprocal-mixture law implied by the noise sessions actually used."""
    n = len(instances)
    ks = [inst.k for inst in instances if inst.k > 0]
    k_hist: dict[int, int] = {}
    for k in ks:
        k_hist[k] = k_hist.get(k, 0) + 1
    found = sum(
        1 for i in instances if i.coref_label is not None and i.coref_label.found
    )
    with_reform = sum(1 for i in instances if i.teacher_input is not None)
    stats = {
        "instances": n,
        "perturbed": len(ks),
        "with_reformulation": with_reform,
        "coref_found": found,
        "coref_found_fraction": (found / n) if n else 0.0,
        "truncated": sum(1 for i in instances if i.model_input.truncated),
        "k_histogram": {str(k): k_hist[k] for k in sorted(k_hist)},
        "k_empirical": {
            str(k): k_hist[k] / len(ks) for k in sorted(k_hist)
        }
        if ks
        else {},
    }
    return stats
