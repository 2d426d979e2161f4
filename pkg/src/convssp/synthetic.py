"""Deterministic generator of desk-scale conversational-search data.

Each synthetic dialogue follows one entity.  The first turn names the
entity; later turns either name it again or fall back to a pronoun, and a
dialogue may digress for a turn or two onto another entity before an
explicit return to the main one.  A pronoun turn therefore always has an
explicit main-entity mention as its nearest entity-bearing predecessor,
which makes the planted referent well defined: the latest explicit mention
before the turn.

Dialogues are emitted as per-turn prefix conversations (CAsT style: every
turn is a query over the context so far) whose ``reformulated_last``
restores the entity name when the turn used a pronoun.  Every emitted
record gets one grade-2 document (the turn's entity and facet), grade-1
documents for the entity's other facets, and a couple of explicit grade-0
distractors.  The generator also records hidden ground truth (referent
turn, digression turns) so the labeling procedures can be scored exactly.

Everything is drawn from a single generator seeded by ``spec.seed``; equal
specs produce identical data, byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Conversation, Document, Vocabulary, build_vocabulary

_SYLLABLES = [
    c + v
    for c in "bdklmnprstvz"
    for v in "aeiou"
]

# (explicit form, pronoun form, uses a facet slot).  Every template carries
# a facet so each utterance has topical signal; the pair differs only in the
# entity slot, so a rewrite restores exactly the entity tokens.
_TEMPLATES = [
    ("what is the {f} of {e}", "what is the {f} of it", True),
    ("tell me about the {f} of {e}", "tell me about the {f} of it", True),
    ("how good is the {f} of {e}", "how good is the {f} of it", True),
    ("is {e} known for {f}", "is it known for {f}", True),
    ("can {e} help with {f}", "can it help with {f}", True),
    ("does {e} support {f}", "does it support {f}", True),
    ("why do people pick {e} for {f}", "why do people pick it for {f}", True),
    ("what about the {f} of {e}", "what about the {f} of it", True),
]

_DOC_TEMPLATE = (
    "{e} {f} guide . the {f} of {e} explained . {e} offers strong {f} . "
    "people use {e} for {f} and a bit of {g} ."
)


@dataclass
class SyntheticSpec:
    n_topics: int = 8
    entities_per_topic: int = 6
    n_conversations: int = 100
    queries_per_conversation: float = 6.9
    docs_per_entity: int = 6
    omission_rate: float = 0.6
    seed: int = 0
    digression_rate: float = 0.3
    two_token_entity_rate: float = 0.3
    expand_prefixes: bool = True

    def __post_init__(self):
        if min(self.n_topics, self.entities_per_topic, self.n_conversations) < 1:
            raise ValueError("n_topics, entities_per_topic, n_conversations must be >= 1")
        if self.docs_per_entity < 2:
            raise ValueError("docs_per_entity must be >= 2")
        if not 0.0 <= self.omission_rate <= 1.0:
            raise ValueError("omission_rate must lie in [0, 1]")
        if self.queries_per_conversation < 2:
            raise ValueError("queries_per_conversation must be >= 2")


@dataclass
class SyntheticData:
    conversations: list[Conversation]
    documents: list[Document]
    qrels: dict[tuple[str, str], int]
    truth: list[dict]
    vocab: Vocabulary
    spec: SyntheticSpec = None


@dataclass
class _Entity:
    index: int
    topic: int
    tokens: tuple[str, ...]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def _make_lexicon(rng: np.random.Generator, count: int) -> list[str]:
    """Unique pronounceable nonsense words, order fixed by the generator."""
    pairs = [(i, j) for i in range(len(_SYLLABLES)) for j in range(len(_SYLLABLES))]
    order = rng.permutation(len(pairs))
    words = []
    for idx in order[:count]:
        i, j = pairs[int(idx)]
        words.append(_SYLLABLES[i] + _SYLLABLES[j])
    return words


@dataclass
class _Turn:
    entity: _Entity
    facet: str
    relevance_facet: str
    explicit: bool
    is_digression: bool
    text: str
    reformulation: str


FACET_REUSE = 0.5  # chance a turn revisits a facet already discussed


def _render_turn(
    entity: _Entity, facet_pool: Sequence[str], rng: np.random.Generator,
    explicit: bool, first_turn: bool, used_facets: list[str] | None = None,
) -> _Turn:
    if first_turn:
        # introductions never use a pronoun
        explicit = True
    idx = int(rng.integers(len(_TEMPLATES)))
    explicit_tpl, pronoun_tpl, uses_facet = _TEMPLATES[idx]
    if used_facets and rng.random() < FACET_REUSE:
        facet = used_facets[int(rng.integers(len(used_facets)))]
    else:
        facet = facet_pool[int(rng.integers(len(facet_pool)))]
    relevance_facet = facet if uses_facet else facet_pool[0]
    explicit_text = explicit_tpl.format(e=entity.text, f=facet)
    text = explicit_text if explicit else pronoun_tpl.format(f=facet)
    return _Turn(
        entity=entity,
        facet=facet if uses_facet else "",
        relevance_facet=relevance_facet,
        explicit=explicit,
        is_digression=False,
        text=text,
        reformulation=explicit_text,
    )


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Produce conversations, corpus, qrels, ground truth, and a vocabulary."""
    rng = np.random.default_rng([spec.seed, 424243])

    n_entities = spec.n_topics * spec.entities_per_topic
    # lexicon budget: up to 2 tokens per entity + facets per topic
    lexicon = _make_lexicon(
        rng, 2 * n_entities + spec.n_topics * spec.docs_per_entity
    )
    cursor = 0

    entities: list[_Entity] = []
    for topic in range(spec.n_topics):
        for _ in range(spec.entities_per_topic):
            two = rng.random() < spec.two_token_entity_rate
            tokens = tuple(lexicon[cursor : cursor + (2 if two else 1)])
            cursor += 2 if two else 1
            entities.append(_Entity(index=len(entities), topic=topic, tokens=tokens))

    facets: list[list[str]] = []
    for topic in range(spec.n_topics):
        facets.append(lexicon[cursor : cursor + spec.docs_per_entity])
        cursor += spec.docs_per_entity

    # corpus: one document per (entity, facet)
    documents: list[Document] = []
    doc_id_of: dict[tuple[int, str], str] = {}
    for entity in entities:
        topic_facets = facets[entity.topic]
        for f_idx, facet in enumerate(topic_facets):
            sibling = topic_facets[(f_idx + 1) % len(topic_facets)]
            doc_id = f"doc{entity.index:03d}-{f_idx}"
            documents.append(
                Document(
                    doc_id=doc_id,
                    text=_DOC_TEMPLATE.format(e=entity.text, f=facet, g=sibling),
                )
            )
            doc_id_of[(entity.index, facet)] = doc_id

    mean_q = spec.queries_per_conversation
    q_lo = max(2, int(round(mean_q)) - 2)
    q_hi = int(round(mean_q)) + 2

    conversations: list[Conversation] = []
    qrels: dict[tuple[str, str], int] = {}
    truth: list[dict] = []

    for dialogue in range(spec.n_conversations):
        main = entities[int(rng.integers(len(entities)))]
        n_turns = int(rng.integers(q_lo, q_hi + 1))

        # place an optional digression block, never adjacent to the last turn
        digression_at = -1
        digression_len = 0
        if n_turns >= 5 and rng.random() < spec.digression_rate:
            digression_len = int(rng.integers(1, 3))
            digression_at = int(rng.integers(1, n_turns - digression_len - 1))

        turns: list[_Turn] = []
        main_facets_used: list[str] = []
        for t in range(n_turns):
            in_digression = digression_at <= t < digression_at + digression_len if digression_at >= 0 else False
            if in_digression:
                other = entities[int(rng.integers(len(entities)))]
                while other.index == main.index:
                    other = entities[int(rng.integers(len(entities)))]
                turn = _render_turn(other, facets[other.topic], rng, True, False)
                turn.is_digression = True
            else:
                forced_explicit = (
                    t == 0
                    or (digression_at >= 0 and t == digression_at + digression_len)
                )
                explicit = forced_explicit or rng.random() >= spec.omission_rate
                turn = _render_turn(
                    main, facets[main.topic], rng, explicit, t == 0, main_facets_used
                )
                if turn.facet:
                    main_facets_used.append(turn.facet)
            turns.append(turn)

        emit_range = range(1, n_turns + 1) if spec.expand_prefixes else [n_turns]
        for t_end in emit_range:
            conv_id = f"c{dialogue:04d}_t{t_end:02d}"
            last = turns[t_end - 1]
            conv = Conversation(
                conv_id=conv_id,
                queries=tuple(turn.text for turn in turns[:t_end]),
                reformulated_last=last.reformulation,
                source_tag="synthetic",
            )
            conversations.append(conv)

            relevant = doc_id_of[(last.entity.index, last.relevance_facet)]
            qrels[(conv_id, relevant)] = 2
            for facet in facets[last.entity.topic]:
                doc_id = doc_id_of[(last.entity.index, facet)]
                if doc_id != relevant:
                    qrels[(conv_id, doc_id)] = 1
            for _ in range(2):
                other = entities[int(rng.integers(len(entities)))]
                while other.index == last.entity.index:
                    other = entities[int(rng.integers(len(entities)))]
                distractor_facet = facets[other.topic][
                    int(rng.integers(len(facets[other.topic])))
                ]
                qrels.setdefault((conv_id, doc_id_of[(other.index, distractor_facet)]), 0)

            referent_turn = None
            if not last.explicit:
                for j in range(t_end - 2, -1, -1):
                    if turns[j].explicit and not turns[j].is_digression:
                        referent_turn = j + 1  # 1-based
                        break
            truth.append(
                {
                    "conv_id": conv_id,
                    "dialogue": f"c{dialogue:04d}",
                    "turns": t_end,
                    "entity_tokens": list(last.entity.tokens),
                    "omitted": not last.explicit,
                    "referent_turn": referent_turn,
                    "digression_turns": [
                        j + 1 for j in range(t_end) if turns[j].is_digression
                    ],
                    "topic": last.entity.topic,
                }
            )

    texts = [doc.text for doc in documents]
    for conv in conversations:
        texts.extend(conv.queries)
        if conv.reformulated_last:
            texts.append(conv.reformulated_last)
    vocab = build_vocabulary(texts)

    return SyntheticData(
        conversations=conversations,
        documents=documents,
        qrels=qrels,
        truth=truth,
        vocab=vocab,
        spec=spec,
    )


def dialogue_ids(conversations: Sequence[Conversation]) -> list[str]:
    """Distinct dialogue ids in first-appearance order."""
    from .tasks import _base_conversation_id

    seen: dict[str, None] = {}
    for conv in conversations:
        seen.setdefault(_base_conversation_id(conv.conv_id), None)
    return list(seen)


def split_by_dialogue(
    conversations: Sequence[Conversation], *counts: int
) -> list[list[Conversation]]:
    """Partition prefix records into groups of whole dialogues.

    ``counts`` gives the number of dialogues per split; a trailing -1 means
    "everything left".
    """
    from .tasks import _base_conversation_id

    ids = dialogue_ids(conversations)
    splits: list[set[str]] = []
    cursor = 0
    for count in counts:
        if count < 0:
            splits.append(set(ids[cursor:]))
            cursor = len(ids)
        else:
            splits.append(set(ids[cursor : cursor + count]))
            cursor += count
    if cursor > len(ids):
        raise ValueError(f"requested {cursor} dialogues, have {len(ids)}")
    return [
        [c for c in conversations if _base_conversation_id(c.conv_id) in chosen]
        for chosen in splits
    ]
