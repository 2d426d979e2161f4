"""Generator laws: planted structure must match the labeling procedures."""

import numpy as np
import pytest

from convssp.data import tokenize
from convssp.synthetic import SyntheticData, SyntheticSpec, dialogue_ids, generate, split_by_dialogue
from convssp.tasks import derive_reformulation_terms, locate_referred_query


def small_spec(**kw):
    defaults = dict(
        n_topics=3,
        entities_per_topic=3,
        n_conversations=25,
        queries_per_conversation=6.9,
        docs_per_entity=4,
        omission_rate=0.6,
        seed=13,
    )
    defaults.update(kw)
    return SyntheticSpec(**defaults)


@pytest.fixture(scope="module")
def data() -> SyntheticData:
    return generate(small_spec())


class TestGenerate:
    def test_deterministic(self):
        a = generate(small_spec())
        b = generate(small_spec())
        assert [c.queries for c in a.conversations] == [c.queries for c in b.conversations]
        assert [d.text for d in a.documents] == [d.text for d in b.documents]
        assert a.qrels == b.qrels
        assert a.vocab.tokens == b.vocab.tokens

    def test_every_query_has_relevant_document(self, data):
        doc_ids = {d.doc_id for d in data.documents}
        for conv in data.conversations:
            grades = [g for (qid, did), g in data.qrels.items() if qid == conv.conv_id]
            assert max(grades) == 2
        for (qid, did) in data.qrels:
            assert did in doc_ids

    def test_qrels_and_conversations_cover_each_other(self, data):
        conv_ids = {c.conv_id for c in data.conversations}
        qrel_ids = {qid for qid, _ in data.qrels}
        assert conv_ids == qrel_ids

    def test_zero_omission_means_no_reformulation_terms(self):
        clean = generate(small_spec(omission_rate=0.0))
        for conv in clean.conversations:
            assert conv.reformulated_last == conv.last_query
            r = derive_reformulation_terms(conv.last_query, conv.reformulated_last)
            assert r == frozenset()

    def test_full_omission_always_locatable(self):
        noisy = generate(small_spec(omission_rate=1.0, n_conversations=40))
        by_id = {t["conv_id"]: t for t in noisy.truth}
        checked = 0
        for conv in noisy.conversations:
            if len(conv) < 2:
                continue
            truth = by_id[conv.conv_id]
            if not truth["omitted"]:
                continue  # first turns are introductions even at rate 1.0
            r = derive_reformulation_terms(conv.last_query, conv.reformulated_last)
            assert r, conv.conv_id
            label = locate_referred_query(conv, r)
            assert label.found
            checked += 1
        assert checked > 0

    def test_planted_referent_matches_procedure(self, data):
        by_id = {t["conv_id"]: t for t in data.truth}
        planted = 0
        for conv in data.conversations:
            truth = by_id[conv.conv_id]
            if not truth["omitted"] or len(conv) < 2:
                continue
            r = derive_reformulation_terms(conv.last_query, conv.reformulated_last)
            label = locate_referred_query(conv, r)
            assert label.found
            assert label.referent_index + 1 == truth["referent_turn"], conv.conv_id
            planted += 1
        assert planted >= 10

    def test_reformulation_restores_entity_tokens_only(self, data):
        by_id = {t["conv_id"]: t for t in data.truth}
        for conv in data.conversations:
            truth = by_id[conv.conv_id]
            r = derive_reformulation_terms(conv.last_query, conv.reformulated_last)
            if truth["omitted"]:
                assert r == frozenset(truth["entity_tokens"])
            else:
                assert r == frozenset()

    def test_prefix_expansion_shape(self, data):
        ids = dialogue_ids(data.conversations)
        assert len(ids) == 25
        for conv in data.conversations:
            t = int(conv.conv_id.rsplit("_t", 1)[1])
            assert len(conv.queries) == t

    def test_expand_prefixes_false_emits_full_dialogues_only(self):
        full = generate(small_spec(expand_prefixes=False))
        assert len(full.conversations) == 25
        assert all(len(c) >= 4 for c in full.conversations)

    def test_mean_length_near_spec(self):
        data = generate(small_spec(n_conversations=150, expand_prefixes=False))
        mean = np.mean([len(c) for c in data.conversations])
        assert abs(mean - 6.9) < 0.8

    def test_vocabulary_covers_all_text(self, data):
        for doc in data.documents:
            for token in tokenize(doc.text):
                assert token in data.vocab
        for conv in data.conversations:
            for q in conv.queries + (conv.reformulated_last,):
                for token in tokenize(q):
                    assert token in data.vocab

    def test_rejects_bad_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(n_topics=0)
        with pytest.raises(ValueError):
            SyntheticSpec(omission_rate=1.5)


class TestSplits:
    def test_split_by_dialogue_partitions(self, data):
        train, rest = split_by_dialogue(data.conversations, 15, -1)
        train_ids = set(dialogue_ids(train))
        rest_ids = set(dialogue_ids(rest))
        assert len(train_ids) == 15
        assert len(rest_ids) == 10
        assert not (train_ids & rest_ids)
        assert len(train) + len(rest) == len(data.conversations)

    def test_split_overflow_rejected(self, data):
        with pytest.raises(ValueError):
            split_by_dialogue(data.conversations, 20, 20)
