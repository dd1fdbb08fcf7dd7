import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from instrexec.tasks import (
    INTERACT, AnalogyBatch, Sentence, TaskParams, TaskSpace, TaskSplit, build_split, encode_sentence, enumerate_analogies,
    from_onehots, is_analogy, parse_sentence, sample_instructions, vocabulary,
)
from instrexec.tensor.core import Tensor

from helpers import tid


def test_taskparams_onehot_round_trip():
    g = TaskParams(2, 7)
    assert from_onehots(*g.onehots(3, 15)) == g


@pytest.mark.parametrize("g1,g2", [([1, 1, 0], [1, 0]), ([0, 0, 0], [1, 0]), ([0.5, 0.5], [1])])
def test_non_onehot_rejected(g1, g2):
    with pytest.raises(ValueError):
        from_onehots(g1, g2)


# ---------------------------------------------------------------- splits

def test_independent_split_example():
    split = build_split("independent", 0.2, 0)
    assert len(split.unseen) == 9 and len(split.train) == 36
    assert {g.action for g in split.train} == {0, 1, 2}
    assert {g.obj for g in split.train} == set(range(15))


@given(st.integers(0, 10_000), st.sampled_from([0.1, 0.2, 0.3]))
def test_split_invariants(seed, frac):
    split = build_split("independent", frac, seed)
    assert not set(split.train) & set(split.unseen)
    assert set(split.train) | set(split.unseen) == set(split.space.all_tasks())
    assert build_split("independent", frac, seed) == split


@pytest.mark.parametrize("frac", [0.0, 0.5, -0.1])
def test_split_rejects_bad_holdout(frac):
    with pytest.raises(ValueError):
        build_split("independent", frac, 0)


def test_object_dependent_split_holds_out_interact_only():
    split = build_split("object-dependent", 0.2, 1)
    interact = split.space.actions.index(INTERACT)
    assert all(g.action == interact for g in split.unseen)
    assert len(split.unseen) == 3
    assert set(split.groups.values()) == {"A", "B"}


def test_split_yaml_round_trip(tmp_path):
    split = build_split("object-dependent", 0.2, 4)
    split.save(tmp_path / "s.yaml")
    assert TaskSplit.load(tmp_path / "s.yaml") == split


def test_split_rejects_uncovered_train_set():
    split = build_split("independent", 0.2, 0)
    with pytest.raises(ValueError):
        TaskSplit("independent", split.space, tuple(g for g in split.train if g.obj != 0),
                  tuple(split.unseen) + tuple(g for g in split.train if g.obj == 0))


# ---------------------------------------------------------------- analogies

def test_independent_parallelogram_is_sim():
    split = build_split("independent", 0.2, 0)
    v, p = 0, 1
    assert is_analogy(split, TaskParams(v, 0), TaskParams(v, 1), TaskParams(p, 0), TaskParams(p, 1))
    assert not is_analogy(split, TaskParams(v, 0), TaskParams(v, 1), TaskParams(p, 0), TaskParams(2, 1))


def test_object_dependent_cross_group_is_dis():
    split = build_split("object-dependent", 0.2, 1)
    inv = {v: k for k, v in enumerate(split.space.objects)}
    x, y = inv[tid("cow")], inv[tid("pig")]  # groups A and B
    i = split.space.actions.index(INTERACT)
    assert not is_analogy(split, TaskParams(0, x), TaskParams(0, y), TaskParams(i, x), TaskParams(i, y))
    z = inv[tid("sheep")]  # also A
    assert is_analogy(split, TaskParams(0, x), TaskParams(0, z), TaskParams(i, x), TaskParams(i, z))


@given(st.integers(0, 1000), st.sampled_from(["independent", "object-dependent"]))
def test_analogy_batches_respect_relations(seed, scenario):
    split = build_split(scenario, 0.2, seed % 7)
    batch = enumerate_analogies(split, 16, seed)
    train = set(split.train)
    assert len(batch.sim) == 16 and len(batch.dis) == 16 and len(batch.diff) == 16
    for q in batch.sim:
        assert all(g in train for g in q) and is_analogy(split, *q)
    for q in batch.dis:
        assert all(g in train for g in q) and not is_analogy(split, *q)
    for a, b in batch.diff:
        assert a != b and a in train and b in train


def test_analogies_deterministic():
    split = build_split("independent", 0.2, 0)
    assert enumerate_analogies(split, 8, 3) == enumerate_analogies(split, 8, 3)


def test_analogy_budget_positive():
    with pytest.raises(ValueError):
        enumerate_analogies(build_split("independent", 0.2, 0), 0, 0)


def test_is_analogy_brute_force_matches_definition():
    split = build_split("independent", 0.2, 0)
    tasks = [TaskParams(a, o) for a in range(3) for o in range(3)]
    for a, b, c, d in itertools.product(tasks, repeat=4):
        par = (sorted([a.action, d.action]) == sorted([b.action, c.action])
               and sorted([a.obj, d.obj]) == sorted([b.obj, c.obj]))
        assert is_analogy(split, a, b, c, d) == par


# ---------------------------------------------------------------- sentences

def test_sample_instructions_train_only():
    split = build_split("independent", 0.2, 0)
    for seed in range(50):
        sents = sample_instructions(4, split, False, seed)
        assert len(sents) == 4
        assert all(s.subtask(split.space) in split.train for s in sents)


def test_sample_instructions_unseen_has_heldout():
    split = build_split("independent", 0.2, 0)
    for seed in range(100):
        sents = sample_instructions(20, split, True, seed)
        assert any(s.subtask(split.space) in split.unseen for s in sents)


def test_sample_instructions_deterministic_and_positive():
    split = build_split("independent", 0.2, 0)
    assert sample_instructions(5, split, True, 9) == sample_instructions(5, split, True, 9)
    with pytest.raises(ValueError):
        sample_instructions(0, split, False, 0)


def test_all_instruction_never_precedes_same_object():
    split = build_split("independent", 0.2, 0)
    for seed in range(200):
        dead = set()
        for s in sample_instructions(20, split, False, seed):
            assert s.obj not in dead
            if s.template >= 3:
                dead.add(s.obj)


def test_sentence_text_round_trip():
    for t in range(5):
        s = Sentence(t, tid("pig"))
        assert parse_sentence(s.text()) == s
    assert Sentence(3, tid("pig")).text() == "Pick up all pig"


def test_bow_examples():
    rng = np.random.default_rng(0)
    emb = Tensor(rng.standard_normal((len(vocabulary()), 4)))
    pick_pig = Sentence(1, tid("pig"))
    ids = pick_pig.word_ids()
    np.testing.assert_allclose(encode_sentence(ids[::-1], emb).data, encode_sentence(pick_pig, emb).data)
    diff = encode_sentence(Sentence(3, tid("pig")), emb).data - encode_sentence(pick_pig, emb).data
    np.testing.assert_allclose(diff, emb.data[vocabulary().index("all")], atol=1e-12)
    assert not encode_sentence(pick_pig, Tensor(np.zeros((len(vocabulary()), 4)))).data.any()


def test_bow_rejects_unknown_word():
    with pytest.raises(ValueError):
        encode_sentence([0, 999], Tensor(np.zeros((20, 2))))


@given(st.lists(st.integers(0, 19), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_bow_permutation_invariant(ids, rnd):
    emb = Tensor(np.random.default_rng(1).standard_normal((20, 3)))
    perm = list(ids)
    rnd.shuffle(perm)
    np.testing.assert_allclose(encode_sentence(ids, emb).data, encode_sentence(perm, emb).data, atol=1e-12)


def test_empty_analogy_batch_type():
    assert AnalogyBatch().sim == []


def test_small_object_sets_stay_feasible():
    space = TaskSpace(("visit", "pickup", "transform"), (tid("pig"), tid("egg")))
    split = TaskSplit("independent", space, tuple(space.all_tasks()), ())
    for seed in range(300):
        sents = sample_instructions(6, split, False, seed)
        dead = set()
        for s in sents:
            assert s.obj not in dead
            if s.template >= 3:
                dead.add(s.obj)
