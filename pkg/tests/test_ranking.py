import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dust.ranking import (CheckpointSet, SampleRanking, batch_uncertainty, checkpoint_epochs, partition_scores,
                          rank_and_partition, sample_uncertainty, uncertainty_from_maps)
from dust.unet import init_params

from oracles import sample_uncertainty_loop


def test_checkpoint_schedule():
    assert checkpoint_epochs(40, 5) == [8, 16, 24, 32, 40]
    assert checkpoint_epochs(10, 3) == [4, 7, 10]
    eps = checkpoint_epochs(7, 7)
    assert eps == list(range(1, 8))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 300))
def test_checkpoint_schedule_strictly_increasing(K, extra):
    eps = checkpoint_epochs(K + extra, K)
    assert len(eps) == K and eps[-1] == K + extra
    assert all(b > a for a, b in zip(eps, eps[1:]))


def test_checkpoint_schedule_rejects_too_few_epochs():
    with pytest.raises(ValueError):
        checkpoint_epochs(3, 5)


def test_checkpoint_set_requires_two():
    with pytest.raises(ValueError):
        CheckpointSet([init_params(2, 4, 2)], [1])


def test_identical_maps_give_zero():
    m = np.random.default_rng(0).random((3, 4, 4))
    assert uncertainty_from_maps([m, m, m]) == 0.0


def test_three_checkpoint_toy_value():
    maps = [np.array([0.6, 0.4]).reshape(2, 1, 1), np.full((2, 1, 1), 0.5), np.full((2, 1, 1), 0.5)]
    assert uncertainty_from_maps(maps) == pytest.approx(0.005, abs=1e-15)
    assert sample_uncertainty_loop(maps) == pytest.approx(0.005, abs=1e-15)


def test_single_map_rejected():
    with pytest.raises(ValueError):
        uncertainty_from_maps([np.zeros((2, 2, 2))])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_uncertainty_matches_loop_and_permutation(seed, K):
    rng = np.random.default_rng(seed)
    maps = [rng.random((3, 4, 5)) for _ in range(K)]
    u = uncertainty_from_maps(maps)
    assert u >= 0
    assert u == pytest.approx(sample_uncertainty_loop(maps), abs=1e-12)
    perm = rng.permutation(20)
    shuffled = [m.reshape(3, 20)[:, perm].reshape(3, 4, 5) for m in maps]
    assert uncertainty_from_maps(shuffled) == pytest.approx(u, abs=1e-15)


@pytest.mark.parametrize("c", [0.5, 2.0, 3.0])
def test_uncertainty_scales_quadratically(c):
    base = np.full((2, 3, 3), 0.4)
    deltas = [np.full((2, 3, 3), 0.1), np.full((2, 3, 3), -0.05)]
    u1 = uncertainty_from_maps([base + d for d in deltas] + [base])
    uc = uncertainty_from_maps([base + c * d for d in deltas] + [base])
    assert uc == pytest.approx(c * c * u1, rel=1e-12)


def test_sort_and_partition_example():
    r = partition_scores(["a", "b", "c", "d"], [0.3, 0.1, 0.4, 0.2], 0.5)
    assert r.order == ["b", "d", "a", "c"]
    assert r.reliable == ["b", "d"]
    assert [e.rank for e in r.entries] == [1, 2, 3, 4]


def test_ties_break_by_id():
    r = partition_scores(["d", "b", "a", "c"], [1.0] * 4, 0.5)
    assert r.order == ["a", "b", "c", "d"]
    assert r.reliable == ["a", "b"]


def test_ceil_rule():
    r = partition_scores(list("abcde"), [5, 4, 3, 2, 1], 0.5)
    assert len(r.reliable) == 3 and len(r.unreliable) == 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.05, 0.95))
def test_partition_properties(scores, f):
    ids = [f"s{i:03d}" for i in range(len(scores))]
    r = partition_scores(ids, scores, f)
    assert sorted(r.order) == ids
    assert set(r.reliable).isdisjoint(r.unreliable)
    assert set(r.reliable) | set(r.unreliable) == set(ids)
    us = [e.uncertainty for e in r.entries]
    assert us == sorted(us)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1])
def test_fraction_validated(bad):
    with pytest.raises(ValueError):
        partition_scores(["a", "b"], [0.1, 0.2], bad)


def test_empty_and_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        partition_scores([], [], 0.5)
    with pytest.raises(ValueError):
        partition_scores(["a", "a"], [0.1, 0.2], 0.5)


def test_csv_round_trip(tmp_path):
    r = partition_scores(["x1", "x2", "x3"], [0.123456789123, 2e-9, 0.5], 0.5)
    path = tmp_path / "ranking.csv"
    r.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_id,uncertainty,rank,partition"
    assert lines[1] == "x2,2e-09,1,reliable"
    assert lines[2] == "x1,0.123456789,2,reliable"
    assert lines[3] == "x3,0.5,3,unreliable"
    back = SampleRanking.from_csv(path)
    assert back.order == r.order and back.reliable == r.reliable


@pytest.fixture(scope="module")
def ckpts():
    return CheckpointSet([init_params(2, 4, 3, rng_seed=s) for s in range(3)], [1, 2, 3])


def test_network_uncertainty_matches_loop(ckpts):
    from dust.unet import predict_probs

    x = np.random.default_rng(0).standard_normal((1, 1, 8, 8)).astype(np.float32)
    maps = [predict_probs(m, x)[0][0] for m in ckpts.models]
    assert sample_uncertainty(ckpts, x[0, 0]) == pytest.approx(sample_uncertainty_loop(maps), rel=1e-9)


def test_ranking_is_reproducible(ckpts):
    imgs = np.random.default_rng(1).standard_normal((6, 1, 8, 8)).astype(np.float32)
    ids = [f"u{i}" for i in range(6)]
    a = rank_and_partition(ckpts, ids, imgs)
    b = rank_and_partition(ckpts, ids, imgs)
    assert [e.uncertainty for e in a.entries] == [e.uncertainty for e in b.entries]
    assert a.order == b.order
    # batched float32 inference may differ from one-by-one at roundoff level
    np.testing.assert_allclose(batch_uncertainty(ckpts, imgs),
                               [sample_uncertainty(ckpts, im[0]) for im in imgs], rtol=1e-6)
