from __future__ import annotations

import numpy as np
import pytest

from vlamia.core import InsufficientPopulation, write_corpus
from vlamia.corpus import (apply_split, generate_corpus, make_tasks, read_manifest,
                           sample_eval_sets, split_corpus, write_manifest)


@pytest.fixture(scope="module")
def desk():
    meta, trajs = generate_corpus(seed=7)
    return meta, apply_split(trajs, split_corpus(trajs, 0.5, 7))


def test_default_counts(desk):
    meta, trajs = desk
    assert len(trajs) == 200
    assert sum(len(t) for t in trajs) == 12000
    assert meta.action_dim == 7
    assert meta.action_bounds == ((-1.0, 1.0),) * 7


def test_generation_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        meta, trajs = generate_corpus(3, 4, 4, 12, seed=11)
        write_corpus(meta, trajs, tmp_path / f"{name}.ndjson")
    assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()


def test_seed_changes_corpus():
    _, a = generate_corpus(2, 2, 3, 8, seed=1)
    _, b = generate_corpus(2, 2, 3, 8, seed=2)
    assert not np.array_equal(a[0].actions(), b[0].actions())


def test_noise_free_trajectories_of_a_task_coincide():
    _, trajs = generate_corpus(2, 3, 4, 10, seed=5, sigma_demo=0.0, sigma_obs=0.0)
    for task in (0, 1):
        group = [t for t in trajs if t.instruction_id == task]
        for other in group[1:]:
            assert [s.action.tolist() for s in other.samples] == \
                [s.action.tolist() for s in group[0].samples]
            assert [s.observation for s in other.samples] == [s.observation for s in group[0].samples]


def test_reference_path_sums_to_displacement():
    seed, d, T = 9, 5, 40
    _, trajs = generate_corpus(3, 2, d, T, seed=seed, sigma_demo=0.0, sigma_obs=0.0)
    tasks = make_tasks(3, d, T, 0.0, 0.0, seed)
    for t in trajs:
        task = tasks[t.instruction_id]
        total = t.actions()[:, :-1].sum(axis=0)
        assert np.max(np.abs(total - (task.goal - task.start))) <= 1e-9


def test_gripper_and_bounds(desk):
    _, trajs = desk
    T = len(trajs[0])
    for t in trajs[:20]:
        a = t.actions()
        assert set(np.unique(a[:, -1])) <= {-1.0, 1.0}
        assert np.all(np.abs(a) <= 1.0)
        closed = np.flatnonzero(a[:, -1] > 0)
        assert closed.size and closed[0] >= T - T // 4
        assert np.all(a[closed[0]:, -1] == 1.0)


def test_observation_layout(desk):
    _, trajs = desk
    obs = np.stack([s.observation.values for s in trajs[0].samples])
    assert obs.shape == (60, 6 + 6 + 1)
    assert obs[0, -1] == 0.0 and obs[-1, -1] == 1.0
    assert np.all(obs[:, 6:12] == obs[0, 6:12])  # goal is constant within a trajectory


def test_generate_errors():
    with pytest.raises(ValueError):
        generate_corpus(2, 2, 1, 10)
    with pytest.raises(ValueError):
        generate_corpus(1, 2, 3, 10)
    with pytest.raises(ValueError):
        generate_corpus(2, 2, 3, 4)


# splits ---------------------------------------------------------------------

def test_split_half_is_25_25(desk):
    _, trajs = desk
    for task in range(4):
        group = [t for t in trajs if t.instruction_id == task]
        assert sum(t.member for t in group) == 25


def test_split_odd_count_gives_member_the_extra():
    _, trajs = generate_corpus(2, 51, 3, 8, seed=1)
    plan = split_corpus(trajs, 0.5, seed=1)
    for task in (0, 1):
        n_mem = sum(tid.startswith(f"task{task:02d}") for tid in plan.members)
        assert n_mem == 26


def test_split_deterministic_and_disjoint(desk):
    _, trajs = desk
    a, b = split_corpus(trajs, 0.5, 7), split_corpus(trajs, 0.5, 7)
    assert a == b
    assert not set(a.members) & set(a.nonmembers)
    assert set(a.members) | set(a.nonmembers) == {t.trajectory_id for t in trajs}
    assert split_corpus(trajs, 0.5, 8) != a


def test_split_errors(small_corpus):
    _, trajs = small_corpus
    with pytest.raises(ValueError):
        split_corpus(trajs, 1.0)
    with pytest.raises(ValueError):
        split_corpus([t for t in trajs if t.trajectory_id.endswith("000")], 0.5)


# evaluation manifests -------------------------------------------------------

def test_manifest_counts(desk):
    _, trajs = desk
    m = sample_eval_sets(trajs, 100, 10, seed=7)
    assert (len(m.member_samples), len(m.nonmember_samples),
            len(m.member_trajs), len(m.nonmember_trajs)) == (100, 100, 10, 10)
    member = {t.trajectory_id for t in trajs if t.member}
    assert all(tid in member for tid, _ in m.member_samples)
    assert all(tid not in member for tid, _ in m.nonmember_samples)
    assert len(set(m.member_samples)) == 100


def test_manifest_deterministic(desk, tmp_path):
    _, trajs = desk
    m = sample_eval_sets(trajs, 100, 10, seed=7)
    assert m == sample_eval_sets(trajs, 100, 10, seed=7)
    write_manifest(m, tmp_path / "m.ndjson")
    assert read_manifest(tmp_path / "m.ndjson") == m


def test_manifest_insufficient_population(small_corpus):
    _, trajs = small_corpus
    with pytest.raises(InsufficientPopulation, match="need 10000"):
        sample_eval_sets(trajs, 10000, 100)


def test_manifest_disjoint_flag(desk):
    _, trajs = desk
    m = sample_eval_sets(trajs, 20, 10, seed=7, disjoint=True)
    used = {tid for tid, _ in m.member_samples + m.nonmember_samples}
    assert not used & set(m.member_trajs + m.nonmember_trajs)
