import numpy as np
import pytest

from fastsplat import densify, optim
from fastsplat.camera import Camera, look_at
from fastsplat.core import DensifyStats, ParameterStore, inverse_sigmoid, rotation_matrices


def make_store(scales, opacity=0.5, n=None, quats=None, rng=None):
    scales = np.atleast_2d(np.asarray(scales, float))
    n = scales.shape[0]
    rng = rng or np.random.default_rng(0)
    q = np.tile([1.0, 0, 0, 0], (n, 1)) if quats is None else np.asarray(quats, float)
    return ParameterStore(rng.normal(size=(n, 3)), np.log(scales), q,
                          np.full((n, 1), inverse_sigmoid(opacity)), rng.normal(size=(n, 3)),
                          rng.normal(size=(n, 15, 3)))


def stats_for(grad_avg):
    grad_avg = np.asarray(grad_avg, float)
    return DensifyStats(grad_avg * 2, np.full(len(grad_avg), 2, np.int64))


def test_clone_adds_one_identical_copy():
    store = make_store([[0.005] * 3, [0.005] * 3])
    before = store.copy()
    ev = densify.densify_and_prune(store, stats_for([1e-3, 0.0]), extent=1.0)
    assert (ev.clones, ev.splits, ev.pruned, len(store)) == (1, 0, 0, 3)
    for k, v in before.arrays().items():
        assert np.array_equal(getattr(store, k)[:2], v)
        assert np.array_equal(getattr(store, k)[2], v[0])


def test_split_replaces_parent_by_two_children():
    store = make_store([[0.05, 0.02, 0.03], [0.05] * 3])
    parent = store.take([0])
    ev = densify.densify_and_prune(store, stats_for([1e-3, 0.0]), extent=1.0)
    assert (ev.clones, ev.splits, len(store)) == (0, 1, 2 + 1)
    assert np.allclose(store.log_scales[1:], parent.log_scales - np.log(1.6))
    assert np.array_equal(store.sh_rest[1:], np.repeat(parent.sh_rest, 2, axis=0))


def test_split_children_follow_the_parent_distribution():
    n = 4000
    q = np.tile([0.9, 0.3, -0.2, 0.1], (n, 1))
    store = make_store(np.tile([0.06, 0.02, 0.04], (n, 1)), quats=q)
    store.means[:] = 0
    densify.densify_and_prune(store, stats_for(np.full(n, 1e-3)), 1.0, rng=np.random.default_rng(3))
    off = store.means
    assert len(off) == 2 * n
    R = rotation_matrices(q[:1])[0]
    cov = R @ np.diag([0.06, 0.02, 0.04]) ** 2 @ R.T
    assert np.abs(off.mean(axis=0)).max() < 4 * 0.06 / np.sqrt(2 * n)
    assert np.abs(np.cov(off.T) - cov).max() < 0.1 * 0.06 ** 2


def test_pruning_rules():
    store = make_store([[0.01] * 3, [0.01] * 3, [0.2] * 3, [0.01] * 3],
                       quats=[[1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0]])
    store.opacity_logits[1] = inverse_sigmoid(0.01)
    ev = densify.densify_and_prune(store, stats_for([0, 0, 0, 0]), extent=1.0)
    assert ev.pruned == 3 and len(store) == 1


def test_moments_gathered_and_new_rows_zeroed():
    store = make_store([[0.005] * 3, [0.05] * 3, [0.005] * 3])
    store.opacity_logits[0] = inverse_sigmoid(0.01)  # pruned survivor shifts the new rows
    state = optim.AdamState.zeros_like(store)
    for d in (state.m, state.v):
        for k in d:
            d[k][:] = np.arange(1, 4).reshape((3,) + (1,) * (d[k].ndim - 1))
    ev = densify.densify_and_prune(store, stats_for([0, 1e-3, 1e-3]), 1.0, state=state)
    # rows: survivor 2 (was 3rd), clone of 2, two children of 1
    assert (ev.clones, ev.splits, ev.pruned, len(store)) == (1, 1, 1, 4)
    for d in (state.m, state.v):
        for k in d:
            assert d[k].shape[0] == 4
            assert np.all(d[k][0] == 3) and not d[k][1:].any()


def test_every_array_gathered_once_per_event():
    store = make_store([[0.005] * 3, [0.05] * 3, [0.01] * 3])
    state = optim.AdamState.zeros_like(store)
    comp = {"nu_hat": np.ones(3)}
    densify.GATHER_COUNT["n"] = 0
    densify.densify_and_prune(store, stats_for([1e-3, 1e-3, 0]), 1.0, state=state, companions=comp)
    assert densify.GATHER_COUNT["n"] == 6 + 2 * 6 + 1
    assert len(comp["nu_hat"]) == len(store) == 5


def test_stats_reset_after_event():
    store = make_store([[0.005] * 3])
    st = stats_for([1e-3])
    densify.densify_and_prune(store, st, 1.0)
    assert st.grad_accum.tolist() == [0, 0] and st.visible_count.tolist() == [0, 0]


def test_opacity_reset_examples():
    store = make_store([[0.1] * 3] * 2)
    store.opacity_logits[:, 0] = inverse_sigmoid(np.array([0.9, 0.005]))
    state = optim.AdamState.zeros_like(store)
    state.m["opacity_logits"][:] = 1
    state.m["means"][:] = 1
    densify.opacity_reset(store, state)
    assert np.allclose(store.opacities(), [0.01, 0.005], rtol=1e-12)
    assert not state.m["opacity_logits"].any() and state.m["means"].all()


def test_scene_extent():
    cams = [Camera(look_at([3 * np.cos(a), 3 * np.sin(a), 1], [0, 0, 0]), 10, 10, 5, 5, 10, 10)
            for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    assert densify.scene_extent(cams) == pytest.approx(3.3, rel=1e-12)
    assert densify.scene_extent(cams[:1]) == 1.0


@pytest.mark.parametrize("it,deg", [(0, 0), (999, 0), (1000, 1), (2500, 2), (3000, 3), (30000, 3)])
def test_sh_degree_ramp(it, deg):
    assert densify.sh_active_degree(it) == deg


def test_schedule():
    s = densify.DensifySchedule()
    assert not s.densify_now(500) and s.densify_now(600) and not s.densify_now(650)
    assert s.densify_now(14900) and not s.densify_now(15000)
    assert s.reset_now(3000) and not s.reset_now(15000)
