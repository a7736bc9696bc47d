import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmem.episodic import (DistanceStats, EpisodicMemory, EpisodicTrace, episodic_infonce, episodic_loss,
                              form_query, form_trace, masked_pool, pair_distances, trace_distance_stats)
from dualmem.errors import BatchCompositionError, DegenerateInputError
from dualmem.numerics.tensor import Tensor
from dualmem.spatial import WorldEmbedding

from oracles import check_grads, check_param_grads, cosine, infonce_direct, projected

TOL = 1e-4


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("steps,n,t,d", [(1, 3, 2, 4), (3, 2, 4, 5), (2, 5, 1, 3)])
def test_form_query_grads(steps, n, t, d):
    r = rng(steps * n)
    mem = EpisodicMemory(d, r)
    pcds = {f"p{i}": r.normal(size=(n, d)) for i in range(steps)}
    traj = r.normal(size=(t, d))
    build = lambda traj, **p: form_query([p[k] for k in sorted(p)], traj, mem)
    assert check_grads(build, {"traj": traj, **pcds}) < TOL
    assert check_param_grads(lambda: projected(build(Tensor(traj), **{k: Tensor(v) for k, v in pcds.items()})),
                             mem.query.parameters()) < TOL


def test_form_query_pools_every_point_of_every_step():
    r = rng(1)
    mem = EpisodicMemory(3, r)
    a, b, traj = r.normal(size=(2, 3)), r.normal(size=(4, 3)), r.normal(size=(5, 3))
    q = form_query([Tensor(a), Tensor(b)], Tensor(traj), mem).data
    geo = np.concatenate([a, b]).mean(0)
    ref = np.concatenate([geo, traj.mean(0)]) @ mem.query.weight.data + mem.query.bias.data
    np.testing.assert_allclose(q, ref, atol=1e-12)


def test_form_query_rejects_empty_inputs():
    mem = EpisodicMemory(3, rng())
    with pytest.raises(DegenerateInputError):
        form_query([Tensor(np.zeros((0, 3)))], Tensor(np.ones((2, 3))), mem)
    with pytest.raises(DegenerateInputError):
        form_query([Tensor(np.ones((2, 3)))], Tensor(np.zeros((0, 3))), mem)


@pytest.mark.parametrize("nw,d", [(1, 3), (4, 5), (9, 4)])
def test_form_trace_grads(nw, d):
    r = rng(nw)
    mem, world = EpisodicMemory(d, r), WorldEmbedding(nw, d, r)
    q = r.normal(size=d)
    assert check_grads(lambda q: form_trace(q, world, mem), {"q": q}) < TOL
    params = mem.attn.parameters() + world.parameters()
    assert check_param_grads(lambda: projected(form_trace(Tensor(q), world, mem)), params) < TOL


def test_form_trace_single_row_world_returns_its_value():
    r = rng(2)
    mem, world = EpisodicMemory(3, r), WorldEmbedding(1, 3, r)
    out = form_trace(Tensor(r.normal(size=3)), world, mem).data
    a = mem.attn
    np.testing.assert_allclose(out, (world.E_world.data @ a.W_V.data @ a.W_O.data)[0], atol=1e-12)


def _episodic_oracle(F, ids, pool, pool_ids, positives, tau):
    allowed = [[pool_ids[j] != ids[i] or j == positives[i] for j in range(len(pool))] for i in range(len(F))]
    return infonce_direct(F, pool, positives, allowed, tau)


def _random_batch(r, n_eps, per_ep, d):
    ids = [f"e{i}" for i in range(n_eps) for _ in range(per_ep)]
    F = r.normal(size=(len(ids), d))
    pool = r.normal(size=(len(ids), d))
    return ids, F, pool


@pytest.mark.parametrize("n_eps,per_ep,d", [(2, 1, 3), (3, 2, 4), (5, 3, 6)])
def test_episodic_loss_matches_direct_sum(n_eps, per_ep, d):
    r = rng(n_eps * per_ep)
    ids, F, pool = _random_batch(r, n_eps, per_ep, d)
    positives = [int(r.choice([j for j, e in enumerate(ids) if e == ids[i]])) for i in range(len(ids))]
    traces = [EpisodicTrace(None, Tensor(f), e, 0) for f, e in zip(F, ids)]
    got = episodic_loss(traces, [(Tensor(p), e) for p, e in zip(pool, ids)], 0.07, positives=positives).item()
    assert got == pytest.approx(_episodic_oracle(F, ids, pool, ids, positives, 0.07), abs=1e-10)


@pytest.mark.parametrize("n_eps", [2, 4, 9])
def test_episodic_loss_equal_similarity_is_log_denominator(n_eps):
    """One sample per episode: the denominator has B terms, so equal similarities give ln B."""
    v = rng(n_eps).normal(size=4)
    ids = [f"e{i}" for i in range(n_eps)]
    traces = [EpisodicTrace(None, Tensor(v), e, 0) for e in ids]
    got = episodic_loss(traces, [(Tensor(v), e) for e in ids], 0.07).item()
    assert got == pytest.approx(math.log(n_eps), abs=1e-9)


def test_episodic_positive_sampling_stays_in_episode():
    """A sampled-positive loss equals the oracle for one same-episode choice per trace."""
    r = rng(3)
    ids, F, pool = _random_batch(r, 2, 2, 4)
    choices = [[j for j, e in enumerate(ids) if e == ids[i]] for i in range(len(ids))]
    options = [_episodic_oracle(F, ids, pool, ids, list(c), 0.1) for c in itertools.product(*choices)]
    for seed in range(5):
        loss = episodic_infonce(Tensor(F), ids, Tensor(pool), ids, 0.1, rng=rng(seed)).item()
        assert min(abs(loss - o) for o in options) < 1e-10
    with pytest.raises(BatchCompositionError):
        episodic_infonce(Tensor(F), ids, Tensor(pool), ids, 0.1, positives=[2] * len(ids))


@pytest.mark.parametrize("n_eps,per_ep,d", [(2, 2, 3), (3, 1, 4), (2, 3, 5)])
def test_episodic_loss_grads(n_eps, per_ep, d):
    r = rng(d)
    ids, F, pool = _random_batch(r, n_eps, per_ep, d)
    pos = [ids.index(e) for e in ids]
    assert check_grads(lambda F, pool: episodic_infonce(F, ids, pool, ids, 0.3, positives=pos),
                       {"F": F, "pool": pool}) < TOL


def test_episodic_batch_composition_errors():
    F = Tensor(rng().normal(size=(2, 3)))
    with pytest.raises(BatchCompositionError):
        episodic_infonce(F, ["a", "a"], F, ["a", "a"], 0.1)
    with pytest.raises(BatchCompositionError):
        episodic_infonce(F, ["a", "b"], F, ["b", "c"], 0.1)
    with pytest.raises(BatchCompositionError):
        episodic_loss([], [], 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 10_000))
def test_episodic_loss_nonnegative(n_eps, per_ep, seed):
    r = rng(seed)
    ids, F, pool = _random_batch(r, n_eps, per_ep, 3)
    assert episodic_infonce(Tensor(F), ids, Tensor(pool), ids, 0.1, rng=r).item() >= 0.0


def test_masked_pool():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, -4.0], [100.0, 100.0]]]))
    m = np.array([[True, True, False]])
    np.testing.assert_allclose(masked_pool(x, m, "mean").data, [[2.0, -1.0]])
    np.testing.assert_allclose(masked_pool(x, m, "max").data, [[3.0, 2.0]])
    with pytest.raises(DegenerateInputError):
        masked_pool(x, np.zeros((1, 3), dtype=bool))


def _stats_oracle(vecs, ids):
    intra, inter = [], []
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            d = max(0.0, 1.0 - cosine(vecs[i], vecs[j]))
            (intra if ids[i] == ids[j] else inter).append(d)
    return sum(intra) / len(intra), sum(inter) / len(inter)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4), st.integers(0, 10_000))
def test_distance_stats_match_pairwise_enumeration(n_eps, per_ep, seed):
    r = rng(seed)
    ids = [f"e{i}" for i in range(n_eps) for _ in range(per_ep)]
    vecs = r.normal(size=(len(ids), 4))
    s = trace_distance_stats(list(zip(vecs, ids)))
    intra, inter = _stats_oracle(vecs, ids)
    assert s.intra == pytest.approx(intra, abs=1e-12)
    assert s.inter == pytest.approx(inter, abs=1e-12)
    assert s.ratio == pytest.approx(inter / intra, rel=1e-10)
    dist, same = pair_distances(vecs, ids)
    assert len(dist) == len(ids) * (len(ids) - 1) // 2
    assert same.sum() == n_eps * per_ep * (per_ep - 1) // 2


def test_distance_stats_undefined_ratio_and_errors():
    v = np.array([1.0, 0.0])
    s = trace_distance_stats([(v, "a"), (v, "a"), (np.array([0.0, 1.0]), "b")])
    assert s.intra == 0.0 and not s.ratio_defined
    assert isinstance(s, DistanceStats)
    with pytest.raises(DegenerateInputError):
        trace_distance_stats([(v, "a"), (v, "a")])
    with pytest.raises(DegenerateInputError):
        trace_distance_stats([(v, "a"), (v, "b")])
    with pytest.raises(DegenerateInputError):
        trace_distance_stats([(np.zeros(2), "a"), (v, "a"), (v, "b")])
