import numpy as np
import pytest
from conftest import quad_fed
from hypothesis import given
from hypothesis import strategies as st

from oneshot_fl import divergence
from oneshot_fl.data import PartitionSpec, gen_synthetic, partition
from oneshot_fl.diagnostics import UndefinedTauError
from oneshot_fl.divergence import epsilon_global, epsilon_local, paired_run, verify_bound_chain
from oneshot_fl.models import MLPModel
from oneshot_fl.numerics import InvalidInputError, RngStream
from oneshot_fl.protocol import FLConfig, Federation


def hetero_fed(seed, m=3, d=3, spread=0.8):
    g = np.random.default_rng(seed)
    centers = g.standard_normal((m, d))
    curv = 1.0 + spread * g.uniform(-1, 1, (m, d))
    return quad_fed(centers, curv, w0=g.standard_normal(d))


def mlp_fed(seed, m=3, width=6):
    ds = gen_synthetic("binary", 40 * m, 4, seed=seed, n_groups=m, shift=1.0)
    shards = partition(ds, PartitionSpec("task-split", m, seed))
    model = MLPModel(4, [width], loss="logistic")
    return Federation([model] * m, shards, model.init_params(RngStream(seed, ("w0",))))


def test_first_k_steps_identical_then_diverge():
    fed = hetero_fed(0, m=2)
    cfg = FLConfig(m=2, T=3, k=4, lr=0.3, batch_size=4)
    pair = paired_run(cfg, fed, retain_weights=True)
    for i in range(2):
        a, b = pair.oneshot.step_weights[i], pair.multi.step_weights[i]
        for s in range(cfg.k):
            assert np.array_equal(a[s], b[s])
        assert not np.array_equal(a[cfg.k], b[cfg.k])


def test_single_client_trajectories_identical():
    fed = mlp_fed(1, m=1)
    pair = paired_run(FLConfig(m=1, T=3, k=4, lr=0.2, batch_size=8), fed, retain_weights=True)
    for a, b in zip(pair.oneshot.step_weights[0], pair.multi.step_weights[0]):
        assert np.array_equal(a, b)
    assert np.array_equal(epsilon_local(pair, 0), np.zeros(fed.w0.shape))


def _hand_eps_i(c, c_bar, w0, beta, T, k):
    """Shared-Hessian (A = I) closed form for one client's accumulated difference."""
    eps = np.zeros_like(w0)
    for s in range(k, T * k):
        t, j = divmod(s, k)
        a = c + (1 - beta) ** s * (w0 - c)
        w_t = c_bar + (1 - beta) ** (t * k) * (w0 - c_bar)
        b = c + (1 - beta) ** j * (w_t - c)
        eps += beta * (a - b)
    return eps


@pytest.mark.parametrize("beta, T, k", [(0.1, 3, 2), (0.5, 2, 3), (0.3, 5, 1)])
def test_shared_hessian_zero_aggregate_eps(beta, T, k):
    g = np.random.default_rng(int(beta * 10) + T)
    centers = g.standard_normal((4, 3))
    w0 = g.standard_normal(3)
    pair = paired_run(FLConfig(m=4, T=T, k=k, lr=beta, batch_size=4), quad_fed(centers, w0=w0))
    ge = epsilon_global(pair)
    assert ge.eps_norm < 1e-10
    for i in range(4):
        assert np.allclose(ge.eps_i[i], _hand_eps_i(centers[i], centers.mean(0), w0, beta, T, k), atol=1e-12)


def _brute_eps_i(pair, i):
    cfg = pair.config
    model = pair.fed.models[i]
    shard = pair.fed.shards[i]
    a, b = pair.oneshot.step_weights[i], pair.multi.step_weights[i]
    total = np.zeros_like(pair.w0)
    for s in range(cfg.k, cfg.total_steps):
        batch = shard.take(pair.oneshot.step_batches[i][s])
        total = total + cfg.beta_at(s) * (model.gradient(a[s], batch) - model.gradient(b[s], batch))
    return total


@given(st.integers(0, 10_000))
def test_eps_matches_brute_force_and_trajectory_gap(seed):
    pair = paired_run(FLConfig(m=3, T=3, k=3, lr=0.3, batch_size=4), hetero_fed(seed), retain_weights=True)
    ge = epsilon_global(pair)
    for i in range(3):
        brute = _brute_eps_i(pair, i)
        assert np.linalg.norm(ge.eps_i[i] - brute) <= 1e-8 * max(np.linalg.norm(brute), 1e-300)
    gap = pair.w_multi - pair.w_oneshot
    assert np.linalg.norm(ge.eps - gap) <= 1e-8 * max(np.linalg.norm(gap), 1e-300)
    assert ge.eps_norm <= sum(ge.eps_i_norms) * (1 + 1e-9)


def test_mirrored_clients_cancel():
    curv = [[1.0, 0.4], [1.0, 0.4]]
    pair = paired_run(FLConfig(m=2, T=3, k=2, lr=0.4, batch_size=4),
                      quad_fed([[1.0, 2.0], [-1.0, -2.0]], curv, w0=[0.0, 0.0]))
    ge = epsilon_global(pair)
    assert ge.eps_norm < 1e-14
    assert sum(ge.eps_i_norms) > 0.1
    assert ge.triangle_slack > 0.1


def test_single_nonzero_client(monkeypatch):
    pair = paired_run(FLConfig(m=2, T=2, k=1, p=(0.3, 0.7), lr=0.5, batch_size=4), hetero_fed(1, m=2))
    v = np.array([3.0, 4.0, 0.0])
    monkeypatch.setattr(divergence, "epsilon_local", lambda pr, i: v if i == 0 else np.zeros(3))
    ge = epsilon_global(pair)
    assert ge.eps_norm == pytest.approx(0.3 * 5.0, rel=1e-15)


def test_all_zero_eps():
    pair = paired_run(FLConfig(m=2, T=2, k=2, lr=0.5, batch_size=4), quad_fed([[1, 1], [1, 1]], w0=[3, 3]))
    ge = epsilon_global(pair)
    assert ge.eps_norm == 0.0 and ge.eps_i_norms == [0.0, 0.0]


def test_independent_policy_rejected():
    pair = paired_run(FLConfig(m=2, T=2, k=2, lr=0.2, batch_size=8), mlp_fed(0, m=2), policy="independent")
    with pytest.raises(InvalidInputError):
        epsilon_local(pair, 0)


def test_partial_participation_rejected():
    with pytest.raises(InvalidInputError):
        paired_run(FLConfig(m=2, T=2, k=2, participation=0.5), mlp_fed(0, m=2))


def test_zero_w0_is_undefined_tau():
    pair = paired_run(FLConfig(m=2, T=2, k=1, lr=0.5, batch_size=4), quad_fed([[1, 0], [0, 1]]))
    with pytest.raises(UndefinedTauError):
        verify_bound_chain(pair)


def test_zero_eps_instance_all_verdicts_true():
    pair = paired_run(FLConfig(m=3, T=3, k=2, lr=0.3, batch_size=4),
                      quad_fed(np.eye(3), w0=[1.0, 2.0, 3.0]))
    rep = verify_bound_chain(pair)
    assert rep.eps_norm < 1e-10 and rep.all_hold


@pytest.mark.parametrize("seed", range(5))
def test_chain_holds_on_mlp(seed):
    rep = verify_bound_chain(paired_run(FLConfig(m=3, T=3, k=4, lr=0.3, batch_size=8, seed=seed), mlp_fed(seed)))
    assert rep.all_hold
    c = rep.chain
    assert c["eps_norm"] <= c["grad_gap"] <= c["smooth"] * (1 + 1e-12) <= c["drift"] * (1 + 1e-9) <= c["uniform"] * (1 + 1e-9)
    assert rep.unit_rate_chain["bound_holds"]


def test_replayed_weights_match_retained():
    cfg = FLConfig(m=2, T=2, k=3, lr=0.2, batch_size=8)
    kept = verify_bound_chain(paired_run(cfg, mlp_fed(2, m=2), retain_weights=True))
    replay = verify_bound_chain(paired_run(cfg, mlp_fed(2, m=2), retain_weights=False))
    assert kept.to_json() == replay.to_json()


def test_report_roundtrip(tmp_path):
    rep = verify_bound_chain(paired_run(FLConfig(m=2, T=2, k=2, lr=0.2, batch_size=8), mlp_fed(3, m=2)))
    rep.write(tmp_path / "r.json")
    import json

    assert json.loads((tmp_path / "r.json").read_text())["eps_norm"] == rep.eps_norm


def test_eps_grows_with_curvature_spread():
    spreads = [0.0, 0.2, 0.4, 0.6, 0.8]
    means = []
    for h in spreads:
        norms = []
        for seed in range(10):
            g = np.random.default_rng(seed)
            centers = g.standard_normal((4, 3))
            u = g.uniform(-1, 1, (4, 3))
            w0 = g.standard_normal(3)
            pair = paired_run(FLConfig(m=4, T=3, k=3, lr=0.3, batch_size=4),
                              quad_fed(centers, 1.0 + h * u, w0=w0))
            norms.append(epsilon_global(pair).eps_norm)
        means.append(np.mean(norms))
    assert means[0] < 1e-10
    assert all(b >= a for a, b in zip(means, means[1:]))
