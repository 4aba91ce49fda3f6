import numpy as np
import pytest

from fedlab.errors import InvalidInput, NumericalDivergence
from fedlab.fedalgos import (ALGORITHMS, AlgorithmConfig, Broadcast, ClientDelta, ServerState,
                             admm_consensus_update, admm_local_step, client_init,
                             fedavg_local_round, fedcm_local_round, fedsaga_local_round,
                             losac_local_round, losac_prox_local_round, losac_server_aggregate,
                             make_algorithm, mime_anchor_gradient, mime_svrg_local_round,
                             scaffold_local_round, scaffold_server_aggregate, warm_start_phi)
from fedlab.models import LeastSquares, LocalDataset, TraceRegression

from oracles import replay_losac


class ScriptedBlocks:
    """Stands in for a Generator: returns a fixed sequence of block indices."""

    def __init__(self, blocks):
        self.blocks = iter(blocks)

    def integers(self, high):
        j = next(self.blocks)
        assert 0 <= j < high
        return j


def two_block_quadratic():
    # f_1 = 1/2 (x - 1)^2, f_2 = 1/2 (x + 1)^2 as single-sample least-squares blocks
    return LeastSquares(1), LocalDataset(np.ones((2, 1)), np.array([1.0, -1.0]),
                                         [np.array([0]), np.array([1])])


def scalar_quadratic(target=1.0):
    return LeastSquares(1), LocalDataset(np.ones((1, 1)), np.array([target]))


def quadratic_problem(n=40, p=3, M=1, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = X @ rng.standard_normal(p) + 0.1 * rng.standard_normal(n)
    return LeastSquares(p, mu_reg=0.1), LocalDataset.with_blocks(X, y, M)


def losac_setup(model, data, x0, N=1, warm=True):
    state = client_init("losac", model, data, x0, warm_start=warm)
    phi = warm_start_phi(model, [data], x0) if warm else np.zeros_like(x0)
    return state, Broadcast(x=np.asarray(x0, float), phi=phi, N=N)


# --- LoSAC ---------------------------------------------------------------


def test_losac_two_block_hand_trace():
    model, data = two_block_quadratic()
    state, bc = losac_setup(model, data, np.array([2.0]))
    assert state.y_table.ravel().tolist() == [1.0, 3.0]
    assert bc.phi.tolist() == [2.0]
    cfg = AlgorithmConfig(eta=0.1, T=2, M=2)
    new, delta = losac_local_round(state, bc, model, data, cfg, ScriptedBlocks([0, 1]))
    assert new.x.tolist() == pytest.approx([1.62], abs=1e-15)
    assert new.phi.tolist() == pytest.approx([1.9], abs=1e-15)
    assert new.y_table.ravel().tolist() == pytest.approx([1.0, 2.8], abs=1e-15)
    # intermediate iterate: the first direction is phi - y_1 + g_1 = 2
    assert delta.directions[0].tolist() == pytest.approx([2.0])

    grads = [lambda x: x - 1.0, lambda x: x + 1.0]
    history = replay_losac(2.0, 2.0, [1.0, 3.0], grads, [0, 1], 0.1, 1, 2)
    assert [h[0] for h in history] == pytest.approx([2.0, 1.8, 1.62], abs=1e-15)
    assert [h[1] for h in history] == pytest.approx([2.0, 2.0, 1.9], abs=1e-15)


def test_losac_replay_oracle_on_random_schedule():
    model, data = two_block_quadratic()
    state, bc = losac_setup(model, data, np.array([0.7]), N=3, warm=False)
    bc = Broadcast(x=bc.x, phi=np.array([0.25]), N=3)
    blocks = [1, 1, 0, 1, 0, 0, 1]
    cfg = AlgorithmConfig(eta=0.05, T=len(blocks), M=2)
    new, _ = losac_local_round(state, bc, model, data, cfg, ScriptedBlocks(blocks))
    grads = [lambda x: x - 1.0, lambda x: x + 1.0]
    x, phi, y = replay_losac(0.7, 0.25, [0.0, 0.0], grads, blocks, 0.05, 3, 2)[-1]
    assert new.x[0] == pytest.approx(x, abs=1e-15)
    assert new.phi[0] == pytest.approx(phi, abs=1e-15)
    assert new.y_table.ravel().tolist() == pytest.approx(list(y), abs=1e-15)


def test_losac_t0_is_noop():
    model, data = two_block_quadratic()
    state, bc = losac_setup(model, data, np.array([2.0]))
    new, delta = losac_local_round(state, bc, model, data, AlgorithmConfig(T=0), ScriptedBlocks([]))
    assert delta.dx.tolist() == [0.0] and delta.dphi.tolist() == [0.0]
    np.testing.assert_array_equal(new.y_table, state.y_table)


def gd_iterates(model, data, x0, eta, steps):
    xs, x = [], np.array(x0, dtype=float)
    for _ in range(steps):
        x = x - eta * model.full_gradient(x, data)
        xs.append(x.copy())
    return xs


def iterates_from(x0, directions, eta):
    xs, x = [], np.array(x0, dtype=float)
    for d in directions:
        x = x - eta * d
        xs.append(x.copy())
    return xs


@pytest.mark.parametrize("algorithm", ["losac", "fedsaga"])
def test_single_client_single_block_equals_gradient_descent(algorithm):
    model, data = quadratic_problem(M=1)
    x0 = np.array([1.0, -2.0, 0.5])
    cfg = AlgorithmConfig(eta=0.05, T=50, M=1, warm_start=True)
    algo = make_algorithm(algorithm, cfg)
    server = algo.init_server(model, [data], x0)
    state = algo.init_client(model, data, x0, 0)
    bc = algo.prepare(server, [0], model, [data])
    _, delta = algo.local_round(state, bc, model, data, np.random.default_rng(0))
    got = iterates_from(x0, delta.directions, cfg.eta)
    for a, b in zip(got, gd_iterates(model, data, x0, cfg.eta, 50)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_losac_bookkeeping_identity():
    model, data = quadratic_problem(M=4)
    x0 = np.zeros(3)
    state, bc = losac_setup(model, data, x0, N=5)
    cfg = AlgorithmConfig(eta=0.05, T=9, M=4, check_bookkeeping=True)
    new, delta = losac_local_round(state, bc, model, data, cfg, np.random.default_rng(3))
    rebuilt = (new.y_table - state.y_table).sum(axis=0) / (5 * 4)
    np.testing.assert_allclose(delta.dphi, rebuilt, rtol=0, atol=1e-15)


def test_losac_server_aggregate_examples():
    server = ServerState(x=np.array([1.0]), phi=np.array([0.0]))
    d = ClientDelta(0, dx=np.array([0.4]), dphi=np.array([0.1]))
    out = losac_server_aggregate(server, [d], N=2, S=1)
    assert out.x.tolist() == pytest.approx([1.2])
    assert out.phi.tolist() == pytest.approx([0.2])

    deltas = [ClientDelta(i, dx=np.array([0.0]), dphi=np.array([0.3])) for i in range(3)]
    out = losac_server_aggregate(server, deltas, N=3, S=3)
    assert out.phi.tolist() == pytest.approx([0.9])
    assert out.x.tolist() == [1.0]

    zeros = [ClientDelta(i, dx=np.zeros(1), dphi=np.zeros(1)) for i in range(2)]
    out = losac_server_aggregate(server, zeros, N=4, S=2)
    assert out.x.tolist() == [1.0] and out.phi.tolist() == [0.0]

    with pytest.raises(InvalidInput):
        losac_server_aggregate(server, [], N=2, S=1)


def test_losac_aggregate_flag_divides_by_participants():
    server = ServerState(x=np.array([1.0]), phi=np.array([0.0]))
    d = ClientDelta(0, dx=np.array([0.4]), dphi=np.array([0.1]))
    out = losac_server_aggregate(server, [d], N=2, S=1, average_over_participants=True)
    assert out.x.tolist() == pytest.approx([1.4])


def test_aggregation_order_independent_of_delta_order():
    server = ServerState(x=np.zeros(2), phi=np.zeros(2))
    rng = np.random.default_rng(0)
    deltas = [ClientDelta(i, dx=rng.standard_normal(2), dphi=rng.standard_normal(2))
              for i in range(6)]
    a = losac_server_aggregate(server, deltas, 10, 6)
    b = losac_server_aggregate(server, deltas[::-1], 10, 6)
    assert a.x.tobytes() == b.x.tobytes() and a.phi.tobytes() == b.phi.tobytes()


def test_losac_prox_lambda_zero_is_losac():
    model, data = quadratic_problem(M=2)
    state, bc = losac_setup(model, data, np.ones(3), N=2)
    cfg = AlgorithmConfig(eta=0.05, T=6, M=2, lam=0.0)
    a = losac_local_round(state, bc, model, data, cfg, np.random.default_rng(1))[0]
    b = losac_prox_local_round(state, bc, model, data, cfg, np.random.default_rng(1))[0]
    assert a.x.tobytes() == b.x.tobytes()


def test_losac_prox_scalar_soft_threshold():
    model, data = scalar_quadratic(target=2.0)  # gradient x - 2
    state, bc = losac_setup(model, data, np.array([3.0]))
    cfg = AlgorithmConfig(eta=0.5, T=1, M=1, lam=2.0)
    new, _ = losac_prox_local_round(state, bc, model, data, cfg, np.random.default_rng(0))
    # pre-point 3 - 0.5 * 1 = 2.5, threshold eta * lam = 1
    assert new.x.tolist() == [1.5]


def test_losac_prox_nuclear_step():
    model = TraceRegression(2)
    data = LocalDataset(np.zeros((1, 2, 2)), np.zeros(1))  # zero gradient everywhere
    x0 = np.diag([3.0, 0.5])
    state, bc = losac_setup(model, data, x0)
    cfg = AlgorithmConfig(eta=1.0, T=1, M=1, lam=1.0)
    new, _ = losac_prox_local_round(state, bc, model, data, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(new.x, np.diag([2.0, 0.0]), atol=1e-14)


def test_warm_start_phi_is_full_gradient():
    model, data = quadratic_problem(M=4)
    other = quadratic_problem(M=4, seed=1)[1]
    x0 = np.array([0.3, -0.2, 1.0])
    phi = warm_start_phi(model, [data, other], x0)
    expected = (model.full_gradient(x0, data) + model.full_gradient(x0, other)) / 2
    np.testing.assert_allclose(phi, expected, rtol=0, atol=1e-12)


def test_warm_start_at_optimum_gives_zero_direction():
    model, data = scalar_quadratic(target=1.0)
    state, bc = losac_setup(model, data, np.array([1.0]))
    _, delta = losac_local_round(state, bc, model, data, AlgorithmConfig(T=1, M=1),
                                 np.random.default_rng(0))
    assert delta.directions[0].tolist() == [0.0]


def test_cold_start_tables_zero():
    model, data = quadratic_problem(M=3)
    for name in ("losac", "losac_prox", "fedsaga"):
        state = client_init(name, model, data, np.ones(3))
        assert state.y_table.shape == (3, 3) and not state.y_table.any()
    assert not client_init("scaffold", model, data, np.ones(3)).c.any()


# --- FedSaga -------------------------------------------------------------


def test_fedsaga_frozen_model_recovers_local_gradient():
    model, data = quadratic_problem(M=3)
    x0 = np.array([0.5, 0.5, -1.0])
    state = client_init("fedsaga", model, data, x0)
    cfg = AlgorithmConfig(eta=0.0, T=3, M=3)
    new, delta = fedsaga_local_round(state, Broadcast(x=x0, N=4), model, data, cfg,
                                     ScriptedBlocks([2, 0, 1]))
    np.testing.assert_allclose(new.phi_tilde, model.full_gradient(x0, data), atol=1e-14)
    assert delta.dphi is None and delta.dx is not None


# --- FedAvg / SCAFFOLD / Mime / FedCM --------------------------------------


def test_fedavg_one_step_equals_centralized_gradient_step():
    model = LeastSquares(2)
    rng = np.random.default_rng(0)
    clients = [LocalDataset(rng.standard_normal((5, 2)), rng.standard_normal(5)) for _ in range(3)]
    cfg = AlgorithmConfig(eta=0.1, T=1, M=1)
    algo = make_algorithm("fedavg", cfg)
    x0 = np.array([0.5, -0.5])
    server = algo.init_server(model, clients, x0)
    bc = algo.prepare(server, [0, 1, 2], model, clients)
    deltas = [algo.local_round(algo.init_client(model, c, x0, i), bc, model, c,
                               np.random.default_rng(i))[1] for i, c in enumerate(clients)]
    out = algo.aggregate(server, deltas, 3, 3)
    pooled = LocalDataset(np.concatenate([c.features for c in clients]),
                          np.concatenate([c.labels for c in clients]))
    np.testing.assert_allclose(out.x, x0 - 0.1 * model.full_gradient(x0, pooled), atol=1e-15)


def test_fedavg_scalar_trace():
    model, data = scalar_quadratic()
    state = client_init("fedavg", model, data, np.array([3.0]))
    new, _ = fedavg_local_round(state, Broadcast(x=np.array([3.0]), N=1), model, data,
                                AlgorithmConfig(eta=0.1, T=2, M=1), np.random.default_rng(0))
    assert new.x.tolist() == pytest.approx([2.62], abs=1e-15)


def test_fedavg_zero_gradient_no_movement():
    model, data = scalar_quadratic(target=0.0)
    state = client_init("fedavg", model, data, np.zeros(1))
    _, delta = fedavg_local_round(state, Broadcast(x=np.zeros(1), N=1), model, data,
                                  AlgorithmConfig(eta=0.1, T=4, M=1), np.random.default_rng(0))
    assert delta.dx.tolist() == [0.0]


def test_scaffold_first_round_is_fedavg_and_dc():
    model, data = quadratic_problem(M=1)
    x0 = np.ones(3)
    cfg = AlgorithmConfig(eta=0.05, T=4, M=1)
    bc = Broadcast(x=x0, c=np.zeros(3), N=2)
    s_state = client_init("scaffold", model, data, x0)
    _, sd = scaffold_local_round(s_state, bc, model, data, cfg, np.random.default_rng(0))
    _, fd = fedavg_local_round(s_state, bc, model, data, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(sd.dx, fd.dx)
    np.testing.assert_allclose(sd.dc, -sd.dx / (cfg.eta * cfg.T), atol=1e-15)


def test_scaffold_scalar_trace():
    model, data = scalar_quadratic()
    state = client_init("scaffold", model, data, np.array([3.0]))
    state.c = np.array([0.2])
    bc = Broadcast(x=np.array([3.0]), c=np.array([0.5]), N=1)
    new, delta = scaffold_local_round(state, bc, model, data, AlgorithmConfig(eta=0.1, T=2, M=1),
                                      np.random.default_rng(0))
    x1 = 3.0 - 0.1 * (2.0 + 0.3)
    x2 = x1 - 0.1 * (x1 - 1.0 + 0.3)
    assert new.x[0] == pytest.approx(x2, abs=1e-15)
    assert new.c[0] == pytest.approx(0.2 - 0.5 + (3.0 - x2) / 0.2, abs=1e-14)


def test_scaffold_server_rule():
    server = ServerState(x=np.zeros(1), c=np.zeros(1))
    deltas = [ClientDelta(0, dx=np.array([0.2]), dc=np.array([1.0])),
              ClientDelta(3, dx=np.array([0.4]), dc=np.array([3.0]))]
    out = scaffold_server_aggregate(server, deltas, N=4, S=2)
    assert out.x.tolist() == pytest.approx([0.3])
    assert out.c.tolist() == pytest.approx([1.0])


def test_mime_single_block_is_full_gradient_descent():
    model, data = quadratic_problem(M=1)
    x0 = np.array([1.0, 0.0, -1.0])
    anchor = mime_anchor_gradient(model, [data], [0], x0)
    bc = Broadcast(x=x0, anchor_grad=anchor, N=1)
    state = client_init("mime_svrg", model, data, x0)
    _, delta = mime_svrg_local_round(state, bc, model, data, AlgorithmConfig(eta=0.05, T=6, M=1),
                                     np.random.default_rng(0))
    got = iterates_from(x0, delta.directions, 0.05)
    for a, b in zip(got, gd_iterates(model, data, x0, 0.05, 6)):
        np.testing.assert_allclose(a, b, atol=1e-14)
    np.testing.assert_array_equal(delta.grad, model.full_gradient(x0, data))


def test_mime_scalar_trace():
    model, data = two_block_quadratic()
    x0 = np.array([2.0])
    bc = Broadcast(x=x0, anchor_grad=np.array([0.5]), N=3)
    state = client_init("mime_svrg", model, data, x0)
    new, _ = mime_svrg_local_round(state, bc, model, data, AlgorithmConfig(eta=0.1, T=2, M=2),
                                   ScriptedBlocks([1, 0]))
    # step 1: g_2(2) - g_2(2) + 0.5; step 2: g_1(1.95) - g_1(2) + 0.5
    x1 = 2.0 - 0.1 * 0.5
    x2 = x1 - 0.1 * ((x1 - 1.0) - (2.0 - 1.0) + 0.5)
    assert new.x[0] == pytest.approx(x2, abs=1e-15)


def test_fedcm_alpha_one_is_fedavg():
    model, data = quadratic_problem(M=2)
    x0 = np.ones(3)
    bc = Broadcast(x=x0, momentum=np.array([5.0, 5.0, 5.0]), N=2)
    state = client_init("fedcm", model, data, x0)
    a = fedcm_local_round(state, bc, model, data, AlgorithmConfig(eta=0.05, T=3, M=2,
                                                                  alpha_momentum=1.0),
                          np.random.default_rng(4))[1]
    b = fedavg_local_round(state, bc, model, data, AlgorithmConfig(eta=0.05, T=3, M=2),
                           np.random.default_rng(4))[1]
    np.testing.assert_array_equal(a.dx, b.dx)


def test_fedcm_zero_momentum_scales_gradient_by_alpha():
    model, data = scalar_quadratic()
    bc = Broadcast(x=np.array([3.0]), momentum=np.zeros(1), N=1)
    state = client_init("fedcm", model, data, np.array([3.0]))
    new, _ = fedcm_local_round(state, bc, model, data, AlgorithmConfig(eta=0.1, T=1, M=1),
                               np.random.default_rng(0))
    assert new.x.tolist() == pytest.approx([3.0 - 0.1 * 0.1 * 2.0])


def test_fedcm_server_momentum():
    algo = make_algorithm("fedcm", AlgorithmConfig(eta=0.1, T=2))
    server = algo.init_server(None, [], np.zeros(1))
    deltas = [ClientDelta(0, dx=np.array([-0.2])), ClientDelta(1, dx=np.array([-0.6]))]
    out = algo.aggregate(server, deltas, 4, 2)
    assert out.x.tolist() == pytest.approx([-0.4])
    assert out.momentum.tolist() == pytest.approx([2.0])


# --- FedADMM -------------------------------------------------------------


def test_admm_linearized_step_substitution():
    X = np.array([[1.0, 2.0], [0.0, -1.0]])
    G = np.array([[0.5, -1.0], [2.0, 0.0]])
    X_new, pi_new = admm_local_step(X, X.copy(), np.zeros_like(X), G, rho=5.0, eta_l=1e-4)
    np.testing.assert_allclose(X_new, X - (1e-4 / 1.0005) * G, rtol=0, atol=1e-15)
    np.testing.assert_allclose(pi_new, 5.0 * (X_new - X), atol=1e-15)


def test_admm_consensus_fixed_point_multiplier():
    X = np.eye(2)
    X_new, pi_new = admm_local_step(X, X.copy(), np.zeros((2, 2)), np.zeros((2, 2)), 5.0, 1e-4)
    np.testing.assert_array_equal(pi_new, np.zeros((2, 2)))
    np.testing.assert_array_equal(X_new, X)


def test_admm_consensus_update_without_regularizer_averages():
    rho, N = 5.0, 3
    Xs = [np.eye(2) * k for k in (1.0, 2.0, 6.0)]
    messages = [rho * X for X in Xs]
    Z = admm_consensus_update(np.zeros((2, 2)), messages, N, rho, lam=0.0, eta_g=0.05,
                              steps=200)
    np.testing.assert_allclose(Z, 3.0 * np.eye(2), atol=1e-10)


def test_fedadmm_defaults():
    cfg = AlgorithmConfig()
    assert (cfg.rho, cfg.eta_l, cfg.eta_g, cfg.prox_steps) == (5.0, 1e-4, 1e-4, 20)


def test_fedadmm_nonparticipants_keep_state():
    model = TraceRegression(2)
    rng = np.random.default_rng(0)
    clients = [LocalDataset(rng.standard_normal((4, 2, 2)), rng.standard_normal(4))
               for _ in range(3)]
    algo = make_algorithm("fedadmm", AlgorithmConfig(T=2, M=1, eta_l=0.01, eta_g=0.01), model)
    x0 = np.zeros((2, 2))
    server = algo.init_server(model, clients, x0)
    states = [algo.init_client(model, c, x0, i) for i, c in enumerate(clients)]
    bc = algo.prepare(server, [1], model, clients)
    new, delta = algo.local_round(states[1], bc, model, clients[1], np.random.default_rng(1))
    server2 = algo.aggregate(server, [delta], 3, 1)
    np.testing.assert_array_equal(server2.messages[0], server.messages[0])
    np.testing.assert_array_equal(server2.messages[1], new.pi + 5.0 * new.X)


# --- config and guards ---------------------------------------------------


@pytest.mark.parametrize("kwargs", [dict(eta=0.0), dict(T=0), dict(M=0), dict(lam=-1.0),
                                    dict(alpha_momentum=1.5)])
def test_config_validation(kwargs):
    with pytest.raises(InvalidInput):
        AlgorithmConfig(**kwargs).validate()


def test_rho_checked_only_for_fedadmm():
    AlgorithmConfig(rho=0.0).validate("losac")
    with pytest.raises(InvalidInput):
        AlgorithmConfig(rho=0.0).validate("fedadmm")


def test_unknown_algorithm():
    with pytest.raises(InvalidInput):
        make_algorithm("fedprox", AlgorithmConfig())


def test_exposure_kinds():
    assert ALGORITHMS["dsgd"].exposure == "raw_gradient"
    assert ALGORITHMS["mime_svrg"].exposure == "raw_gradient"
    for name in ("losac", "fedavg", "scaffold"):
        assert ALGORITHMS[name].exposure == "averaged_delta"


def test_divergence_raises_with_context():
    model, data = scalar_quadratic()
    state, bc = losac_setup(model, data, np.array([1e300]), warm=False)
    bc = Broadcast(x=bc.x, phi=bc.phi, N=1, round=7)
    with pytest.raises(NumericalDivergence) as exc:
        losac_local_round(state, bc, model, data, AlgorithmConfig(eta=10.0, T=20, M=1),
                          np.random.default_rng(0))
    assert exc.value.round == 7 and exc.value.client == 0 and exc.value.step is not None
