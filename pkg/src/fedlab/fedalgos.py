"""Federated optimization algorithms behind one client/server contract.

Every algorithm exposes

* ``init_server`` / ``init_client``: starting states,
* ``prepare``: the broadcast sent to the participants of a round,
* ``local_round``: T local steps on one client, returning the new client
  state and the message (a :class:`ClientDelta`) sent back,
* ``aggregate``: the server reduction, applied in ascending client order.

All quantities are in mean form: a block gradient is the gradient of the
block-mean loss, and the delayed global gradient ``phi`` estimates
``(1/N) sum_n grad f_n`` where ``f_n`` is the mean of client n's block losses.
In this form the LoSAC client refresh weight is ``1/(N*M)`` while the server
still scales the reported phi increments by ``N/S``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInput, NumericalDivergence
from .numerics import prox_l1, prox_nuclear


@dataclass
class AlgorithmConfig:
    eta: float = 1e-4
    T: int = 5
    M: int = 5
    lam: float = 0.0
    rho: float = 5.0
    eta_l: float = 1e-4
    eta_g: float = 1e-4
    prox_steps: int = 20
    alpha_momentum: float = 0.1
    warm_start: bool = False
    # Divide the LoSAC/FedSaga model aggregate by S instead of N.
    average_over_participants: bool = False
    check_bookkeeping: bool = False

    def validate(self, algorithm=None):
        if not self.eta > 0:
            raise InvalidInput(f"eta must be > 0, got {self.eta}")
        if self.T < 1:
            raise InvalidInput(f"T must be >= 1, got {self.T}")
        if self.M < 1:
            raise InvalidInput(f"M must be >= 1, got {self.M}")
        if self.lam < 0:
            raise InvalidInput(f"lam must be >= 0, got {self.lam}")
        if algorithm == "fedadmm" and not self.rho > 0:
            raise InvalidInput(f"rho must be > 0, got {self.rho}")
        if not 0 <= self.alpha_momentum <= 1:
            raise InvalidInput("alpha_momentum must lie in [0, 1]")
        return self


@dataclass
class ClientState:
    client_id: int
    x: np.ndarray = None
    y_table: np.ndarray = None
    phi: np.ndarray = None
    phi_tilde: np.ndarray = None
    c: np.ndarray = None
    X: np.ndarray = None
    pi: np.ndarray = None


@dataclass
class ServerState:
    x: np.ndarray
    phi: np.ndarray = None
    c: np.ndarray = None
    momentum: np.ndarray = None
    messages: list = None
    round: int = 0


@dataclass
class Broadcast:
    x: np.ndarray
    N: int
    round: int = 0
    phi: np.ndarray = None
    c: np.ndarray = None
    momentum: np.ndarray = None
    anchor_grad: np.ndarray = None


@dataclass
class ClientDelta:
    client_id: int
    dx: np.ndarray = None
    dphi: np.ndarray = None
    dc: np.ndarray = None
    message: np.ndarray = None
    grad: np.ndarray = None
    directions: list = field(default_factory=list)


def _guard(value, what, round=None, step=None, client=None):
    if not np.all(np.isfinite(value)):
        raise NumericalDivergence(f"non-finite {what}", round=round, step=step, client=client)


def make_prox(model, lam, eta):
    """``v -> prox_{eta * lam * Psi}(v)`` with Psi chosen by the model's
    parameter kind; None when lam == 0."""
    if lam == 0:
        return None
    tau = eta * lam
    if model.prox_kind == "nuclear":
        return lambda v: prox_nuclear(v, tau)
    return lambda v: prox_l1(v, tau)


def _sum_in_order(deltas, attr):
    ordered = sorted(deltas, key=lambda d: d.client_id)
    total = getattr(ordered[0], attr).copy()
    for d in ordered[1:]:
        total += getattr(d, attr)
    return total


def _check_deltas(deltas):
    if not deltas:
        raise InvalidInput("cannot aggregate an empty set of client deltas")


# ---------------------------------------------------------------------------
# client initialization


def client_init(algorithm, model, data, x0, warm_start=False, client_id=0):
    """Starting client state. Cold start zeroes the delayed-gradient table;
    warm start fills it with block gradients at ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    state = ClientState(client_id=client_id, x=x0.copy())
    if algorithm in ("losac", "losac_prox", "fedsaga"):
        if warm_start:
            state.y_table = np.stack([model.block_gradient(x0, data, j) for j in range(data.M)])
        else:
            state.y_table = np.zeros((data.M,) + x0.shape)
        if algorithm == "fedsaga":
            state.phi_tilde = state.y_table.mean(axis=0)
    elif algorithm in ("scaffold", "scaffold_prox"):
        state.c = np.zeros_like(x0)
    elif algorithm == "fedadmm":
        state.X = x0.copy()
        state.pi = np.zeros_like(x0)
    return state


def warm_start_phi(model, clients, x0):
    """Mean-form delayed global gradient at ``x0``: (1/N) sum_i grad f_i(x0)."""
    total = model.full_gradient(x0, clients[0])
    for data in clients[1:]:
        total = total + model.full_gradient(x0, data)
    return total / len(clients)


# ---------------------------------------------------------------------------
# LoSAC


def losac_local_round(state, broadcast, model, data, cfg, rng, prox=None):
    """T LoSAC local steps on one client.

    Each step samples a block j uniformly and updates, in order,
    x <- x - eta * (phi - y_j + g_j(x)),
    phi <- phi + (g_j(x_old) - y_j) / (N * M),
    y_j <- g_j(x_old).
    With ``prox`` the model step becomes x <- prox(x - eta * direction).
    """
    N, M = broadcast.N, data.M
    if state.y_table is None or len(state.y_table) != M:
        raise InvalidInput("client y_table must hold one entry per block")
    x = broadcast.x.copy()
    phi = broadcast.phi.copy()
    y = state.y_table.copy()
    weight = 1.0 / (N * M)
    directions = []
    for t in range(cfg.T):
        j = int(rng.integers(M))
        g = model.block_gradient(x, data, j)
        direction = phi - y[j] + g
        x_new = x - cfg.eta * direction
        if prox is not None:
            x_new = prox(x_new)
        _guard(x_new, "local model", broadcast.round, t, state.client_id)
        phi = phi + weight * (g - y[j])
        y[j] = g
        x = x_new
        directions.append(direction)
    if cfg.check_bookkeeping:
        expected = broadcast.phi + weight * (y - state.y_table).sum(axis=0)
        if not np.allclose(phi, expected, rtol=1e-9, atol=1e-12):
            raise AssertionError("phi drifted from its delayed-gradient table")
    new_state = replace(state, x=x, phi=phi, y_table=y)
    delta = ClientDelta(state.client_id, dx=x - broadcast.x, dphi=phi - broadcast.phi,
                        directions=directions)
    return new_state, delta


def losac_prox_local_round(state, broadcast, model, data, cfg, rng):
    return losac_local_round(state, broadcast, model, data, cfg, rng,
                             prox=make_prox(model, cfg.lam, cfg.eta))


def losac_server_aggregate(server, deltas, N, S, average_over_participants=False):
    """x <- x + (1/N) sum dx;  phi <- phi + (N/S) sum dphi."""
    _check_deltas(deltas)
    x_scale = 1.0 / S if average_over_participants else 1.0 / N
    x = server.x + x_scale * _sum_in_order(deltas, "dx")
    phi = server.phi + (N / S) * _sum_in_order(deltas, "dphi")
    _guard(x, "global model", server.round)
    return replace(server, x=x, phi=phi)


# ---------------------------------------------------------------------------
# FedSaga


def fedsaga_local_round(state, broadcast, model, data, cfg, rng):
    """SAGA restricted to local information: the direction is
    g_j(x) - y_j + phi_tilde with phi_tilde the mean of the client's table."""
    M = data.M
    x = broadcast.x.copy()
    y = state.y_table.copy()
    phi_tilde = state.phi_tilde.copy()
    directions = []
    for t in range(cfg.T):
        j = int(rng.integers(M))
        g = model.block_gradient(x, data, j)
        direction = g - y[j] + phi_tilde
        x_new = x - cfg.eta * direction
        _guard(x_new, "local model", broadcast.round, t, state.client_id)
        phi_tilde = phi_tilde + (g - y[j]) / M
        y[j] = g
        x = x_new
        directions.append(direction)
    new_state = replace(state, x=x, y_table=y, phi_tilde=phi_tilde)
    return new_state, ClientDelta(state.client_id, dx=x - broadcast.x, directions=directions)


def fedsaga_server_aggregate(server, deltas, N, S, average_over_participants=False):
    _check_deltas(deltas)
    x_scale = 1.0 / S if average_over_participants else 1.0 / N
    x = server.x + x_scale * _sum_in_order(deltas, "dx")
    _guard(x, "global model", server.round)
    return replace(server, x=x)


# ---------------------------------------------------------------------------
# FedAvg and distributed SGD


def fedavg_local_round(state, broadcast, model, data, cfg, rng):
    x = broadcast.x.copy()
    directions = []
    for t in range(cfg.T):
        j = int(rng.integers(data.M))
        g = model.block_gradient(x, data, j)
        x = x - cfg.eta * g
        _guard(x, "local model", broadcast.round, t, state.client_id)
        directions.append(g)
    return replace(state, x=x), ClientDelta(state.client_id, dx=x - broadcast.x,
                                            directions=directions)


def average_aggregate(server, deltas, N, S):
    """x <- x + (1/S) sum dx."""
    _check_deltas(deltas)
    x = server.x + _sum_in_order(deltas, "dx") / S
    _guard(x, "global model", server.round)
    return replace(server, x=x)


def dsgd_local_round(state, broadcast, model, data, cfg, rng):
    """One block gradient at the broadcast model, sent in the clear."""
    j = int(rng.integers(data.M))
    g = model.block_gradient(broadcast.x, data, j)
    _guard(g, "gradient", broadcast.round, 0, state.client_id)
    return state, ClientDelta(state.client_id, dx=-cfg.eta * g, grad=g, directions=[g])


# ---------------------------------------------------------------------------
# SCAFFOLD (option II control variates)


def scaffold_local_round(state, broadcast, model, data, cfg, rng, prox=None):
    x = broadcast.x.copy()
    correction = broadcast.c - state.c
    directions = []
    for t in range(cfg.T):
        j = int(rng.integers(data.M))
        direction = model.block_gradient(x, data, j) + correction
        x = x - cfg.eta * direction
        if prox is not None:
            x = prox(x)
        _guard(x, "local model", broadcast.round, t, state.client_id)
        directions.append(direction)
    c_new = state.c - broadcast.c + (broadcast.x - x) / (cfg.T * cfg.eta)
    delta = ClientDelta(state.client_id, dx=x - broadcast.x, dc=c_new - state.c,
                        directions=directions)
    return replace(state, x=x, c=c_new), delta


def scaffold_prox_local_round(state, broadcast, model, data, cfg, rng):
    return scaffold_local_round(state, broadcast, model, data, cfg, rng,
                                prox=make_prox(model, cfg.lam, cfg.eta))


def scaffold_server_aggregate(server, deltas, N, S):
    """x <- x + (1/S) sum dx;  c <- c + (1/N) sum dc."""
    _check_deltas(deltas)
    x = server.x + _sum_in_order(deltas, "dx") / S
    c = server.c + _sum_in_order(deltas, "dc") / N
    _guard(x, "global model", server.round)
    return replace(server, x=x, c=c)


# ---------------------------------------------------------------------------
# MimeSVRG


def mime_anchor_gradient(model, clients, participants, x):
    """Average of the participants' full local gradients at ``x``."""
    total = None
    for i in sorted(participants):
        g = model.full_gradient(x, clients[i])
        total = g if total is None else total + g
    return total / len(participants)


def mime_svrg_local_round(state, broadcast, model, data, cfg, rng):
    """x <- x - eta * (g_j(x) - g_j(x_anchor) + anchor_grad), with the anchor
    being the broadcast model."""
    x = broadcast.x.copy()
    directions = []
    for t in range(cfg.T):
        j = int(rng.integers(data.M))
        direction = (model.block_gradient(x, data, j)
                     - model.block_gradient(broadcast.x, data, j)
                     + broadcast.anchor_grad)
        x = x - cfg.eta * direction
        _guard(x, "local model", broadcast.round, t, state.client_id)
        directions.append(direction)
    own_grad = model.full_gradient(broadcast.x, data)
    delta = ClientDelta(state.client_id, dx=x - broadcast.x, grad=own_grad,
                        directions=directions)
    return replace(state, x=x), delta


# ---------------------------------------------------------------------------
# FedCM


def fedcm_local_round(state, broadcast, model, data, cfg, rng):
    """x <- x - eta * (alpha * g_j(x) + (1 - alpha) * server_momentum)."""
    alpha = cfg.alpha_momentum
    x = broadcast.x.copy()
    directions = []
    for t in range(cfg.T):
        j = int(rng.integers(data.M))
        direction = alpha * model.block_gradient(x, data, j) + (1 - alpha) * broadcast.momentum
        x = x - cfg.eta * direction
        _guard(x, "local model", broadcast.round, t, state.client_id)
        directions.append(direction)
    return replace(state, x=x), ClientDelta(state.client_id, dx=x - broadcast.x,
                                            directions=directions)


def fedcm_server_aggregate(server, deltas, N, S, eta, T):
    """Momentum becomes the averaged round movement expressed as a gradient,
    -(1/(S*eta*T)) sum dx; the model takes the average movement."""
    _check_deltas(deltas)
    total = _sum_in_order(deltas, "dx")
    x = server.x + total / S
    _guard(x, "global model", server.round)
    return replace(server, x=x, momentum=-total / (S * eta * T))


# ---------------------------------------------------------------------------
# FedADMM


def admm_local_step(X, Z, pi, grad, rho, eta_l):
    """Linearized X-update followed by the multiplier update."""
    X_new = (rho * eta_l * Z - eta_l * pi + X - eta_l * grad) / (1.0 + rho * eta_l)
    pi_new = pi + rho * (X_new - Z)
    return X_new, pi_new


def fedadmm_local_round(state, broadcast, model, data, cfg, rng):
    """T linearized ADMM steps against the broadcast consensus Z. The local
    loss is scaled by 1/N so the consensus problem matches the averaged
    objective."""
    Z, N = broadcast.x, broadcast.N
    X, pi = state.X.copy(), state.pi.copy()
    directions = []
    for t in range(cfg.T):
        j = int(rng.integers(data.M))
        grad = model.block_gradient(X, data, j) / N
        X, pi = admm_local_step(X, Z, pi, grad, cfg.rho, cfg.eta_l)
        _guard(X, "local model", broadcast.round, t, state.client_id)
        directions.append(grad)
    new_state = replace(state, x=X, X=X, pi=pi)
    return new_state, ClientDelta(state.client_id, dx=X - Z, message=pi + cfg.rho * X,
                                  directions=directions)


def admm_consensus_update(Z, messages, N, rho, lam, eta_g, steps, prox_kind="nuclear"):
    """``steps`` proximal-gradient iterations on the Z-subproblem:
    Z <- prox_{lam*eta_g*Psi}(Z - eta_g * (N*rho*Z - sum(messages)))."""
    total = messages[0].copy()
    for m in messages[1:]:
        total += m
    prox = prox_nuclear if prox_kind == "nuclear" else prox_l1
    for _ in range(steps):
        Z = prox(Z - eta_g * (N * rho * Z - total), lam * eta_g)
    return Z


def fedadmm_server_aggregate(server, deltas, N, S, cfg, prox_kind="nuclear"):
    _check_deltas(deltas)
    messages = list(server.messages)
    for d in sorted(deltas, key=lambda d: d.client_id):
        messages[d.client_id] = d.message
    Z = admm_consensus_update(server.x, messages, N, cfg.rho, cfg.lam, cfg.eta_g,
                              cfg.prox_steps, prox_kind)
    _guard(Z, "consensus", server.round)
    return replace(server, x=Z, messages=messages)


def fedadmm_round(server, states, participants, model, clients, cfg, rngs):
    """One full FedADMM round: local updates on ``participants`` (others hold
    their X_i, pi_i) followed by the consensus update."""
    broadcast = Broadcast(x=server.x, N=len(clients), round=server.round)
    deltas = []
    states = list(states)
    for i in sorted(participants):
        states[i], d = fedadmm_local_round(states[i], broadcast, model, clients[i], cfg, rngs[i])
        deltas.append(d)
    server = fedadmm_server_aggregate(server, deltas, len(clients), len(participants), cfg,
                                      model.prox_kind)
    return server, states


# ---------------------------------------------------------------------------
# algorithm objects used by the engine


class Algorithm:
    name = None
    # what a wire eavesdropper sees: "averaged_delta" or "raw_gradient"
    exposure = "averaged_delta"

    def __init__(self, cfg):
        self.cfg = cfg.validate(self.name)

    def init_client(self, model, data, x0, client_id):
        return client_init(self.name, model, data, x0, self.cfg.warm_start, client_id)

    def init_server(self, model, clients, x0):
        return ServerState(x=np.asarray(x0, dtype=np.float64).copy())

    def prepare(self, server, participants, model, clients):
        return Broadcast(x=server.x, N=len(clients), round=server.round)

    def local_round(self, state, broadcast, model, data, rng):
        raise NotImplementedError

    def aggregate(self, server, deltas, N, S):
        return average_aggregate(server, deltas, N, S)


class LoSAC(Algorithm):
    name = "losac"

    def init_server(self, model, clients, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        phi = warm_start_phi(model, clients, x0) if self.cfg.warm_start else np.zeros_like(x0)
        return ServerState(x=x0.copy(), phi=phi)

    def prepare(self, server, participants, model, clients):
        return Broadcast(x=server.x, phi=server.phi, N=len(clients), round=server.round)

    def local_round(self, state, broadcast, model, data, rng):
        return losac_local_round(state, broadcast, model, data, self.cfg, rng)

    def aggregate(self, server, deltas, N, S):
        return losac_server_aggregate(server, deltas, N, S, self.cfg.average_over_participants)


class LoSACProx(LoSAC):
    name = "losac_prox"

    def local_round(self, state, broadcast, model, data, rng):
        return losac_prox_local_round(state, broadcast, model, data, self.cfg, rng)


class FedSaga(Algorithm):
    name = "fedsaga"

    def local_round(self, state, broadcast, model, data, rng):
        return fedsaga_local_round(state, broadcast, model, data, self.cfg, rng)

    def aggregate(self, server, deltas, N, S):
        return fedsaga_server_aggregate(server, deltas, N, S, self.cfg.average_over_participants)


class FedAvg(Algorithm):
    name = "fedavg"

    def local_round(self, state, broadcast, model, data, rng):
        return fedavg_local_round(state, broadcast, model, data, self.cfg, rng)


class DSGD(Algorithm):
    name = "dsgd"
    exposure = "raw_gradient"

    def local_round(self, state, broadcast, model, data, rng):
        return dsgd_local_round(state, broadcast, model, data, self.cfg, rng)


class Scaffold(Algorithm):
    name = "scaffold"

    def init_server(self, model, clients, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        return ServerState(x=x0.copy(), c=np.zeros_like(x0))

    def prepare(self, server, participants, model, clients):
        return Broadcast(x=server.x, c=server.c, N=len(clients), round=server.round)

    def local_round(self, state, broadcast, model, data, rng):
        return scaffold_local_round(state, broadcast, model, data, self.cfg, rng)

    def aggregate(self, server, deltas, N, S):
        return scaffold_server_aggregate(server, deltas, N, S)


class ScaffoldProx(Scaffold):
    name = "scaffold_prox"

    def local_round(self, state, broadcast, model, data, rng):
        return scaffold_prox_local_round(state, broadcast, model, data, self.cfg, rng)


class MimeSVRG(Algorithm):
    name = "mime_svrg"
    exposure = "raw_gradient"

    def prepare(self, server, participants, model, clients):
        anchor = mime_anchor_gradient(model, clients, participants, server.x)
        return Broadcast(x=server.x, anchor_grad=anchor, N=len(clients), round=server.round)

    def local_round(self, state, broadcast, model, data, rng):
        return mime_svrg_local_round(state, broadcast, model, data, self.cfg, rng)


class FedCM(Algorithm):
    name = "fedcm"

    def init_server(self, model, clients, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        return ServerState(x=x0.copy(), momentum=np.zeros_like(x0))

    def prepare(self, server, participants, model, clients):
        return Broadcast(x=server.x, momentum=server.momentum, N=len(clients),
                         round=server.round)

    def local_round(self, state, broadcast, model, data, rng):
        return fedcm_local_round(state, broadcast, model, data, self.cfg, rng)

    def aggregate(self, server, deltas, N, S):
        return fedcm_server_aggregate(server, deltas, N, S, self.cfg.eta, self.cfg.T)


class FedADMM(Algorithm):
    name = "fedadmm"

    def __init__(self, cfg, prox_kind="nuclear"):
        super().__init__(cfg)
        self.prox_kind = prox_kind

    def init_server(self, model, clients, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        # clients start at X_i = x0, pi_i = 0
        messages = [self.cfg.rho * x0.copy() for _ in clients]
        return ServerState(x=x0.copy(), messages=messages)

    def local_round(self, state, broadcast, model, data, rng):
        return fedadmm_local_round(state, broadcast, model, data, self.cfg, rng)

    def aggregate(self, server, deltas, N, S):
        return fedadmm_server_aggregate(server, deltas, N, S, self.cfg, self.prox_kind)


ALGORITHMS = {cls.name: cls for cls in
              (LoSAC, LoSACProx, FedSaga, FedAvg, DSGD, Scaffold, ScaffoldProx,
               MimeSVRG, FedCM, FedADMM)}


def make_algorithm(name, cfg, model=None):
    try:
        cls = ALGORITHMS[name]
    except KeyError:
        raise InvalidInput(
            f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}") from None
    if cls is FedADMM and model is not None:
        return cls(cfg, model.prox_kind)
    return cls(cfg)
