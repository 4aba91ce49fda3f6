"""Gradient-inversion (deep leakage from gradients) harness.

The attacker sees one message on the wire, turns it into a gradient-like
vector, and runs gradient descent on dummy features so that the model
gradient at the dummy data matches it. Labels are assumed known.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInput
from .models import BinaryLogistic, LocalDataset, _sigmoid

TARGET_KINDS = ("raw_gradient", "averaged_delta")


@dataclass
class DlgConfig:
    attack_steps: int = 100
    eta_d: float = 1e-3
    init_scale: float = 1.0
    target_kind: str = "raw_gradient"

    def __post_init__(self):
        if self.attack_steps < 1:
            raise InvalidInput(f"attack_steps must be >= 1, got {self.attack_steps}")
        if not self.eta_d > 0:
            raise InvalidInput(f"eta_d must be > 0, got {self.eta_d}")
        if self.init_scale < 0:
            raise InvalidInput(f"init_scale must be >= 0, got {self.init_scale}")
        if self.target_kind not in TARGET_KINDS:
            raise InvalidInput(f"target_kind must be one of {TARGET_KINDS}")


@dataclass
class DlgResult:
    recovered: np.ndarray
    objective: np.ndarray
    error: np.ndarray

    @property
    def final_error(self):
        return float(self.error[-1])


def _model_gradient(model, params, features, labels):
    return model.full_gradient(params, LocalDataset(features, labels))


def match_objective(model, params, dummy, labels, observed):
    """Squared distance between the model gradient at ``dummy`` and ``observed``."""
    r = _model_gradient(model, params, dummy, labels) - observed
    return float(np.sum(r * r))


def _logistic_objective_grad(model, w, dummy, labels, observed):
    """Closed form for binary logistic regression. With s_k = sigmoid(w.d_k)
    and r the gradient residual, the derivative in d_k is
    (2/n) [(s_k - y_k) r + s_k (1 - s_k) (d_k . r) w]."""
    n = len(labels)
    s = _sigmoid(dummy @ w)
    err = s - labels
    r = dummy.T @ err / n + model.mu_reg * w - observed
    coef = s * (1 - s) * (dummy @ r)
    grad = 2.0 / n * (np.outer(err, r) + np.outer(coef, w))
    return float(np.sum(r * r)), grad


def _fd_objective_grad(model, params, dummy, labels, observed, h=1e-6):
    value = match_objective(model, params, dummy, labels, observed)
    grad = np.zeros_like(dummy)
    flat, gflat = dummy.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = match_objective(model, params, dummy, labels, observed)
        flat[k] = old - h
        down = match_objective(model, params, dummy, labels, observed)
        flat[k] = old
        gflat[k] = (up - down) / (2 * h)
    return value, grad


def dlg_attack(model, params, observed, labels, true_data, cfg, rng, method=None):
    """Reconstruct a client's features from an observed gradient-like vector.

    ``labels`` are the (known) labels of the attacked samples and fix the
    number of dummy rows. ``true_data`` only feeds the reported error trace.
    ``method`` is "analytic" (binary logistic only) or "finite_difference";
    by default the analytic path is used whenever it applies.
    """
    params = np.asarray(params, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != model.param_shape:
        raise InvalidInput(
            f"observed shape {observed.shape} does not match gradient shape {model.param_shape}")
    labels = np.asarray(labels)
    true_data = np.asarray(true_data, dtype=np.float64)
    n_features = true_data.shape[1]
    if true_data.shape[0] != len(labels):
        raise InvalidInput("true_data and labels differ in length")

    if method is None:
        method = "analytic" if isinstance(model, BinaryLogistic) else "finite_difference"
    if method == "analytic":
        if not isinstance(model, BinaryLogistic):
            raise InvalidInput("the analytic attack gradient exists for binary logistic only")
        step = _logistic_objective_grad
    elif method == "finite_difference":
        step = _fd_objective_grad
    else:
        raise InvalidInput(f"unknown method {method!r}")

    rng = np.random.default_rng(rng)
    dummy = cfg.init_scale * rng.standard_normal((len(labels), n_features))
    objective = np.empty(cfg.attack_steps)
    error = np.empty(cfg.attack_steps)
    for k in range(cfg.attack_steps):
        _, grad = step(model, params, dummy, labels, observed)
        dummy = dummy - cfg.eta_d * grad
        objective[k] = match_objective(model, params, dummy, labels, observed)
        error[k] = np.linalg.norm(dummy - true_data)
    return DlgResult(dummy, objective, error)


def expose_observed(exposure, delta, eta, T):
    """What an eavesdropper on the client's upload can turn into a gradient.

    ``exposure`` is an algorithm (anything with an ``exposure`` attribute)
    or one of "raw_gradient" / "averaged_delta". Averaged deltas are
    rescaled as (x - x_i+) / (eta * T).
    """
    kind = getattr(exposure, "exposure", exposure)
    if kind == "raw_gradient":
        if delta.grad is None:
            raise InvalidInput("this message carries no raw gradient")
        return delta.grad.copy()
    if kind == "averaged_delta":
        return -delta.dx / (eta * T)
    raise InvalidInput(f"unknown exposure {kind!r}")


@dataclass
class LeakageCapture:
    model: object
    params: np.ndarray
    observed: np.ndarray
    features: np.ndarray
    labels: np.ndarray


def capture_round(cfg, client=0, round=5, seed=None, parallel=1):
    """Run ``cfg`` up to ``round`` and intercept ``client``'s upload there.

    The client must participate in that round (use S = N to guarantee it).
    """
    from .engine import build_problem, run_experiment
    from .fedalgos import make_algorithm

    cfg = replace(cfg, R=round)
    seed = cfg.seeds[0] if seed is None else seed
    problem = build_problem(cfg, seed)
    algo = make_algorithm(cfg.algorithm, cfg.algorithm_config(), problem.model)
    seen = {}

    def hook(r, broadcast, deltas, states):
        if r != round:
            return
        for delta in deltas:
            if delta.client_id == client:
                seen["x"] = broadcast.x.copy()
                seen["obs"] = expose_observed(algo, delta, cfg.eta, cfg.T)

    run_experiment(cfg, seed, parallel=parallel, problem=problem, hook=hook)
    if not seen:
        raise InvalidInput(f"client {client} did not participate in round {round}")
    data = problem.fed.clients[client]
    return LeakageCapture(problem.model, seen["x"], seen["obs"], data.features.copy(),
                          data.labels.copy())


def leakage_study(cfg, dlg_cfg, client=0, round=5, seed=None):
    """Capture a client's round message and attack it. Returns the capture
    and the attack result."""
    seed = cfg.seeds[0] if seed is None else seed
    cap = capture_round(cfg, client, round, seed)
    result = dlg_attack(cap.model, cap.params, cap.observed, cap.labels, cap.features, dlg_cfg,
                        np.random.default_rng([seed, 3, client]))
    return cap, result
