"""Round-loop orchestration, metric collection, and experiment setup."""

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import data as fdata
from .errors import InvalidInput
from .fedalgos import AlgorithmConfig, make_algorithm
from .models import (BinaryLogistic, LeastSquares, LocalDataset, MultinomialLogistic,
                     TraceRegression, TwoLayerMLP)
from .numerics import svd

RANK_THRESHOLD = 1e-3

CSV_COLUMNS = ("round", "train_loss", "test_loss", "test_acc", "dir_variance",
               "recovery_err", "recovered_rank")


@dataclass
class ExperimentConfig:
    algorithm: str = "losac"
    model: str = "multinomial_logistic"
    dataset: str = "logistic"
    N: int = 100
    S: int = 10
    R: int = 100
    T: int = 5
    M: int = 5
    eta: float = 1e-4
    lam: float = 0.0
    mu_reg: float = 0.0
    hidden: int = 200
    rho: float = 5.0
    eta_l: float = 1e-4
    eta_g: float = 1e-4
    prox_steps: int = 20
    alpha_momentum: float = 0.1
    warm_start: bool = False
    average_over_participants: bool = False
    partition: str = "iid"
    c_percent: float = None
    # synthetic classification / regression data
    n_features: int = 50
    n_classes: int = 10
    samples: int = 2000
    separation: float = 1.0
    feature_offset: float = 0.0
    test_fraction: float = 0.2
    # federated least squares
    heterogeneity: float = 1.0
    # low-rank matrix estimation (samples_per_client, noise_sigma and
    # test_samples also apply to the least-squares benchmark)
    lrme_d: int = 64
    lrme_rank: int = 4
    samples_per_client: int = 100
    noise_sigma: float = 0.1
    test_samples: int = 200
    # files
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None
    csv_path: str = None
    csv_test_path: str = None
    label_column: str = "label"
    binary_threshold: float = None
    seeds: list = field(default_factory=lambda: [0])
    eval_every: int = None
    accuracy_target: float = None

    def __post_init__(self):
        self.seeds = list(self.seeds)

    def validate(self):
        if not 1 <= self.S <= self.N:
            raise InvalidInput(f"S must satisfy 1 <= S <= N, got S={self.S}, N={self.N}")
        if self.R < 0:
            raise InvalidInput(f"R must be >= 0, got {self.R}")
        if self.eval_every is not None and self.eval_every < 1:
            raise InvalidInput("eval_every must be >= 1")
        if not self.seeds:
            raise InvalidInput("seeds must be non-empty")
        self.algorithm_config().validate(self.algorithm)
        self.partition_spec(0)
        return self

    def algorithm_config(self):
        names = {f.name for f in fields(AlgorithmConfig)}
        return AlgorithmConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def partition_spec(self, seed):
        c = self.c_percent if self.partition == "mixture" else None
        return fdata.PartitionSpec(self.partition, c, seed)

    @property
    def cadence(self):
        if self.eval_every is not None:
            return self.eval_every
        return 1 if self.model == "trace_regression" else 5


@dataclass
class MetricRecord:
    round: int
    train_loss: float = math.nan
    test_loss: float = math.nan
    test_acc: float = math.nan
    dir_variance: float = math.nan
    recovery_err: float = math.nan
    recovered_rank: int = None
    wall_time: float = 0.0


def _fmt(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{value:.6g}"


@dataclass
class MetricsTrace:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record.round <= self.records[-1].round:
            raise InvalidInput("trace rounds must be strictly increasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, k):
        return self.records[k]

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    @property
    def final(self):
        return self.records[-1]

    def to_csv(self):
        """Fixed column order, 6 significant digits, '\\n' line endings.
        Wall time is left out so output is reproducible."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()


@dataclass
class Problem:
    model: object
    fed: object
    x0: np.ndarray
    truth: object = None


def sample_clients(N, S, rng):
    """S distinct client indices, uniformly without replacement, sorted."""
    if not 1 <= S <= N:
        raise InvalidInput(f"need 1 <= S <= N, got S={S}, N={N}")
    return sorted(int(i) for i in rng.choice(N, size=S, replace=False))


def direction_variance(directions):
    """Mean squared deviation from the mean direction (trace of the empirical
    covariance, 1/n normalization)."""
    if len(directions) < 2:
        raise InvalidInput("direction variance needs at least two directions")
    D = np.stack([np.ravel(d) for d in directions])
    dev = D - D.mean(axis=0)
    return float(np.mean(np.sum(dev * dev, axis=1)))


def rounds_to_target(trace, target_accuracy):
    """First evaluated round whose test accuracy reaches the target, or None."""
    for r in trace.records:
        if not math.isnan(r.test_acc) and r.test_acc >= target_accuracy:
            return r.round
    return None


def _binarize(labels, threshold):
    return (labels > threshold).astype(np.int64)


def build_problem(cfg, seed):
    """Data, model and starting point for one seeded run."""
    spec = cfg.partition_spec(seed)
    truth = None
    if cfg.dataset == "lrme":
        fed, truth = fdata.gen_lrme(cfg.lrme_d, cfg.lrme_rank, cfg.samples_per_client, cfg.N,
                                    cfg.noise_sigma, seed, cfg.M, cfg.test_samples)
        model = TraceRegression(cfg.lrme_d, cfg.mu_reg)
        return Problem(model, fed, model.init_params(), truth)

    if cfg.dataset == "quadratic":
        if cfg.model != "least_squares":
            raise InvalidInput(f"model {cfg.model!r} does not fit dataset 'quadratic'")
        fed = fdata.gen_quadratic(cfg.n_features, cfg.N, cfg.samples_per_client, seed,
                                  cfg.noise_sigma, cfg.heterogeneity, cfg.M, cfg.test_samples)
        model = LeastSquares(cfg.n_features, cfg.mu_reg)
        return Problem(model, fed, model.init_params())

    if cfg.dataset == "logistic":
        full = fdata.gen_logistic(cfg.n_features, cfg.n_classes, cfg.samples,
                                  cfg.separation, seed, cfg.feature_offset)
        train, test = fdata.train_test_split(full, cfg.test_fraction, seed)
    elif cfg.dataset == "mnist":
        train = fdata.load_mnist(cfg.train_images, cfg.train_labels)
        test = (fdata.load_mnist(cfg.test_images, cfg.test_labels)
                if cfg.test_images else None)
    elif cfg.dataset == "csv":
        train = fdata.load_csv(cfg.csv_path, cfg.label_column)
        test = fdata.load_csv(cfg.csv_test_path, cfg.label_column) if cfg.csv_test_path else None
    else:
        raise InvalidInput(f"unknown dataset {cfg.dataset!r}")

    if cfg.binary_threshold is not None:
        train = fdata.Dataset(train.features, _binarize(train.labels, cfg.binary_threshold))
        if test is not None:
            test = fdata.Dataset(test.features, _binarize(test.labels, cfg.binary_threshold))

    fed = fdata.partition(train, spec, cfg.N, cfg.M)
    fed.test = test
    p = train.features.shape[1]
    n_classes = max(cfg.n_classes, int(np.max(train.labels)) + 1) \
        if cfg.model != "least_squares" else 0
    if cfg.model == "binary_logistic":
        model = BinaryLogistic(p, cfg.mu_reg)
    elif cfg.model == "multinomial_logistic":
        model = MultinomialLogistic(p, n_classes, cfg.mu_reg)
    elif cfg.model == "mlp":
        model = TwoLayerMLP(p, n_classes, cfg.hidden, cfg.mu_reg)
    elif cfg.model == "least_squares":
        model = LeastSquares(p, cfg.mu_reg)
    else:
        raise InvalidInput(f"model {cfg.model!r} does not fit dataset {cfg.dataset!r}")
    return Problem(model, fed, model.init_params(np.random.default_rng([seed, 7])))


def evaluate(problem, x, round, directions=(), started=None):
    """Metrics at the server model. Reads ``x`` only."""
    model, fed = problem.model, problem.fed
    rec = MetricRecord(round=round)
    rec.train_loss = float(np.mean([model.loss(x, c) for c in fed.clients]))
    if fed.test is not None and len(fed.test):
        test = LocalDataset(fed.test.features, fed.test.labels)
        rec.test_loss = model.loss(x, test)
        if model.classification:
            rec.test_acc = model.accuracy(x, test)
    if len(directions) >= 2:
        rec.dir_variance = direction_variance(directions)
    if problem.truth is not None:
        rec.recovery_err = float(np.linalg.norm(x - problem.truth.X_G))
        rec.recovered_rank = int(np.count_nonzero(svd(x).sigma > RANK_THRESHOLD))
    if started is not None:
        rec.wall_time = time.perf_counter() - started
    return rec


def client_rng(seed, round, client_id):
    return np.random.default_rng([seed, 1, round, client_id])


def run_experiment(cfg, seed=None, parallel=1, problem=None, hook=None):
    """Run ``cfg.R`` rounds and return the metrics trace.

    ``hook(round, broadcast, deltas, states)`` is called after each round's
    local updates with the round artifacts (used by the leakage study).
    Client work may run on ``parallel`` threads; results do not depend on it.
    """
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    if problem is None:
        problem = build_problem(cfg, seed)
    model, clients = problem.model, problem.fed.clients
    N, S = len(clients), cfg.S
    if S > N:
        raise InvalidInput(f"S={S} exceeds the number of clients {N}")
    algo = make_algorithm(cfg.algorithm, cfg.algorithm_config(), model)

    started = time.perf_counter()
    server = algo.init_server(model, clients, problem.x0)
    states = [algo.init_client(model, clients[i], problem.x0, i) for i in range(N)]
    trace = MetricsTrace()
    trace.append(evaluate(problem, server.x, 0, started=started))

    pool = ThreadPoolExecutor(parallel) if parallel > 1 else None
    try:
        for r in range(1, cfg.R + 1):
            server = replace(server, round=r)
            participants = sample_clients(N, S, np.random.default_rng([seed, 0, r]))
            broadcast = algo.prepare(server, participants, model, clients)

            def work(i):
                return algo.local_round(states[i], broadcast, model, clients[i],
                                        client_rng(seed, r, i))

            results = list(pool.map(work, participants)) if pool else \
                [work(i) for i in participants]
            deltas = []
            for i, (state, delta) in zip(participants, results):
                states[i] = state
                deltas.append(delta)
            if hook is not None:
                hook(r, broadcast, deltas, states)
            server = algo.aggregate(server, deltas, N, S)
            if r % cfg.cadence == 0 or r == cfg.R:
                directions = [d for delta in deltas for d in delta.directions]
                trace.append(evaluate(problem, server.x, r, directions, started))
    finally:
        if pool is not None:
            pool.shutdown()
    return trace
