"""Federation rounds: client sampling, local training, aggregation.

Strategies:

* ``local``   - clients train alone, nothing is exchanged.
* ``global``  - one centralised model trained on the union of all clients.
* ``fedavg``  - sample-count weighted averaging into a global model.
* ``fedprox`` - fedavg with a proximal pull towards the round's global model.
* ``hfgnn``   - similarity-weighted knowledge propagation: the topology
  group is mixed through the client weight matrix ``P`` times, the feature
  group is blended once and partially retained per client.

Every coordinator-side reduction iterates clients in ascending id, so the
post-round state does not depend on the order local training finished in.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import softmax

from hfgnn.errors import ConfigError, ProtocolError
from hfgnn.gnn import GnnParams, TrainConfig, evaluate, forward, init_params, local_train
from hfgnn.graph import ClientDataset, Graph, SbmSpec, generate_sbm, merge_clients
from hfgnn.hmm import HmmModel, evolve_client, initial_states
from hfgnn.seeding import derive_seed, make_rng

STRATEGIES = ("local", "global", "fedavg", "fedprox", "hfgnn")
TOPOLOGY_SCOPES = ("selected", "all")
WEIGHTINGS = ("similarity", "uniform")
STOCHASTIC_TOL = 1e-9
PROBE_NODES = 32


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 16
    num_layers: int = 2

    def validate(self) -> None:
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1", key="model.hidden_dim")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1", key="model.num_layers")


@dataclass(frozen=True)
class RoundConfig:
    strategy: str = "hfgnn"
    num_rounds: int = 100
    clients_per_round: int = 5
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    propagation_depth: int = 2
    temperature: float = 0.5
    self_floor: float = 0.1
    # weight of the mixed feature group: 1 = fully mixed, 0 = purely local
    feature_mix: float = 0.5
    topology_scope: str = "selected"
    weighting: str = "similarity"

    def validate(self, num_clients: int | None = None) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}", key="round.strategy"
            )
        if self.num_rounds < 1:
            raise ConfigError("num_rounds must be >= 1", key="round.num_rounds")
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1", key="round.clients_per_round")
        if num_clients is not None and self.clients_per_round > num_clients:
            raise ConfigError(
                f"clients_per_round={self.clients_per_round} exceeds K={num_clients}",
                key="round.clients_per_round",
            )
        if self.propagation_depth < 1:
            raise ConfigError("propagation_depth must be >= 1", key="round.propagation_depth")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive", key="round.temperature")
        if not 0.0 <= self.self_floor <= 1.0:
            raise ConfigError("self_floor must lie in [0, 1]", key="round.self_floor")
        if not 0.0 <= self.feature_mix <= 1.0:
            raise ConfigError("feature_mix must lie in [0, 1]", key="round.feature_mix")
        if self.topology_scope not in TOPOLOGY_SCOPES:
            raise ConfigError(
                f"topology_scope must be one of {TOPOLOGY_SCOPES}", key="round.topology_scope"
            )
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}", key="round.weighting")
        self.train.validate()
        self.model.validate()


@dataclass(frozen=True, eq=False)
class ClientWeightMatrix:
    """Row-stochastic propagation weights between the listed clients."""

    matrix: np.ndarray
    round: int = 0
    clients: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ProtocolError(f"weight matrix must be square, got {mat.shape}")
        object.__setattr__(self, "matrix", mat)
        if not self.clients:
            object.__setattr__(self, "clients", tuple(range(mat.shape[0])))

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


class FlowRecord(NamedTuple):
    round: int
    client_id: int
    direction: str
    param_count: int
    strategy: str


class MetricRow(NamedTuple):
    round: int
    client_id: int
    split: str
    loss: float
    accuracy: float


@dataclass
class FederationState:
    client_params: list[GnnParams]
    global_params: GnnParams
    round: int = 0
    omega_history: list[ClientWeightMatrix] = field(default_factory=list)
    flows: list[FlowRecord] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.client_params)


def init_state(cfg: RoundConfig, datasets: Sequence[ClientDataset], seed: int) -> FederationState:
    """Every client and the global model start from the same initialisation."""
    g0 = datasets[0].subgraph
    params = init_params(
        g0.feature_dim,
        g0.num_classes,
        cfg.model.hidden_dim,
        cfg.model.num_layers,
        seed=derive_seed(seed, "init"),
    )
    return FederationState([params.copy() for _ in datasets], params.copy())


def sample_clients(K: int, client_k: int, round_index: int, seed: int) -> list[int]:
    """Uniform sample of ``client_k`` distinct ids, sorted ascending."""
    if not 1 <= client_k <= K:
        raise ConfigError(
            f"clients_per_round must lie in [1, K={K}], got {client_k}",
            key="round.clients_per_round",
        )
    if client_k == K:
        return list(range(K))
    rng = make_rng(seed, "sample-clients", round_index)
    return sorted(int(k) for k in rng.choice(K, size=client_k, replace=False))


def make_probe(
    num_classes: int,
    feature_dim: int,
    seed: int,
    p_in: float = 0.2,
    p_out: float = 0.02,
    feature_noise: float = 0.5,
) -> Graph:
    """Shared probe graph used to embed client models by their outputs."""
    blocks = max(1, min(num_classes, feature_dim, PROBE_NODES))
    sizes = [PROBE_NODES // blocks + (1 if b < PROBE_NODES % blocks else 0) for b in range(blocks)]
    spec = SbmSpec(tuple(sizes), p_in, p_out, feature_dim, feature_noise, seed)
    probe = generate_sbm(spec)
    # probe labels are never used; keep them valid for the model's classes
    return Graph(probe.num_nodes, probe.edges, probe.features, probe.labels % num_classes, num_classes)


def compute_similarity(
    params: Sequence[GnnParams],
    probe: Graph,
    temperature: float,
    self_floor: float = 0.0,
    round_index: int = 0,
    clients: Sequence[int] | None = None,
) -> ClientWeightMatrix:
    """Client weights from functional similarity on the probe graph.

    Each model is embedded as its flattened log-probability output on
    ``probe``.  Cosine similarities are clipped at zero, passed through a
    row softmax at ``temperature``, then blended convexly with the identity
    so every diagonal entry is at least ``self_floor``.  A model with a zero
    embedding gets a self-only row.
    """
    K = len(params)
    if K < 1:
        raise ProtocolError("need at least one client to compute similarities")
    emb = np.stack([forward(probe, p).ravel() for p in params])
    norms = np.linalg.norm(emb, axis=1)
    ok = norms > 0
    unit = np.zeros_like(emb)
    unit[ok] = emb[ok] / norms[ok, None]
    sims = np.clip(unit @ unit.T, 0.0, None)

    omega = softmax(sims / temperature, axis=1)
    omega = (1.0 - self_floor) * omega + self_floor * np.eye(K)
    omega[~ok] = np.eye(K)[~ok]
    omega /= omega.sum(axis=1, keepdims=True)
    ids = tuple(clients) if clients is not None else tuple(range(K))
    return ClientWeightMatrix(omega, round_index, ids)


def uniform_weights(
    K: int, self_floor: float = 0.0, round_index: int = 0, clients: Sequence[int] | None = None
) -> ClientWeightMatrix:
    omega = (1.0 - self_floor) * np.full((K, K), 1.0 / K) + self_floor * np.eye(K)
    omega /= omega.sum(axis=1, keepdims=True)
    ids = tuple(clients) if clients is not None else tuple(range(K))
    return ClientWeightMatrix(omega, round_index, ids)


def check_row_stochastic(omega: np.ndarray, tol: float = STOCHASTIC_TOL) -> None:
    if np.any(omega < -tol) or np.any(np.abs(omega.sum(axis=1) - 1.0) > tol):
        raise ProtocolError("weight matrix is not row-stochastic")


def propagate_knowledge(
    values: np.ndarray, omega: ClientWeightMatrix | np.ndarray, P: int
) -> np.ndarray:
    """Mix stacked client vectors ``P`` times: ``v <- omega @ v``."""
    mat = omega.matrix if isinstance(omega, ClientWeightMatrix) else np.asarray(omega, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if P < 1:
        raise ProtocolError(f"propagation depth must be >= 1, got {P}")
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or values.shape[0] != mat.shape[0]:
        raise ProtocolError(f"weights {mat.shape} incompatible with {values.shape[0]} clients")
    check_row_stochastic(mat)
    for _ in range(P):
        values = mat @ values
    return values


def aggregate_fedavg(params: Sequence[GnnParams], counts: Sequence[int]) -> GnnParams:
    """Sample-count weighted mean of the flattened parameters."""
    if not params:
        raise ProtocolError("nothing to aggregate")
    if len(counts) != len(params):
        raise ProtocolError("one sample count per client is required")
    total = float(sum(counts))
    if total <= 0:
        raise ProtocolError("sample counts sum to zero")
    acc = np.zeros(params[0].size)
    for p, n in zip(params, counts):
        acc += (n / total) * p.flatten()
    return params[0].unflatten(acc)


def deployed_params(state: FederationState, cfg: RoundConfig, k: int) -> GnnParams:
    """The model client ``k`` uses for inference under the strategy."""
    if cfg.strategy in ("global", "fedavg", "fedprox"):
        return state.global_params
    return state.client_params[k]


def _train_all(
    jobs: dict[int, tuple], cfg: TrainConfig, order: Sequence[int], workers: int
) -> dict[int, GnnParams]:
    def run(k: int) -> GnnParams:
        data, start, anchor, seed = jobs[k]
        return local_train(data, start, cfg, anchor, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(zip(order, pool.map(run, order)))
    else:
        results = {k: run(k) for k in order}
    return {k: results[k] for k in sorted(results)}


def run_round(
    state: FederationState,
    cfg: RoundConfig,
    datasets: Sequence[ClientDataset],
    seed: int,
    probe: Graph | None = None,
    train_order: Sequence[int] | None = None,
    workers: int = 1,
) -> FederationState:
    """Execute one federation round and return the new state.

    ``train_order`` only changes the order local jobs are dispatched in;
    the result is identical for every order.
    """
    K = len(datasets)
    if state.num_clients != K:
        raise ConfigError(f"state holds {state.num_clients} clients, got {K} datasets")
    cfg.validate(K)
    t = state.round + 1
    strategy = cfg.strategy
    n_params = state.global_params.size
    flows = list(state.flows)
    client_params = list(state.client_params)
    global_params = state.global_params
    omega_history = list(state.omega_history)

    if strategy == "global":
        merged, train, _, _ = merge_clients(datasets)
        global_params = local_train(
            (merged, train), global_params, cfg.train, None, derive_seed(seed, "train", t, 0)
        )
        client_params = [global_params] * K
        return FederationState(client_params, global_params, t, omega_history, flows)

    selected = sample_clients(K, cfg.clients_per_round, t, seed)
    order = list(train_order) if train_order is not None else selected
    if sorted(order) != selected:
        raise ProtocolError("train_order must be a permutation of the selected clients")

    if strategy in ("fedavg", "fedprox"):
        anchor = global_params if strategy == "fedprox" else None
        for k in selected:
            flows.append(FlowRecord(t, k, "down", n_params, strategy))
        jobs = {k: (datasets[k], global_params, anchor, derive_seed(seed, "train", t, k)) for k in selected}
    else:
        jobs = {k: (datasets[k], client_params[k], None, derive_seed(seed, "train", t, k)) for k in selected}
    trained = _train_all(jobs, cfg.train, order, workers)

    if strategy == "local":
        for k in selected:
            client_params[k] = trained[k]
        return FederationState(client_params, global_params, t, omega_history, flows)

    for k in selected:
        flows.append(FlowRecord(t, k, "up", n_params, strategy))

    if strategy in ("fedavg", "fedprox"):
        global_params = aggregate_fedavg(
            [trained[k] for k in selected], [datasets[k].num_samples for k in selected]
        )
        for k in selected:
            client_params[k] = global_params
        return FederationState(client_params, global_params, t, omega_history, flows)

    # hfgnn
    for k in selected:
        client_params[k] = trained[k]
    members = selected if cfg.topology_scope == "selected" else list(range(K))
    member_params = [client_params[k] for k in members]
    if cfg.weighting == "uniform":
        omega = uniform_weights(len(members), cfg.self_floor, t, members)
    else:
        if probe is None:
            raise ProtocolError("hfgnn similarity weighting needs a probe graph")
        omega = compute_similarity(member_params, probe, cfg.temperature, cfg.self_floor, t, members)
    omega_history.append(omega)

    topo = np.stack([p.topology_flat() for p in member_params])
    feat = np.stack([p.feature_flat() for p in member_params])
    topo = propagate_knowledge(topo, omega, cfg.propagation_depth)
    mixed_feat = propagate_knowledge(feat, omega, 1)
    lam = cfg.feature_mix
    feat = (1.0 - lam) * feat + lam * mixed_feat
    for row, k in enumerate(members):
        client_params[k] = member_params[row].from_groups(topo[row], feat[row])
        flows.append(FlowRecord(t, k, "down", n_params, strategy))
    return FederationState(client_params, global_params, t, omega_history, flows)


def evaluate_clients(
    state: FederationState, cfg: RoundConfig, datasets: Sequence[ClientDataset]
) -> list[MetricRow]:
    rows = []
    for k, c in enumerate(datasets):
        params = deployed_params(state, cfg, k)
        for split, mask in (("val", c.val_mask), ("test", c.test_mask)):
            loss, acc = evaluate(c.subgraph, params, mask)
            rows.append(MetricRow(state.round, c.client_id, split, loss, acc))
    return rows


@dataclass
class ExperimentResult:
    metrics: list[MetricRow]
    flows: list[FlowRecord]
    state: FederationState
    final_test_accuracy: list[float]

    @property
    def mean_test_accuracy(self) -> float:
        return float(np.nanmean(self.final_test_accuracy))

    @property
    def std_test_accuracy(self) -> float:
        vals = np.asarray(self.final_test_accuracy)
        vals = vals[~np.isnan(vals)]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def run_experiment(
    cfg: RoundConfig,
    datasets: Sequence[ClientDataset],
    hmm: HmmModel | None = None,
    seed: int = 0,
    drift_scale: float = 0.0,
    probe: Graph | None = None,
    on_round: Callable[[int, list[MetricRow], list[FlowRecord]], None] | None = None,
    workers: int = 1,
) -> ExperimentResult:
    """Run ``cfg.num_rounds`` rounds with optional HMM feature drift.

    ``on_round(t, metric_rows, flow_rows)`` receives each round's new rows
    as soon as the round completes.
    """
    datasets = list(datasets)
    cfg.validate(len(datasets))
    if probe is None and cfg.strategy == "hfgnn" and cfg.weighting == "similarity":
        g0 = datasets[0].subgraph
        probe = make_probe(g0.num_classes, g0.feature_dim, derive_seed(seed, "probe"))
    state = init_state(cfg, datasets, seed)
    node_states = None
    if hmm is not None:
        node_states = [
            initial_states(hmm, c.num_nodes, derive_seed(seed, "hmm-initial", c.client_id))
            for c in datasets
        ]

    metrics: list[MetricRow] = []
    last_test: list[float] = []
    for _ in range(cfg.num_rounds):
        n_flows = len(state.flows)
        state = run_round(state, cfg, datasets, seed, probe=probe, workers=workers)
        rows = evaluate_clients(state, cfg, datasets)
        metrics.extend(rows)
        last_test = [r.accuracy for r in rows if r.split == "test"]
        if on_round is not None:
            on_round(state.round, rows, state.flows[n_flows:])
        if hmm is not None:
            for k, c in enumerate(datasets):
                datasets[k], node_states[k] = evolve_client(
                    c, hmm, node_states[k], state.round, drift_scale, seed
                )
    return ExperimentResult(metrics, list(state.flows), state, last_test)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; std is 0 for one value."""
    vals = [float(v) for v in values]
    mean = math.fsum(vals) / len(vals)
    if len(vals) < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
