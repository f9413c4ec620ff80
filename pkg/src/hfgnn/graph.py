"""Synthetic global graphs, client partitions and node splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from hfgnn.errors import ConfigError, ShapeError, SplitError
from hfgnn.seeding import derive_seed, make_rng

TRAIN_FRACTION = 0.8
VAL_FRACTION = 0.1


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted node-classification graph.

    ``edges`` is an ``(E, 2)`` int array with ``u < v`` in every row, sorted
    lexicographically.  ``features`` is ``(n, f)`` float64 and ``labels`` is
    length ``n`` with values in ``[0, num_classes)``.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    _mean_operator: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        n = int(self.num_nodes)
        if features.ndim != 2 or features.shape[0] != n or features.shape[1] < 1:
            raise ShapeError(f"features must be ({n}, f>=1), got {features.shape}")
        if labels.shape != (n,):
            raise ShapeError(f"labels must have length {n}, got {labels.shape}")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ShapeError("label outside [0, num_classes)")
        if len(edges):
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ShapeError("edges must satisfy u < v (no self-loops)")
            if edges.max() >= n or edges.min() < 0:
                raise ShapeError("edge endpoint out of range")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges = edges[order]
            if np.any(np.all(edges[1:] == edges[:-1], axis=1)):
                raise ShapeError("duplicate edge")
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def mean_operator(self) -> sp.csr_matrix:
        """Row-normalised adjacency: row i averages over the neighbours of i.

        Rows of isolated nodes are all zero.  Cached on first use.
        """
        if not self._mean_operator:
            n = self.num_nodes
            u, v = self.edges[:, 0], self.edges[:, 1]
            rows = np.concatenate([u, v])
            cols = np.concatenate([v, u])
            deg = np.bincount(rows, minlength=n).astype(np.float64)
            inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
            adj = sp.csr_matrix((inv[rows], (rows, cols)), shape=(n, n))
            adj.sort_indices()
            self._mean_operator.append(adj)
        return self._mean_operator[0]

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(self.num_nodes, self.edges, features, self.labels, self.num_classes)

    def same_as(self, other: "Graph") -> bool:
        """Bit-identical comparison."""
        return (
            self.num_nodes == other.num_nodes
            and self.num_classes == other.num_classes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )

    def induced(self, nodes: np.ndarray) -> tuple["Graph", int]:
        """Induced subgraph on ``nodes`` (sorted global ids), plus the number
        of edges leaving the node set."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        lu, lv = local[self.edges[:, 0]], local[self.edges[:, 1]]
        inside = (lu >= 0) & (lv >= 0)
        crossing = int(np.count_nonzero((lu >= 0) ^ (lv >= 0)))
        sub_edges = np.stack([lu[inside], lv[inside]], axis=1)
        sub = Graph(
            len(nodes), sub_edges, self.features[nodes], self.labels[nodes], self.num_classes
        )
        return sub, crossing


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One client's private subgraph and its train/val/test node split.

    Masks hold sorted local node indices.  ``global_ids[i]`` is the global
    index of local node ``i``; ``dropped_edges`` counts edges to nodes owned
    by other clients, which the client never sees.
    """

    client_id: int
    subgraph: Graph
    global_ids: np.ndarray
    train_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dropped_edges: int = 0

    @property
    def num_samples(self) -> int:
        return len(self.train_mask)

    @property
    def num_nodes(self) -> int:
        return self.subgraph.num_nodes

    def with_subgraph(self, subgraph: Graph) -> "ClientDataset":
        return replace(self, subgraph=subgraph)


@dataclass(frozen=True)
class SbmSpec:
    block_sizes: tuple[int, ...]
    p_in: float
    p_out: float
    feature_dim: int | None = None
    feature_noise: float = 0.5
    seed: int = 0
    feature_scale: float = 1.0

    @property
    def num_nodes(self) -> int:
        return sum(self.block_sizes)

    @property
    def num_blocks(self) -> int:
        return len(self.block_sizes)

    def resolved_feature_dim(self) -> int:
        return self.num_blocks if self.feature_dim is None else int(self.feature_dim)

    def validate(self) -> None:
        if not self.block_sizes:
            raise ConfigError("at least one block is required", key="data.block_sizes")
        if any(int(b) < 1 for b in self.block_sizes):
            raise ConfigError("blocks must be non-empty", key="data.block_sizes")
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ConfigError(
                f"need 0 <= p_out <= p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}",
                key="data.p_in",
            )
        if self.resolved_feature_dim() < self.num_blocks:
            raise ConfigError(
                "feature_dim must be at least the number of blocks", key="data.feature_dim"
            )
        if not self.feature_noise >= 0:
            raise ConfigError("feature_noise must be >= 0", key="data.feature_noise")


def generate_sbm(spec: SbmSpec) -> Graph:
    """Sample a stochastic-block-model graph with noisy one-hot block features.

    Each unordered pair ``(i, j)``, ``i < j``, visited in row-major order,
    consumes one uniform draw from the ``"sbm-edges"`` stream and becomes an
    edge when the draw is below ``p_in`` (same block) or ``p_out``.
    """
    spec.validate()
    n = spec.num_nodes
    blocks = np.repeat(np.arange(spec.num_blocks), spec.block_sizes)

    rng = make_rng(spec.seed, "sbm-edges")
    iu, ju = np.triu_indices(n, k=1)
    draws = rng.random(len(iu))
    prob = np.where(blocks[iu] == blocks[ju], spec.p_in, spec.p_out)
    hit = draws < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)

    f = spec.resolved_feature_dim()
    noise_rng = make_rng(spec.seed, "sbm-features")
    features = np.zeros((n, f))
    features[np.arange(n), blocks] = spec.feature_scale
    features += spec.feature_noise * noise_rng.standard_normal((n, f))
    return Graph(n, edges, features, blocks, spec.num_blocks)


def split_sizes(n: int) -> tuple[int, int, int]:
    """80/10/10 sizes with every part non-empty; requires n >= 3."""
    if n < 3:
        raise SplitError(f"need at least 3 nodes to split, got {n}")
    n_val = max(1, math.floor(VAL_FRACTION * n + 0.5))
    n_test = max(1, math.floor((1.0 - TRAIN_FRACTION - VAL_FRACTION) * n + 0.5))
    return n - n_val - n_test, n_val, n_test


def split_masks(client: ClientDataset, seed: int) -> ClientDataset:
    """Seeded shuffle of the client's nodes, then an 80/10/10 split."""
    n = client.num_nodes
    n_train, n_val, _ = split_sizes(n)
    perm = make_rng(seed, "split").permutation(n)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    return replace(client, train_mask=train, val_mask=val, test_mask=test)


def _dirichlet_assignment(
    labels: np.ndarray, num_classes: int, K: int, alpha: float, rng: np.random.Generator
) -> np.ndarray:
    owner = np.empty(len(labels), dtype=np.int64)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(K, alpha))
        cuts = np.floor(np.cumsum(props)[:-1] * len(idx) + 0.5).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            owner[part] = k
    return owner


def _rebalance(owner: np.ndarray, K: int, min_size: int) -> np.ndarray:
    # move highest-index nodes from the largest client into each deficient one
    owner = owner.copy()
    for k in range(K):
        while np.count_nonzero(owner == k) < min_size:
            sizes = np.bincount(owner, minlength=K)
            donor = int(np.argmax(sizes))
            owner[np.flatnonzero(owner == donor)[-1]] = k
    return owner


def partition_clients(
    g: Graph, K: int, alpha: float, seed: int, max_attempts: int = 100
) -> list[ClientDataset]:
    """Label-skewed partition of ``g`` into ``K`` client subgraphs.

    For every class a Dirichlet(alpha) proportion vector decides how that
    class's nodes are spread over clients.  Draws are repeated until each
    client owns at least ``min(3, n // K)`` nodes; after ``max_attempts`` the
    last draw is rebalanced deterministically.  Cross-client edges are dropped
    and counted on each side in ``dropped_edges``.  Masks are filled by
    :func:`split_masks`; clients with fewer than 3 nodes train on all of them.
    """
    K = int(K)
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}", key="data.num_clients")
    if K > g.num_nodes:
        raise ConfigError(
            f"K={K} exceeds the number of nodes {g.num_nodes}", key="data.num_clients"
        )
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}", key="data.alpha")

    min_size = min(3, g.num_nodes // K)
    rng = make_rng(seed, "partition")
    owner = None
    for _ in range(max_attempts):
        owner = _dirichlet_assignment(g.labels, g.num_classes, K, alpha, rng)
        if np.bincount(owner, minlength=K).min() >= min_size:
            break
    else:
        owner = _rebalance(owner, K, min_size)

    clients = []
    for k in range(K):
        nodes = np.flatnonzero(owner == k)
        sub, crossing = g.induced(nodes)
        client = ClientDataset(k, sub, nodes, dropped_edges=crossing)
        if len(nodes) >= 3:
            client = split_masks(client, derive_seed(seed, "split", k))
        else:
            client = replace(client, train_mask=np.arange(len(nodes)))
        clients.append(client)
    return clients


def total_dropped_edges(clients: list[ClientDataset]) -> int:
    """Number of global edges lost to the partition (each counted once)."""
    return sum(c.dropped_edges for c in clients) // 2


def merge_clients(clients: list[ClientDataset], num_nodes: int | None = None) -> tuple[Graph, np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint union of client subgraphs in global indexing.

    Returns the merged graph and its train/val/test masks.  Cross-client
    edges stay absent, so message passing inside the merged graph matches
    message passing on each client separately.
    """
    if num_nodes is None:
        num_nodes = sum(c.num_nodes for c in clients)
    first = clients[0].subgraph
    features = np.zeros((num_nodes, first.feature_dim))
    labels = np.zeros(num_nodes, dtype=np.int64)
    edges, train, val, test = [], [], [], []
    for c in clients:
        gid = c.global_ids
        features[gid] = c.subgraph.features
        labels[gid] = c.subgraph.labels
        edges.append(gid[c.subgraph.edges])
        train.append(gid[c.train_mask])
        val.append(gid[c.val_mask])
        test.append(gid[c.test_mask])
    merged = Graph(num_nodes, np.concatenate(edges), features, labels, first.num_classes)
    return merged, np.sort(np.concatenate(train)), np.sort(np.concatenate(val)), np.sort(np.concatenate(test))


def write_graph(g: Graph, path: str | Path) -> None:
    """Text export: ``n f C`` header, ``node`` lines, then ``edge`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{g.num_nodes} {g.feature_dim} {g.num_classes}\n")
        for i in range(g.num_nodes):
            feats = " ".join(f"{x:.17g}" for x in g.features[i])
            fh.write(f"node {i} {g.labels[i]} {feats}\n")
        for u, v in g.edges:
            fh.write(f"edge {u} {v}\n")


def read_graph(path: str | Path) -> Graph:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or len(lines[0]) != 3:
        raise ShapeError(f"{path}: missing 'n f C' header")
    n, f, C = (int(x) for x in lines[0])
    features = np.zeros((n, f))
    labels = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    edges = []
    for lineno, parts in enumerate(lines[1:], start=2):
        if parts[0] == "node":
            if len(parts) != 3 + f:
                raise ShapeError(f"{path}:{lineno}: expected {f} features")
            i = int(parts[1])
            labels[i] = int(parts[2])
            features[i] = [float(x) for x in parts[3:]]
            seen[i] = True
        elif parts[0] == "edge" and len(parts) == 3:
            u, v = int(parts[1]), int(parts[2])
            edges.append((min(u, v), max(u, v)))
        else:
            raise ShapeError(f"{path}:{lineno}: unrecognised line")
    if not seen.all():
        raise ShapeError(f"{path}: {int((~seen).sum())} nodes missing")
    return Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels, C)
