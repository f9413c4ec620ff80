"""Mean-aggregation message-passing GNN with hand-written backpropagation.

Layer ``l`` computes, for every node ``i``::

    msg_i  = mean_{j in N(i)} W_neigh[l]^T h_j        (zero if N(i) is empty)
    h_i'   = relu(W_self[l]^T h_i + msg_i + b[l])     (no relu on the last layer)

followed by a linear classification head and log-softmax.  ``W_neigh`` is
the topology group; ``W_self``, ``b`` and the head are the feature group.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from hfgnn.errors import ConfigError, ShapeError, TrainingError
from hfgnn.graph import ClientDataset, Graph
from hfgnn.seeding import make_rng

OPTIMIZERS = ("sgd", "adam")


@dataclass(eq=False)
class GnnParams:
    w_neigh: list[np.ndarray]
    w_self: list[np.ndarray]
    b: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.w_neigh)

    @property
    def dims(self) -> list[int]:
        return [w.shape[0] for w in self.w_self] + [self.head_w.shape[0]]

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    # Canonical ordering: topology group first, then the feature group
    # layer by layer, then the head.
    def topology_arrays(self) -> list[np.ndarray]:
        return list(self.w_neigh)

    def feature_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.w_self, self.b):
            out += [w, b]
        return out + [self.head_w, self.head_b]

    def arrays(self) -> list[np.ndarray]:
        return self.topology_arrays() + self.feature_arrays()

    def manifest(self) -> list[tuple[int, str, int, int]]:
        """(layer, group, rows, cols) per array in canonical order."""
        L = self.num_layers
        rows = [(l, "neigh", *w.shape) for l, w in enumerate(self.w_neigh)]
        for l in range(L):
            rows.append((l, "self", *self.w_self[l].shape))
            rows.append((l, "bias", 1, self.b[l].shape[0]))
        rows.append((L, "head_w", *self.head_w.shape))
        rows.append((L, "head_b", 1, self.head_b.shape[0]))
        return rows

    def topology_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.topology_arrays()])

    def feature_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.feature_arrays()])

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.topology_flat(), self.feature_flat()])

    @property
    def num_topology(self) -> int:
        return sum(a.size for a in self.topology_arrays())

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def from_groups(self, topology: np.ndarray, feature: np.ndarray) -> "GnnParams":
        """New params shaped like ``self`` from the two flat group vectors."""
        topology = np.asarray(topology, dtype=np.float64)
        feature = np.asarray(feature, dtype=np.float64)
        if topology.shape != (self.num_topology,) or feature.shape != (self.size - self.num_topology,):
            raise ShapeError("group vector sizes do not match the parameter layout")
        return self.unflatten(np.concatenate([topology, feature]))

    def unflatten(self, flat: np.ndarray) -> "GnnParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"expected {self.size} values, got {flat.shape}")
        pieces, pos = [], 0
        for a in self.arrays():
            pieces.append(flat[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        L = self.num_layers
        w_neigh = pieces[:L]
        feat = pieces[L:]
        w_self = feat[0:2 * L:2]
        b = feat[1:2 * L:2]
        return GnnParams(w_neigh, w_self, b, feat[2 * L], feat[2 * L + 1])

    def copy(self) -> "GnnParams":
        return self.unflatten(self.flatten())

    def zeros_like(self) -> "GnnParams":
        return self.unflatten(np.zeros(self.size))

    def same_as(self, other: "GnnParams") -> bool:
        return (
            self.manifest() == other.manifest()
            and self.flatten().tobytes() == other.flatten().tobytes()
        )


def init_params(
    feature_dim: int,
    num_classes: int,
    hidden_dim: int = 16,
    num_layers: int = 2,
    seed: int = 0,
) -> GnnParams:
    """Glorot-uniform weights, zero biases."""
    if num_layers < 1:
        raise ConfigError("num_layers must be >= 1", key="model.num_layers")
    rng = make_rng(seed, "gnn-init")
    dims = [feature_dim] + [hidden_dim] * num_layers

    def glorot(r: int, c: int) -> np.ndarray:
        lim = np.sqrt(6.0 / (r + c))
        return rng.uniform(-lim, lim, size=(r, c))

    w_neigh = [glorot(dims[l], dims[l + 1]) for l in range(num_layers)]
    w_self = [glorot(dims[l], dims[l + 1]) for l in range(num_layers)]
    b = [np.zeros(dims[l + 1]) for l in range(num_layers)]
    return GnnParams(w_neigh, w_self, b, glorot(dims[-1], num_classes), np.zeros(num_classes))


def _check_input(h: np.ndarray, g: Graph, rows: int) -> None:
    if h.ndim != 2 or h.shape[0] != g.num_nodes:
        raise ShapeError(f"expected one vector per node ({g.num_nodes}), got {h.shape}")
    if h.shape[1] != rows:
        raise ShapeError(f"layer input has dim {h.shape[1]}, weights expect {rows}")


def message_aggregate(h: np.ndarray, g: Graph, params: GnnParams, layer: int) -> np.ndarray:
    """Mean over neighbours of ``W_neigh[layer]^T h_j``; zero for isolated nodes."""
    w = params.w_neigh[layer]
    _check_input(h, g, w.shape[0])
    return g.mean_operator() @ (h @ w)


def node_update(h: np.ndarray, msg: np.ndarray, params: GnnParams, layer: int) -> np.ndarray:
    """ReLU-gated affine combine; the last layer returns the pre-activation."""
    w = params.w_self[layer]
    if h.ndim != 2 or h.shape[1] != w.shape[0]:
        raise ShapeError(f"node states have dim {h.shape[-1]}, W_self expects {w.shape[0]}")
    if msg.shape != (h.shape[0], w.shape[1]):
        raise ShapeError(f"message shape {msg.shape} does not match ({h.shape[0]}, {w.shape[1]})")
    z = h @ w + msg + params.b[layer]
    if layer == params.num_layers - 1:
        return z
    return np.maximum(z, 0.0)


def _forward_cache(g: Graph, params: GnnParams) -> tuple[list[np.ndarray], np.ndarray]:
    if g.feature_dim != params.dims[0]:
        raise ShapeError(f"graph feature dim {g.feature_dim} != model input dim {params.dims[0]}")
    hs = [g.features]
    for l in range(params.num_layers):
        msg = message_aggregate(hs[-1], g, params, l)
        hs.append(node_update(hs[-1], msg, params, l))
    logits = hs[-1] @ params.head_w + params.head_b
    return hs, log_softmax(logits, axis=1)


def forward(g: Graph, params: GnnParams) -> np.ndarray:
    """Per-node class log-probabilities, shape ``(n, C)``."""
    return _forward_cache(g, params)[1]


def loss_and_grads(
    g: Graph,
    params: GnnParams,
    mask: np.ndarray,
    anchor: GnnParams | None = None,
    rho: float = 0.0,
    weight_decay: float = 0.0,
) -> tuple[float, GnnParams]:
    """Masked mean cross-entropy plus proximal and L2 terms, with gradients.

    loss = CE + (rho / 2) ||params - anchor||^2 + (weight_decay / 2) ||params||^2
    """
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise TrainingError("loss requested over an empty node mask")
    hs, logp = _forward_cache(g, params)
    labels = g.labels[mask]
    m = len(mask)
    loss = -float(logp[mask, labels].sum()) / m

    d_logits = np.zeros_like(logp)
    d_logits[mask] = np.exp(logp[mask])
    d_logits[mask, labels] -= 1.0
    d_logits /= m

    L = params.num_layers
    A_t = g.mean_operator().T.tocsr()
    d_head_w = hs[L].T @ d_logits
    d_head_b = d_logits.sum(axis=0)
    dh = d_logits @ params.head_w.T
    d_neigh, d_self, d_b = [None] * L, [None] * L, [None] * L
    for l in reversed(range(L)):
        dz = dh if l == L - 1 else dh * (hs[l + 1] > 0)
        back_msg = A_t @ dz
        d_self[l] = hs[l].T @ dz
        d_neigh[l] = hs[l].T @ back_msg
        d_b[l] = dz.sum(axis=0)
        if l:
            dh = dz @ params.w_self[l].T + back_msg @ params.w_neigh[l].T
    grads = GnnParams(d_neigh, d_self, d_b, d_head_w, d_head_b)

    if weight_decay or (anchor is not None and rho):
        flat = params.flatten()
        g_flat = grads.flatten()
        if weight_decay:
            loss += 0.5 * weight_decay * float(flat @ flat)
            g_flat = g_flat + weight_decay * flat
        if anchor is not None and rho:
            diff = flat - anchor.flatten()
            loss += 0.5 * rho * float(diff @ diff)
            g_flat = g_flat + rho * diff
        grads = params.unflatten(g_flat)
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 32
    local_epochs: int = 5
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    prox_coefficient: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative", key="train.learning_rate")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="train.batch_size")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1", key="train.local_epochs")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", key="train.weight_decay")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}",
                key="train.optimizer",
            )
        if self.prox_coefficient < 0:
            raise ConfigError("prox_coefficient must be >= 0", key="train.prox_coefficient")


def _batches(train: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if batch_size >= len(train):
        return [train]
    order = train[rng.permutation(len(train))]
    return [np.sort(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]


def local_train(
    c: ClientDataset | tuple[Graph, np.ndarray],
    start: GnnParams,
    cfg: TrainConfig,
    anchor: GnnParams | None = None,
    seed: int = 0,
) -> GnnParams:
    """Run ``cfg.local_epochs`` passes over the training nodes.

    Each pass shuffles the training nodes into batches of at most
    ``cfg.batch_size`` (one full batch when it covers every node); the forward
    pass always sees the whole subgraph.  Optimizer state starts fresh.
    ``c`` may also be a ``(graph, train_mask)`` pair.
    """
    # lr = 0 is allowed: it freezes parameters
    cfg.validate()
    if isinstance(c, ClientDataset):
        graph, train = c.subgraph, c.train_mask
    else:
        graph, train = c
    train = np.asarray(train, dtype=np.int64)
    if train.size == 0:
        raise TrainingError("client has no training nodes")

    rng = make_rng(seed, "local-train")
    rho = cfg.prox_coefficient if anchor is not None else 0.0
    theta = start.flatten()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    for _ in range(cfg.local_epochs):
        for batch in _batches(train, cfg.batch_size, rng):
            _, grads = loss_and_grads(
                graph, start.unflatten(theta), batch, anchor, rho, cfg.weight_decay
            )
            grad = grads.flatten()
            step += 1
            if cfg.optimizer == "sgd":
                theta = theta - cfg.learning_rate * grad
            else:
                m = cfg.beta1 * m + (1 - cfg.beta1) * grad
                v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
                m_hat = m / (1 - cfg.beta1 ** step)
                v_hat = v / (1 - cfg.beta2 ** step)
                theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return start.unflatten(theta)


def evaluate(g: Graph, params: GnnParams, mask: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over ``mask`` (nan for an empty mask)."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        return float("nan"), float("nan")
    logp = forward(g, params)[mask]
    labels = g.labels[mask]
    loss = -float(logp[np.arange(len(mask)), labels].mean())
    acc = float((logp.argmax(axis=1) == labels).mean())
    return loss, acc


_MAGIC = "GNNPARAMS"


def save_params(params: GnnParams, path: str | Path) -> None:
    """Checkpoint: one manifest text line, then little-endian float64 data.

    The manifest line is ``GNNPARAMS`` followed by ``layer,group,rows,cols``
    entries in canonical order.
    """
    entries = " ".join(f"{l},{grp},{r},{c}" for l, grp, r, c in params.manifest())
    flat = params.flatten()
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} {entries}\n".encode("ascii"))
        fh.write(struct.pack(f"<{flat.size}d", *flat))


def load_params(path: str | Path) -> GnnParams:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    tokens = raw[:newline].decode("ascii").split()
    if not tokens or tokens[0] != _MAGIC:
        raise ShapeError(f"{path}: not a parameter checkpoint")
    groups: dict[str, list[np.ndarray]] = {"neigh": [], "self": [], "bias": [], "head_w": [], "head_b": []}
    data = np.frombuffer(raw[newline + 1:], dtype="<f8").astype(np.float64)
    pos = 0
    for entry in tokens[1:]:
        _, grp, r, c = entry.split(",")
        r, c = int(r), int(c)
        arr = data[pos:pos + r * c].reshape(r, c)
        pos += r * c
        groups[grp].append(arr.ravel() if grp in ("bias", "head_b") else arr)
    if pos != data.size:
        raise ShapeError(f"{path}: manifest covers {pos} values, file holds {data.size}")
    return GnnParams(groups["neigh"], groups["self"], groups["bias"], groups["head_w"][0], groups["head_b"][0])
