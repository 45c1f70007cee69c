"""Synchronous federated training rounds.

One round: the server broadcasts the global weight vector, every roster
client trains locally and returns its updated weights, and the server
aggregates sample-count-weighted client vectors into the next global
vector.  Participation is full and synchronous: a missing update aborts
the round rather than degrading it.

Two aggregation strategies are provided.  The default weighted average
computes ``sum_k (n_k / n) * w_k`` over the client vectors.  The
adaptive variant treats the weighted average of client deltas as a
pseudo-gradient, accumulates its square, and scales the server step by
the accumulated root.

Aggregation always accumulates in 64-bit in ascending client-id order,
so the result is independent of update arrival order.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import autoencoder as ae
from .errors import DecodeError, ProtocolError, RoundAbortError

FEDAVG = "fedavg"
FEDADAGRAD = "fedadagrad"

WEIGHTS_MAGIC = b"FCWB"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sH8sI")  # magic, version, layout id, value count


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Flat parameter vector bound to a layer layout by an 8-byte id."""

    layout_id: bytes
    values: np.ndarray

    def __post_init__(self):
        if len(self.layout_id) != 8:
            raise ProtocolError(f"layout id must be 8 bytes, got {len(self.layout_id)}")
        if self.values.ndim != 1:
            raise ProtocolError(f"weights must be a flat vector, got shape {self.values.shape}")


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    """One client's contribution to a round."""

    client_id: str
    round_index: int
    n_samples: int
    weights: ModelWeights
    mean_loss: float | None = None


@dataclass(frozen=True)
class ClientSpec:
    """Roster entry: who participates and how many training samples they hold."""

    client_id: str
    n_samples: int


@dataclass(frozen=True)
class RoundConfig:
    """Everything both sides need to run a federation deterministically."""

    model: ae.AutoencoderConfig
    roster: tuple[ClientSpec, ...]
    rounds: int
    local_epochs: int = 1
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    strategy: str = FEDAVG
    seed: int = 0
    server_lr: float = 0.1  # adaptive strategy only
    adaptivity: float = 1e-3  # adaptive strategy only

    def __post_init__(self):
        if not self.roster:
            raise ProtocolError("roster must not be empty")
        ids = [spec.client_id for spec in self.roster]
        if len(set(ids)) != len(ids):
            raise ProtocolError("duplicate client ids in roster")
        if self.strategy not in (FEDAVG, FEDADAGRAD):
            raise ProtocolError(f"unknown strategy {self.strategy!r}")
        if self.rounds < 1:
            raise ProtocolError("rounds must be positive")

    def spec_for(self, client_id: str) -> ClientSpec:
        for spec in self.roster:
            if spec.client_id == client_id:
                return spec
        raise ProtocolError(f"client {client_id!r} not in roster")


@dataclass
class ServerState:
    """Round state machine: advances only when every roster update is in."""

    round_index: int
    global_weights: ModelWeights
    strategy: str = FEDAVG
    server_lr: float = 0.1
    adaptivity: float = 1e-3
    adagrad_v: np.ndarray | None = None
    pending: dict[str, ClientUpdate] = field(default_factory=dict)


@dataclass(frozen=True)
class RoundRecord:
    """One line of the round log."""

    round_index: int
    strategy: str
    mean_client_loss: float | None
    wall_ms: float


# -- weight bytes ----------------------------------------------------------

def serialize_weights(weights: ModelWeights) -> bytes:
    """18-byte header plus little-endian 32-bit values; round-trips bit-exactly."""
    values = np.ascontiguousarray(weights.values, dtype="<f4")
    header = _HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, weights.layout_id, values.size)
    return header + values.tobytes()


def deserialize_weights(data: bytes, expected_layout_id: bytes | None = None) -> ModelWeights:
    if len(data) < _HEADER.size:
        raise DecodeError(f"weight payload truncated: {len(data)} bytes < {_HEADER.size}-byte header")
    magic, version, layout, count = _HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise DecodeError(f"bad weight magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise DecodeError(f"unsupported weight format version {version}")
    if expected_layout_id is not None and layout != expected_layout_id:
        raise DecodeError(
            f"layout id mismatch: payload {layout.hex()} != expected {expected_layout_id.hex()}"
        )
    body = data[_HEADER.size :]
    if len(body) != 4 * count:
        raise DecodeError(f"weight payload truncated: {len(body)} bytes for {count} values")
    values = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return ModelWeights(layout_id=layout, values=values)


def save_weights(weights: ModelWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(weights))


def load_weights(path, expected_layout_id: bytes | None = None) -> ModelWeights:
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read(), expected_layout_id)


# -- model glue ------------------------------------------------------------

def model_weights(model: ae.AutoencoderModel) -> ModelWeights:
    return ModelWeights(layout_id=model.layout_id, values=ae.flatten_weights(model))


def apply_weights(model: ae.AutoencoderModel, weights: ModelWeights) -> ae.AutoencoderModel:
    if weights.layout_id != model.layout_id:
        raise ProtocolError(
            f"weights layout {weights.layout_id.hex()} does not match model layout "
            f"{model.layout_id.hex()}"
        )
    return ae.with_weights(model, weights.values)


# -- aggregation -----------------------------------------------------------

def _check_updates(updates: list[ClientUpdate]) -> tuple[int, bytes]:
    if not updates:
        raise ProtocolError("cannot aggregate an empty update list")
    rounds = {u.round_index for u in updates}
    if len(rounds) != 1:
        raise ProtocolError(f"mixed rounds in update set: {sorted(rounds)}")
    layouts = {u.weights.layout_id for u in updates}
    if len(layouts) != 1:
        raise ProtocolError(f"mixed weight layouts in update set: {[l.hex() for l in layouts]}")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client updates: {sorted(ids)}")
    for u in updates:
        if u.n_samples < 1:
            raise ProtocolError(f"client {u.client_id!r} reports non-positive sample count")
    sizes = {u.weights.values.size for u in updates}
    if len(sizes) != 1:
        raise ProtocolError(f"mixed weight vector sizes: {sorted(sizes)}")
    return rounds.pop(), layouts.pop()


def _weighted_mean(updates: list[ClientUpdate]) -> np.ndarray:
    total = sum(u.n_samples for u in updates)
    acc = np.zeros(updates[0].weights.values.size, dtype=np.float64)
    for u in sorted(updates, key=lambda u: u.client_id):
        acc += (u.n_samples / total) * u.weights.values.astype(np.float64)
    return acc


def fedavg_aggregate(updates: list[ClientUpdate]) -> ModelWeights:
    """Sample-count-weighted average of the client weight vectors."""
    _, layout = _check_updates(updates)
    dtype = updates[0].weights.values.dtype
    return ModelWeights(layout_id=layout, values=_weighted_mean(updates).astype(dtype))


def fedadagrad_aggregate(state: ServerState, updates: list[ClientUpdate]) -> tuple[ModelWeights, ServerState]:
    """Adaptive server step on the weighted mean of client deltas."""
    _, layout = _check_updates(updates)
    if layout != state.global_weights.layout_id:
        raise ProtocolError("update layout does not match server weights")
    previous = state.global_weights.values.astype(np.float64)
    delta = _weighted_mean(updates) - previous
    v = np.zeros_like(delta) if state.adagrad_v is None else state.adagrad_v
    v = v + delta * delta
    stepped = previous + state.server_lr * delta / (np.sqrt(v) + state.adaptivity)
    dtype = state.global_weights.values.dtype
    new_weights = ModelWeights(layout_id=layout, values=stepped.astype(dtype))
    return new_weights, replace(state, global_weights=new_weights, adagrad_v=v)


# -- client side -----------------------------------------------------------

def _make_optimizer(name: str, lr: float) -> ad.OptimizerState:
    if name == "sgd":
        return ad.sgd(lr)
    if name == "adam":
        return ad.adam(lr)
    raise ProtocolError(f"unknown local optimizer {name!r}")


def local_shuffle_seed(config: RoundConfig, client_id: str, round_index: int) -> list[int]:
    # Stable across processes and transports; crc32 keeps ids order-free.
    return [config.seed, zlib.crc32(client_id.encode()), round_index]


def client_local_train(
    global_weights: ModelWeights,
    dataset: np.ndarray,
    config: RoundConfig,
    client_id: str,
    round_index: int,
) -> ClientUpdate:
    """Load the broadcast weights, train locally, and package the update."""
    model = apply_weights(ae.build_model(config.model), global_weights)
    optimizer = _make_optimizer(config.optimizer, config.lr)
    trained, trace = ae.train(
        model,
        dataset,
        epochs=config.local_epochs,
        optimizer=optimizer,
        batch_size=config.batch_size,
        shuffle_seed=local_shuffle_seed(config, client_id, round_index),
    )
    return ClientUpdate(
        client_id=client_id,
        round_index=round_index,
        n_samples=dataset.shape[0],
        weights=model_weights(trained),
        mean_loss=trace[-1] if trace else None,
    )


@dataclass
class LocalClient:
    """In-process client handle for simulated federations."""

    client_id: str
    dataset: np.ndarray

    def train_round(self, round_index: int, weights: ModelWeights, config: RoundConfig) -> ClientUpdate:
        return client_local_train(weights, self.dataset, config, self.client_id, round_index)


# -- server engine ---------------------------------------------------------

class FederationServer:
    """Transport-agnostic synchronous round engine."""

    def __init__(self, config: RoundConfig):
        self.config = config
        initial = model_weights(ae.build_model(config.model))
        self.state = ServerState(
            round_index=0,
            global_weights=initial,
            strategy=config.strategy,
            server_lr=config.server_lr,
            adaptivity=config.adaptivity,
        )
        self.records: list[RoundRecord] = []

    @property
    def round_index(self) -> int:
        return self.state.round_index

    @property
    def global_weights(self) -> ModelWeights:
        return self.state.global_weights

    def submit_update(self, update: ClientUpdate) -> None:
        if update.round_index != self.state.round_index:
            raise ProtocolError(
                f"update from {update.client_id!r} carries round {update.round_index}, "
                f"server is at round {self.state.round_index}"
            )
        expected = self.config.spec_for(update.client_id)  # unknown ids rejected here
        if update.n_samples != expected.n_samples:
            raise ProtocolError(
                f"client {update.client_id!r} reported n={update.n_samples}, "
                f"roster says n={expected.n_samples}"
            )
        if update.client_id in self.state.pending:
            raise ProtocolError(f"duplicate update from {update.client_id!r}")
        self.state.pending[update.client_id] = update

    def round_complete(self) -> bool:
        return len(self.state.pending) == len(self.config.roster)

    def missing_clients(self) -> list[str]:
        return [s.client_id for s in self.config.roster if s.client_id not in self.state.pending]

    def aggregate_round(self, wall_ms: float = 0.0) -> RoundRecord:
        if not self.round_complete():
            raise RoundAbortError(
                f"round {self.state.round_index} incomplete: missing updates from "
                f"{self.missing_clients()}"
            )
        updates = list(self.state.pending.values())
        if self.config.strategy == FEDADAGRAD:
            new_weights, new_state = fedadagrad_aggregate(self.state, updates)
            self.state = new_state
        else:
            new_weights = fedavg_aggregate(updates)
            self.state.global_weights = new_weights
        losses = [u.mean_loss for u in updates if u.mean_loss is not None]
        record = RoundRecord(
            round_index=self.state.round_index,
            strategy=self.config.strategy,
            mean_client_loss=sum(losses) / len(losses) if losses else None,
            wall_ms=wall_ms,
        )
        self.records.append(record)
        self.state.round_index += 1
        self.state.pending = {}
        return record


def run_federation(
    config: RoundConfig, clients: list[LocalClient]
) -> tuple[ModelWeights, list[RoundRecord]]:
    """Drive all rounds in process; clients are called in roster order."""
    by_id = {c.client_id: c for c in clients}
    missing = [s.client_id for s in config.roster if s.client_id not in by_id]
    if missing:
        raise RoundAbortError(f"roster clients without handles: {missing}")
    server = FederationServer(config)
    for _ in range(config.rounds):
        started = time.perf_counter()
        broadcast = server.global_weights
        for spec in config.roster:
            try:
                update = by_id[spec.client_id].train_round(server.round_index, broadcast, config)
            except Exception as exc:
                raise RoundAbortError(
                    f"round {server.round_index}: client {spec.client_id!r} failed: {exc}"
                ) from exc
            server.submit_update(update)
        server.aggregate_round(wall_ms=(time.perf_counter() - started) * 1000.0)
    return server.global_weights, server.records


def write_round_log(records: list[RoundRecord], path) -> None:
    """Line-delimited records: {round, strategy, mean_client_loss, wall_ms}."""
    import json

    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "round": r.round_index,
                        "strategy": r.strategy,
                        "mean_client_loss": r.mean_client_loss,
                        "wall_ms": r.wall_ms,
                    }
                )
                + "\n"
            )
