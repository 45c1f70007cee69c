"""Two interchangeable transports for the federation protocol.

Frames are self-delimiting: a big-endian u32 byte count followed by the
message type, round number, client id, and an optional binary body
(serialized weights).  The in-process simulation routes the same frame
sequence through memory, so for any configuration and seed the two
transports yield identical final weights and identical transcripts.

Join order is not part of the protocol: joins are logged at the round
barrier in roster order so transcripts are arrival-order independent.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import autoencoder as ae
from . import federation as fed
from .errors import DecodeError, ProtocolError, RoundAbortError


class MessageType(enum.IntEnum):
    JOIN = 1
    GLOBAL_WEIGHTS = 2
    LOCAL_UPDATE = 3
    ROUND_DONE = 4
    ABORT = 5


_WEIGHT_BEARING = (MessageType.GLOBAL_WEIGHTS, MessageType.LOCAL_UPDATE)
_PREFIX = struct.Struct(">I")
_HEAD = struct.Struct(">BIH")  # type, round, id length


@dataclass(frozen=True)
class Message:
    type: MessageType
    round_index: int
    client_id: str
    body: bytes = b""

    def __post_init__(self):
        if self.type in _WEIGHT_BEARING:
            if not self.body:
                raise ProtocolError(f"{self.type.name} message requires a weights body")
        elif self.body:
            raise ProtocolError(f"{self.type.name} message must not carry a body")


def encode_message(message: Message) -> bytes:
    ident = message.client_id.encode("utf-8")
    inner = _HEAD.pack(int(message.type), message.round_index, len(ident)) + ident + message.body
    return _PREFIX.pack(len(inner)) + inner


def decode_message(data: bytes) -> Message:
    """Decode one complete frame; the byte count must match exactly."""
    if len(data) < _PREFIX.size:
        raise DecodeError(f"frame truncated: {len(data)} bytes, need length prefix")
    (length,) = _PREFIX.unpack_from(data)
    if len(data) - _PREFIX.size != length:
        raise DecodeError(
            f"frame length mismatch: prefix declares {length}, got {len(data) - _PREFIX.size}"
        )
    if length < _HEAD.size:
        raise DecodeError(f"frame too short for header: {length} bytes")
    type_code, round_index, id_len = _HEAD.unpack_from(data, _PREFIX.size)
    try:
        msg_type = MessageType(type_code)
    except ValueError:
        raise DecodeError(f"unknown message type {type_code}") from None
    offset = _PREFIX.size + _HEAD.size
    if length < _HEAD.size + id_len:
        raise DecodeError("frame truncated inside client id")
    ident = data[offset : offset + id_len].decode("utf-8")
    body = data[offset + id_len :]
    return Message(type=msg_type, round_index=round_index, client_id=ident, body=body)


def decode_stream(data: bytes) -> list[Message]:
    """Split concatenated frames back into the original message sequence."""
    messages = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < _PREFIX.size:
            raise DecodeError("trailing bytes shorter than a length prefix")
        (length,) = _PREFIX.unpack_from(data, offset)
        end = offset + _PREFIX.size + length
        if end > len(data):
            raise DecodeError(f"frame declares {length} bytes but stream ends early")
        messages.append(decode_message(data[offset:end]))
        offset = end
    return messages


@dataclass(frozen=True)
class TranscriptEntry:
    src: str
    dst: str
    message: Message


@dataclass(frozen=True)
class FaultPlan:
    """Update-loss injection for the simulated transport."""

    drop: frozenset = frozenset()  # {(client_id, round_index)}
    delay: frozenset = frozenset()  # delivered last within the round

    def drops(self, client_id: str, round_index: int) -> bool:
        return (client_id, round_index) in self.drop

    def delays(self, client_id: str, round_index: int) -> bool:
        return (client_id, round_index) in self.delay


@dataclass
class FederationResult:
    final_weights: fed.ModelWeights | None
    records: list[fed.RoundRecord]
    transcript: list[TranscriptEntry]
    aborted_round: int | None = None

    @property
    def aborted(self) -> bool:
        return self.aborted_round is not None


def _client_step(config: fed.RoundConfig, client_id: str, dataset, incoming: Message) -> Message:
    """Shared client logic: decode broadcast weights, train, frame the update."""
    weights = fed.deserialize_weights(incoming.body, expected_layout_id=ae.layout_id(config.model))
    update = fed.client_local_train(weights, dataset, config, client_id, incoming.round_index)
    return Message(
        type=MessageType.LOCAL_UPDATE,
        round_index=incoming.round_index,
        client_id=client_id,
        body=fed.serialize_weights(update.weights),
    )


def simulate_network(
    config: fed.RoundConfig,
    datasets: dict[str, np.ndarray],
    fault_plan: FaultPlan | None = None,
) -> FederationResult:
    """Run the full protocol through in-memory queues.

    The message sequence (and therefore the transcript) matches the wire
    transport exactly; weight bodies make the same serialize/deserialize
    round trips, so quantization is identical too.
    """
    fault_plan = fault_plan or FaultPlan()
    missing = [s.client_id for s in config.roster if s.client_id not in datasets]
    if missing:
        raise RoundAbortError(f"no dataset for roster clients: {missing}")

    server = fed.FederationServer(config)
    transcript: list[TranscriptEntry] = []

    for spec in config.roster:
        transcript.append(
            TranscriptEntry(spec.client_id, "server", Message(MessageType.JOIN, 0, spec.client_id))
        )

    for _ in range(config.rounds):
        r = server.round_index
        started = time.perf_counter()
        broadcast_body = fed.serialize_weights(server.global_weights)
        inbox: list[tuple[fed.ClientSpec, Message]] = []
        for spec in config.roster:
            msg = Message(MessageType.GLOBAL_WEIGHTS, r, spec.client_id, broadcast_body)
            transcript.append(TranscriptEntry("server", spec.client_id, msg))
            inbox.append((spec, msg))

        prompt = [pair for pair in inbox if not fault_plan.delays(pair[0].client_id, r)]
        late = [pair for pair in inbox if fault_plan.delays(pair[0].client_id, r)]
        for spec, incoming in prompt + late:
            if fault_plan.drops(spec.client_id, r):
                continue
            reply = _client_step(config, spec.client_id, datasets[spec.client_id], incoming)
            transcript.append(TranscriptEntry(spec.client_id, "server", reply))
            server.submit_update(
                fed.ClientUpdate(
                    client_id=spec.client_id,
                    round_index=r,
                    n_samples=spec.n_samples,
                    weights=fed.deserialize_weights(reply.body),
                )
            )

        if not server.round_complete():
            for spec in config.roster:
                msg = Message(MessageType.ABORT, r, spec.client_id)
                transcript.append(TranscriptEntry("server", spec.client_id, msg))
            return FederationResult(None, server.records, transcript, aborted_round=r)
        server.aggregate_round(wall_ms=(time.perf_counter() - started) * 1000.0)

    for spec in config.roster:
        msg = Message(MessageType.ROUND_DONE, config.rounds, spec.client_id)
        transcript.append(TranscriptEntry("server", spec.client_id, msg))
    return FederationResult(server.global_weights, server.records, transcript)


# -- wire transport ---------------------------------------------------------

def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise DecodeError(f"connection closed mid-frame ({remaining} bytes missing)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Message:
    prefix = _recv_exact(sock, _PREFIX.size)
    (length,) = _PREFIX.unpack(prefix)
    return decode_message(prefix + _recv_exact(sock, length))


def send_frame(sock: socket.socket, message: Message) -> None:
    sock.sendall(encode_message(message))


class WireServer:
    """Federation server over TCP.

    Connection readers run concurrently and feed per-client queues; the
    round loop drains those queues in roster order, which keeps the
    transcript and aggregation independent of arrival order.
    """

    def __init__(self, config: fed.RoundConfig, host: str = "127.0.0.1", port: int = 0,
                 timeout: float = 60.0):
        self.config = config
        self.timeout = timeout
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(timeout)
        self.host, self.port = self._listener.getsockname()[:2]
        self._conns: dict[str, socket.socket] = {}
        self._queues: dict[str, queue.Queue] = {}
        self._readers: list[threading.Thread] = []

    def _reader(self, client_id: str, conn: socket.socket) -> None:
        q = self._queues[client_id]
        while True:
            try:
                q.put(read_frame(conn))
            except (DecodeError, OSError):
                q.put(None)  # reader done: EOF, garbage, or closed socket
                return

    def _await_joins(self, transcript: list[TranscriptEntry]) -> None:
        expected = {s.client_id for s in self.config.roster}
        deadline = time.monotonic() + self.timeout
        while set(self._conns) != expected:
            if time.monotonic() > deadline:
                raise RoundAbortError(
                    f"timed out waiting for joins; missing {sorted(expected - set(self._conns))}"
                )
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            conn.settimeout(self.timeout)
            try:
                hello = read_frame(conn)
            except DecodeError:
                conn.close()
                continue
            if hello.type != MessageType.JOIN or hello.client_id not in expected or hello.client_id in self._conns:
                try:
                    send_frame(conn, Message(MessageType.ABORT, 0, hello.client_id))
                finally:
                    conn.close()
                continue
            self._conns[hello.client_id] = conn
        for spec in self.config.roster:
            transcript.append(
                TranscriptEntry(spec.client_id, "server", Message(MessageType.JOIN, 0, spec.client_id))
            )
            self._queues[spec.client_id] = queue.Queue()
            thread = threading.Thread(
                target=self._reader, args=(spec.client_id, self._conns[spec.client_id]), daemon=True
            )
            thread.start()
            self._readers.append(thread)

    def _broadcast(self, message_for, transcript) -> None:
        for spec in self.config.roster:
            msg = message_for(spec.client_id)
            transcript.append(TranscriptEntry("server", spec.client_id, msg))
            try:
                send_frame(self._conns[spec.client_id], msg)
            except OSError:
                pass  # a vanished client surfaces at collection time

    def _close_all(self) -> None:
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self._listener.close()

    def run(self) -> FederationResult:
        server = fed.FederationServer(self.config)
        transcript: list[TranscriptEntry] = []
        try:
            self._await_joins(transcript)
            for _ in range(self.config.rounds):
                r = server.round_index
                started = time.perf_counter()
                body = fed.serialize_weights(server.global_weights)
                self._broadcast(lambda cid: Message(MessageType.GLOBAL_WEIGHTS, r, cid, body), transcript)
                try:
                    for spec in self.config.roster:
                        try:
                            frame = self._queues[spec.client_id].get(timeout=self.timeout)
                        except queue.Empty:
                            frame = None
                        if frame is None or frame.type != MessageType.LOCAL_UPDATE or frame.round_index != r:
                            raise RoundAbortError(
                                f"round {r}: no update from {spec.client_id!r} "
                                f"(got {frame.type.name if frame else 'nothing'})"
                            )
                        transcript.append(TranscriptEntry(spec.client_id, "server", frame))
                        server.submit_update(
                            fed.ClientUpdate(
                                client_id=spec.client_id,
                                round_index=r,
                                n_samples=spec.n_samples,
                                weights=fed.deserialize_weights(frame.body),
                            )
                        )
                except RoundAbortError:
                    self._broadcast(lambda cid: Message(MessageType.ABORT, r, cid), transcript)
                    return FederationResult(None, server.records, transcript, aborted_round=r)
                server.aggregate_round(wall_ms=(time.perf_counter() - started) * 1000.0)
            self._broadcast(
                lambda cid: Message(MessageType.ROUND_DONE, self.config.rounds, cid), transcript
            )
            return FederationResult(server.global_weights, server.records, transcript)
        finally:
            self._close_all()


def run_wire_client(
    host: str,
    port: int,
    client_id: str,
    dataset: np.ndarray,
    config: fed.RoundConfig,
    timeout: float = 60.0,
) -> None:
    """Connect, join, and answer weight broadcasts until the server finishes."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.settimeout(timeout)
        send_frame(sock, Message(MessageType.JOIN, 0, client_id))
        while True:
            frame = read_frame(sock)
            if frame.type == MessageType.GLOBAL_WEIGHTS:
                send_frame(sock, _client_step(config, client_id, dataset, frame))
            elif frame.type == MessageType.ROUND_DONE:
                return
            elif frame.type == MessageType.ABORT:
                raise RoundAbortError(f"server aborted at round {frame.round_index}")
            else:
                raise ProtocolError(f"unexpected {frame.type.name} message from server")
