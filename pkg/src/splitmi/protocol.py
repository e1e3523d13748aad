"""Device/server message exchange for split training.

Frame layout (all integers little-endian)::

    magic "PSCI" | version u8 | msg_type u8 | batch_id u32 | ndim u8 | dims u32 * ndim | payload f32 * prod(dims)

Stream transports prefix every frame with its length as a u32.  Per training
batch exactly four tensor frames cross the wire, in this order: ReprUpload,
FeatureDown, FeatGradUpload, ReprGradDown.  Control frames carry UTF-8 JSON
(padded with spaces to a whole number of floats) for the handshake,
evaluation requests and shutdown.
"""

import enum
import hashlib
import json
import math
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, DivergenceError, InputContractError, ProtocolError, SessionAborted
from .model import build_default_architecture, save_checkpoint
from .trainer import BoundaryDefense, DevicePart, ServerPart, run_epochs

MAGIC = b"PSCI"
VERSION = 1
_HEADER = struct.Struct("<4sBBIB")
_LEN = struct.Struct("<I")
MAX_FRAME = 1 << 30


class MsgType(enum.IntEnum):
    ReprUpload = 0
    FeatureDown = 1
    FeatGradUpload = 2
    ReprGradDown = 3
    Control = 4


TENSOR_TYPES = (MsgType.ReprUpload, MsgType.FeatureDown, MsgType.FeatGradUpload, MsgType.ReprGradDown)


@dataclass
class WireMessage:
    msg_type: MsgType
    batch_id: int
    payload: np.ndarray  # float32, any shape with ndim <= 255
    version: int = VERSION

    def __post_init__(self):
        self.msg_type = MsgType(self.msg_type)
        self.payload = np.asarray(self.payload, dtype="<f4", order="C")  # keeps 0-d shapes
        if not 0 <= self.batch_id < 2**32:
            raise ProtocolError(f"{self.batch_id} out of u32 range", field="batch_id")

    def __eq__(self, other):
        return (
            isinstance(other, WireMessage)
            and (self.msg_type, self.batch_id, self.version) == (other.msg_type, other.batch_id, other.version)
            and self.payload.shape == other.payload.shape
            and self.payload.tobytes() == other.payload.tobytes()
        )

    @property
    def tensor(self):
        return torch.from_numpy(self.payload.astype(np.float32))


def encode(m):
    dims = m.payload.shape
    if len(dims) > 255:
        raise ProtocolError("more than 255 dimensions", field="ndim")
    head = _HEADER.pack(MAGIC, m.version, int(m.msg_type), m.batch_id, len(dims))
    return head + struct.pack(f"<{len(dims)}I", *dims) + m.payload.tobytes()


def decode(frame):
    frame = bytes(frame)
    if len(frame) < _HEADER.size:
        raise ProtocolError(f"frame of {len(frame)} bytes is shorter than the header", field="header")
    magic, version, mtype, batch_id, ndim = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", field="magic")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", field="version")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}", field="msg_type") from None
    off = _HEADER.size
    if len(frame) < off + 4 * ndim:
        raise ProtocolError("truncated dimension list", field="dims")
    dims = struct.unpack_from(f"<{ndim}I", frame, off)
    off += 4 * ndim
    n = math.prod(dims)
    if len(frame) != off + 4 * n:
        raise ProtocolError(f"expected {4 * n} payload bytes, got {len(frame) - off}", field="payload")
    payload = np.frombuffer(frame, dtype="<f4", count=n, offset=off).reshape(dims)
    return WireMessage(mtype, batch_id, payload.copy(), version)


def control_message(obj, batch_id=0):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    return WireMessage(MsgType.Control, batch_id, np.frombuffer(raw, dtype="<f4"))


def control_body(m):
    if m.msg_type != MsgType.Control:
        raise ProtocolError(f"expected Control, got {m.msg_type.name}", field="msg_type")
    try:
        return json.loads(m.payload.tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"control payload is not JSON: {exc}", field="payload") from None


def tensor_message(msg_type, batch_id, tensor):
    return WireMessage(msg_type, batch_id, tensor.detach().cpu().numpy())


# -- transports -------------------------------------------------------------------


class TransportClosed(ConnectionError):
    pass


class InProcessTransport:
    """One end of a queue pair; frames are passed as bytes."""

    def __init__(self, inbox, outbox, timeout=60.0):
        self.inbox, self.outbox, self.timeout = inbox, outbox, timeout
        self.closed = False

    @classmethod
    def pair(cls, timeout=60.0):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b, timeout), cls(b, a, timeout)

    def send(self, frame):
        if self.closed:
            raise TransportClosed("transport closed")
        self.outbox.put(bytes(frame))

    def receive(self):
        try:
            frame = self.inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportClosed(f"no frame within {self.timeout}s") from None
        if frame is None:
            raise TransportClosed("peer closed")
        return frame

    def close(self):
        if not self.closed:
            self.closed = True
            self.outbox.put(None)


class SocketTransport:
    """Length-prefixed frames over a connected TCP socket."""

    def __init__(self, sock, timeout=60.0):
        self.sock = sock
        self.sock.settimeout(timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, host="127.0.0.1", port=5477, timeout=60.0):
        return cls(socket.create_connection((host, port), timeout=timeout), timeout)

    def send(self, frame):
        try:
            self.sock.sendall(_LEN.pack(len(frame)) + frame)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def _exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def receive(self):
        (n,) = _LEN.unpack(self._exact(_LEN.size))
        if n > MAX_FRAME:
            raise ProtocolError(f"frame length {n} exceeds limit", field="length")
        return self._exact(n)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class SocketListener:
    """Accepts a single session on ``host:port`` (port 0 picks a free port)."""

    def __init__(self, host="127.0.0.1", port=0, timeout=60.0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(1)
        self.sock.settimeout(timeout)
        self.timeout = timeout
        self.address = self.sock.getsockname()

    def accept(self):
        conn, _ = self.sock.accept()
        self.sock.close()
        return SocketTransport(conn, self.timeout)


@dataclass
class MessageRecord:
    direction: str  # "sent" | "received"
    msg_type: str
    batch_id: int
    nbytes: int
    digest: str


class RecordingTransport:
    """Wraps a transport and logs every frame it carries."""

    def __init__(self, inner):
        self.inner = inner
        self.log = []
        self.frames = []

    def _note(self, direction, frame):
        m = decode(frame)
        self.frames.append((direction, frame))
        digest = hashlib.sha256(frame).hexdigest()[:16]
        self.log.append(MessageRecord(direction, m.msg_type.name, m.batch_id, len(frame), digest))

    def send(self, frame):
        self.inner.send(frame)
        self._note("sent", frame)

    def receive(self):
        frame = self.inner.receive()
        self._note("received", frame)
        return frame

    def close(self):
        self.inner.close()


def _send(transport, m):
    transport.send(encode(m))


def _receive(transport, expected_type, batch_id=None):
    m = decode(transport.receive())
    if m.msg_type != expected_type:
        raise ProtocolError(f"expected {expected_type.name}, got {m.msg_type.name}", field="msg_type")
    if batch_id is not None and m.batch_id != batch_id:
        raise ProtocolError(f"expected batch {batch_id}, got {m.batch_id}", field="batch_id")
    return m


# -- endpoints --------------------------------------------------------------------


class ServerEndpoint:
    """The server's half: builds its encoder from the handshake and answers requests.

    The handshake carries architecture metadata and hyperparameters, never weights.
    """

    def __init__(self, transport, update_hook=None):
        self.transport = transport
        self.update_hook = update_hook
        self.part = None
        self.boundary = None
        self.batches = 0

    @property
    def encoder(self):
        return None if self.part is None else self.part.encoder

    def _handshake(self):
        hello = control_body(_receive(self.transport, MsgType.Control))
        if hello.get("op") != "hello":
            raise ProtocolError(f"expected hello, got {hello.get('op')!r}", field="payload")
        arch = dict(hello["arch"])
        arch["dtype"] = getattr(torch, arch.get("dtype", "float32"))
        model = build_default_architecture(**arch)
        if list(model.repr_shape) != list(hello["repr_shape"]):
            raise ProtocolError(f"representation shape {hello['repr_shape']} does not fit the encoder", field="payload")
        h = hello["training"]
        self.part = ServerPart(
            model.encoder, h["learning_rate"], h["momentum"], self.update_hook, h["lr_schedule"], h["total_steps"]
        )
        from .trainer import BaselineDefenseConfig

        self.boundary = BoundaryDefense(BaselineDefenseConfig(**hello["baseline"]), seed=hello["boundary_seed"])
        _send(self.transport, control_message({"op": "ready", "feature_shape": list(model.feature_shape)}))

    def serve(self):
        """Run one session to completion; returns the number of training batches served."""
        self._handshake()
        while True:
            m = decode(self.transport.receive())
            if m.msg_type == MsgType.Control:
                body = control_body(m)
                if body.get("op") == "end":
                    return self.batches
                if body.get("op") == "infer":
                    r = _receive(self.transport, MsgType.ReprUpload, m.batch_id).tensor
                    _send(self.transport, tensor_message(MsgType.FeatureDown, m.batch_id, self.part.infer(r)))
                    continue
                raise ProtocolError(f"unknown control op {body.get('op')!r}", field="payload")
            if m.msg_type != MsgType.ReprUpload:
                raise ProtocolError(f"unexpected {m.msg_type.name}", field="msg_type")
            bid = m.batch_id
            z = self.part.forward(m.tensor)
            _send(self.transport, tensor_message(MsgType.FeatureDown, bid, z))
            grad_z = _receive(self.transport, MsgType.FeatGradUpload, bid).tensor
            grad_r = self.boundary.on_repr_grad(self.part.backward(grad_z))
            _send(self.transport, tensor_message(MsgType.ReprGradDown, bid, grad_r))
            self.batches += 1


class RemoteLink:
    """Device-side link that reaches the server through a transport.

    Has the same ``step``/``features`` interface as the in-process link, so
    the shared epoch loop drives both.
    """

    def __init__(self, transport, boundary):
        self.transport = transport
        self.boundary = boundary
        self.batch_id = 0
        self._infer_id = 0

    def step(self, device, batch):
        bid = self.batch_id
        r = self.boundary.on_repr(device.upload(batch))
        _send(self.transport, tensor_message(MsgType.ReprUpload, bid, r))
        z = _receive(self.transport, MsgType.FeatureDown, bid).tensor
        grad_z = device.on_feature(z)
        _send(self.transport, tensor_message(MsgType.FeatGradUpload, bid, grad_z))
        grad_r = _receive(self.transport, MsgType.ReprGradDown, bid).tensor
        self.batch_id += 1
        return device.on_repr_grad(grad_r)

    def features(self, r):
        bid = self._infer_id
        self._infer_id += 1
        _send(self.transport, control_message({"op": "infer"}, bid))
        _send(self.transport, tensor_message(MsgType.ReprUpload, bid, self.boundary.on_repr(r)))
        return _receive(self.transport, MsgType.FeatureDown, bid).tensor

    def close(self):
        _send(self.transport, control_message({"op": "end"}))


# -- sessions ---------------------------------------------------------------------


@dataclass
class Session:
    """Everything one networked training run needs on the device side.

    ``transport`` is ``"inprocess"``, ``"socket"`` (loopback server thread) or
    ``"remote"`` (connect to an already running ``protocol-serve``).
    """

    model: object
    dataset: object
    cfg: object
    generator: object = None
    aux_classifier: object = None
    transport: str = "inprocess"
    host: str = "127.0.0.1"
    port: int = 0
    server_hook: object = None
    baseline: object = None
    checkpoint_path: str = None
    timeout: float = 60.0
    messages: list = field(default_factory=list)
    server: object = None

    def hello(self):
        from .trainer import BaselineDefenseConfig

        arch = getattr(self.model, "arch", None)
        if arch is None:
            raise ConfigurationError("model lacks architecture metadata; build it with build_default_architecture")
        cfg = self.cfg
        return {
            "op": "hello",
            "arch": arch,
            "repr_shape": list(self.model.repr_shape),
            "training": {
                "learning_rate": cfg.learning_rate, "momentum": cfg.momentum, "lr_schedule": cfg.lr_schedule,
                "total_steps": cfg.total_steps(len(self.dataset)),
            },
            "baseline": (self.baseline or BaselineDefenseConfig()).to_dict(),
            "boundary_seed": cfg.seed + 104729,
        }


def attach_boundary_defense(session, baseline):
    """Perturb ReprUpload (device side) and ReprGradDown (server side) payloads."""
    session.baseline = baseline.validate()
    return session


def _open(session):
    """Returns (device transport, server thread or None, holder for the server endpoint)."""
    holder = {}

    def serve(t):
        ep = ServerEndpoint(t, session.server_hook)
        holder["endpoint"] = ep
        try:
            ep.serve()
        except Exception as exc:  # surfaced to the device through the closed transport
            holder["error"] = exc
        finally:
            t.close()

    if session.transport == "inprocess":
        dev, srv = InProcessTransport.pair(session.timeout)
        thread = threading.Thread(target=serve, args=(srv,), daemon=True)
    elif session.transport == "socket":
        listener = SocketListener(session.host, session.port, session.timeout)
        thread = threading.Thread(target=lambda: serve(listener.accept()), daemon=True)
        thread.start()
        dev = SocketTransport.connect(*listener.address, timeout=session.timeout)
        return dev, thread, holder
    elif session.transport == "remote":
        return SocketTransport.connect(session.host, session.port, session.timeout), None, holder
    else:
        raise ConfigurationError(f"unknown transport {session.transport!r}")
    thread.start()
    return dev, thread, holder


def _abort_checkpoint(session, device, step):
    path = session.checkpoint_path
    if path is None:
        return None
    parts = {"head": device.head, "classifier": device.classifier}
    if device.generator is not None:
        parts["generator"] = device.generator
        parts["aux_classifier"] = device.aux
    save_checkpoint(path, parts)
    return str(path)


def run_session(session, test=None, evaluate=True):
    """Train over the chosen transport; the result matches the in-process trainer."""
    from .trainer import BaselineDefenseConfig

    cfg = session.cfg.validate()
    if len(session.dataset) == 0:
        raise InputContractError("dataset is empty")
    raw, thread, holder = _open(session)
    transport = RecordingTransport(raw)
    device = DevicePart(
        session.model.head, session.model.classifier, session.dataset, cfg, session.generator, session.aux_classifier
    )
    boundary = BoundaryDefense(session.baseline or BaselineDefenseConfig(), seed=cfg.seed + 104729)
    link = RemoteLink(transport, boundary)
    try:
        _send(transport, control_message(session.hello()))
        ready = control_body(_receive(transport, MsgType.Control))
        if ready.get("op") != "ready" or ready.get("feature_shape") != list(session.model.feature_shape):
            raise ProtocolError(f"server handshake mismatch: {ready}", field="payload")
        trace = run_epochs(device, link, cfg, test, {"defense": cfg.to_dict(), "transport": session.transport}, evaluate)
        link.close()
    except (ConnectionError, TransportClosed) as exc:
        ckpt = _abort_checkpoint(session, device, link.batch_id)
        err = holder.get("error")
        raise SessionAborted(
            f"transport failed at batch {link.batch_id}: {err or exc}", checkpoint=ckpt, step=link.batch_id
        ) from exc
    except (ProtocolError, DivergenceError):
        raw.close()
        raise
    finally:
        session.messages = transport.log
    if thread is not None:
        thread.join(session.timeout)
    raw.close()
    session.server = holder.get("endpoint")
    if "error" in holder:
        raise holder["error"]
    return trace
