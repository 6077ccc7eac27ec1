"""Carrying frames: an in-memory simulated network driven by a virtual clock,
and real TCP stream sockets using the identical frame format."""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import socket
import socketserver
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Callable, Optional

from . import messages as m
from .errors import BadValue, DecodeError, MalformedXml, TransportError

log = logging.getLogger(__name__)


class Scenario(enum.Enum):
    USER_MANAGED = "UserManaged"
    EDGE_MANAGED = "EdgeManaged"
    CLOUD_MANAGED = "CloudManaged"

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        key = text.strip().lower().replace("-", "").replace("_", "")
        for member in cls if key else ():
            if member.value.lower() == key or member.value.lower().startswith(key):
                return member
        raise BadValue(f"unknown scenario {text!r}")


@dataclass(frozen=True)
class LatencyProfile:
    """Delays charged by the simulated network, in milliseconds.

    ``connect_ms`` is the requester-side connection cost and is charged once
    per session; ``owner_connect_ms`` is the same event timed from the owner's
    side and only appears in owner-perspective milestones.
    """

    scenario: Scenario
    connect_ms: float = 0.0
    per_message_ms: float = 0.0
    service_discovery_ms: float = 0.0
    owner_connect_ms: float = 0.0

    def __post_init__(self):
        for name in ("connect_ms", "per_message_ms", "service_discovery_ms", "owner_connect_ms"):
            if getattr(self, name) < 0:
                raise BadValue(f"{name} must be >= 0")

    @classmethod
    def default(cls, scenario: Scenario) -> "LatencyProfile":
        return DEFAULT_PROFILES[scenario]

    @classmethod
    def zero(cls, scenario: Scenario = Scenario.EDGE_MANAGED) -> "LatencyProfile":
        return cls(scenario)


DEFAULT_PROFILES = {
    # BLE: ~800 ms to connect, ~600 ms interrogating services, ~30 ms per message
    Scenario.USER_MANAGED: LatencyProfile(Scenario.USER_MANAGED, 800.0, 30.0, 600.0, 400.0),
    # LAN server: no connect phase
    Scenario.EDGE_MANAGED: LatencyProfile(Scenario.EDGE_MANAGED, 0.0, 125.0, 0.0, 0.0),
    # routed through the Internet: twice the edge latency
    Scenario.CLOUD_MANAGED: LatencyProfile(Scenario.CLOUD_MANAGED, 0.0, 250.0, 0.0, 0.0),
}


def profile_from_element(el: ET.Element) -> LatencyProfile:
    scenario = Scenario.parse(el.get("scenario", "EdgeManaged"))
    base = DEFAULT_PROFILES[scenario]

    def ms(attr: str, default: float) -> float:
        raw = el.get(attr)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise BadValue(f"{attr} must be a number, got {raw!r}") from None

    return LatencyProfile(
        scenario,
        ms("connect-ms", base.connect_ms),
        ms("per-message-ms", base.per_message_ms),
        ms("service-discovery-ms", base.service_discovery_ms),
        ms("owner-connect-ms", base.owner_connect_ms),
    )


def load_profile(spec: str) -> LatencyProfile:
    """Resolve a scenario name (``user``, ``edge``, ``cloud``...) or a file
    containing a ``<profile>`` element."""
    try:
        return DEFAULT_PROFILES[Scenario.parse(spec)]
    except BadValue:
        pass
    try:
        with open(spec, encoding="utf-8") as fh:
            root = ET.fromstring(fh.read())
    except OSError as exc:
        raise BadValue(f"unknown profile {spec!r}: {exc}") from exc
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    el = root if root.tag == "profile" else root.find(".//profile")
    if el is None:
        raise BadValue(f"no <profile> element in {spec}")
    return profile_from_element(el)


@dataclass(frozen=True)
class Milestone:
    label: str
    elapsed_ms: float


class MilestoneLog:
    """Ordered milestones with unique labels and non-decreasing times."""

    def __init__(self):
        self._items: list[Milestone] = []
        self._labels: set[str] = set()

    def record(self, label: str, elapsed_ms: float) -> Milestone:
        if label in self._labels:
            raise ValueError(f"milestone {label!r} recorded twice")
        if self._items and elapsed_ms < self._items[-1].elapsed_ms:
            raise ValueError(f"milestone {label!r} goes back in time")
        ms = Milestone(label, elapsed_ms)
        self._items.append(ms)
        self._labels.add(label)
        return ms

    def __contains__(self, label: str) -> bool:
        return label in self._labels

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def get(self, label: str) -> Optional[float]:
        for ms in self._items:
            if ms.label == label:
                return ms.elapsed_ms
        return None

    def as_list(self) -> list[Milestone]:
        return list(self._items)


# --- simulation --------------------------------------------------------------

class VirtualClock:
    def __init__(self, start_ms: float = 0.0):
        self.now_ms = start_ms

    def advance_to(self, t_ms: float) -> None:
        if t_ms < self.now_ms:
            raise ValueError("virtual clock cannot run backwards")
        self.now_ms = t_ms


class Scheduler:
    """Single serialized event loop over a virtual clock.

    Events with equal timestamps run in scheduling order.
    """

    def __init__(self, clock: Optional[VirtualClock] = None):
        self.clock = clock or VirtualClock()
        self._heap: list = []
        self._seq = itertools.count()

    def call_at(self, t_ms: float, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (t_ms, next(self._seq), fn, args))

    def call_later(self, delay_ms: float, fn: Callable, *args) -> None:
        self.call_at(self.clock.now_ms + delay_ms, fn, *args)

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until_ms: Optional[float] = None) -> None:
        while self._heap:
            t, _, fn, args = self._heap[0]
            if until_ms is not None and t > until_ms:
                break
            heapq.heappop(self._heap)
            self.clock.advance_to(t)
            fn(*args)


class SimEndpoint:
    """One side of a simulated link. Incoming messages go to ``on_message``;
    undecodable frames go to ``on_error``."""

    def __init__(self, channel: "SimChannel", role: str):
        self.channel = channel
        self.role = role
        self.peer: Optional[SimEndpoint] = None
        self.on_message: Callable[[m.Message], None] = lambda msg: None
        self.on_error: Callable[[DecodeError], None] = lambda exc: None
        self.closed = False

    @property
    def now_ms(self) -> float:
        return self.channel.scheduler.clock.now_ms

    def send(self, msg: m.Message) -> None:
        self.send_frame(m.encode(msg), msg)

    def send_frame(self, frame: bytes, msg: Optional[m.Message] = None) -> None:
        if self.closed:
            raise TransportError(f"{self.role} endpoint is closed")
        delay = self.channel.charge(self.role, msg)
        self.channel.scheduler.call_later(delay, self.peer._deliver, bytes(frame))

    def _deliver(self, frame: bytes) -> None:
        if self.closed:
            return
        try:
            msg = m.decode(frame)
        except DecodeError as exc:
            self.on_error(exc)
            return
        self.on_message(msg)

    def close(self) -> None:
        self.closed = True


class SimChannel:
    """Lossless, ordered link charging a latency profile.

    Every frame costs ``per_message_ms`` of latency; frames sent back to back
    are in flight together. The connect cost is added to the first frame of
    the session, and in the user-managed scenario the service-discovery cost
    is added to the owner's first proposal (calling a service on the user's
    device requires interrogating it first).
    """

    def __init__(self, profile: LatencyProfile, scheduler: Optional[Scheduler] = None):
        self.profile = profile
        self.scheduler = scheduler or Scheduler()
        self._connected = False
        self._discovered = False
        self._last_arrival = {"requester": 0.0, "owner": 0.0}

    def charge(self, sender: str, msg: Optional[m.Message]) -> float:
        p = self.profile
        delay = p.per_message_ms
        if not self._connected:
            delay += p.connect_ms
            self._connected = True
        if (
            p.scenario is Scenario.USER_MANAGED
            and sender == "owner"
            and isinstance(msg, m.Proposal)
            and not self._discovered
        ):
            delay += p.service_discovery_ms
            self._discovered = True
        # stream semantics: a frame never overtakes an earlier one
        now = self.scheduler.clock.now_ms
        arrival = max(now + delay, self._last_arrival[sender])
        self._last_arrival[sender] = arrival
        return arrival - now


def sim_channel(profile: LatencyProfile, scheduler: Optional[Scheduler] = None) -> tuple[SimEndpoint, SimEndpoint]:
    """Return a connected (requester, owner) endpoint pair."""
    channel = SimChannel(profile, scheduler)
    a = SimEndpoint(channel, "requester")
    b = SimEndpoint(channel, "owner")
    a.peer, b.peer = b, a
    return a, b


# --- sockets -----------------------------------------------------------------

def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise BadValue(f"address must be host:port, got {address!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


class TcpEndpoint:
    """Frame-level wrapper around a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._rfile = sock.makefile("rb")
        self._send_lock = threading.Lock()
        self.closed = False

    def send(self, msg: m.Message) -> None:
        self.send_frame(m.encode(msg))

    def send_many(self, msgs) -> None:
        """Write several messages with a single socket write."""
        frames = b"".join(m.encode(msg) for msg in msgs)
        if frames:
            self.send_frame(frames)

    def send_frame(self, frame: bytes) -> None:
        try:
            with self._send_lock:
                self.sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        try:
            data = self._rfile.read(n)
        except socket.timeout as exc:
            raise TransportError("receive timed out") from exc
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        return data or b""

    def recv(self, timeout: Optional[float] = None) -> Optional[m.Message]:
        """Read one message; None on clean end of stream.

        Raises DecodeError for a bad frame after consuming it, so the stream
        stays aligned.
        """
        self.sock.settimeout(timeout)
        header = self._read_exact(m.HEADER_SIZE)
        if not header:
            return None
        if len(header) < m.HEADER_SIZE:
            raise DecodeError("TruncatedFrame", "stream ended inside a header")
        length = int.from_bytes(header[:4], "big")
        if length > m.MAX_PAYLOAD:
            raise DecodeError("MalformedPayload", f"payload length {length} exceeds limit")
        payload = self._read_exact(length) if length else b""
        if len(payload) < length:
            raise DecodeError("TruncatedFrame", "stream ended inside a payload")
        return m.decode(header + payload)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def tcp_connect(address: str, timeout: float = 5.0) -> TcpEndpoint:
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {address}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpEndpoint(sock)


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 128


class TcpListener:
    """Accepts connections and runs ``handler(endpoint)`` for each one in its
    own thread. Use as a context manager or call ``close()``."""

    def __init__(self, address: str, handler: Callable[[TcpEndpoint], None]):
        host, port = parse_address(address)

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self):
                self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                endpoint = TcpEndpoint(self.request)
                try:
                    handler(endpoint)
                except Exception:
                    log.exception("session handler failed")
                finally:
                    endpoint.close()

        try:
            self._server = _Server((host, port), _Handler)
        except OSError as exc:
            raise TransportError(f"cannot listen on {address}: {exc}") from exc
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                                         daemon=True)
        self._thread.start()

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def tcp_listen(address: str, handler: Callable[[TcpEndpoint], None]) -> TcpListener:
    return TcpListener(address, handler)


def wall_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0
