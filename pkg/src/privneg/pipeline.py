"""Capture -> store -> filter -> publish pipeline over bounded queues.

Each stage is a worker thread. Stage delays are virtual-time costs carried
on the frames, so timings are reproducible no matter how the threads are
scheduled. In NoPrivacy mode the filter stage is bypassed and the publisher
reads frames straight from the persistent store.
"""

from __future__ import annotations

import csv
import enum
import logging
import os
import queue
import struct
import tempfile
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import BadValue, FilterError, MalformedXml, StoreIoError, UnknownCaptureId, UnknownFilter
from .group import CandidatePolicy
from .transport import Milestone

log = logging.getLogger(__name__)

Region = tuple[int, int, int, int]  # x, y, w, h

_HEADER = struct.Struct(">IIII")  # id, width, height, region count
_REGION = struct.Struct(">IIII")
FILTERS = ("identity", "region-blur", "redact-metadata")


class Mode(enum.Enum):
    NO_PRIVACY = "NoPrivacy"
    PRIVACY_NO_UPDATE = "PrivacyNoUpdate"
    PRIVACY_WITH_UPDATE = "PrivacyWithUpdate"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        key = text.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise BadValue(f"unknown pipeline mode {text!r}")


@dataclass(frozen=True)
class SensorFrame:
    """An 8-bit grayscale raster with tagged sensitive regions."""

    capture_id: int
    width: int
    height: int
    pixels: bytes
    regions: tuple[Region, ...] = ()
    kind: str = "image"
    timestamp: float = field(default=0.0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pixels", bytes(self.pixels))
        object.__setattr__(self, "regions", tuple(tuple(int(v) for v in r) for r in self.regions))
        if len(self.pixels) != self.width * self.height:
            raise BadValue(f"frame {self.capture_id}: {len(self.pixels)} bytes for {self.width}x{self.height}")
        for x, y, w, h in self.regions:
            if x < 0 or y < 0 or w < 1 or h < 1 or x + w > self.width or y + h > self.height:
                raise BadValue(f"frame {self.capture_id}: region {(x, y, w, h)} outside the image")

    @property
    def payload(self) -> bytes:
        return self.pixels

    def array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width)


def synthetic_frames(n: int, seed: int = 0, width: int = 64, height: int = 48,
                     max_regions: int = 3) -> list[SensorFrame]:
    """Random textured frames with up to ``max_regions`` non-overlapping
    "face" regions, each of which is guaranteed not to be flat."""
    rng = np.random.default_rng(seed)
    frames = []
    for cid in range(n):
        img = rng.integers(0, 256, size=(height, width), dtype=np.uint8)
        regions: list[Region] = []
        for _ in range(int(rng.integers(0, max_regions + 1))):
            for _attempt in range(10):
                w = int(rng.integers(2, max(3, width // 3)))
                h = int(rng.integers(2, max(3, height // 3)))
                x = int(rng.integers(0, width - w + 1))
                y = int(rng.integers(0, height - h + 1))
                if all(x + w <= rx or rx + rw <= x or y + h <= ry or ry + rh <= y for rx, ry, rw, rh in regions):
                    regions.append((x, y, w, h))
                    break
        for x, y, w, h in regions:
            block = img[y:y + h, x:x + w]
            if block.min() == block.max():
                block[0, 0] ^= 0xFF
        frames.append(SensorFrame(cid, width, height, img.tobytes(), tuple(regions)))
    return frames


def _mean_fill(arr: np.ndarray, region: Region) -> None:
    x, y, w, h = region
    block = arr[y:y + h, x:x + w]
    n = block.size
    total = int(block.sum(dtype=np.int64))
    block[...] = (2 * total + n) // (2 * n)  # mean, rounded half up


def apply_filter(frame: SensorFrame, filter: str, policy: Optional[CandidatePolicy] = None) -> SensorFrame:
    """Apply a privacy filter.

    ``region-blur`` fills each tagged region, in order, with its mean value;
    ``redact-metadata`` drops the region tags and the timestamp.
    """
    if filter == "identity":
        return frame
    if filter == "region-blur":
        if not frame.regions:
            return frame
        arr = frame.array().copy()
        for region in frame.regions:
            _mean_fill(arr, region)
        return replace(frame, pixels=arr.tobytes())
    if filter == "redact-metadata":
        return replace(frame, regions=(), timestamp=0.0)
    raise UnknownFilter(f"unknown filter {filter!r}; expected one of {', '.join(FILTERS)}")


# --- persistent store ----------------------------------------------------------

def frame_to_bytes(frame: SensorFrame) -> bytes:
    head = _HEADER.pack(frame.capture_id, frame.width, frame.height, len(frame.regions))
    regions = b"".join(_REGION.pack(*r) for r in frame.regions)
    return head + regions + frame.pixels


def frame_from_bytes(data: bytes) -> SensorFrame:
    if len(data) < _HEADER.size:
        raise StoreIoError("record shorter than its header")
    cid, width, height, count = _HEADER.unpack_from(data)
    off = _HEADER.size
    regions = []
    for _ in range(count):
        regions.append(_REGION.unpack_from(data, off))
        off += _REGION.size
    pixels = data[off:]
    if len(pixels) != width * height:
        raise StoreIoError(f"record {cid}: expected {width * height} pixel bytes, found {len(pixels)}")
    return SensorFrame(cid, width, height, pixels, tuple(regions))


class FrameStore:
    """Append-only directory of ``<capture_id>.bin`` records plus ``run.log``."""

    def __init__(self, root, fsync: bool = False):
        self.root = Path(root)
        self.fsync = fsync
        self._lock = threading.Lock()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreIoError(f"cannot create store {self.root}: {exc}") from exc
        self.log_path = self.root / "run.log"

    def path(self, capture_id: int) -> Path:
        return self.root / f"{capture_id}.bin"

    def persist(self, frame: SensorFrame) -> Path:
        target = self.path(frame.capture_id)
        with self._lock:
            if target.exists():
                raise StoreIoError(f"capture {frame.capture_id} already persisted")
            tmp = target.with_suffix(".tmp")
            try:
                with open(tmp, "wb") as fh:
                    fh.write(frame_to_bytes(frame))
                    if self.fsync:
                        fh.flush()
                        os.fsync(fh.fileno())
                os.replace(tmp, target)
                with open(self.log_path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(f"{frame.capture_id}\n")
            except OSError as exc:
                raise StoreIoError(f"cannot persist capture {frame.capture_id}: {exc}") from exc
        return target

    def load(self, capture_id: int) -> SensorFrame:
        try:
            data = self.path(capture_id).read_bytes()
        except FileNotFoundError:
            raise UnknownCaptureId(capture_id) from None
        except OSError as exc:
            raise StoreIoError(f"cannot read capture {capture_id}: {exc}") from exc
        return frame_from_bytes(data)

    def ids(self) -> list[int]:
        if not self.log_path.exists():
            return []
        return [int(line) for line in self.log_path.read_text().split()]


# --- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class StageDelays:
    """Virtual cost of each step in milliseconds.

    Defaults reproduce the edge deployment: a 2.2 s camera read, a 100 ms
    queue hop, 145 ms for the filter stage to fetch and negotiate, and about
    95 ms more when the blur is applied.
    """

    capture: float = 2200.0
    store: float = 0.0
    filter_negotiate: float = 145.0
    filter_apply: float = 95.0
    queue_hop: float = 100.0
    publish: float = 0.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise BadValue(f"stage delay {name} must be >= 0")


def load_delays(path) -> StageDelays:
    """Read ``<delays capture="2200" queue-hop="100" .../>``; missing attributes keep defaults."""
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    except OSError as exc:
        raise BadValue(f"cannot read delays file {path}: {exc}") from exc
    el = root if root.tag == "delays" else root.find(".//delays")
    if el is None:
        raise BadValue(f"no <delays> element in {path}")
    values = {}
    for name in StageDelays.__dataclass_fields__:
        raw = el.get(name.replace("_", "-"))
        if raw is not None:
            try:
                values[name] = float(raw)
            except ValueError:
                raise BadValue(f"delay {name} must be a number, got {raw!r}") from None
    return StageDelays(**values)


@dataclass(frozen=True)
class PipelineConfig:
    mode: Mode = Mode.NO_PRIVACY
    delays: StageDelays = StageDelays()
    queue_capacity: int = 8
    filter: Optional[str] = None
    # "virtual" charges delays on the frames; "wall" sleeps them, scaled
    clock: str = "virtual"
    time_scale: float = 1.0

    def __post_init__(self):
        if self.queue_capacity < 1:
            raise BadValue("queue capacity must be >= 1")
        if self.clock not in ("virtual", "wall"):
            raise BadValue(f"clock must be virtual or wall, got {self.clock!r}")
        if self.filter is not None and self.filter not in FILTERS:
            raise UnknownFilter(f"unknown filter {self.filter!r}")

    @property
    def effective_filter(self) -> str:
        if self.filter is not None:
            return self.filter
        return "region-blur" if self.mode is Mode.PRIVACY_WITH_UPDATE else "identity"


@dataclass
class PublishRecord:
    capture_id: int
    payload: bytes
    frame: SensorFrame
    applied_policy: Optional[CandidatePolicy]
    milestones: list[Milestone]

    @property
    def total_ms(self) -> float:
        return self.milestones[-1].elapsed_ms


# --- stages --------------------------------------------------------------------

_STOP = object()


@dataclass
class _Item:
    capture_id: int
    t: float  # virtual time the item is available to the next stage
    start: float  # virtual capture start
    frame: Optional[SensorFrame] = None
    milestones: list[Milestone] = field(default_factory=list)

    def mark(self, label: str) -> None:
        self.milestones.append(Milestone(label, self.t - self.start))


class _Stage(threading.Thread):
    def __init__(self, name: str, inbox: "queue.Queue", outbox: Optional["queue.Queue"], run: "_Run"):
        super().__init__(name=name, daemon=True)
        self.inbox = inbox
        self.outbox = outbox
        self.run_ctx = run
        self.free_at = 0.0

    def busy(self, item: _Item, cost: float) -> None:
        """Occupy this stage for ``cost`` ms starting when both are ready."""
        start = max(item.t, self.free_at)
        item.t = start + cost
        self.free_at = item.t
        self.run_ctx.sleep(cost)

    def forward(self, item: _Item) -> None:
        item.t += self.run_ctx.config.delays.queue_hop
        self.run_ctx.sleep(self.run_ctx.config.delays.queue_hop)
        self.outbox.put(item)

    def process(self, item: _Item) -> None:
        raise NotImplementedError

    def run(self) -> None:
        failed = False
        while True:
            item = self.inbox.get()
            if item is _STOP:
                break
            if failed:
                continue  # drain so upstream never blocks on a full queue
            try:
                self.process(item)
            except BaseException as exc:  # surfaced by run_pipeline
                self.run_ctx.fail(exc)
                failed = True
        if self.outbox is not None:
            self.outbox.put(_STOP)


class _Run:
    def __init__(self, config: PipelineConfig, store: FrameStore, out_store: Optional[FrameStore],
                 policy: Optional[CandidatePolicy]):
        self.config = config
        self.store = store
        self.out_store = out_store
        self.policy = policy
        self.events: list[tuple[str, int]] = []
        self.published: list[PublishRecord] = []
        self.errors: list[BaseException] = []
        self._lock = threading.Lock()

    def event(self, kind: str, cid: int) -> None:
        with self._lock:
            self.events.append((kind, cid))

    def fail(self, exc: BaseException) -> None:
        with self._lock:
            self.errors.append(exc)

    def sleep(self, ms: float) -> None:
        if self.config.clock == "wall" and ms > 0:
            time.sleep(ms * self.config.time_scale / 1000.0)


class _Capture(_Stage):
    def __init__(self, source: Iterable[SensorFrame], outbox, run):
        super().__init__("capture", queue.Queue(), outbox, run)
        self.source = source

    def run(self) -> None:
        try:
            for frame in self.source:
                item = _Item(frame.capture_id, self.free_at, self.free_at, frame)
                self.busy(item, self.run_ctx.config.delays.capture)
                item.frame = replace(frame, timestamp=item.t)
                item.mark("captured")
                self.forward(item)
        except BaseException as exc:
            self.run_ctx.fail(exc)
        finally:
            self.outbox.put(_STOP)


class _Store(_Stage):
    def process(self, item: _Item) -> None:
        self.busy(item, self.run_ctx.config.delays.store)
        self.run_ctx.store.persist(item.frame)
        self.run_ctx.event("persisted", item.capture_id)
        if self.run_ctx.config.mode is not Mode.NO_PRIVACY:
            item.mark("stored")
        # downstream stages read the frame back from the store
        item.frame = None
        self.run_ctx.event("forwarded", item.capture_id)
        self.outbox.put(item)


class _Filter(_Stage):
    def process(self, item: _Item) -> None:
        cfg = self.run_ctx.config
        frame = self.run_ctx.store.load(item.capture_id)
        cost = cfg.delays.filter_negotiate
        name = cfg.effective_filter
        if name != "identity":
            cost += cfg.delays.filter_apply
        self.busy(item, cost)
        try:
            item.frame = apply_filter(frame, name, self.run_ctx.policy)
        except UnknownFilter:
            raise
        except Exception as exc:
            raise FilterError(f"filter {name} failed on capture {item.capture_id}: {exc}") from exc
        item.mark("filtered")
        self.forward(item)


class _Publish(_Stage):
    def process(self, item: _Item) -> None:
        frame = item.frame if item.frame is not None else self.run_ctx.store.load(item.capture_id)
        self.busy(item, self.run_ctx.config.delays.publish)
        if self.run_ctx.out_store is not None:
            self.run_ctx.out_store.persist(frame)
        item.mark("published")
        applied = self.run_ctx.policy if self.run_ctx.config.mode is not Mode.NO_PRIVACY else None
        self.run_ctx.published.append(PublishRecord(item.capture_id, frame.pixels, frame, applied, item.milestones))


def run_pipeline(
    config: PipelineConfig,
    source: Iterable[SensorFrame],
    group_result: Optional[CandidatePolicy] = None,
    store_dir=None,
    out_dir=None,
    events: Optional[list] = None,
) -> list[PublishRecord]:
    """Push every frame of ``source`` through the pipeline; return publish
    records in capture order.

    ``store_dir`` holds the persistent store (a temporary directory when
    omitted); published frames are also written under ``out_dir`` when given.
    If ``events`` is a list, the store's ("persisted" | "forwarded", id)
    sequence is appended to it.
    """
    if config.mode is not Mode.NO_PRIVACY and group_result is None:
        raise BadValue(f"{config.mode.value} needs a negotiated group policy")
    tmp = None
    if store_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="privneg-store-")
        store_dir = tmp.name
    try:
        run = _Run(config, FrameStore(store_dir), FrameStore(out_dir) if out_dir else None, group_result)
        cap = config.queue_capacity
        q_store = queue.Queue(maxsize=cap)
        q_next = queue.Queue(maxsize=cap)
        stages: list[_Stage] = [_Capture(source, q_store, run), _Store("store", q_store, q_next, run)]
        if config.mode is Mode.NO_PRIVACY:
            stages.append(_Publish("publish", q_next, None, run))
        else:
            q_pub = queue.Queue(maxsize=cap)
            stages.append(_Filter("filter", q_next, q_pub, run))
            stages.append(_Publish("publish", q_pub, None, run))
        for stage in stages:
            stage.start()
        for stage in stages:
            stage.join()
        if run.errors:
            raise run.errors[0]
        if events is not None:
            events.extend(run.events)
        return run.published
    finally:
        if tmp is not None:
            tmp.cleanup()


def write_milestones(path, records: Sequence[PublishRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["capture_id", "label", "elapsed_ms"])
        for rec in records:
            for ms in rec.milestones:
                writer.writerow([rec.capture_id, ms.label, f"{ms.elapsed_ms:.3f}"])
