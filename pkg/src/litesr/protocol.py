"""Framed streaming of 32x48 depth/intensity captures.

Wire format (little-endian)::

    0   2  magic          b"TF" (0x54 0x46)
    2   1  version        1
    3   1  frame_type     1 depth, 2 intensity, 3 combined
    4   4  sequence       u32
    8   8  timestamp_us   u64
    16  2  payload_len    u16
    18  n  payload        u16 depth in mm and/or u16 counts, row-major;
                          combined = depth block then intensity block
    18+n 4 crc32          zlib CRC-32 of bytes [0, 18+n)

A combined packet is 18 + 6144 + 4 = 6166 bytes.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
import time
import warnings
import zlib
from collections.abc import Callable, Iterable, Iterator
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"TF"
VERSION = 1
DEPTH, INTENSITY, COMBINED = 1, 2, 3
LAYOUT = (32, 48)
PIXELS = LAYOUT[0] * LAYOUT[1]
HEADER = struct.Struct("<2sBBIQH")
CRC = struct.Struct("<I")
PAYLOAD_LEN = {DEPTH: 2 * PIXELS, INTENSITY: 2 * PIXELS, COMBINED: 4 * PIXELS}
MAX_PACKET = HEADER.size + PAYLOAD_LEN[COMBINED] + CRC.size


class PacketError(ValueError):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class CountOverflowWarning(UserWarning):
    """Intensity counts were clamped to the u16 range during encoding."""


@dataclass(eq=False)
class FramePair:
    """One capture: depth in metres, intensity in photon counts (either may be absent)."""

    depth: np.ndarray | None
    intensity: np.ndarray | None
    sequence: int = 0
    timestamp_us: int = 0

    def __eq__(self, other):
        if not isinstance(other, FramePair):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(a, b)

        return (self.sequence == other.sequence and self.timestamp_us == other.timestamp_us
                and same(self.depth, other.depth) and same(self.intensity, other.intensity))

    @property
    def frame_type(self) -> int:
        if self.depth is not None and self.intensity is not None:
            return COMBINED
        if self.depth is not None:
            return DEPTH
        if self.intensity is not None:
            return INTENSITY
        raise PacketError("empty", "frame pair carries neither depth nor intensity")


def _depth_mm(depth) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if d.shape != LAYOUT:
        raise ValueError(f"depth frame must be {LAYOUT}, got {d.shape}")
    mm = np.rint(d * 1000.0)
    if not np.all(np.isfinite(mm)) or mm.min() < 0 or mm.max() > 65535:
        raise ValueError("depth outside the 0..65.535 m range representable in u16 millimetres")
    return mm.astype("<u2")


def _counts(intensity) -> np.ndarray:
    c = np.asarray(intensity, dtype=np.float64)
    if c.shape != LAYOUT:
        raise ValueError(f"intensity frame must be {LAYOUT}, got {c.shape}")
    c = np.rint(np.nan_to_num(c, nan=0.0))
    if c.min() < 0 or c.max() > 65535:
        warnings.warn("intensity counts clamped to 0..65535", CountOverflowWarning, stacklevel=3)
        c = np.clip(c, 0, 65535)
    return c.astype("<u2")


def encode_packet(pair: FramePair, sequence: int | None = None, timestamp_us: int | None = None) -> bytes:
    seq = pair.sequence if sequence is None else sequence
    ts = pair.timestamp_us if timestamp_us is None else timestamp_us
    ftype = pair.frame_type
    parts = []
    if pair.depth is not None:
        parts.append(_depth_mm(pair.depth).tobytes())
    if pair.intensity is not None:
        parts.append(_counts(pair.intensity).tobytes())
    payload = b"".join(parts)
    head = HEADER.pack(MAGIC, VERSION, ftype, seq & 0xFFFFFFFF, ts, len(payload))
    return head + payload + CRC.pack(zlib.crc32(head + payload))


def _check_header(buf, pos: int = 0):
    magic, version, ftype, seq, ts, plen = HEADER.unpack_from(buf, pos)
    if magic != MAGIC:
        raise PacketError("magic", f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise PacketError("version", f"unsupported version {version}")
    if ftype not in PAYLOAD_LEN:
        raise PacketError("type", f"unknown frame type {ftype}")
    if plen != PAYLOAD_LEN[ftype]:
        raise PacketError("length", f"payload length {plen} != {PAYLOAD_LEN[ftype]} for type {ftype}")
    return ftype, seq, ts, plen


def _payload_to_pair(ftype: int, payload, seq: int, ts: int) -> FramePair:
    words = np.frombuffer(payload, dtype="<u2")
    depth = intensity = None
    if ftype == DEPTH:
        depth = words.reshape(LAYOUT) / 1000.0
    elif ftype == INTENSITY:
        intensity = words.reshape(LAYOUT).astype(np.float64)
    else:
        depth = words[:PIXELS].reshape(LAYOUT) / 1000.0
        intensity = words[PIXELS:].reshape(LAYOUT).astype(np.float64)
    return FramePair(depth, intensity, seq, ts)


def decode_packet(data: bytes) -> FramePair:
    """Decode exactly one packet; raises :class:`PacketError` on any fault."""
    if len(data) < HEADER.size:
        raise PacketError("short", "packet shorter than its header")
    ftype, seq, ts, plen = _check_header(data)
    end = HEADER.size + plen
    if len(data) != end + CRC.size:
        raise PacketError("length", f"packet is {len(data)} bytes, header implies {end + CRC.size}")
    (crc,) = CRC.unpack_from(data, end)
    if zlib.crc32(data[:end]) != crc:
        raise PacketError("crc", "CRC-32 mismatch")
    return _payload_to_pair(ftype, data[HEADER.size:end], seq, ts)


@dataclass
class ParserDiagnostics:
    crc_error: int = 0
    resync: int = 0
    seq_gap: int = 0
    seq_backwards: int = 0
    bad_header: int = 0
    bytes_discarded: int = 0


class StreamParser:
    """Incremental packet parser that survives arbitrary byte noise.

    Bytes are discarded until a plausible header appears; a packet whose
    CRC fails is skipped one byte at a time, so a valid packet embedded in
    it is still found. Buffered data never exceeds one maximum packet plus
    the latest chunk.
    """

    def __init__(self):
        self._buf = bytearray()
        self.diagnostics = ParserDiagnostics()
        self._last_seq: int | None = None
        self._discarding = False

    def _discard(self, n: int) -> None:
        if n:
            self.diagnostics.bytes_discarded += n
            self._discarding = True

    def feed(self, data: bytes) -> list[FramePair]:
        buf = self._buf
        buf += data
        out = []
        pos = 0
        d = self.diagnostics
        while True:
            idx = buf.find(MAGIC, pos)
            if idx < 0:
                keep = 1 if len(buf) > pos and buf[-1] == MAGIC[0] else 0
                self._discard(len(buf) - pos - keep)
                pos = len(buf) - keep
                break
            self._discard(idx - pos)
            pos = idx
            if len(buf) - pos < HEADER.size:
                break
            try:
                ftype, seq, ts, plen = _check_header(buf, pos)
            except PacketError:
                d.bad_header += 1
                self._discard(1)
                pos += 1
                continue
            end = pos + HEADER.size + plen
            if len(buf) < end + CRC.size:
                break
            (crc,) = CRC.unpack_from(buf, end)
            if zlib.crc32(memoryview(buf)[pos:end]) != crc:
                d.crc_error += 1
                self._discard(1)
                pos += 1
                continue
            out.append(_payload_to_pair(ftype, bytes(buf[pos + HEADER.size:end]), seq, ts))
            pos = end + CRC.size
            if self._discarding:
                d.resync += 1
                self._discarding = False
            if self._last_seq is not None:
                if seq > self._last_seq + 1:
                    d.seq_gap += seq - self._last_seq - 1
                elif seq <= self._last_seq:
                    d.seq_backwards += 1
            self._last_seq = seq
        del buf[:pos]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)


def parse_stream(data: bytes | Iterable[bytes]) -> tuple[list[FramePair], ParserDiagnostics]:
    """Parse a whole byte string (or an iterable of chunks)."""
    parser = StreamParser()
    chunks = [data] if isinstance(data, (bytes, bytearray, memoryview)) else data
    frames = []
    for chunk in chunks:
        frames.extend(parser.feed(bytes(chunk)))
    return frames, parser.diagnostics


EMPTY, FILLING, READY, READING = "empty", "filling", "ready", "reading"


class PingPongBuffer:
    """Two-slot latest-wins buffer for one producer and one consumer.

    The producer fills whichever slot the consumer is not reading. When a
    newer frame is committed, an older unread frame is discarded and
    counted in :attr:`drops`. Slot state changes happen under one lock;
    payload copies happen outside it, on slots the other side cannot touch.
    """

    def __init__(self, slot_size: int = MAX_PACKET):
        self.slot_size = slot_size
        self._data = [bytearray(slot_size), bytearray(slot_size)]
        self._len = [0, 0]
        self.state = [EMPTY, EMPTY]
        self.drops = 0
        self.writes = 0
        self._cond = threading.Condition()

    def check_invariants(self) -> None:
        assert self.state.count(FILLING) <= 1, self.state
        assert self.state.count(READING) <= 1, self.state
        assert self.state.count(READY) <= 1, self.state

    def begin_write(self) -> tuple[int, memoryview]:
        with self._cond:
            if FILLING in self.state:
                raise RuntimeError("a write is already in progress")
            if EMPTY in self.state:
                slot = self.state.index(EMPTY)
            else:
                # One slot is being read, the other holds an unread frame: overwrite it.
                slot = self.state.index(READY)
                self.drops += 1
            self.state[slot] = FILLING
            return slot, memoryview(self._data[slot])

    def commit_write(self, slot: int, length: int) -> None:
        with self._cond:
            if self.state[slot] != FILLING:
                raise RuntimeError(f"slot {slot} is not being filled")
            other = 1 - slot
            if self.state[other] == READY:
                self.state[other] = EMPTY
                self.drops += 1
            self._len[slot] = length
            self.state[slot] = READY
            self.writes += 1
            self._cond.notify_all()

    def begin_read(self) -> tuple[int, memoryview] | None:
        with self._cond:
            if READY not in self.state:
                return None
            slot = self.state.index(READY)
            self.state[slot] = READING
            return slot, memoryview(self._data[slot])[: self._len[slot]]

    def end_read(self, slot: int) -> None:
        with self._cond:
            if self.state[slot] != READING:
                raise RuntimeError(f"slot {slot} is not being read")
            self.state[slot] = EMPTY

    def write(self, data: bytes) -> None:
        if len(data) > self.slot_size:
            raise ValueError(f"frame of {len(data)} bytes exceeds slot size {self.slot_size}")
        slot, view = self.begin_write()
        view[: len(data)] = data
        self.commit_write(slot, len(data))

    def read(self) -> bytes | None:
        got = self.begin_read()
        if got is None:
            return None
        slot, view = got
        data = bytes(view)
        self.end_read(slot)
        return data

    def wait_ready(self, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: READY in self.state, timeout)


@dataclass
class StreamConfig:
    layout: tuple = LAYOUT
    iterations: int = 1_000_000
    period_ms: int = 100

    def __post_init__(self):
        if tuple(self.layout) != LAYOUT:
            raise ValueError(f"only the {LAYOUT} layout is supported")
        if self.period_ms < 1:
            raise ValueError("period_ms must be >= 1")

    @property
    def nominal_fps(self) -> float:
        return 1000.0 / self.period_ms


STAGES = ("parse", "preprocess", "inference", "serialize")


@dataclass
class StreamStats:
    produced: int = 0
    consumed: int = 0
    drops: int = 0
    duration_s: float = 0.0
    effective_fps: float = 0.0
    nominal_fps: float = 0.0
    latency_ms: dict = field(default_factory=dict)
    end_to_end_ms: dict = field(default_factory=dict)
    consumed_sequences: list = field(default_factory=list)
    parser: dict = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _summary(values) -> dict:
    if not values:
        return {"mean": 0.0, "max": 0.0, "count": 0}
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "max": float(a.max()), "count": int(a.size)}


class _Consumer:
    """Parse -> preprocess -> inference -> serialize for one packet at a time."""

    def __init__(self, model, preprocess, sink):
        self.parser = StreamParser()
        self.model = model
        self.preprocess = preprocess
        self.sink = sink
        self.stage_ms = {s: [] for s in STAGES}
        self.sequences = []

    def handle(self, packet: bytes) -> None:
        t0 = time.perf_counter()
        pairs = self.parser.feed(packet)
        t1 = time.perf_counter()
        self.stage_ms["parse"].append(1e3 * (t1 - t0))
        for pair in pairs:
            t1 = time.perf_counter()
            inputs = self.preprocess(pair) if self.preprocess else pair
            t2 = time.perf_counter()
            result = self.model.forward(*inputs) if self.model is not None else inputs
            t3 = time.perf_counter()
            if self.sink is not None:
                self.sink(pair, result)
            t4 = time.perf_counter()
            self.stage_ms["preprocess"].append(1e3 * (t2 - t1))
            self.stage_ms["inference"].append(1e3 * (t3 - t2))
            self.stage_ms["serialize"].append(1e3 * (t4 - t3))
            self.sequences.append(pair.sequence)


def default_preprocess(pair: FramePair, stats=None, hot_mask=None):
    """FramePair -> (depth, intensity) float32 tensors ready for the model."""
    from .calibration import compensate_hot_pixels

    depth = np.asarray(pair.depth, dtype=np.float64)
    inten = np.asarray(pair.intensity, dtype=np.float64)
    if hot_mask is not None:
        inten = compensate_hot_pixels(inten, hot_mask)
    if stats is not None:
        depth = (depth - stats.mean_depth) / stats.std_depth
        inten = (inten - stats.mean_intensity) / stats.std_intensity
    return depth.astype(np.float32)[None, None], inten.astype(np.float32)[None, None]


def simulate_stream(config: StreamConfig, source: Iterable[FramePair], sink: Callable | None = None,
                    model=None, consumer_delay_ms: float = 0.0, clock: str = "virtual",
                    preprocess: Callable | None = None) -> StreamStats:
    """Run the sensor -> ping-pong -> parser -> model pipeline.

    The producer emits one packet every ``config.period_ms``. The consumer
    takes the newest ready packet whenever it is idle and stays busy for
    ``consumer_delay_ms``. With ``clock="virtual"`` time is simulated
    (deterministic; compute time is measured but not charged); with
    ``clock="wall"`` producer and consumer are real threads.

    ``sink(pair, result)`` receives every processed frame; if it raises,
    the run stops and the partial statistics carry the error.
    """
    if preprocess is None and model is not None:
        preprocess = default_preprocess
    consumer = _Consumer(model, preprocess, sink)
    frames = _take(source, config.iterations)
    if clock == "virtual":
        stats = _simulate_virtual(config, frames, consumer, consumer_delay_ms)
    elif clock == "wall":
        stats = _simulate_wall(config, frames, consumer, consumer_delay_ms)
    else:
        raise ValueError(f"clock must be 'virtual' or 'wall', got {clock!r}")
    stats.latency_ms = {s: _summary(v) for s, v in consumer.stage_ms.items()}
    stats.consumed_sequences = list(consumer.sequences)
    stats.consumed = len(consumer.sequences)
    stats.parser = asdict(consumer.parser.diagnostics)
    stats.nominal_fps = config.nominal_fps
    stats.effective_fps = stats.consumed / stats.duration_s if stats.duration_s > 0 else 0.0
    return stats


def _take(source: Iterable, n: int) -> Iterator:
    for k, item in enumerate(source):
        if k >= n:
            return
        yield item


def _simulate_virtual(config, frames, consumer: _Consumer, delay_ms: float) -> StreamStats:
    buf = PingPongBuffer()
    stats = StreamStats()
    period = config.period_ms / 1000.0
    delay = delay_ms / 1000.0
    busy_until = None
    current = None
    produced_at = {}
    e2e = []

    def start(now):
        nonlocal busy_until, current
        got = buf.begin_read()
        if got is None:
            return False
        slot, view = got
        current = (slot, bytes(view))
        busy_until = now + delay
        return True

    def finish():
        nonlocal busy_until, current
        slot, packet = current
        now = busy_until
        buf.end_read(slot)
        current = None
        busy_until = None
        consumer.handle(packet)
        seq = consumer.sequences[-1] if consumer.sequences else None
        if seq in produced_at:
            e2e.append(1e3 * (now - produced_at[seq]))
        return now

    last = 0.0
    try:
        for k, pair in enumerate(frames):
            t = k * period
            # Work finishing exactly at t completes before the new frame lands.
            while busy_until is not None and busy_until <= t:
                last = finish()
                start(last)
            packet = encode_packet(pair, sequence=k, timestamp_us=int(round(t * 1e6)))
            produced_at[k] = t
            buf.write(packet)
            stats.produced += 1
            if busy_until is None:
                start(t)
        while busy_until is not None:
            last = finish()
            start(last)
    except Exception as exc:  # sink or model failure: stop cleanly
        log.warning("stream stopped: %s", exc)
        stats.error = f"{type(exc).__name__}: {exc}"
    stats.drops = buf.drops
    stats.duration_s = max(stats.produced * period, last)
    stats.end_to_end_ms = _summary(e2e)
    return stats


def _simulate_wall(config, frames, consumer: _Consumer, delay_ms: float) -> StreamStats:
    buf = PingPongBuffer()
    stats = StreamStats()
    done = threading.Event()
    errors = []

    def produce():
        t0 = time.perf_counter()
        try:
            for k, pair in enumerate(frames):
                if errors:
                    break
                target = t0 + k * config.period_ms / 1000.0
                time.sleep(max(0.0, target - time.perf_counter()))
                ts = int(1e6 * (time.perf_counter() - t0))
                buf.write(encode_packet(pair, sequence=k, timestamp_us=ts))
                stats.produced += 1
            time.sleep(config.period_ms / 1000.0)
        finally:
            done.set()

    def consume():
        while True:
            if not buf.wait_ready(timeout=0.01):
                if done.is_set() and READY not in buf.state:
                    return
                continue
            packet = buf.read()
            if packet is None:
                continue
            try:
                consumer.handle(packet)
            except Exception as exc:
                errors.append(f"{type(exc).__name__}: {exc}")
                return
            if delay_ms:
                time.sleep(delay_ms / 1000.0)

    t_start = time.perf_counter()
    threads = [threading.Thread(target=produce, name="litesr-producer"),
               threading.Thread(target=consume, name="litesr-consumer")]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    stats.duration_s = time.perf_counter() - t_start
    stats.drops = buf.drops
    stats.error = errors[0] if errors else None
    return stats


def synthetic_frames(n: int, seed: int = 0) -> Iterator[FramePair]:
    """Endless-ish source of plausible captures for demos and tests."""
    from .datagen import LR_SHAPE, area_downsample, synthetic_scene

    rng = np.random.default_rng(seed)
    for k in range(n):
        depth, inten = synthetic_scene(rng, shape=(64, 96))
        yield FramePair(area_downsample(depth, *LR_SHAPE), area_downsample(inten, *LR_SHAPE), k, 0)


def frames_from_samples(sample_dirs) -> Iterator[FramePair]:
    """LR frames from datagen sample directories, in the given order."""
    from .datagen import read_sample

    for k, d in enumerate(sample_dirs):
        s = read_sample(d)
        yield FramePair(s.lr_depth, s.lr_intensity, k, 0)
