"""Shard files, repeated clip sampling and the shuffle-buffer batch loader.

FMSHRD1 layout (little-endian)::

    b"FMSHRD1\\0"
    u32 T, u32 H, u32 W, f64 TR
    u32 len + UTF-8 subject id, u32 len + UTF-8 run id
    32-byte grid hash
    T*H*W f32 frames
"""

from __future__ import annotations

import logging
import os
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InsufficientDataError, ValidationError
from .prep import CLIP_LEN

log = logging.getLogger(__name__)

MAGIC = b"FMSHRD1\0"
CLIPS_PER_FRAME = 4 / 16

__all__ = [
    "Shard",
    "write_shard",
    "read_shard",
    "read_shard_header",
    "sample_run_clips",
    "ShuffleBuffer",
    "ClipLoader",
    "frames_seen",
    "effective_epochs",
    "max_workers",
]


@dataclass(frozen=True, eq=False)
class Shard:
    frames: np.ndarray  # (T, H, W) float32
    tr: float
    subject_id: str
    run_id: str
    grid_hash: bytes

    def __post_init__(self):
        if len(self.grid_hash) != 32:
            raise ValidationError("grid hash must be 32 bytes")
        if np.asarray(self.frames).ndim != 3:
            raise ValidationError("shard frames must be (T, H, W)")

    def check_frames(self, valid: np.ndarray, atol_mean=1e-5, atol_std=1e-4) -> None:
        """Raise unless every frame is z-scored over ``valid`` with zero background."""
        f = np.asarray(self.frames, dtype=np.float64)
        if np.any(f[:, ~valid] != 0):
            raise ValidationError("shard has non-zero background pixels")
        inner = f[:, valid]
        mean, std = inner.mean(axis=1), inner.std(axis=1)
        ok = (np.abs(mean) <= atol_mean) & ((np.abs(std - 1) <= atol_std) | (std == 0))
        if not ok.all():
            raise ValidationError(f"frames {np.flatnonzero(~ok)[:5]} are not normalized")


def write_shard(path, shard: Shard) -> None:
    frames = np.ascontiguousarray(shard.frames, dtype="<f4")
    if not np.isfinite(frames).all():
        raise ValidationError("shard frames must be finite")
    T, H, W = frames.shape
    subj, run = shard.subject_id.encode(), shard.run_id.encode()
    head = struct.pack("<IIId", T, H, W, float(shard.tr))
    parts = [
        MAGIC,
        head,
        struct.pack("<I", len(subj)),
        subj,
        struct.pack("<I", len(run)),
        run,
        bytes(shard.grid_hash),
        frames.tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def _parse_header(buf: bytes, path) -> tuple[dict, int]:
    if not buf.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic, expected FMSHRD1")
    try:
        off = len(MAGIC)
        T, H, W, tr = struct.unpack_from("<IIId", buf, off)
        off += 20
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        subj = buf[off : off + n].decode()
        off += n
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        run = buf[off : off + n].decode()
        off += n
        ghash = buf[off : off + 32]
        off += 32
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated FMSHRD1 header") from exc
    if len(ghash) != 32:
        raise FormatError(f"{path}: truncated grid hash")
    header = {"T": T, "H": H, "W": W, "tr": tr, "subject_id": subj, "run_id": run, "grid_hash": ghash}
    return header, off


def read_shard_header(path) -> dict:
    with open(path, "rb") as f:
        buf = f.read(4096)
    header, _ = _parse_header(buf, path)
    return header


def read_shard(path) -> Shard:
    buf = Path(path).read_bytes()
    h, off = _parse_header(buf, path)
    size = h["T"] * h["H"] * h["W"]
    if len(buf) - off != 4 * size:
        raise FormatError(f"{path}: payload is {len(buf) - off} bytes, dims imply {4 * size}")
    frames = np.frombuffer(buf, "<f4", size, off).reshape(h["T"], h["H"], h["W"]).copy()
    return Shard(frames, h["tr"], h["subject_id"], h["run_id"], h["grid_hash"])


# ---------------------------------------------------------------- sampling


def sample_run_clips(n_t: int, clip_len: int = CLIP_LEN, seed=0) -> np.ndarray:
    """``floor(4 * n_t / 16)`` uniform clip starts, drawn with replacement."""
    if n_t < clip_len:
        log.warning("run of %d frames is shorter than clip length %d; skipped", n_t, clip_len)
        return np.zeros(0, dtype=np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    count = int(n_t * CLIPS_PER_FRAME)
    return rng.integers(0, n_t - clip_len + 1, size=count)


def frames_seen(steps: int, batch_size: int, clip_len: int = CLIP_LEN) -> int:
    return steps * batch_size * clip_len


def effective_epochs(total_frames: float, train_frames: float) -> float:
    return total_frames / train_frames


def max_workers(requested: int) -> int:
    """Cap ``requested`` by the ``FLATMAE_THREADS`` environment variable."""
    cap = os.environ.get("FLATMAE_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


class ShuffleBuffer:
    """Bounded buffer; ``pop`` removes an item chosen uniformly at random."""

    def __init__(self, capacity: int, seed=0):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.items: list = []
        self.rng = np.random.Generator(np.random.Philox(key=seed))

    def __len__(self) -> int:
        return len(self.items)

    @property
    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def push(self, item) -> None:
        if self.full:
            raise OverflowError("shuffle buffer is full")
        self.items.append(item)

    def pop(self):
        if not self.items:
            raise IndexError("pop from empty shuffle buffer")
        i = int(self.rng.integers(len(self.items)))
        self.items[i], self.items[-1] = self.items[-1], self.items[i]
        return self.items.pop()


@dataclass
class LoaderStats:
    shards_read: int = 0
    shards_failed: int = 0
    clips: int = 0
    batches: int = 0
    bytes_read: int = 0
    started: float = field(default_factory=time.perf_counter)

    @property
    def clips_per_second(self) -> float:
        return self.clips / max(time.perf_counter() - self.started, 1e-9)


class ClipLoader:
    """Stream of ``(B, T, H, W)`` batches from shard files.

    Producers read shards (each shard is one run), draw
    ``floor(4 N_t / 16)`` random clips per read and push them into a shuffle
    buffer; batches are popped uniformly from the buffer once it is full.
    With ``workers == 1`` everything runs in the consumer thread and the
    stream is a pure function of ``seed``. ``epochs=None`` repeats forever.
    """

    def __init__(
        self,
        shards,
        batch_size: int = 32,
        capacity: int = 2048,
        workers: int = 1,
        seed: int = 0,
        clip_len: int = CLIP_LEN,
        epochs: int | None = None,
        grid_hash: bytes | None = None,
    ):
        if capacity < batch_size:
            raise ConfigurationError("buffer capacity must be >= batch size")
        self.shards = [str(s) for s in shards]
        if not self.shards:
            raise ConfigurationError("no shard files given")
        self.batch_size = batch_size
        self.capacity = capacity
        self.workers = max_workers(workers)
        self.seed = seed
        self.clip_len = clip_len
        self.epochs = epochs
        self.grid_hash = grid_hash
        self.stats = LoaderStats()

    def _load(self, path: str, epoch: int, index: int):
        try:
            shard = read_shard(path)
        except (OSError, FormatError, ValidationError) as exc:
            log.error("skipping unreadable shard %s: %s", path, exc)
            return None
        if self.grid_hash is not None and shard.grid_hash != self.grid_hash:
            log.error("skipping shard %s: grid hash mismatch", path)
            return None
        rng = np.random.default_rng([self.seed, epoch, index])
        starts = sample_run_clips(shard.frames.shape[0], self.clip_len, rng)
        clips = [shard.frames[s : s + self.clip_len] for s in starts]
        return clips, shard.frames.nbytes

    def _epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch, 0x5EED]).permutation(len(self.shards))

    def _jobs(self):
        epoch = 0
        while self.epochs is None or epoch < self.epochs:
            for index in self._epoch_order(epoch):
                yield epoch, int(index)
            epoch += 1

    def _produce_serial(self):
        for epoch, index in self._jobs():
            yield self._load(self.shards[index], epoch, index)

    def _produce_threaded(self):
        jobs = self._jobs()
        lock = threading.Lock()
        out: queue.Queue = queue.Queue(maxsize=2 * self.workers)
        done = object()
        stop = threading.Event()

        def work():
            while not stop.is_set():
                with lock:
                    job = next(jobs, None)
                if job is None:
                    out.put(done)
                    return
                epoch, index = job
                out.put(self._load(self.shards[index], epoch, index))

        threads = [threading.Thread(target=work, daemon=True) for _ in range(self.workers)]
        for t in threads:
            t.start()
        finished = 0
        try:
            while finished < len(threads):
                item = out.get()
                if item is done:
                    finished += 1
                    continue
                yield item
        finally:
            stop.set()

    def __iter__(self):
        self.stats = LoaderStats()
        buf = ShuffleBuffer(self.capacity, seed=self.seed)
        produce = self._produce_serial() if self.workers == 1 else self._produce_threaded()
        for n_items, item in enumerate(produce, start=1):
            if item is None:
                self.stats.shards_failed += 1
            else:
                clips, nbytes = item
                self.stats.shards_read += 1
                self.stats.bytes_read += nbytes
                for clip in clips:
                    if buf.full:
                        yield self._batch(buf)
                    buf.push(clip)
                    self.stats.clips += 1
                if buf.full:
                    yield self._batch(buf)
            if n_items == len(self.shards) and self.stats.clips == 0:
                if self.stats.shards_read == 0:
                    raise InsufficientDataError("all shards are unreadable")
                raise InsufficientDataError("no readable shard holds a full clip")
        while len(buf) >= self.batch_size:
            yield self._batch(buf)

    def _batch(self, buf: ShuffleBuffer) -> np.ndarray:
        self.stats.batches += 1
        return np.stack([buf.pop() for _ in range(self.batch_size)])
