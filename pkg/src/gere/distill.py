"""Hidden-state distillation, activation statistics and activation states."""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .model import TinyDecoder
from .synth import PAD

HTA_MAGIC, THR_MAGIC, PST_MAGIC = "GERE-HTA", "GERE-THR", "GERE-PST"
FORMAT_VERSION = 1


class ActivationState(enum.IntEnum):
    NON = 0  # non-activated, inside [tau-, tau+]
    POS = 1  # positively activated, above tau+
    NEG = 2  # negatively activated, below tau-


@dataclass
class ReplayPool:
    sequences: list[np.ndarray]

    def __post_init__(self):
        if not self.sequences:
            raise ValueError("replay pool is empty")
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]

    def __len__(self) -> int:
        return len(self.sequences)

    @classmethod
    def from_array(cls, rows: np.ndarray) -> ReplayPool:
        return cls(list(np.asarray(rows)))

    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.sequences])

    def padded(self, indices: Sequence[int] | None = None, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        idx = range(len(self)) if indices is None else indices
        return pad_sequences([self.sequences[i] for i in idx], length)


def pad_sequences(seqs: Sequence[np.ndarray], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a common length; returns (tokens, valid-mask)."""
    length = max(len(s) for s in seqs) if length is None else length
    tokens = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return tokens, mask


@dataclass
class HiddenTargetArchive:
    targets: list[np.ndarray]  # per sample (n_t, n_d) float32
    n_dims: int
    fingerprint: str

    def __post_init__(self):
        for i, t in enumerate(self.targets):
            if t.ndim != 2 or t.shape[1] != self.n_dims:
                raise ValueError(f"target {i} has shape {t.shape}, expected (n_t, {self.n_dims})")

    def __len__(self) -> int:
        return len(self.targets)

    def padded(self, indices: Sequence[int], length: int) -> tuple[np.ndarray, np.ndarray]:
        out = np.zeros((len(indices), length, self.n_dims), dtype=np.float32)
        mask = np.zeros((len(indices), length), dtype=bool)
        for row, i in enumerate(indices):
            t = self.targets[i]
            out[row, : len(t)] = t
            mask[row, : len(t)] = True
        return out, mask


def distill(model: TinyDecoder, pool: ReplayPool, batch_size: int = 100) -> HiddenTargetArchive:
    """Run the frozen model over the pool and keep last-layer hidden states."""
    V = model.config.vocab_size
    for i, s in enumerate(pool.sequences):
        if s.min() < 0 or s.max() >= V:
            raise ValueError(f"replay sample {i} has token ids outside the model vocab [0, {V})")
    was_training = model.training
    model.eval()
    targets: list[np.ndarray] = []
    try:
        with T.no_grad():
            for start in range(0, len(pool), batch_size):
                idx = range(start, min(start + batch_size, len(pool)))
                tokens, mask = pool.padded(idx)
                hidden = model(tokens, mask).last_hidden.data
                for row, i in enumerate(idx):
                    n = len(pool.sequences[i])
                    targets.append(np.array(hidden[row, :n], dtype=np.float32))
    finally:
        model.training = was_training
    return HiddenTargetArchive(targets, model.config.hidden_dim, model.fingerprint())


# ------------------------------------------------------------ statistics


@dataclass
class ActivationStats:
    mean: np.ndarray  # float64 (n_d,)
    std: np.ndarray
    count: int


@dataclass
class RunningMoments:
    """Count / mean / centered sum of squares, mergeable pairwise."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray) -> RunningMoments:
        v = np.asarray(values, dtype=np.float64).reshape(-1, values.shape[-1])
        mu = v.mean(axis=0)
        return cls(v.shape[0], mu, ((v - mu) ** 2).sum(axis=0))

    def merge(self, other: RunningMoments) -> RunningMoments:
        n = self.count + other.count
        if n == 0:
            return self
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return RunningMoments(n, mean, m2)

    def stats(self) -> ActivationStats:
        return ActivationStats(self.mean, np.sqrt(self.m2 / self.count), self.count)


def compute_stats(archive: HiddenTargetArchive) -> ActivationStats:
    """Population mean and std per dimension over every stored token (two-pass, float64)."""
    if len(archive) == 0 or sum(len(t) for t in archive.targets) == 0:
        raise ValueError("cannot compute statistics of an empty archive")
    allv = np.concatenate([t.astype(np.float64) for t in archive.targets], axis=0)
    mean = allv.mean(axis=0)
    std = np.sqrt(((allv - mean) ** 2).mean(axis=0))
    return ActivationStats(mean, std, allv.shape[0])


def compute_stats_streaming(archive: HiddenTargetArchive) -> ActivationStats:
    """Same statistics via a left-to-right merge of per-sample moments."""
    acc = None
    for t in archive.targets:
        if len(t) == 0:
            continue
        m = RunningMoments.of(t)
        acc = m if acc is None else acc.merge(m)
    if acc is None:
        raise ValueError("cannot compute statistics of an empty archive")
    return acc.stats()


@dataclass
class Thresholds:
    tau_minus: np.ndarray
    tau_plus: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def n_dims(self) -> int:
        return len(self.tau_minus)


def thresholds(stats: ActivationStats) -> Thresholds:
    m = np.asarray(stats.mean, dtype=np.float64)
    s = np.asarray(stats.std, dtype=np.float64)
    return Thresholds(m - s, m + s, m, s)


def classify_state(value: float, band: tuple[float, float]) -> ActivationState:
    lo, hi = band
    if math.isnan(value):
        raise ValueError("cannot classify NaN")
    if value < lo:
        return ActivationState.NEG
    if value > hi:
        return ActivationState.POS
    return ActivationState.NON


def classify_states(values: np.ndarray, thr: Thresholds) -> np.ndarray:
    """Vectorised classification along the last axis; returns uint8 codes."""
    values = np.asarray(values)
    if np.isnan(values).any():
        raise ValueError("cannot classify NaN")
    lo, hi = thr.tau_minus, thr.tau_plus
    out = np.zeros(values.shape, dtype=np.uint8)
    out[values > hi] = ActivationState.POS
    out[values < lo] = ActivationState.NEG
    return out


# ---------------------------------------------------------- state codec


def pack_states(states: Iterable[int]) -> bytes:
    codes = np.fromiter((int(s) for s in states), dtype=np.uint8)
    if codes.size and codes.max() > 2:
        raise ValueError("state codes must be 0, 1 or 2")
    pad = (-codes.size) % 4
    quads = np.concatenate([codes, np.zeros(pad, np.uint8)]).reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_states(data: bytes, count: int) -> list[ActivationState]:
    codes = unpack_codes(data, count)
    return [ActivationState(int(c)) for c in codes]


def unpack_codes(data: bytes, count: int) -> np.ndarray:
    if len(data) != (count + 3) // 4:
        raise ValueError(f"{len(data)} bytes cannot hold exactly {count} states")
    raw = np.frombuffer(data, dtype=np.uint8)
    codes = np.stack([(raw >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    if (codes[:count] == 3).any():
        raise ValueError("reserved state code 3 in packed data")
    if codes[count:].any():
        raise ValueError("non-zero trailing bits in packed data")
    return codes[:count].astype(np.uint8)


# ------------------------------------------------------------ file I/O


def _read_header(fh, magic: str, path) -> dict:
    line = fh.readline()
    try:
        header = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupted header") from exc
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise ValueError(f"{path}: expected a {magic} file")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {header.get('version')}")
    return header


def save_archive(archive: HiddenTargetArchive, path) -> None:
    header = {
        "magic": HTA_MAGIC,
        "version": FORMAT_VERSION,
        "n_dims": archive.n_dims,
        "n_samples": len(archive),
        "dtype": "f32le",
        "model_fingerprint": archive.fingerprint,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for t in archive.targets:
            fh.write(struct.pack("<I", len(t)))
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_archive(path, expected_fingerprint: str | None = None) -> HiddenTargetArchive:
    with open(path, "rb") as fh:
        header = _read_header(fh, HTA_MAGIC, path)
        if header.get("dtype") != "f32le":
            raise ValueError(f"{path}: unsupported dtype {header.get('dtype')}")
        d = int(header["n_dims"])
        targets = []
        for i in range(int(header["n_samples"])):
            raw = fh.read(4)
            if len(raw) != 4:
                raise ValueError(f"{path}: truncated at sample {i}")
            (n,) = struct.unpack("<I", raw)
            payload = fh.read(4 * n * d)
            if len(payload) != 4 * n * d:
                raise ValueError(f"{path}: truncated at sample {i}")
            targets.append(np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after {len(targets)} samples")
    fp = header["model_fingerprint"]
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise ValueError(f"{path}: archive fingerprint {fp} does not match model {expected_fingerprint}")
    return HiddenTargetArchive(targets, d, fp)


def save_thresholds(thr: Thresholds, path) -> None:
    doc = {
        "magic": THR_MAGIC,
        "version": FORMAT_VERSION,
        "n_dims": thr.n_dims,
        "tau_minus": [float(x) for x in thr.tau_minus],
        "tau_plus": [float(x) for x in thr.tau_plus],
        "mean": [float(x) for x in thr.mean],
        "std": [float(x) for x in thr.std],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_thresholds(path) -> Thresholds:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupted thresholds file") from exc
    if not isinstance(doc, dict) or doc.get("magic") != THR_MAGIC:
        raise ValueError(f"{path}: expected a {THR_MAGIC} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    arrays = [np.asarray(doc[k], dtype=np.float64) for k in ("tau_minus", "tau_plus", "mean", "std")]
    if any(len(a) != doc["n_dims"] for a in arrays):
        raise ValueError(f"{path}: expected {doc['n_dims']} entries per field")
    return Thresholds(*arrays)


def save_packed_states(per_sample: Sequence[np.ndarray], path) -> None:
    counts = [int(np.asarray(s).size) for s in per_sample]
    with open(path, "wb") as fh:
        fh.write(json.dumps({"magic": PST_MAGIC, "version": FORMAT_VERSION, "counts": counts}).encode() + b"\n")
        for s in per_sample:
            fh.write(pack_states(np.asarray(s).reshape(-1)))


def load_packed_states(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        header = _read_header(fh, PST_MAGIC, path)
        out = []
        for c in header["counts"]:
            nbytes = (c + 3) // 4
            data = fh.read(nbytes)
            if len(data) != nbytes:
                raise ValueError(f"{path}: truncated packed states")
            out.append(unpack_codes(data, c))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return out


def archive_states(archive: HiddenTargetArchive, thr: Thresholds) -> list[np.ndarray]:
    return [classify_states(t.astype(np.float64), thr) for t in archive.targets]
