"""STFT analysis, phase maps and the binary dataset file.

A phase map for frame ``n`` is the ``(K, M)`` matrix of principal-value phases
of every channel's STFT bin ``(n, k)``, with ``K = n_fft // 2 + 1``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

N_FFT = 512
HOP = N_FFT // 2
# analysis taper; the only place the window choice lives
WINDOW = "hann"

DATASET_MAGIC = b"DDDS"
DATASET_VERSION = 1


class SignalTooShortError(ValueError):
    pass


@dataclass
class MultichannelSignal:
    samples: np.ndarray  # (M, T)
    sample_rate: float

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def analysis_window(n_fft: int = N_FFT) -> np.ndarray:
    """Periodic Hann window of length ``n_fft``."""
    if WINDOW != "hann":
        raise NotImplementedError(WINDOW)
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)


def n_frames(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    if n_samples < n_fft:
        return 0
    return (n_samples - n_fft) // hop + 1


def stft(x: np.ndarray, n_fft: int = N_FFT, hop: int | None = None, window: np.ndarray | None = None) -> np.ndarray:
    """Frames of a 1-D signal, no padding; returns ``(n_frames, n_fft//2 + 1)`` complex bins.

    Bin ``k`` of frame ``n`` is ``sum_t w[t] x[n*hop + t] exp(-2j*pi*k*t/n_fft)``.
    A 2-D ``(M, T)`` input is analysed channel by channel into ``(M, n_frames, K)``.
    """
    if n_fft % 2:
        raise ValueError("n_fft must be even")
    hop = n_fft // 2 if hop is None else hop
    window = analysis_window(n_fft) if window is None else window
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < n_fft:
        raise SignalTooShortError(f"signal of {x.shape[-1]} samples is shorter than one {n_fft}-sample frame")
    count = n_frames(x.shape[-1], n_fft, hop)
    idx = np.arange(count)[:, None] * hop + np.arange(n_fft)[None, :]
    frames = x[..., idx] * window
    return np.fft.rfft(frames, axis=-1)


def principal_phase(z: np.ndarray) -> np.ndarray:
    """Argument in (-pi, pi]; exactly-zero bins get phase 0."""
    phase = np.angle(z)
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return np.where(z == 0, 0.0, phase)


def phase_map(spectra: np.ndarray, frame: int) -> np.ndarray:
    """Phase map ``(K, M)`` of one frame from multichannel spectra ``(M, n_frames, K)``."""
    if spectra.ndim != 3:
        raise ValueError(f"expected (M, n_frames, K) spectra, got shape {spectra.shape}")
    if not 0 <= frame < spectra.shape[1]:
        raise IndexError(f"frame {frame} out of range for {spectra.shape[1]} frames")
    return principal_phase(spectra[:, frame, :]).T


def phase_maps(signal: MultichannelSignal | np.ndarray, n_fft: int = N_FFT, hop: int | None = None) -> np.ndarray:
    """All phase maps of a multichannel signal, shape ``(n_frames, K, M)``."""
    samples = signal.samples if isinstance(signal, MultichannelSignal) else np.atleast_2d(signal)
    spectra = stft(samples, n_fft, hop)
    return np.transpose(principal_phase(spectra), (1, 2, 0))


# --------------------------------------------------------------------------
# dataset file


@dataclass
class Dataset:
    """Labelled phase maps.

    ``features`` is ``(n, K, M)`` float32, ``labels`` ``(n, I)`` uint8 multi-hot,
    ``scene`` the index of the scene each frame came from.
    """

    features: np.ndarray
    labels: np.ndarray
    scene: np.ndarray
    config_digest: str = "0" * 64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.scene = np.asarray(self.scene, dtype=np.uint32)
        n = self.features.shape[0]
        if self.features.ndim != 3 or self.labels.shape[0] != n or self.scene.shape != (n,):
            raise ValueError("features, labels and scene indices disagree in record count or rank")
        if n and not self.labels.any(axis=1).all():
            raise ValueError("every record needs at least one active DOA class")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def K(self) -> int:
        return self.features.shape[1]

    @property
    def M(self) -> int:
        return self.features.shape[2]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self.features[mask], self.labels[mask], self.scene[mask], self.config_digest, dict(self.meta))

    def to_bytes(self) -> bytes:
        """Little-endian dataset file.

        Header: ``b"DDDS"``, u32 version, u32 K, u32 M, u64 frame count, u32 I,
        32-byte SHA-256 of the generating config. Each record: K*M float32 phases
        (row-major, frequency outer), I label bytes, u32 scene index.
        """
        n, K, M = self.features.shape
        header = DATASET_MAGIC + struct.pack("<IIIQI", DATASET_VERSION, K, M, n, self.n_classes)
        header += bytes.fromhex(self.config_digest)
        rec = np.dtype([("phase", "<f4", (K, M)), ("label", "u1", (self.n_classes,)), ("scene", "<u4")])
        records = np.empty(n, dtype=rec)
        records["phase"] = self.features
        records["label"] = self.labels
        records["scene"] = self.scene
        return header + records.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        if blob[:4] != DATASET_MAGIC:
            raise ValueError("not a DDDS dataset file")
        version, K, M, n, n_classes = struct.unpack_from("<IIIQI", blob, 4)
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        offset = 4 + struct.calcsize("<IIIQI")
        digest = blob[offset : offset + 32].hex()
        offset += 32
        rec = np.dtype([("phase", "<f4", (K, M)), ("label", "u1", (n_classes,)), ("scene", "<u4")])
        if len(blob) - offset != n * rec.itemsize:
            raise ValueError("dataset file length does not match its header")
        records = np.frombuffer(blob, dtype=rec, count=n, offset=offset)
        return cls(records["phase"].copy(), records["label"].copy(), records["scene"].copy(), digest)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def digest_of(text: str | bytes) -> str:
    data = text.encode("utf-8") if isinstance(text, str) else text
    return hashlib.sha256(data).hexdigest()
