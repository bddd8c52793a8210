"""Scene simulation: ULA geometry, shoebox image-source RIRs, mixing and noise.

Azimuth convention (used everywhere in the package): 0 deg is endfire
pointing from the array centre towards microphone 1, 90 deg is broadside and
180 deg the opposite endfire. Sources lie in the horizontal plane of the array.
"""

from __future__ import annotations

import configparser
import math
import wave
from functools import lru_cache
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import fftconvolve

from .features import MultichannelSignal

SPEED_OF_SOUND = 343.0
FS = 16000
FRACTIONAL_DELAY_TAPS = 81
MAX_IMAGE_INDEX = 20
_IMAGE_CHUNK = 16384
# fractional delays are resolved to 1/FRACTIONAL_STEPS of a sample
FRACTIONAL_STEPS = 8192


class GeometryError(ValueError):
    """A source or microphone lies outside the room, or the room is invalid."""


class AbsorptionError(ValueError):
    """The requested RT60 needs a wall absorption outside (0, 1]."""


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class ArrayGeometry:
    M: int = 8
    spacing: float = 0.02
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation_deg: float = 0.0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("a linear array needs at least two microphones")
        if self.spacing <= 0:
            raise ValueError("microphone spacing must be positive")

    @property
    def axis(self) -> np.ndarray:
        """Unit vector from the array centre towards microphone 1 (0 deg azimuth)."""
        phi = math.radians(self.orientation_deg)
        return np.array([math.cos(phi), math.sin(phi), 0.0])

    @property
    def normal(self) -> np.ndarray:
        """In-plane broadside direction (90 deg azimuth)."""
        phi = math.radians(self.orientation_deg)
        return np.array([-math.sin(phi), math.cos(phi), 0.0])

    @property
    def positions(self) -> np.ndarray:
        offsets = ((self.M - 1) / 2 - np.arange(self.M)) * self.spacing
        return np.asarray(self.center, dtype=float) + offsets[:, None] * self.axis

    def direction(self, azimuth_deg: float) -> np.ndarray:
        theta = math.radians(azimuth_deg)
        return math.cos(theta) * self.axis + math.sin(theta) * self.normal

    def source_position(self, azimuth_deg: float, distance: float) -> np.ndarray:
        return np.asarray(self.center, dtype=float) + distance * self.direction(azimuth_deg)


@dataclass(frozen=True)
class DoaGrid:
    resolution: float = 5.0
    span: float = 180.0

    @property
    def n_classes(self) -> int:
        return int(round(self.span / self.resolution)) + 1

    @property
    def classes(self) -> np.ndarray:
        return np.arange(self.n_classes) * self.resolution


def doa_to_class(azimuth_deg: float, grid: DoaGrid = DoaGrid()) -> int:
    """Nearest grid class; exact midpoints go to the lower class."""
    if not 0.0 <= azimuth_deg <= grid.span:
        raise ValueError(f"azimuth {azimuth_deg} outside [0, {grid.span}]")
    return int(math.ceil(azimuth_deg / grid.resolution - 0.5))


def class_to_doa(index: int, grid: DoaGrid = DoaGrid()) -> float:
    if not 0 <= index < grid.n_classes:
        raise ValueError(f"class index {index} outside [0, {grid.n_classes})")
    return float(index * grid.resolution)


# --------------------------------------------------------------------------
# room impulse responses


def sabine_absorption(room_dims, rt60: float, c: float = SPEED_OF_SOUND) -> float:
    """Uniform wall absorption coefficient giving ``rt60`` under Sabine's formula."""
    lx, ly, lz = room_dims
    volume = lx * ly * lz
    surface = 2 * (lx * ly + lx * lz + ly * lz)
    alpha = 24 * math.log(10) * volume / (c * surface * rt60)
    if not 0 < alpha <= 1:
        raise AbsorptionError(f"rt60={rt60} s needs absorption {alpha:.3f}, outside (0, 1]")
    return alpha


def _check_inside(room_dims, point, what: str) -> None:
    p = np.asarray(point, dtype=float)
    if np.any(p <= 0) or np.any(p >= np.asarray(room_dims, dtype=float)):
        raise GeometryError(f"{what} at {tuple(np.round(p, 3))} is not strictly inside room {tuple(room_dims)}")


def _image_sources(room_dims, source, index_cap: int):
    """All image positions with per-axis index |n| <= index_cap and their reflection counts."""
    n = np.arange(-index_cap, index_cap + 1)
    axes_pos, axes_refl = [], []
    for s, length in zip(source, room_dims):
        pos = np.concatenate([s + 2 * n * length, -s + 2 * n * length])
        refl = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
        axes_pos.append(pos)
        axes_refl.append(refl)
    gx, gy, gz = np.meshgrid(*axes_pos, indexing="ij")
    rx, ry, rz = np.meshgrid(*axes_refl, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1), (rx + ry + rz).ravel()


def _fractional_delay_kernel(delays: np.ndarray, taps: int):
    """Hann-windowed sinc taps around each delay; returns sample indices and weights.

    Exact evaluation, used to build :func:`_kernel_table`. With ``t = j - f``
    for integer offset ``j`` and fractional part ``f`` the sine and window
    cosine factor into per-delay terms.
    """
    half = taps // 2
    centre = np.round(delays)
    f = delays - centre
    j = np.arange(-half, half + 1, dtype=float)
    t = j[None, :] - f[:, None]
    sign = np.where(np.arange(-half, half + 1) % 2 == 0, -1.0, 1.0)
    scale = np.pi / (half + 1)
    win_cos = np.cos(scale * j)[None, :] * np.cos(scale * f)[:, None] + np.sin(scale * j)[None, :] * np.sin(
        scale * f
    )[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        sinc = sign * np.sin(np.pi * f)[:, None] / (np.pi * t)
    sinc = np.where(t == 0, 1.0, sinc)
    idx = centre.astype(np.int64)[:, None] + np.arange(-half, half + 1)[None, :]
    return idx, sinc * 0.5 * (1 + win_cos)


@lru_cache(maxsize=4)
def _kernel_table(taps: int, steps: int = FRACTIONAL_STEPS) -> np.ndarray:
    """Kernels for fractional delays ``f = q/steps - 0.5``, ``q = 0..steps``."""
    f = np.arange(steps + 1) / steps - 0.5
    _, table = _fractional_delay_kernel(f, taps)
    table.setflags(write=False)
    return table


def _fast_kernel(delays: np.ndarray, taps: int):
    """Table-lookup version of :func:`_fractional_delay_kernel`."""
    half = taps // 2
    centre = np.round(delays)
    q = np.round((delays - centre + 0.5) * FRACTIONAL_STEPS).astype(np.int64)
    idx = centre.astype(np.int64)[:, None] + np.arange(-half, half + 1)[None, :]
    return idx, _kernel_table(taps)[q]


def _render(dist, group, n_groups, gain, length, fs, c, taps):
    """Sum fractional-delay arrivals per group into a ``(n_groups, length)`` array."""
    half = taps // 2
    keep = dist / c * fs < length + half
    dist, group, gain = dist[keep], group[keep], gain[keep]
    padded = length + 2 * taps
    out = np.zeros(n_groups * padded)
    for start in range(0, len(dist), _IMAGE_CHUNK):
        stop = start + _IMAGE_CHUNK
        d = dist[start:stop]
        idx, kernel = _fast_kernel(d / c * fs, taps)
        # kernel tails before t=0 or past the end land in per-group padding
        flat = (group[start:stop, None] * padded + taps) + idx
        out += np.bincount(flat.ravel(), weights=(kernel * (gain[start:stop] / d)[:, None]).ravel(), minlength=len(out))
    return out.reshape(n_groups, padded)[:, taps : taps + length]


def _render_by_order(dist, reflections, length, fs, c, taps):
    """Free-field responses grouped by reflection count, shape ``(n_orders, length)``.

    The full response is ``beta ** arange(n_orders) @ rendered`` for any
    reflection coefficient ``beta``.
    """
    n_orders = int(reflections.max()) + 1
    gain = np.full(len(dist), 1 / (4 * np.pi))
    return _render(dist, reflections, n_orders, gain, length, fs, c, taps)


def _decay_crossing(h: np.ndarray, level_db: float = -60.0) -> int:
    """First sample where the Schroeder curve of ``h`` is at or below ``level_db``."""
    edc = np.cumsum((h**2)[::-1])[::-1]
    below = np.nonzero(edc <= edc[0] * 10 ** (level_db / 10))[0]
    return int(below[0]) if len(below) else len(h)


def calibrated_reflection(room_dims, rt60: float, by_order: np.ndarray, fs: float, c: float = SPEED_OF_SOUND) -> float:
    """Wall pressure reflection coefficient whose response decays by 60 dB at ``rt60``.

    Uniform-absorption image-source responses of non-cubic rooms decay more
    slowly than Sabine's diffuse-field estimate, increasingly so for elongated
    rooms, and coincident mirror images add coherently. The coefficient is
    therefore bisected on the rendered response ``by_order`` (see
    :func:`_render_by_order`) until its Schroeder curve crosses -60 dB at
    ``rt60``, starting from the Sabine value.
    """
    orders = np.arange(by_order.shape[0])
    target = rt60 * fs
    lo, hi = 0.0, 1.0
    beta = math.sqrt(1.0 - sabine_absorption(room_dims, rt60, c))
    for _ in range(60):
        if _decay_crossing((beta**orders) @ by_order) > target:
            hi = beta
        else:
            lo = beta
        beta = 0.5 * (lo + hi)
        if hi - lo < 1e-10:
            break
    return beta


def _image_set(room_dims, rt60, source, mics, length, max_order, fs, c, taps):
    if rt60 is None or max_order == 0:
        return source[None, :], np.zeros(1, dtype=np.int64)
    direct = np.linalg.norm(mics - source, axis=1)
    reach = (length + taps) / fs * c + direct.max()
    cap = min(MAX_IMAGE_INDEX, int(math.ceil(reach / (2 * min(room_dims)))) + 1)
    positions, reflections = _image_sources(room_dims, source, cap)
    if max_order is not None:
        keep = reflections <= max_order
        positions, reflections = positions[keep], reflections[keep]
    return positions, reflections


def image_method_rir(
    room_dims,
    rt60: float | None,
    source_pos,
    mic_pos,
    fs: float = FS,
    max_order: int | None = None,
    length: int | None = None,
    c: float = SPEED_OF_SOUND,
    taps: int = FRACTIONAL_DELAY_TAPS,
    absorption: str = "calibrated",
) -> np.ndarray:
    """Shoebox room impulse response from ``source_pos`` to one or more microphones.

    Parameters
    ----------
    room_dims : 3 floats
        Room extent in metres; the room spans ``[0, L]`` on each axis.
    rt60 : float or None
        Reverberation time; None gives the free-field (direct path only) response.
    source_pos, mic_pos : array_like
        One source position and a ``(3,)`` or ``(n_mics, 3)`` array of microphones.
    max_order : int, optional
        Cap on the total number of wall reflections of an image. By default all
        images arriving within the response length are kept, with the per-axis
        image index capped at 20.
    length : int, optional
        Response length in samples; defaults to ``ceil(1.5 * rt60 * fs)`` (at
        least long enough for the direct paths in the anechoic case).
    absorption : {"calibrated", "sabine"}
        ``"sabine"`` uses the uniform Sabine absorption directly; ``"calibrated"``
        refines it with :func:`calibrated_reflection` on the first microphone's
        response so the simulated decay matches ``rt60``. Ignored when
        ``max_order`` is given (Sabine is used). Sabine's value must lie in
        (0, 1] either way.

    Returns
    -------
    ndarray
        ``(length,)`` for a single microphone, otherwise ``(n_mics, length)``.
        Amplitudes are ``beta**reflections / (4 pi d)``; each arrival is a
        windowed-sinc fractional delay of ``taps`` taps.
    """
    room_dims = tuple(float(v) for v in room_dims)
    if len(room_dims) != 3 or min(room_dims) <= 0:
        raise GeometryError(f"invalid room dimensions {room_dims}")
    source = np.asarray(source_pos, dtype=float)
    mics = np.atleast_2d(np.asarray(mic_pos, dtype=float))
    single = np.asarray(mic_pos).ndim == 1
    _check_inside(room_dims, source, "source")
    for m in mics:
        _check_inside(room_dims, m, "microphone")
    if rt60 is not None and rt60 <= 0:
        raise AbsorptionError("rt60 must be positive")

    direct = np.linalg.norm(mics - source, axis=1)
    if length is None:
        span = 1.5 * rt60 * fs if rt60 is not None else 0.0
        length = int(math.ceil(max(span, direct.max() / c * fs + taps)))
    positions, reflections = _image_set(room_dims, rt60, source, mics, length, max_order, fs, c, taps)

    beta = 0.0
    if rt60 is not None:
        if absorption not in ("calibrated", "sabine"):
            raise ValueError(f"unknown absorption model {absorption!r}")
        beta = math.sqrt(1.0 - sabine_absorption(room_dims, rt60, c))
    first = None
    if absorption == "calibrated" and rt60 is not None and max_order is None:
        by_order = _render_by_order(np.linalg.norm(positions - mics[0], axis=1), reflections, length, fs, c, taps)
        beta = calibrated_reflection(room_dims, rt60, by_order, fs, c)
        first = (beta ** np.arange(by_order.shape[0])) @ by_order

    # 0.0 ** 0 == 1 keeps the direct path in the anechoic case
    gain = np.power(beta, reflections.astype(float)) / (4 * np.pi)
    zeros = np.zeros(len(positions), dtype=np.int64)
    out = np.empty((len(mics), length))
    for i, mic in enumerate(mics):
        if i == 0 and first is not None:
            out[0] = first
            continue
        dist = np.linalg.norm(positions - mic, axis=1)
        out[i] = _render(dist, zeros, 1, gain, length, fs, c, taps)[0]
    return out[0] if single else out


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SourceSpec:
    azimuth: float
    distance: float
    signal: str = "synth"


@dataclass(frozen=True)
class SceneConfig:
    room_dims: tuple[float, float, float]
    rt60: float | None
    array_center: tuple[float, float, float]
    sources: tuple[SourceSpec, ...]
    array_orientation_deg: float = 0.0
    snr_db: float | None = 30.0
    seed: int = 0
    n_mics: int = 8
    spacing: float = 0.02

    @property
    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry(self.n_mics, self.spacing, tuple(self.array_center), self.array_orientation_deg)

    def source_positions(self) -> list[np.ndarray]:
        geom = self.geometry
        return [geom.source_position(s.azimuth, s.distance) for s in self.sources]


def check_scene(config: SceneConfig, min_separation: float | None = None) -> None:
    """Raise :class:`GeometryError` if the scene cannot be simulated."""
    if not config.sources:
        raise GeometryError("scene has no sources")
    for pos in config.geometry.positions:
        _check_inside(config.room_dims, pos, "microphone")
    for spec, pos in zip(config.sources, config.source_positions()):
        if not 0 <= spec.azimuth <= 180:
            raise GeometryError(f"source azimuth {spec.azimuth} outside [0, 180]")
        _check_inside(config.room_dims, pos, f"source at {spec.azimuth} deg")
    if min_separation is not None:
        az = sorted(s.azimuth for s in config.sources)
        gaps = np.diff(az)
        if len(gaps) and gaps.min() < min_separation:
            raise GeometryError(f"sources closer than {min_separation} deg: {az}")


@lru_cache(maxsize=256)
def _cached_rir(room_dims, rt60, source, mics, fs) -> np.ndarray:
    # scenes sharing geometry (a condition grid at grid azimuths) reuse responses
    rir = image_method_rir(room_dims, rt60, np.array(source), np.array(mics), fs)
    rir.setflags(write=False)
    return rir


def simulate_scene(
    config: SceneConfig,
    source_signals,
    fs: float = FS,
    min_separation: float | None = None,
) -> MultichannelSignal:
    """Reverberant multichannel mixture of the scene's sources plus white noise.

    Each source signal is convolved with its RIR to every microphone; the output
    has the length of the longest source signal. Noise is drawn from a generator
    seeded by ``config.seed`` and scaled so that the measured mixture-to-noise
    power ratio over all channels equals ``config.snr_db`` exactly.
    """
    check_scene(config, min_separation)
    if len(source_signals) != len(config.sources):
        raise ValueError(f"{len(config.sources)} sources but {len(source_signals)} signals")
    mics = config.geometry.positions
    n = max(len(s) for s in source_signals)
    mix = np.zeros((len(mics), n))
    mic_key = tuple(map(tuple, np.round(mics, 9)))
    for pos, sig in zip(config.source_positions(), source_signals):
        rir = _cached_rir(tuple(config.room_dims), config.rt60, tuple(np.round(pos, 9)), mic_key, fs)
        for m in range(len(mics)):
            mix[m] += fftconvolve(np.asarray(sig, dtype=float), rir[m])[:n] if len(sig) else 0.0
    if config.snr_db is not None:
        rng = np.random.default_rng(config.seed)
        noise = rng.standard_normal(mix.shape)
        p_signal = np.mean(mix**2)
        noise *= math.sqrt(p_signal / 10 ** (config.snr_db / 10) / np.mean(noise**2))
        mix = mix + noise
    return MultichannelSignal(mix, fs)


# --------------------------------------------------------------------------
# source signals


def synth_speech_like(duration: float, seed: int, fs: float = FS) -> np.ndarray:
    """Wideband speech-like test signal.

    A voiced harmonic part with a wandering pitch (90-220 Hz) plus shaped noise,
    both rolling off above 500 Hz, under a syllabic 2-8 Hz envelope that never
    drops below 15 % of its peak. Scaled to an RMS of 0.1.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    t = np.arange(n) / fs

    f0_base = rng.uniform(90, 220)
    f0 = f0_base * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    voiced = np.zeros(n)
    max_h = int(fs / 2 / (f0_base * 1.08))
    for h in range(1, max_h + 1):
        voiced += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
    voiced /= np.std(voiced) + 1e-12

    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / fs)
    spec /= np.maximum(1.0, freqs / 500.0)
    noise = np.fft.irfft(spec, n)
    noise /= np.std(noise) + 1e-12

    env = np.zeros(n)
    for _ in range(3):
        env += np.sin(2 * np.pi * rng.uniform(2, 8) * t + rng.uniform(0, 2 * np.pi))
    env = (env - env.min()) / (np.ptp(env) + 1e-12)
    env = 0.15 + 0.85 * env

    voicing = rng.uniform(0.5, 0.8)
    x = env * (voicing * voiced + (1 - voicing) * noise)
    return 0.1 * x / (np.sqrt(np.mean(x**2)) + 1e-12)


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM WAV to ``(channels, T)`` floats in [-1, 1) and its sample rate."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        channels, fs = w.getnchannels(), w.getframerate()
        raw = w.readframes(w.getnframes())
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, channels).T
    return data.astype(np.float64) / 32768.0, fs


def write_wav(path, samples: np.ndarray, fs: int) -> None:
    samples = np.atleast_2d(samples)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(samples.shape[0])
        w.setsampwidth(2)
        w.setframerate(int(fs))
        w.writeframes(pcm.T.tobytes())


def load_source_signal(ref: str, duration: float, seed: int, fs: float = FS) -> np.ndarray:
    """Resolve a source reference: ``synth``, ``synth:<seed>`` or a WAV path."""
    if ref == "synth":
        return synth_speech_like(duration, seed, fs)
    if ref.startswith("synth:"):
        return synth_speech_like(duration, int(ref.split(":", 1)[1]), fs)
    data, file_fs = read_wav(ref)
    if file_fs != fs:
        raise ValueError(f"{ref}: sample rate {file_fs} Hz, expected {fs} Hz")
    mono = data.mean(axis=0)
    n = int(round(duration * fs))
    if len(mono) < n:
        raise ValueError(f"{ref}: {len(mono)} samples, need {n}")
    start = (len(mono) - n) // 2
    return mono[start : start + n]


# --------------------------------------------------------------------------
# scene config files


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def read_scene_file(path) -> list[tuple[str, SceneConfig, float]]:
    """Parse an INI scene file.

    Each ``[scene NAME]`` section holds::

        room = 4, 7, 3              # metres
        rt60 = 0.38                 # seconds, or "none" for anechoic
        array_center = 2, 3.5, 1.5
        array_orientation = 0       # degrees, optional
        sources = 60:1.3, 120:1.3   # azimuth:distance pairs
        signals = synth:1, a.wav    # optional, one per source
        snr_db = 30                 # or "none"
        seed = 7
        duration = 0.8              # seconds

    Returns ``(name, config, duration)`` tuples in file order.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path, encoding="utf-8") as f:
        parser.read_file(f)
    scenes = []
    for section in parser.sections():
        if not section.startswith("scene"):
            continue
        s = parser[section]
        pairs = [item.split(":") for item in s["sources"].replace(" ", "").split(",") if item]
        refs = [r.strip() for r in s.get("signals", "").split(",") if r.strip()]
        refs += ["synth"] * (len(pairs) - len(refs))
        seed = s.getint("seed", 0)
        sources = tuple(SourceSpec(float(a), float(d), r) for (a, d), r in zip(pairs, refs))
        rt60 = s.get("rt60", "none")
        snr = s.get("snr_db", "30")
        config = SceneConfig(
            room_dims=_floats(s["room"]),
            rt60=None if rt60.lower() == "none" else float(rt60),
            array_center=_floats(s["array_center"]),
            sources=sources,
            array_orientation_deg=s.getfloat("array_orientation", 0.0),
            snr_db=None if snr.lower() == "none" else float(snr),
            seed=seed,
        )
        name = section.partition(" ")[2].strip() or str(len(scenes))
        scenes.append((name, config, s.getfloat("duration", 0.8)))
    return scenes


def scene_to_ini(name: str, config: SceneConfig, duration: float) -> str:
    def fmt(v):
        return "none" if v is None else repr(float(v))

    sources = ", ".join(f"{s.azimuth!r}:{s.distance!r}" for s in config.sources)
    signals = ", ".join(s.signal for s in config.sources)
    return (
        f"[scene {name}]\n"
        f"room = {', '.join(repr(float(v)) for v in config.room_dims)}\n"
        f"rt60 = {fmt(config.rt60)}\n"
        f"array_center = {', '.join(repr(float(v)) for v in config.array_center)}\n"
        f"array_orientation = {config.array_orientation_deg!r}\n"
        f"sources = {sources}\n"
        f"signals = {signals}\n"
        f"snr_db = {fmt(config.snr_db)}\n"
        f"seed = {config.seed}\n"
        f"duration = {duration!r}\n"
    )


def scene_signals(config: SceneConfig, duration: float, fs: float = FS) -> list[np.ndarray]:
    """Source signals for a scene; bare ``synth`` sources are seeded from the scene seed."""
    return [
        load_source_signal(s.signal, duration, 1_000_003 * config.seed + j, fs)
        for j, s in enumerate(config.sources)
    ]


def with_sources(config: SceneConfig, sources) -> SceneConfig:
    return replace(config, sources=tuple(sources))
