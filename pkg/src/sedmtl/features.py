"""Log mel-band energy extraction from mono waveforms.

The chain is: 40 ms Hamming-windowed frames with 50% overlap, power spectrum
on the next power-of-two FFT grid, a 64-band triangular mel filterbank
(peak-normalized rows), then natural log with a 1e-10 floor. All arithmetic
is float64 and deterministic, so cached features are reproducible
byte-for-byte.
"""

import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError

N_MEL_BANDS = 64
FRAME_LEN_S = 0.040
HOP_S = 0.020
LOG_FLOOR = 1e-10

CACHE_MAGIC = b"SDFC"
CACHE_VERSION = 1


@dataclass
class Waveform:
    samples: np.ndarray  # mono, in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ArgumentError(f"sample rate must be positive, got {self.sample_rate}")


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_bands, fft_bins // 2 + 1)
    band_edges_hz: np.ndarray  # n_bands + 2 edge frequencies


@dataclass
class LogMelSpectrogram:
    data: np.ndarray  # (n_bands, n_frames)
    hop_seconds: float
    clip_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE PCM 16-bit mono file."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            if channels != 1:
                raise DataError(
                    f"{path}: expected mono audio, got {channels} channels"
                )
            if wf.getsampwidth() != 2:
                raise DataError(
                    f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit"
                )
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def frame_signal(
    waveform: Waveform, frame_len_s: float = FRAME_LEN_S, hop_s: float = HOP_S
) -> np.ndarray:
    """Split into Hamming-windowed frames of frame_len_s every hop_s seconds.

    Trailing samples that do not fill a frame are dropped. Returns an
    (n_frames, frame_samples) array.
    """
    frame_len = int(round(frame_len_s * waveform.sample_rate))
    hop = int(round(hop_s * waveform.sample_rate))
    n_samples = waveform.samples.size
    if n_samples < frame_len:
        raise ArgumentError(
            f"input of {n_samples} samples is shorter than one frame "
            f"({frame_len} samples at {waveform.sample_rate} Hz)"
        )
    n_frames = 1 + (n_samples - frame_len) // hop
    window = np.hamming(frame_len)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return waveform.samples[idx] * window


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def power_spectrum(frame: np.ndarray, fft_bins: int | None = None) -> np.ndarray:
    """Squared magnitude of the positive-frequency DFT half.

    The frame is zero-padded to fft_bins (default: next power of two at or
    above the frame length).
    """
    frame = np.asarray(frame, dtype=np.float64)
    if fft_bins is None:
        fft_bins = _next_pow2(frame.size)
    spectrum = np.fft.rfft(frame, n=fft_bins)
    return (spectrum.real**2 + spectrum.imag**2)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    sample_rate: int,
    fft_bins: int,
    n_bands: int = N_MEL_BANDS,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> MelFilterbank:
    """Triangular filters with centers equally spaced on the mel scale, each
    row peak-normalized to 1.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    if n_bands < 1:
        raise ArgumentError(f"need at least one band, got {n_bands}")
    if not 0.0 <= fmin < fmax <= sample_rate / 2.0:
        raise ArgumentError(
            f"invalid frequency range [{fmin}, {fmax}] at {sample_rate} Hz"
        )
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    bin_hz = np.arange(fft_bins // 2 + 1) * (sample_rate / fft_bins)
    weights = np.zeros((n_bands, bin_hz.size))
    for b in range(n_bands):
        left, center, right = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        peak = tri.max()
        if peak <= 0.0:
            raise ArgumentError(
                f"mel band {b} spans no FFT bin; increase fft_bins or lower n_bands"
            )
        weights[b] = tri / peak
    return MelFilterbank(weights=weights, band_edges_hz=edges_hz)


def log_mel_energy(
    waveform: Waveform,
    n_bands: int = N_MEL_BANDS,
    frame_len_s: float = FRAME_LEN_S,
    hop_s: float = HOP_S,
    clip_id: str = "",
) -> LogMelSpectrogram:
    """Full feature chain; returns an (n_bands, n_frames) log energy matrix."""
    frames = frame_signal(waveform, frame_len_s, hop_s)
    fft_bins = _next_pow2(frames.shape[1])
    bank = build_mel_filterbank(waveform.sample_rate, fft_bins, n_bands)
    spectra = power_spectrum(frames, fft_bins)  # (n_frames, bins)
    mel_energy = spectra @ bank.weights.T
    return LogMelSpectrogram(
        data=np.log(mel_energy.T + LOG_FLOOR), hop_seconds=hop_s, clip_id=clip_id
    )


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray


def compute_band_stats(spectrograms) -> BandStats:
    """Per-band mean/std pooled over all frames of the given spectrograms.

    Call this on training folds only; the resulting stats are then applied to
    every split.
    """
    stacked = np.concatenate([s.data for s in spectrograms], axis=1)
    return BandStats(mean=stacked.mean(axis=1), std=stacked.std(axis=1))


def standardize(features: LogMelSpectrogram, stats: BandStats) -> LogMelSpectrogram:
    if np.any(stats.std <= 0.0):
        bad = int(np.argmin(stats.std))
        raise ArgumentError(f"band {bad} has non-positive std {stats.std[bad]}")
    data = (features.data - stats.mean[:, None]) / stats.std[:, None]
    return LogMelSpectrogram(
        data=data, hop_seconds=features.hop_seconds, clip_id=features.clip_id
    )


def write_feature_cache(path, features: LogMelSpectrogram):
    """Binary cache: magic, u16 version, u32 D, u32 N, f64 hop, then D*N
    little-endian f64 values row-major.
    """
    d, n = features.data.shape
    header = CACHE_MAGIC + struct.pack("<HIId", CACHE_VERSION, d, n, features.hop_seconds)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(features.data, dtype="<f8").tobytes())


def read_feature_cache(path, clip_id: str = "") -> LogMelSpectrogram:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_len = len(CACHE_MAGIC) + struct.calcsize("<HIId")
    if len(blob) < head_len or blob[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not a feature cache file")
    version, d, n, hop = struct.unpack("<HIId", blob[4:head_len])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    payload = blob[head_len:]
    if len(payload) != d * n * 8:
        raise DataError(
            f"{path}: payload holds {len(payload)} bytes, expected {d * n * 8}"
        )
    data = np.frombuffer(payload, dtype="<f8").reshape(d, n).astype(np.float64)
    return LogMelSpectrogram(data=data, hop_seconds=hop, clip_id=clip_id)
