"""Audio front end: STFT, mel filterbanks, log-mel spectrograms and MFCCs.

Produces the three per-utterance model inputs: a ``T×39`` MFCC sequence and two
log-mel spectrograms computed with 256- and 512-point FFTs, each stretched to
its corpus-median length by nearest-neighbour interpolation along time.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

log = logging.getLogger(__name__)

TARGET_SR = 16000
LOG_EPS = 1e-6

# MFCC framing (HTK / openSMILE MFCC12_E_D_A family)
MFCC_FRAME_S = 0.025
MFCC_HOP_S = 0.010
MFCC_FILTERS = 26
MFCC_CEPS = 12
DELTA_WINDOW = 2


class UtteranceTooShort(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("audio clip must be a non-empty mono buffer")
        if not np.all(np.isfinite(s)):
            raise ValueError("audio clip contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    n_fft: int
    sample_rate: int = TARGET_SR
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.n_fft < 4 or self.n_fft & (self.n_fft - 1):
            raise ConfigurationError(f"n_fft must be a power of two >= 4, got {self.n_fft}")
        fmax = self.sample_rate / 2 if self.fmax is None else self.fmax
        if not 0 <= self.fmin < fmax <= self.sample_rate / 2:
            raise ConfigurationError(f"need 0 <= fmin < fmax <= sr/2, got fmin={self.fmin}, fmax={fmax}")
        object.__setattr__(self, "fmax", float(fmax))

    @property
    def hop(self) -> int:
        return self.n_fft // 2

    @property
    def n_mels(self) -> int:
        return self.n_fft // 4

    @property
    def config_id(self) -> str:
        return f"nfft{self.n_fft}"


# time-resolved (S1) and frequency-resolved (S2) front ends
S1_CONFIG = SpectrogramConfig(256)
S2_CONFIG = SpectrogramConfig(512)


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # n_mels × T
    config_id: str

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MfccSequence:
    values: np.ndarray  # T × 39

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != 39:
            raise ValueError(f"MFCC sequence must be T×39, got {self.values.shape}")


def resample_linear(clip: AudioClip, target_sr: int = TARGET_SR) -> AudioClip:
    if clip.sample_rate == target_sr:
        return clip
    n_out = max(1, int(round(len(clip) * target_sr / clip.sample_rate)))
    t_out = np.arange(n_out) / target_sr
    t_in = np.arange(len(clip)) / clip.sample_rate
    return AudioClip(np.interp(t_out, t_in, clip.samples), target_sr)


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    n = (x.size - size) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, size)[::hop][:n]


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_magnitude(clip: AudioClip, n_fft: int, hop: int) -> np.ndarray:
    """``(n_fft/2+1) × T`` magnitudes of Hann-windowed frames; trailing partial frames dropped."""
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ConfigurationError(f"n_fft must be a power of two, got {n_fft}")
    if hop < 1:
        raise ConfigurationError(f"hop must be >= 1, got {hop}")
    if len(clip) < n_fft:
        raise UtteranceTooShort(f"utterance too short: {len(clip)} samples, need at least {n_fft}")
    frames = _frames(clip.samples, n_fft, hop) * hann(n_fft)
    return np.abs(np.fft.rfft(frames, axis=1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz) equally spaced on the mel scale."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def _triangle_integral(x: np.ndarray, lo: float, mid: float, hi: float) -> np.ndarray:
    """Integral from -inf to x of the unit-peak triangle on (lo, mid, hi)."""
    x = np.clip(x, lo, hi)
    up = (np.minimum(x, mid) - lo) ** 2 / (2 * (mid - lo))
    d = np.maximum(x - mid, 0.0)
    down = d - d * d / (2 * (hi - mid))
    return up + down


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters, ``n_mels × (n_fft/2+1)``.

    Each weight is the mean of the triangle over the frequency interval owned
    by that FFT bin (bin centre ± half a bin), so narrow low-frequency filters
    still land on at least one bin.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    if n_mels < 1:
        raise ConfigurationError("n_mels must be >= 1")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ConfigurationError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}")
    n_bins = n_fft // 2 + 1
    if n_mels > n_bins:
        raise ConfigurationError(f"{n_mels} mel filters exceed the {n_bins} FFT bins of n_fft={n_fft}")
    df = sample_rate / n_fft
    lo_edges = (np.arange(n_bins) - 0.5) * df
    hi_edges = lo_edges + df
    pts = mel_band_edges(n_mels, fmin, fmax)
    fb = np.empty((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        fb[m] = (_triangle_integral(hi_edges, lo, mid, hi) - _triangle_integral(lo_edges, lo, mid, hi)) / df
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(f"mel filters {empty.tolist()} cover no FFT bin (n_mels={n_mels}, n_fft={n_fft})")
    return fb


def mel_spectrogram(clip: AudioClip, cfg: SpectrogramConfig) -> MelSpectrogram:
    """Mel-projected power spectrogram (not yet log-compressed).

    The tail is zero-padded to complete the last hop, so no samples are lost and
    the two resolutions keep a frame ratio of 2 within one frame.
    """
    n = len(clip)
    if n > cfg.n_fft:
        covered = cfg.n_fft + cfg.hop * -(-(n - cfg.n_fft) // cfg.hop)
        clip = AudioClip(np.pad(clip.samples, (0, covered - n)), clip.sample_rate)
    power = stft_magnitude(clip, cfg.n_fft, cfg.hop) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax)
    return MelSpectrogram(fb @ power, cfg.config_id)


def log_transform(m: MelSpectrogram, eps: float = LOG_EPS) -> MelSpectrogram:
    if np.any(m.values < 0):
        raise ValueError("log_transform expects a nonnegative spectrogram")
    return MelSpectrogram(np.log(m.values + eps), m.config_id)


def nn_interpolate_time(m: MelSpectrogram, target_T: int) -> MelSpectrogram:
    T = m.values.shape[1]
    if target_T < 1 or T < 1:
        raise ValueError(f"need target_T >= 1 and T >= 1, got target_T={target_T}, T={T}")
    idx = np.floor((np.arange(target_T) + 0.5) * T / target_T).astype(np.int64)
    idx = np.clip(idx, 0, T - 1)
    return MelSpectrogram(m.values[:, idx], m.config_id)


def median_time_steps(lengths) -> int:
    """Lower median, so the result is a length some utterance actually has."""
    xs = sorted(int(v) for v in lengths)
    if not xs:
        raise ValueError("median of an empty list")
    return xs[(len(xs) - 1) // 2]


def _deltas(feat: np.ndarray, n: int = DELTA_WINDOW) -> np.ndarray:
    T = feat.shape[0]
    padded = np.pad(feat, ((n, n), (0, 0)), mode="edge")
    num = np.zeros_like(feat)
    for k in range(1, n + 1):
        num += k * (padded[n + k:n + k + T] - padded[n - k:n - k + T])
    return num / (2 * sum(k * k for k in range(1, n + 1)))


def mfcc_features(clip: AudioClip) -> MfccSequence:
    """12 cepstra + log energy, with deltas and accelerations (``T×39``)."""
    sr = clip.sample_rate
    size = int(round(MFCC_FRAME_S * sr))
    hop = int(round(MFCC_HOP_S * sr))
    if len(clip) < size:
        raise UtteranceTooShort(f"utterance too short: {len(clip)} samples, need at least {size}")
    n_fft = 1 << (size - 1).bit_length()
    frames = _frames(clip.samples, size, hop)
    frames = frames - frames.mean(axis=1, keepdims=True)
    log_energy = np.log((frames ** 2).sum(axis=1) + LOG_EPS)
    power = np.abs(np.fft.rfft(frames * np.hamming(size), n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(MFCC_FILTERS, n_fft, sr, 0.0, sr / 2)
    log_mel = np.log(power @ fb.T + LOG_EPS)
    ceps = dct(log_mel, type=2, norm="ortho", axis=1)[:, 1:MFCC_CEPS + 1]
    base = np.column_stack([ceps, log_energy])
    delta = _deltas(base)
    return MfccSequence(np.hstack([base, delta, _deltas(delta)]))


@dataclass(frozen=True)
class UtteranceFeatures:
    mfcc: MfccSequence
    s1: MelSpectrogram
    s2: MelSpectrogram


def _raw_features(clip: AudioClip):
    clip = resample_linear(clip)
    return mfcc_features(clip), mel_spectrogram(clip, S1_CONFIG), mel_spectrogram(clip, S2_CONFIG)


class CorpusError(ValueError):
    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        lines = "; ".join(f"{k}: {v}" for k, v in failures.items())
        super().__init__(f"{len(failures)} utterance(s) failed preprocessing: {lines}")


def preprocess_corpus(clips, ids=None, jobs: int = 1):
    """Turn a corpus into per-utterance (MFCC, S1, S2) features.

    Each resolution is interpolated to its own corpus-median frame count, then
    log-compressed. Returns ``(features, (median_s1, median_s2))``.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("empty corpus")
    ids = [str(i) for i in range(len(clips))] if ids is None else list(ids)
    results: dict[str, tuple] = {}
    failures: dict[str, str] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {uid: pool.submit(_raw_features, c) for uid, c in zip(ids, clips)}
            for uid, fut in futures.items():
                try:
                    results[uid] = fut.result()
                except ValueError as e:
                    failures[uid] = str(e)
    else:
        for uid, c in zip(ids, clips):
            try:
                results[uid] = _raw_features(c)
            except ValueError as e:
                failures[uid] = str(e)
    if failures:
        raise CorpusError(failures)
    med1 = median_time_steps(r[1].n_frames for r in results.values())
    med2 = median_time_steps(r[2].n_frames for r in results.values())
    log.info("median frames: S1=%d S2=%d", med1, med2)
    out = [
        UtteranceFeatures(
            mfcc,
            log_transform(nn_interpolate_time(s1, med1)),
            log_transform(nn_interpolate_time(s2, med2)),
        )
        for mfcc, s1, s2 in (results[uid] for uid in ids)
    ]
    return out, (med1, med2)
