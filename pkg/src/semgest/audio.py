"""Audio feature extraction at token rate and beat detection.

The fine analysis runs at a small hop (default 10 ms); fine-hop features are
mean-pooled into token frames of d/fps seconds.  A clip of L motion tokens
gets exactly L+1 feature frames (one lookahead frame for the generator).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.io.wavfile

from .errors import AlignmentMismatchError, ConfigError, TooShortError
from .motion import read_matrix, write_matrix

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if not np.isfinite(s).all():
            raise ValueError("non-finite audio samples")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class BeatConfig:
    """Beat detector knobs; the minimum gap must exceed the analysis hop."""

    analysis_hop: float = 0.010  # seconds
    smooth_window: int = 3  # odd number of envelope frames
    threshold: float = 1.5  # peak must exceed mean + threshold * std
    min_gap: float = 0.25  # seconds between kept beats
    stats_window: float = 1.0  # seconds for the sliding mean/std

    def __post_init__(self):
        if self.min_gap <= self.analysis_hop:
            raise ConfigError("min_gap must exceed the analysis hop")


@dataclass(frozen=True)
class FeatureTrack:
    """Token-rate audio features: named channel groups plus beat times."""

    hop: float  # token-frame hop, seconds (= d / fps)
    groups: dict[str, np.ndarray]  # each (frames, width)
    beat_times: np.ndarray  # seconds, strictly ascending

    def __post_init__(self):
        counts = {g.shape[0] for g in self.groups.values()}
        if len(counts) > 1:
            raise ValueError(f"channel groups disagree on frame count: {counts}")
        beats = np.asarray(self.beat_times, dtype=np.float64)
        if beats.size and np.any(np.diff(beats) <= 0):
            raise ValueError("beat times must be strictly increasing")
        object.__setattr__(self, "beat_times", beats)

    @property
    def frame_count(self) -> int:
        return next(iter(self.groups.values())).shape[0]

    def stacked(self) -> np.ndarray:
        """All groups concatenated column-wise in sorted-name order."""
        return np.concatenate([self.groups[k] for k in sorted(self.groups)], axis=1)


def read_wav(path) -> AudioBuffer:
    """Load a WAV file (PCM16/32 or float); stereo is downmixed by average."""
    rate, data = scipy.io.wavfile.read(path)
    data = np.asarray(data)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioBuffer(data, int(rate))


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(audio.samples, -1.0, 1.0)
    scipy.io.wavfile.write(path, audio.sample_rate, (pcm * 32767).astype(np.int16))


# ---------------------------------------------------------------------------
# framing and spectra


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Consecutive windows of length ``win`` every ``hop`` samples (no padding)."""
    if len(x) < win:
        raise TooShortError(f"signal of {len(x)} samples < window {win}")
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def mel_from_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def hz_from_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters (n_mels, n_fft//2 + 1), unnormalized peaks of 1."""
    pts_mel = np.linspace(0.0, mel_from_hz(sample_rate / 2.0), n_mels + 2)
    pts_hz = hz_from_mel(pts_mel)
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, len(bin_hz)))
    for m in range(n_mels):
        lo, ce, hi = pts_hz[m], pts_hz[m + 1], pts_hz[m + 2]
        up = (bin_hz - lo) / (ce - lo)
        down = (hi - bin_hz) / (hi - ce)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mfcc(
    audio: AudioBuffer,
    n_coeff: int = 13,
    hop: float = 0.010,
    window: float = 0.025,
    n_mels: int = 26,
) -> np.ndarray:
    """Mel-frequency cepstral coefficients, one row per analysis frame.

    Hann-windowed power spectrum -> triangular mel energies -> log with a
    1e-10 floor -> orthonormal DCT-II, first ``n_coeff`` coefficients.
    """
    if n_coeff < 1:
        raise ConfigError("n_coeff must be >= 1")
    sr = audio.sample_rate
    win = max(2, round(window * sr))
    hop_n = max(1, round(hop * sr))
    frames = frame_signal(audio.samples, win, hop_n)
    spec = np.abs(np.fft.rfft(frames * np.hanning(win), axis=1)) ** 2
    fb = mel_filterbank(n_mels, win, sr)
    logmel = np.log(spec @ fb.T + LOG_FLOOR)
    return scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, :n_coeff]


def delta(features: np.ndarray) -> np.ndarray:
    """Per-frame central differences, one-sided at the ends."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape[0] < 2:
        return np.zeros_like(f)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / 2.0
    out[0] = f[1] - f[0]
    out[-1] = f[-1] - f[-2]
    return out


def chroma_stft(audio: AudioBuffer, hop: float = 0.010, window: float = 0.050) -> np.ndarray:
    """12-bin chromagram by folding STFT magnitudes onto pitch classes.

    A lightweight stand-in for a constant-Q chromagram; optional in the
    feature stack and off by default.
    """
    sr = audio.sample_rate
    win = max(4, round(window * sr))
    hop_n = max(1, round(hop * sr))
    frames = frame_signal(audio.samples, win, hop_n)
    mag = np.abs(np.fft.rfft(frames * np.hanning(win), axis=1))
    freqs = np.arange(mag.shape[1]) * sr / win
    out = np.zeros((mag.shape[0], 12))
    voiced = freqs > 30.0
    pitch = 12.0 * np.log2(freqs[voiced] / 440.0) + 69.0
    classes = np.round(pitch).astype(int) % 12
    for c in range(12):
        sel = np.zeros(mag.shape[1], dtype=bool)
        sel[np.flatnonzero(voiced)[classes == c]] = True
        out[:, c] = mag[:, sel].sum(axis=1)
    norm = out.max(axis=1, keepdims=True)
    return out / np.maximum(norm, LOG_FLOOR)


def onset_envelope(audio: AudioBuffer, cfg: BeatConfig = BeatConfig()) -> np.ndarray:
    """Half-wave-rectified spectral flux over non-overlapping hop-length frames.

    The first frame fluxes against silence, so energy at t=0 registers.
    Linear in amplitude: scaling the signal scales the envelope.
    """
    hop_n = max(2, round(cfg.analysis_hop * audio.sample_rate))
    frames = frame_signal(audio.samples, hop_n, hop_n)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    prev = np.vstack([np.zeros((1, mag.shape[1])), mag[:-1]])
    return np.maximum(mag - prev, 0.0).sum(axis=1)


def envelope_times(n_frames: int, cfg: BeatConfig = BeatConfig()) -> np.ndarray:
    """Center time (seconds) of each onset-envelope frame."""
    return (np.arange(n_frames) + 0.5) * cfg.analysis_hop


def _moving_mean(x: np.ndarray, width: int) -> np.ndarray:
    width = max(1, int(width)) | 1  # odd
    if width == 1 or len(x) < 2:
        return x.astype(np.float64, copy=True)
    pad = width // 2
    # reflect, not edge: edge padding would overweight a loud boundary frame
    padded = np.pad(x, pad, mode="reflect")
    kernel = np.ones(width) / width
    return np.convolve(padded, kernel, mode="valid")


def detect_beats(envelope: np.ndarray, cfg: BeatConfig = BeatConfig()) -> np.ndarray:
    """Beat times (seconds) from an onset envelope.

    Local maxima above a sliding mean + threshold*std are thinned greedily,
    strongest first, until the minimum inter-beat gap holds.
    """
    env = np.asarray(envelope, dtype=np.float64)
    if env.size == 0:
        raise TooShortError("empty onset envelope")
    smooth = _moving_mean(env, cfg.smooth_window)
    stats_w = max(3, round(cfg.stats_window / cfg.analysis_hop)) | 1
    local_mean = _moving_mean(smooth, stats_w)
    local_sq = _moving_mean(smooth**2, stats_w)
    local_std = np.sqrt(np.maximum(local_sq - local_mean**2, 0.0))
    thresh = local_mean + cfg.threshold * local_std

    n = len(smooth)
    left = np.r_[smooth[0] - 1.0, smooth[:-1]]
    right = np.r_[smooth[1:], smooth[-1] - 1.0]
    is_peak = (smooth >= left) & (smooth >= right) & (smooth > thresh) & (smooth > 0)
    candidates = np.flatnonzero(is_peak)
    if candidates.size == 0:
        return np.zeros(0)

    gap_frames = cfg.min_gap / cfg.analysis_hop
    order = candidates[np.argsort(-smooth[candidates], kind="stable")]
    kept: list[int] = []
    for idx in order:
        if all(abs(idx - k) * 1.0 >= gap_frames for k in kept):
            kept.append(idx)
    kept.sort()
    return envelope_times(n, cfg)[kept]


def tempogram(
    envelope: np.ndarray,
    window: float = 2.0,
    cfg: BeatConfig = BeatConfig(),
    max_lag: int | None = None,
) -> np.ndarray:
    """Per-frame autocorrelation of the mean-removed envelope over lags.

    Rows are normalized so lag 0 equals 1; all-zero windows give zero rows.
    """
    env = np.asarray(envelope, dtype=np.float64)
    w = max(4, round(window / cfg.analysis_hop))
    lags = max_lag if max_lag is not None else w // 2
    half = w // 2
    padded = np.pad(env, (half, w - half), mode="constant")
    n = len(env)
    windows = np.lib.stride_tricks.sliding_window_view(padded, w)[:n]
    windows = windows - windows.mean(axis=1, keepdims=True)
    out = np.empty((n, lags))
    for tau in range(lags):
        seg = windows[:, : w - tau] * windows[:, tau:]
        out[:, tau] = seg.sum(axis=1)
    zero = out[:, 0] <= 0
    denom = np.where(zero, 1.0, out[:, 0])
    out = out / denom[:, None]
    out[zero] = 0.0
    return out


# ---------------------------------------------------------------------------
# token-rate feature stack


def pool_to_token_frames(
    features: np.ndarray, frame_times: np.ndarray, token_hop: float, n_token_frames: int
) -> np.ndarray:
    """Mean-pool fine-hop rows into token frames by frame center time.

    Token bins with no fine frames inherit the previous pooled row.
    """
    idx = np.floor(frame_times / token_hop).astype(int)
    idx = np.clip(idx, 0, n_token_frames - 1)
    width = features.shape[1] if features.ndim == 2 else 1
    feats = features.reshape(len(features), width)
    out = np.zeros((n_token_frames, width))
    counts = np.bincount(idx, minlength=n_token_frames).astype(float)
    for c in range(width):
        out[:, c] = np.bincount(idx, weights=feats[:, c], minlength=n_token_frames)
    filled = counts > 0
    out[filled] /= counts[filled, None]
    last = None
    for t in range(n_token_frames):
        if filled[t]:
            last = out[t]
        elif last is not None:
            out[t] = last
    return out


def token_frame_count(duration: float, fps: float, d: int) -> int:
    """floor(duration * fps / d) + 1: L tokens plus one lookahead frame."""
    return int(np.floor(duration * fps / d + 1e-9)) + 1


def build_feature_stack(
    audio: AudioBuffer,
    fps: float,
    d: int,
    cfg: BeatConfig = BeatConfig(),
    n_mfcc: int = 13,
    include_chroma: bool = False,
    tempogram_window: float = 2.0,
    expect_tokens: int | None = None,
) -> FeatureTrack:
    """Extract the full token-rate feature stack plus beat times.

    Channel groups: mfcc, mfcc_delta, onset, tempogram, and chroma when
    enabled.  Raises an alignment error if the audio disagrees with an
    expected token count by more than one token frame.
    """
    token_hop = d / fps
    n_tokens = token_frame_count(audio.duration, fps, d) - 1
    if expect_tokens is not None and abs(n_tokens - expect_tokens) > 1:
        raise AlignmentMismatchError(
            f"audio implies {n_tokens} tokens but motion has {expect_tokens}"
        )
    if expect_tokens is not None:
        n_tokens = expect_tokens
    n_frames = n_tokens + 1

    mf = mfcc(audio, n_coeff=n_mfcc, hop=cfg.analysis_hop)
    sr = audio.sample_rate
    win = max(2, round(0.025 * sr))
    hop_n = max(1, round(cfg.analysis_hop * sr))
    mfcc_times = (np.arange(mf.shape[0]) * hop_n + win / 2) / sr

    env = onset_envelope(audio, cfg)
    env_times = envelope_times(len(env), cfg)
    tgram = tempogram(env, window=tempogram_window, cfg=cfg)

    groups = {
        "mfcc": pool_to_token_frames(mf, mfcc_times, token_hop, n_frames),
        "mfcc_delta": pool_to_token_frames(delta(mf), mfcc_times, token_hop, n_frames),
        "onset": pool_to_token_frames(env, env_times, token_hop, n_frames),
        "tempogram": pool_to_token_frames(tgram, env_times, token_hop, n_frames),
    }
    if include_chroma:
        ch = chroma_stft(audio, hop=cfg.analysis_hop)
        ch_win = max(4, round(0.050 * sr))
        ch_times = (np.arange(ch.shape[0]) * hop_n + ch_win / 2) / sr
        groups["chroma"] = pool_to_token_frames(ch, ch_times, token_hop, n_frames)

    beats = detect_beats(env, cfg)
    return FeatureTrack(hop=token_hop, groups=groups, beat_times=beats)


# ---------------------------------------------------------------------------
# serialization: binary matrix + beats sidecar + group layout sidecar


def save_feature_track(path, track: FeatureTrack) -> None:
    path = str(path)
    write_matrix(path, track.stacked())
    with open(path + ".beats.txt", "w") as f:
        for t in track.beat_times:
            f.write(f"{t:.6f}\n")
    meta = {
        "hop": track.hop,
        "groups": [[k, int(track.groups[k].shape[1])] for k in sorted(track.groups)],
    }
    with open(path + ".meta.json", "w") as f:
        json.dump(meta, f)


def load_feature_track(path) -> FeatureTrack:
    path = str(path)
    stacked = read_matrix(path)
    with open(path + ".meta.json") as f:
        meta = json.load(f)
    with open(path + ".beats.txt") as f:
        beats = np.array([float(line) for line in f if line.strip()])
    groups = {}
    col = 0
    for name, width in meta["groups"]:
        groups[name] = stacked[:, col : col + width]
        col += width
    return FeatureTrack(hop=float(meta["hop"]), groups=groups, beat_times=beats)
