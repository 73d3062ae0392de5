"""Preprocessing: fixed length, zero-phase FIR band-pass, STFT masking, epoch assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .ingest import CHANNELS, SAMPLE_RATE, TRIAL_LENGTH, RawTrial, serialize_trial


@dataclass
class FilterSpec:
    sample_rate_hz: float = SAMPLE_RATE
    passband_low_hz: float = 0.5
    passband_high_hz: float = 50.0
    tap_count: int = 129

    def __post_init__(self):
        nyq = self.sample_rate_hz / 2
        if not 0 <= self.passband_low_hz < self.passband_high_hz < nyq:
            raise ValueError(
                f"band edges must satisfy 0 <= low < high < {nyq:g} Hz, got "
                f"{self.passband_low_hz:g}-{self.passband_high_hz:g}")
        if self.tap_count < 3 or self.tap_count % 2 == 0:
            raise ValueError("tap_count must be an odd integer >= 3")


@dataclass
class StftSpec:
    window_length: int = 32
    hop: int = 16
    sample_rate_hz: float = SAMPLE_RATE
    cutoff_hz: float | None = 50.0
    keep: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.hop <= self.window_length:
            raise ValueError("need 0 < hop <= window_length")

    @property
    def window(self) -> np.ndarray:
        # periodic Hann: overlap-adds to a constant at hop = N/2
        n = np.arange(self.window_length)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.window_length)

    @property
    def bin_freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.window_length, d=1.0 / self.sample_rate_hz)

    def mask(self) -> np.ndarray:
        """Boolean keep-mask over frequency bins."""
        if self.keep is not None:
            keep = np.asarray(self.keep, dtype=bool)
            if keep.shape != self.bin_freqs.shape:
                raise ValueError(f"mask needs {self.bin_freqs.size} bins")
            return keep
        if self.cutoff_hz is None:
            return np.ones(self.bin_freqs.size, dtype=bool)
        return self.bin_freqs <= self.cutoff_hz

    def cola_sum(self) -> np.ndarray:
        w, h = self.window, self.hop
        total = np.zeros(h)
        for start in range(0, self.window_length, h):
            seg = w[start:start + h]
            total[:len(seg)] += seg
        return total

    def is_cola(self, tol: float = 1e-10) -> bool:
        s = self.cola_sum()
        return bool(s.min() > 0 and np.ptp(s) <= tol * s.max())


@dataclass
class EpochTensor:
    data: np.ndarray                 # (N, 5, 384, 1)
    labels: np.ndarray               # (N,)
    channel_names: list[str] = field(default_factory=lambda: list(CHANNELS))
    sample_rate: float = SAMPLE_RATE
    class_names: list[str] = field(default_factory=list)
    split: np.ndarray | None = None  # per-trial split name
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 4 or self.data.shape[1] != len(CHANNELS) or self.data.shape[3] != 1:
            raise ValueError(f"epoch data must be (N, 5, T, 1), got {self.data.shape}")
        if len(self.labels) != len(self.data):
            raise ValueError("labels do not align with trials")
        if not np.isfinite(self.data).all():
            raise ValueError("epoch data contains NaN or Inf")
        if self.split is None:
            self.split = np.array(["train"] * len(self.data))
        self.split = np.asarray(self.split)

    def __len__(self):
        return len(self.data)

    def subset(self, idx) -> "EpochTensor":
        idx = np.asarray(idx, dtype=np.int64)
        return EpochTensor(self.data[idx], self.labels[idx], list(self.channel_names),
                           self.sample_rate, list(self.class_names), self.split[idx],
                           [self.paths[i] for i in idx] if self.paths else [])

    def where(self, split: str) -> "EpochTensor":
        return self.subset(np.flatnonzero(self.split == split))


def fix_length(wave, target: int = TRIAL_LENGTH) -> np.ndarray:
    """Truncate at the end or right-pad with zeros to ``target`` samples."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        raise ValueError("empty waveform")
    if wave.size >= target:
        return wave[:target].copy()
    return np.concatenate([wave, np.zeros(target - wave.size)])


def fir_design(spec: FilterSpec) -> np.ndarray:
    """Hamming-windowed sinc band-pass with an exact zero at DC.

    The difference of two windowed low-pass sincs leaves a residual DC gain
    when the lower edge is narrower than the window's main lobe; a scaled
    copy of the window is subtracted to null it. Taps are then scaled to
    unit gain at the band centre.
    """
    n = spec.tap_count
    m = np.arange(n) - (n - 1) / 2
    fs = spec.sample_rate_hz

    def lowpass(fc):
        return 2 * fc / fs * np.sinc(2 * fc / fs * m)

    win = np.hamming(n)
    h = (lowpass(spec.passband_high_hz) - lowpass(spec.passband_low_hz)) * win
    h = h - h.sum() / win.sum() * win
    center = 0.5 * (spec.passband_low_hz + spec.passband_high_hz)
    h /= abs(freq_response(h, center, fs))
    return 0.5 * (h + h[::-1])  # exact symmetry after floating-point scaling


def freq_response(taps, freq_hz, sample_rate_hz: float = SAMPLE_RATE):
    """Complex transfer function of FIR ``taps`` evaluated at ``freq_hz``."""
    taps = np.asarray(taps, dtype=np.float64)
    w = 2 * np.pi * np.asarray(freq_hz, dtype=np.float64) / sample_rate_hz
    k = np.arange(taps.size)
    return np.exp(-1j * np.multiply.outer(w, k)) @ taps


def filtfilt(wave, taps) -> np.ndarray:
    """Forward-then-reverse FIR filtering with reflected edges; zero net phase."""
    x = np.asarray(wave, dtype=np.float64)
    taps = np.asarray(taps, dtype=np.float64)
    pad = taps.size - 1
    xp = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")

    def causal(v):
        return np.convolve(v, taps)[:v.size]

    y = causal(causal(xp)[::-1])[::-1]
    return y[pad:pad + x.size]


def stft(wave, spec: StftSpec) -> np.ndarray:
    """Complex spectrogram, shape (frames, window_length // 2 + 1)."""
    x = np.asarray(wave, dtype=np.float64)
    n, h = spec.window_length, spec.hop
    if x.size < n:
        raise ValueError(f"waveform of {x.size} samples is shorter than one window ({n})")
    frames = (x.size - n) // h + 1
    idx = np.arange(n)[None, :] + h * np.arange(frames)[:, None]
    return np.fft.rfft(x[idx] * spec.window, axis=1)


def istft(spec_frames, spec: StftSpec, length: int | None = None) -> np.ndarray:
    """Overlap-add resynthesis normalised by the summed analysis window.

    Samples not covered by any window with non-zero weight come back as zero.
    """
    if not spec.is_cola():
        raise ValueError(f"window {spec.window_length} / hop {spec.hop} violates constant overlap-add")
    spec_frames = np.asarray(spec_frames)
    n, h = spec.window_length, spec.hop
    frames = spec_frames.shape[0]
    total = (frames - 1) * h + n
    length = total if length is None else length
    out = np.zeros(max(total, length))
    wsum = np.zeros_like(out)
    segs = np.fft.irfft(spec_frames, n=n, axis=1)
    w = spec.window
    for f in range(frames):
        out[f * h:f * h + n] += segs[f]
        wsum[f * h:f * h + n] += w
    ok = wsum > 1e-8 * w.max()
    out[ok] /= wsum[ok]
    out[~ok] = 0.0
    return out[:length]


def stft_denoise(wave, spec: StftSpec) -> np.ndarray:
    """Zero masked STFT bins and resynthesise; output length equals input length.

    The signal is reflected by half a window at each end (and up to a frame
    boundary at the tail) so every original sample sits under full overlap.
    """
    x = np.asarray(wave, dtype=np.float64)
    n, h = spec.window_length, spec.hop
    front = n // 2
    body = x.size + 2 * front
    tail = front + (-(body - n)) % h
    xp = np.pad(x, (front, tail), mode="reflect" if x.size > max(front, tail) else "edge")
    frames = stft(xp, spec)
    frames[:, ~spec.mask()] = 0.0
    return istft(frames, spec, xp.size)[front:front + x.size]


def zscore(wave) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    sd = wave.std()
    return (wave - wave.mean()) / (sd if sd > 0 else 1.0)


@dataclass
class PipelineConfig:
    filter: FilterSpec = field(default_factory=FilterSpec)
    stft: StftSpec = field(default_factory=StftSpec)
    length: int = TRIAL_LENGTH
    zscore: bool = False


def preprocess_channel(wave, cfg: PipelineConfig, taps: np.ndarray | None = None) -> np.ndarray:
    taps = fir_design(cfg.filter) if taps is None else taps
    y = stft_denoise(filtfilt(fix_length(wave, cfg.length), taps), cfg.stft)
    return zscore(y) if cfg.zscore else y


def assemble_epochs(trials: Sequence[RawTrial], cfg: PipelineConfig | None = None,
                    class_names: Sequence[str] = (), splits: Sequence[str] | None = None,
                    dump_dir=None) -> EpochTensor:
    """Run every channel of every trial through fix_length -> filtfilt -> stft_denoise.

    With ``dump_dir`` the filtered waveforms are also written as
    ``<name>.filtered.csv`` in the trial-file format.
    """
    cfg = cfg or PipelineConfig()
    taps = fir_design(cfg.filter)
    out = np.empty((len(trials), len(CHANNELS), cfg.length, 1))
    for i, tr in enumerate(trials):
        try:
            for c, name in enumerate(CHANNELS):
                out[i, c, :, 0] = preprocess_channel(tr.channels[name], cfg, taps)
        except Exception as exc:
            raise ValueError(f"preprocessing failed for {tr.path or f'trial {i}'}: {exc}") from exc
        if dump_dir is not None:
            stem = Path(tr.path).stem if tr.path else f"trial_{i:05d}"
            filtered = RawTrial({name: out[i, c, :, 0] for c, name in enumerate(CHANNELS)})
            Path(dump_dir, f"{stem}.filtered.csv").write_text(serialize_trial(filtered),
                                                              encoding="utf-8")
    return EpochTensor(out, [t.label for t in trials], list(CHANNELS), cfg.filter.sample_rate_hz,
                       list(class_names), None if splits is None else np.asarray(splits),
                       [t.path for t in trials])


EPOCH_MAGIC = b"EEGEPOC1"


def save_epochs(ep: EpochTensor, path) -> None:
    splits = sorted(set(ep.split.tolist()))
    codes = np.array([splits.index(s) for s in ep.split], dtype=np.int64)
    meta = {"kind": "epochs", "version": 1, "shape": list(ep.data.shape),
            "channels": list(ep.channel_names), "sample_rate": ep.sample_rate,
            "class_names": list(ep.class_names), "splits": splits, "paths": list(ep.paths)}
    container.write_file(path, EPOCH_MAGIC,
                         {"data": ep.data, "labels": ep.labels, "split": codes}, meta)


def load_epochs(path) -> EpochTensor:
    arrays, meta = container.read_file(path, EPOCH_MAGIC)
    if meta.get("version") != 1:
        raise container.ContainerError(f"unsupported epoch file version {meta.get('version')}")
    if list(arrays["data"].shape) != meta["shape"]:
        raise container.ContainerError("epoch data shape disagrees with the header")
    split = np.array(meta["splits"], dtype=object)[arrays["split"]].astype(str) \
        if len(arrays["split"]) else np.array([], dtype=str)
    return EpochTensor(arrays["data"], arrays["labels"], list(meta["channels"]),
                       float(meta["sample_rate"]), list(meta["class_names"]), split,
                       list(meta["paths"]))
