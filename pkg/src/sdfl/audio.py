"""WAV I/O for 16 kHz mono material.

Readers accept RIFF/WAVE files carrying 16-bit PCM or 32-bit IEEE float at
exactly 16 kHz.  PCM samples are decoded to reals by dividing by 32768;
float payloads pass through untouched, so a float32 write/read round-trip is
bitwise exact.  Any other rate is refused outright (resample externally);
this toolkit never resamples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16_000
PCM16_SCALE = 32768.0


class AudioError(ValueError):
    """Unusable audio data (bad container, rate, codec, or content)."""


@dataclass
class Waveform:
    """Mono audio at 16 kHz; samples nominally in [-1, 1].

    Out-of-range samples are legal (clipping is the writer's concern, and is
    reported rather than silently applied).
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise AudioError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(
                f"sample rate {self.sample_rate} Hz unsupported; this toolkit "
                f"works at {SAMPLE_RATE} Hz only - resample externally")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def _read_raw(path) -> tuple[int, np.ndarray]:
    """Decode any supported WAV into a float (frames, channels) array."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"{path}: malformed or unsupported WAV file ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise AudioError(
            f"{path}: sample rate {rate} Hz unsupported; expected "
            f"{SAMPLE_RATE} Hz - resample externally")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / np.float32(PCM16_SCALE)
    elif data.dtype == np.float32:
        pass
    else:
        raise AudioError(
            f"{path}: unsupported codec (dtype {data.dtype}); expected 16-bit "
            f"PCM or 32-bit IEEE float")
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    return rate, data


def read_wav(path) -> Waveform:
    """Read a mono 16 kHz WAV; stereo files are refused (see stereo_split)."""
    _, data = _read_raw(path)
    if data.shape[1] != 1:
        raise AudioError(
            f"{path}: has {data.shape[1]} channels; read_wav only accepts "
            f"mono (split stereo material with stereo_split)")
    return Waveform(data[:, 0])


def stereo_split(path) -> tuple[Waveform, Waveform]:
    """Split a stereo WAV into its full-length left and right channels."""
    _, data = _read_raw(path)
    if data.shape[1] != 2:
        raise AudioError(f"{path}: expected a stereo file, got "
                         f"{data.shape[1]} channel(s)")
    return Waveform(data[:, 0].copy()), Waveform(data[:, 1].copy())


def write_wav(path, wav: Waveform, fmt: str = "float32") -> int:
    """Write a waveform; returns the number of clipped samples.

    ``float32`` stores the sample payload bit-for-bit.  ``pcm16`` quantizes
    by the same 32768 convention the reader uses (round-trip error at most
    1/32768).  Samples beyond [-1, 1] are counted as clipped; only the pcm16
    path actually has to clamp them.
    """
    x = np.asarray(wav.samples)
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if fmt == "float32":
        wavfile.write(path, wav.sample_rate, x.astype(np.float32, copy=False))
    elif fmt == "pcm16":
        q = np.clip(np.rint(x * PCM16_SCALE), -32768, 32767).astype(np.int16)
        wavfile.write(path, wav.sample_rate, q)
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    return clipped
