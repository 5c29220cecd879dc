"""Corpus construction: manifests, SNR mixing, augmentation, synthesis.

A manifest is a flat CSV (header ``id,source,role,task,labels,pair,snr_db``)
listing every file a workflow touches.  Roles: ``clean`` and ``noise`` are
mixing inputs, ``noisy`` is a generated mixture (its ``pair`` field encodes
ancestry as ``clean_id|noise_id|snr``), ``classifier`` rows carry a task name
and ``;``-separated integer labels.

The synthetic generator produces a desk-scale corpus: speech-like signals
(amplitude-modulated harmonic tones with pauses), several noise flavours,
and labelled files for two classification tasks whose classes are separable
by energy statistics.  Everything is deterministic given the seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .audio import SAMPLE_RATE, AudioError, Waveform, write_wav
from .ndgrad import derive_rng

CROP_MIN_LEN = 2 ** 15
PAIR_SEP = "|"

MANIFEST_COLUMNS = ("id", "source", "role", "task", "labels", "pair", "snr_db")
ROLES = ("clean", "noise", "noisy", "classifier")


@dataclass
class Record:
    id: str
    source: str
    role: str
    task: str = ""
    labels: str = ""
    pair: str = ""
    snr_db: float | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if PAIR_SEP in self.id:
            raise ValueError(f"record id may not contain {PAIR_SEP!r}: {self.id!r}")


def pair_id(clean_id: str, noise_id: str, snr_db: float) -> str:
    return f"{clean_id}{PAIR_SEP}{noise_id}{PAIR_SEP}{snr_db:g}"


def split_pair_id(pair: str) -> tuple[str, str, float]:
    clean_id, noise_id, snr = pair.split(PAIR_SEP)
    return clean_id, noise_id, float(snr)


@dataclass
class Manifest:
    records: list[Record] = field(default_factory=list)

    def add(self, rec: Record):
        self.records.append(rec)

    def by_role(self, role: str) -> list[Record]:
        return [r for r in self.records if r.role == role]

    def by_id(self, rec_id: str) -> Record:
        for r in self.records:
            if r.id == rec_id:
                return r
        raise KeyError(f"no record with id {rec_id!r}")

    def save(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_COLUMNS)
            for r in self.records:
                w.writerow([r.id, r.source, r.role, r.task, r.labels, r.pair,
                            "" if r.snr_db is None else f"{r.snr_db:g}"])

    @classmethod
    def load(cls, path) -> "Manifest":
        m = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
                raise ValueError(f"{path}: bad manifest header {reader.fieldnames}")
            for row in reader:
                m.add(Record(
                    id=row["id"], source=row["source"], role=row["role"],
                    task=row["task"], labels=row["labels"], pair=row["pair"],
                    snr_db=float(row["snr_db"]) if row["snr_db"] else None))
        return m


def labels_to_vector(labels: str, n_classes: int) -> np.ndarray:
    """Decode ``;``-separated class indices into a {0,1} vector."""
    vec = np.zeros(n_classes, dtype=np.float32)
    for tok in labels.split(";"):
        tok = tok.strip()
        if not tok:
            continue
        idx = int(tok)
        if not 0 <= idx < n_classes:
            raise ValueError(f"label {idx} out of range for {n_classes} classes")
        vec[idx] = 1.0
    return vec


# ---------------------------------------------------------------------------
# mixing


def peak_normalize_pair(clean: np.ndarray, noise: np.ndarray,
                        peak: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Scale both signals by the one factor that brings max|clean| to ``peak``.

    The shared factor preserves the clean:noise level ratio exactly.
    """
    clean = np.asarray(clean)
    noise = np.asarray(noise)
    top = float(np.max(np.abs(clean))) if clean.size else 0.0
    if top == 0.0:
        raise AudioError("cannot peak-normalize a silent clean signal")
    factor = np.asarray(peak / top, dtype=clean.dtype)
    return clean * factor, noise * factor


def mix_at_snr(clean: np.ndarray, noise: np.ndarray,
               snr_db: float) -> tuple[np.ndarray, float]:
    """Mixture clean + g*noise whose energy-ratio SNR equals ``snr_db``.

    Returns (noisy, g) with g = sqrt(E_clean / E_noise * 10^(-snr/10)).
    """
    clean = np.asarray(clean)
    noise = np.asarray(noise)
    if clean.shape != noise.shape:
        raise AudioError(f"mix length mismatch: {clean.shape} vs {noise.shape}")
    e_clean = float(np.sum(np.asarray(clean, dtype=np.float64) ** 2))
    e_noise = float(np.sum(np.asarray(noise, dtype=np.float64) ** 2))
    if e_clean == 0.0:
        raise AudioError("cannot mix with a silent clean signal")
    if e_noise == 0.0:
        raise AudioError("cannot mix with a silent noise signal")
    gain = math.sqrt(e_clean / e_noise * 10.0 ** (-snr_db / 10.0))
    noisy = clean + np.asarray(gain, dtype=clean.dtype) * noise
    return noisy, gain


def fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Cut noise to ``length``: longer noise is sliced from a random offset,
    shorter noise is tiled (wrap-around) before slicing."""
    noise = np.asarray(noise)
    n = len(noise)
    if n == 0:
        raise AudioError("empty noise signal")
    if n >= length:
        off = int(rng.integers(0, n - length + 1))
        return noise[off:off + length].copy()
    off = int(rng.integers(0, n))
    idx = (off + np.arange(length)) % n
    return noise[idx]


def random_crop(x: np.ndarray, min_len: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous random section of length uniform in [min_len, len(x)];
    inputs not longer than min_len pass through whole."""
    x = np.asarray(x)
    n = len(x)
    if n <= min_len:
        return x
    length = int(rng.integers(min_len, n + 1))
    off = int(rng.integers(0, n - length + 1))
    return x[off:off + length]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale synthetic corpus parameters (key=value file on disk)."""

    n_speech_like: int = 4
    n_noise_types: int = 2
    duration_s: float = 2.1
    seed: int = 0
    n_classifier_per_class: int = 4
    classifier_duration_s: float | None = None

    @classmethod
    def load(cls, path) -> "SynthSpec":
        kwargs = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key in ("n_speech_like", "n_noise_types", "seed",
                       "n_classifier_per_class"):
                kwargs[key] = int(value)
            elif key in ("duration_s", "classifier_duration_s"):
                kwargs[key] = float(value)
            else:
                raise ValueError(f"{path}: unknown synth key {key!r}")
        return cls(**kwargs)


def _ramped(env: np.ndarray, ramp: int) -> np.ndarray:
    """Soften segment edges with half-cosine ramps."""
    if ramp * 2 >= len(env):
        return env
    win = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
    env = env.copy()
    env[:ramp] *= win
    env[-ramp:] *= win[::-1]
    return env


def _norm_peak(x: np.ndarray, peak: float = 0.5) -> np.ndarray:
    top = np.max(np.abs(x))
    if top == 0:
        return x.astype(np.float32)
    return (x * (peak / top)).astype(np.float32)


def synth_speech_like(rng: np.random.Generator, n: int) -> np.ndarray:
    """Harmonic tone with vibrato, syllabic amplitude bursts, and pauses."""
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(100.0, 240.0)
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / SAMPLE_RATE
    x = np.zeros(n)
    for h in range(1, 9):
        x += (1.0 / h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    env = np.zeros(n)
    pos = 0
    while pos < n:
        burst = int(rng.uniform(0.08, 0.30) * SAMPLE_RATE)
        gap = int(rng.uniform(0.04, 0.18) * SAMPLE_RATE)
        level = rng.uniform(0.4, 1.0)
        seg = min(burst, n - pos)
        env[pos:pos + seg] = _ramped(np.full(seg, level), SAMPLE_RATE // 100)
        pos += burst + gap
    return _norm_peak(x * env)


def synth_filtered_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """One-pole lowpassed white noise, occasionally with an added hum."""
    white = rng.standard_normal(n)
    a = rng.uniform(0.85, 0.995)
    x = sps.lfilter([1.0 - a], [1.0, -a], white)
    if rng.uniform() < 0.5:
        t = np.arange(n) / SAMPLE_RATE
        x += 0.3 * np.std(x) * np.sin(2 * np.pi * rng.uniform(50, 120) * t)
    return _norm_peak(x)


def synth_tone_complex(rng: np.random.Generator, n: int) -> np.ndarray:
    """A few steady inharmonic sinusoids with slow amplitude wobble."""
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    for _ in range(int(rng.integers(3, 7))):
        f = np.exp(rng.uniform(np.log(200.0), np.log(4000.0)))
        amp = rng.uniform(0.3, 1.0)
        wobble = 1.0 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * t
                                    + rng.uniform(0, 2 * np.pi))
        x += amp * wobble * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return _norm_peak(x)


def synth_chirp(rng: np.random.Generator, n: int) -> np.ndarray:
    """Repeated frequency sweeps."""
    t = np.arange(n) / SAMPLE_RATE
    f0 = np.exp(rng.uniform(np.log(150.0), np.log(1000.0)))
    f1 = np.exp(rng.uniform(np.log(1000.0), np.log(6000.0)))
    period = rng.uniform(0.25, 1.0)
    x = sps.chirp(np.mod(t, period), f0=f0, f1=f1, t1=period, method="logarithmic")
    return _norm_peak(x * (0.6 + 0.4 * np.sin(2 * np.pi * t / period)))


SCENE_CLASSES = ("tone_complex", "filtered_noise", "speech_like", "chirp")
SCENE_SYNTHS = (synth_tone_complex, synth_filtered_noise, synth_speech_like,
                synth_chirp)
TAG_NAMES = ("tone", "noise", "speech_am")
TAG_SYNTHS = (synth_tone_complex, synth_filtered_noise, synth_speech_like)
NOISE_SYNTHS = (synth_filtered_noise, synth_tone_complex, synth_chirp)


def task_specs() -> list[tuple[str, int, str]]:
    """(name, n_classes, mode) for the two synthetic classification tasks."""
    return [("scene", len(SCENE_CLASSES), "softmax"),
            ("tags", len(TAG_NAMES), "sigmoid")]


def synth_corpus(spec: SynthSpec, out_dir) -> Manifest:
    """Generate the corpus under ``out_dir`` and write ``manifest.csv`` plus a
    ``tasks.cfg`` snippet describing the classification tasks."""
    if spec.n_speech_like < 1 or spec.n_noise_types < 1:
        raise ValueError("need at least one speech-like and one noise signal")
    out = Path(out_dir)
    for sub in ("clean", "noise", "classifier"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n = int(round(spec.duration_s * SAMPLE_RATE))
    n_cls = int(round((spec.classifier_duration_s or spec.duration_s) * SAMPLE_RATE))
    manifest = Manifest()

    for i in range(spec.n_speech_like):
        x = synth_speech_like(derive_rng(spec.seed, 2, 0, i), n)
        rel = f"clean/speech_{i:03d}.wav"
        write_wav(out / rel, Waveform(x))
        manifest.add(Record(id=f"sp{i:03d}", source=rel, role="clean"))

    for i in range(spec.n_noise_types):
        gen = NOISE_SYNTHS[i % len(NOISE_SYNTHS)]
        x = gen(derive_rng(spec.seed, 2, 1, i), n)
        rel = f"noise/noise_{i:02d}.wav"
        write_wav(out / rel, Waveform(x))
        manifest.add(Record(id=f"nz{i:02d}", source=rel, role="noise"))

    for cls, gen in enumerate(SCENE_SYNTHS):
        for i in range(spec.n_classifier_per_class):
            x = gen(derive_rng(spec.seed, 2, 2, cls, i), n_cls)
            rel = f"classifier/scene{cls}_{i:02d}.wav"
            write_wav(out / rel, Waveform(x))
            manifest.add(Record(id=f"sc{cls}_{i:02d}", source=rel,
                                role="classifier", task="scene", labels=str(cls)))

    n_tag_files = spec.n_classifier_per_class * len(TAG_NAMES)
    for i in range(n_tag_files):
        rng = derive_rng(spec.seed, 2, 3, i)
        present = [bool(rng.uniform() < 0.5) for _ in TAG_NAMES]
        if not any(present):
            present[int(rng.integers(0, len(TAG_NAMES)))] = True
        x = np.zeros(n_cls, dtype=np.float32)
        for on, gen in zip(present, TAG_SYNTHS):
            if on:
                x = x + gen(rng, n_cls)
        labels = ";".join(str(j) for j, on in enumerate(present) if on)
        rel = f"classifier/tags_{i:02d}.wav"
        write_wav(out / rel, Waveform(_norm_peak(x)))
        manifest.add(Record(id=f"tg{i:02d}", source=rel, role="classifier",
                            task="tags", labels=labels))

    manifest.save(out / "manifest.csv")
    with open(out / "tasks.cfg", "w") as fh:
        names = ",".join(name for name, _, _ in task_specs())
        fh.write(f"tasks = {names}\n")
        for name, n_classes, mode in task_specs():
            fh.write(f"task_{name}_classes = {n_classes}\n")
            fh.write(f"task_{name}_mode = {mode}\n")
    return manifest


# ---------------------------------------------------------------------------
# mixing workflows


@dataclass
class MixOutcome:
    manifest: Manifest
    details: list[dict]     # per mixture: ids, snr, gain, offset, clipped
    skipped: list[str]      # remarks about silent/unusable inputs


def build_mixture_corpus(clean: list[tuple[str, np.ndarray]],
                         noise: list[tuple[str, np.ndarray]],
                         snrs_db: list[float], seed: int, out_dir,
                         peak: float = 0.5) -> MixOutcome:
    """Cross every clean signal with every noise signal at every SNR.

    Writes normalized clean references under ``clean/`` (once per clean
    signal) and mixtures under ``noisy/``; mixture clipping is logged, never
    rescaled, so the target SNR stays exact.
    """
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    manifest = Manifest()
    details: list[dict] = []
    skipped: list[str] = []

    usable_clean = []
    for cid, x in clean:
        if not np.any(x):
            skipped.append(f"clean {cid}: silent, skipped")
            continue
        usable_clean.append((cid, x))
    usable_noise = []
    for nid, x in noise:
        if not np.any(x):
            skipped.append(f"noise {nid}: silent, skipped")
            continue
        usable_noise.append((nid, x))

    for ci, (cid, cx) in enumerate(usable_clean):
        rel = f"clean/{cid}.wav"
        norm_clean = None
        for ni, (nid, nx) in enumerate(usable_noise):
            rng = derive_rng(seed, 3, ci, ni)
            fitted = fit_noise(nx, len(cx), rng)
            c2, n2 = peak_normalize_pair(cx, fitted, peak=peak)
            if norm_clean is None:
                norm_clean = c2
                write_wav(out / rel, Waveform(c2))
                manifest.add(Record(id=cid, source=rel, role="clean"))
            for snr in snrs_db:
                noisy, gain = mix_at_snr(c2, n2, snr)
                pid = pair_id(cid, nid, snr)
                nrel = f"noisy/{pid.replace(PAIR_SEP, '__')}.wav"
                clipped = write_wav(out / nrel, Waveform(noisy.astype(np.float32)))
                manifest.add(Record(id=pid, source=nrel, role="noisy",
                                    pair=pid, snr_db=snr))
                details.append({"pair": pid, "clean": cid, "noise": nid,
                                "snr_db": snr, "gain": gain, "clipped": clipped})
                if clipped:
                    skipped.append(f"mixture {pid}: {clipped} clipped samples")

    manifest.save(out / "manifest.csv")
    with open(out / "mix_details.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["pair", "clean", "noise", "snr_db",
                                           "gain", "clipped"])
        w.writeheader()
        for row in details:
            w.writerow(row)
    if skipped:
        (out / "remarks.txt").write_text("\n".join(skipped) + "\n")
    return MixOutcome(manifest, details, skipped)
