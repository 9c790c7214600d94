"""WAV I/O, synthetic sources, SNR-controlled mixing and corpus generation."""

from __future__ import annotations

import csv
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

__all__ = [
    "Waveform",
    "MixtureExample",
    "ManifestRecord",
    "Manifest",
    "WavError",
    "SOURCE_CLASSES",
    "read_wav",
    "write_wav",
    "source_params",
    "synth_source",
    "mix_at_snr",
    "plan_examples",
    "generate_dataset",
    "read_manifest",
    "write_manifest",
    "load_example",
]

DEFAULT_SAMPLE_RATE = 8000
SOURCE_CLASSES = ("harmonic", "chirp", "bandnoise")
PEAK = 0.9
CLIP_TARGET = 0.99  # peak after an anti-clipping rescale
MANIFEST_HEADER = ("mixture", "source1", "source2", "snr_db", "seed")


class WavError(ValueError):
    def __init__(self, path, problem: str):
        self.path = str(path)
        self.problem = problem
        super().__init__(f"{path}: {problem}")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("a waveform needs a non-empty 1-D sample array")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class MixtureExample:
    mixture: Waveform
    sources: list[Waveform]
    snr_db: float
    scale: float = 1.0  # joint rescale applied to every signal to avoid clipping
    source_gain: float = 1.0  # gain applied to source 1 to reach snr_db


# -- WAV ----------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV; samples are ``int16 / 32768``."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, nframes = (
                w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            )
            if w.getcomptype() != "NONE":
                raise WavError(path, f"unsupported encoding {w.getcomptype()!r}")
            if channels != 1:
                raise WavError(path, f"expected mono, found {channels} channels")
            if width != 2:
                raise WavError(path, f"expected 16-bit PCM, found {8 * width}-bit samples")
            raw = w.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise WavError(path, f"not a readable RIFF/WAVE PCM file ({exc})") from None
    if len(raw) != 2 * nframes:
        raise WavError(path, f"truncated: header declares {nframes} frames, found {len(raw) // 2}")
    if nframes == 0:
        raise WavError(path, "no samples")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(data, rate)


def quantize(samples) -> np.ndarray:
    """Float samples to int16 codes (round to nearest, clipped to the int16 range)."""
    x = np.asarray(samples, dtype=np.float64) * 32768.0
    return np.clip(np.rint(x), -32768, 32767).astype("<i2")


def write_wav(path, waveform: Waveform):
    codes = quantize(waveform.samples)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(waveform.sample_rate_hz))
        w.writeframes(codes.tobytes())


# -- synthetic sources -------------------------------------------------------------

def source_params(kind: str, seed: int) -> dict:
    """Deterministic random parameters of one synthetic source."""
    if kind not in SOURCE_CLASSES:
        raise ValueError(f"unknown source class {kind!r}; choose from {SOURCE_CLASSES}")
    rng = np.random.default_rng([SOURCE_CLASSES.index(kind), seed])
    if kind == "harmonic":
        n_partials = int(rng.integers(3, 7))
        amps = 1.0 / np.arange(1, n_partials + 1) * rng.uniform(0.6, 1.0, n_partials)
        amps[0] = 1.0
        return {
            "f0": float(rng.uniform(80.0, 300.0)),
            "amplitudes": amps,
            "phases": rng.uniform(0, 2 * np.pi, n_partials),
            "env_rate": float(rng.uniform(0.5, 2.0)),
            "env_phase": float(rng.uniform(0, 2 * np.pi)),
        }
    if kind == "chirp":
        lo, hi = sorted(rng.uniform(300.0, 3000.0, 2))
        if rng.random() < 0.5:
            lo, hi = hi, lo
        return {
            "f_start": float(lo),
            "f_end": float(hi),
            "phase": float(rng.uniform(0, 2 * np.pi)),
            "am_rate": float(rng.uniform(2.0, 8.0)),
            "am_depth": float(rng.uniform(0.3, 0.8)),
        }
    centre = float(rng.uniform(600.0, 3200.0))
    return {
        "centre": centre,
        "bandwidth": float(rng.uniform(0.15, 0.35) * centre),
        "burst_rate": float(rng.uniform(2.0, 6.0)),
        "noise_seed": int(rng.integers(0, 2**31 - 1)),
    }


def synth_source(kind: str, duration_s: float, seed: int,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Synthesize a ``harmonic``, ``chirp`` or ``bandnoise`` source, peak-normalized to 0.9."""
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    p = source_params(kind, seed)
    n = max(1, int(round(duration_s * sample_rate)))
    t = np.arange(n) / sample_rate
    if kind == "harmonic":
        x = np.zeros(n)
        for k, (amp, ph) in enumerate(zip(p["amplitudes"], p["phases"]), start=1):
            if k * p["f0"] < sample_rate / 2:
                x += amp * np.sin(2 * np.pi * k * p["f0"] * t + ph)
        x *= 0.6 + 0.4 * np.sin(2 * np.pi * p["env_rate"] * t + p["env_phase"])
    elif kind == "chirp":
        sweep = (p["f_end"] - p["f_start"]) / max(duration_s, 1e-9)
        phase = 2 * np.pi * (p["f_start"] * t + 0.5 * sweep * t * t) + p["phase"]
        am = 1.0 - p["am_depth"] * 0.5 * (1.0 + np.cos(2 * np.pi * p["am_rate"] * t))
        x = am * np.sin(phase)
    else:
        noise = np.random.default_rng(p["noise_seed"]).standard_normal(n)
        nyq = sample_rate / 2
        lo = max(p["centre"] - p["bandwidth"] / 2, 50.0) / nyq
        hi = min(p["centre"] + p["bandwidth"] / 2, nyq * 0.95) / nyq
        sos = sps.butter(4, [lo, hi], btype="bandpass", output="sos")
        x = sps.sosfilt(sos, noise)
        gate = 0.5 * (1.0 + np.sin(2 * np.pi * p["burst_rate"] * t))
        x *= 0.15 + 0.85 * gate ** 2
    peak = np.max(np.abs(x))
    if peak == 0:
        raise ValueError("synthesized an all-zero source")
    return Waveform((PEAK / peak * x).astype(np.float32), sample_rate)


# -- mixing ------------------------------------------------------------------------------

def _energy(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def mix_at_snr(s1: Waveform, s2: Waveform, snr_db: float) -> MixtureExample:
    """Scale ``s1`` to sit ``snr_db`` dB above ``s2`` and sum.

    If the mixture would clip, all three signals are rescaled by one factor.
    """
    if len(s1) != len(s2):
        raise ValueError(f"source lengths differ: {len(s1)} vs {len(s2)}")
    if s1.sample_rate_hz != s2.sample_rate_hz:
        raise ValueError("sources have different sample rates")
    e1, e2 = _energy(s1.samples), _energy(s2.samples)
    if e1 == 0 or e2 == 0:
        raise ValueError("cannot mix a silent source")
    gain = float(np.sqrt(e2 / e1 * 10.0 ** (snr_db / 10.0)))
    a = np.asarray(s1.samples, dtype=np.float64) * gain
    b = np.asarray(s2.samples, dtype=np.float64)
    mix = a + b
    peak = float(np.max(np.abs(mix)))
    scale = 1.0 if peak <= 1.0 else CLIP_TARGET / peak
    sources = [Waveform(a * scale, s1.sample_rate_hz), Waveform(b * scale, s2.sample_rate_hz)]
    mixture = Waveform(sources[0].samples + sources[1].samples, s1.sample_rate_hz)
    return MixtureExample(mixture, sources, float(snr_db), scale, gain)


# -- corpus ---------------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    mixture: str
    sources: list[str]
    snr_db: float
    seed: int


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def path(self, relative: str) -> Path:
        return (self.root / relative).resolve()


@dataclass(frozen=True)
class ExamplePlan:
    seed: int
    classes: tuple[str, str]
    source_seeds: tuple[int, int]
    snr_db: float


def plan_examples(n: int, seed: int) -> list[ExamplePlan]:
    """Draw per-example seeds, class pairs and SNRs; pure function of (n, seed)."""
    master = np.random.default_rng(seed)
    seeds = master.choice(2**31 - 1, size=n, replace=False)
    plans = []
    for s in seeds:
        rng = np.random.default_rng(int(s))
        classes = tuple(str(c) for c in rng.choice(SOURCE_CLASSES, size=2, replace=False))
        src_seeds = tuple(int(v) for v in rng.integers(0, 2**31 - 1, size=2))
        snr = float(rng.uniform(0.0, 5.0))
        plans.append(ExamplePlan(int(s), classes, src_seeds, snr))
    return plans


def render_example(plan: ExamplePlan, duration_s: float,
                   sample_rate: int = DEFAULT_SAMPLE_RATE) -> MixtureExample:
    """Synthesize and mix one planned example, with sources on the 16-bit grid.

    Sources are quantized first and the mixture is their exact sum, so the
    stored files satisfy mixture == source1 + source2.
    """
    s1 = synth_source(plan.classes[0], duration_s, plan.source_seeds[0], sample_rate)
    s2 = synth_source(plan.classes[1], duration_s, plan.source_seeds[1], sample_rate)
    ex = mix_at_snr(s1, s2, plan.snr_db)
    codes = [quantize(src.samples).astype(np.int32) for src in ex.sources]
    total = codes[0] + codes[1]
    if np.max(np.abs(total)) > 32767:
        shrink = 32767.0 / np.max(np.abs(total))
        codes = [quantize(src.samples * shrink).astype(np.int32) for src in ex.sources]
        total = codes[0] + codes[1]
        ex.scale *= shrink
    sources = [Waveform(c / 32768.0, sample_rate) for c in codes]
    mixture = Waveform(total / 32768.0, sample_rate)
    return MixtureExample(mixture, sources, ex.snr_db, ex.scale, ex.source_gain)


def write_manifest(path, records: Sequence[ManifestRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.mixture, *r.sources, repr(r.snr_db), r.seed])


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:1]) != ("mixture",) or header[-2:] != ["snr_db", "seed"]:
            raise ValueError(f"{path}: not a manifest (header {header})")
        n_src = len(header) - 3
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: malformed row {row}")
            records.append(ManifestRecord(row[0], row[1 : 1 + n_src], float(row[-2]), int(row[-1])))
    return Manifest(records, path.parent)


def load_example(manifest: Manifest, record: ManifestRecord) -> tuple[np.ndarray, np.ndarray]:
    """Return (mixture (T,), sources (S, T)) as float32 arrays."""
    mix = read_wav(manifest.path(record.mixture)).samples
    sources = np.stack([read_wav(manifest.path(p)).samples for p in record.sources])
    return mix, sources


def generate_dataset(out_dir, n_train: int, n_valid: int, n_test: int,
                     duration_s: float = 4.0, seed: int = 0,
                     sample_rate: int = DEFAULT_SAMPLE_RATE) -> dict[str, Manifest]:
    """Write ``{split}/NNNN_{mix,s1,s2}.wav`` and ``manifest_{split}.csv`` for each split."""
    counts = {"train": n_train, "valid": n_valid, "test": n_test}
    for split, n in counts.items():
        if n <= 0:
            raise ValueError(f"{split} count must be positive, got {n}")
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")

    plans = plan_examples(sum(counts.values()), seed)
    manifests = {}
    start = 0
    for split, n in counts.items():
        (out / split).mkdir(exist_ok=True)
        records = []
        for i, plan in enumerate(plans[start : start + n]):
            ex = render_example(plan, duration_s, sample_rate)
            stem = f"{split}/{i:04d}"
            names = [f"{stem}_mix.wav", f"{stem}_s1.wav", f"{stem}_s2.wav"]
            write_wav(out / names[0], ex.mixture)
            write_wav(out / names[1], ex.sources[0])
            write_wav(out / names[2], ex.sources[1])
            records.append(ManifestRecord(names[0], names[1:], ex.snr_db, plan.seed))
        start += n
        write_manifest(out / f"manifest_{split}.csv", records)
        manifests[split] = Manifest(records, out.resolve())
    return manifests
