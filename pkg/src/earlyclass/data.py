"""Synthetic crop-phenology time series, dataset files and splitting.

Each class is a Gaussian growth bump over a shared soil spectrum::

    x_b(day) = base_b + amplitude_b * exp(-(day - peak)^2 / (2 * width^2))

that falls back to the base after the harvest day. Observations sit on a
jittered revisit grid with random cloud gaps and additive Gaussian noise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

N_BANDS = 13
DAYS_PER_YEAR = 365.0

# Sentinel-2-like soil spectrum and a generic green-vegetation response
SOIL = np.array([0.12, 0.10, 0.10, 0.12, 0.15, 0.18, 0.20, 0.21, 0.22, 0.08, 0.02, 0.26, 0.20])
GREEN = np.array([-0.02, -0.03, 0.01, -0.06, 0.04, 0.20, 0.30, 0.34, 0.35, 0.10, 0.00, -0.06, -0.09])


class DataError(ValueError):
    """Invalid class specification, dataset file or split request."""


@dataclass
class PhenologyClassSpec:
    name: str
    peak_day: float
    season_width: float
    amplitude: list[float]
    base: list[float]
    harvest_drop_day: float | None = None

    def problems(self) -> list[str]:
        out = []
        if self.season_width <= 0:
            out.append(f"{self.name}: season_width must be > 0")
        if not 0 <= self.peak_day < DAYS_PER_YEAR:
            out.append(f"{self.name}: peak_day must lie in [0, 365)")
        if len(self.amplitude) != len(self.base):
            out.append(f"{self.name}: amplitude and base lengths differ")
        else:
            lo = np.minimum(self.base, np.add(self.base, self.amplitude))
            hi = np.maximum(self.base, np.add(self.base, self.amplitude))
            if lo.min() < 0 or hi.max() > 1.5:
                out.append(f"{self.name}: base + amplitude leaves [0, 1.5]")
        if self.harvest_drop_day is not None and self.harvest_drop_day <= self.peak_day:
            out.append(f"{self.name}: harvest_drop_day must come after peak_day")
        return out

    def profile(self, days: np.ndarray, peak_shift: float = 0.0, gain: float = 1.0) -> np.ndarray:
        """Noise-free reflectance at ``days``, shape (len(days), D)."""
        days = np.asarray(days, dtype=np.float64)
        bump = np.exp(-((days - self.peak_day - peak_shift) ** 2) / (2.0 * self.season_width**2))
        if self.harvest_drop_day is not None:
            bump = np.where(days > self.harvest_drop_day + peak_shift, 0.0, bump)
        return np.asarray(self.base) + gain * bump[:, None] * np.asarray(self.amplitude)


def _signature(green_scale: float, twist: Sequence[float]) -> list[float]:
    return [round(float(v), 4) for v in green_scale * GREEN + np.asarray(twist)]


def default_class_specs() -> list[PhenologyClassSpec]:
    """Nine crop-like classes with staggered peaks and distinct spectral twists."""
    rows = [
        # name, peak, width, harvest, green scale, twist over 13 bands
        ("rapeseed", 110, 22, 190, 0.9, [0.02, 0.03, 0.08, 0.06, 0.07, 0.02, 0.00, -0.02, -0.02, 0.02, 0.0, 0.05, 0.04]),
        ("winter barley", 125, 22, 185, 1.0, [0.00, 0.01, 0.02, -0.01, -0.04, -0.05, 0.02, 0.05, 0.04, -0.03, 0.0, -0.02, 0.03]),
        ("meadow", 140, 24, None, 0.8, [-0.01, 0.00, 0.03, 0.01, 0.03, 0.07, 0.05, 0.00, -0.03, 0.05, 0.0, 0.04, -0.02]),
        ("winter wheat", 155, 24, 215, 1.1, [0.01, -0.01, -0.03, 0.02, 0.05, -0.02, -0.05, -0.03, 0.04, 0.00, 0.0, 0.06, 0.05]),
        ("winter triticale", 170, 24, 225, 1.0, [-0.02, 0.02, 0.00, 0.03, -0.02, 0.04, -0.03, 0.06, 0.00, -0.04, 0.0, -0.05, 0.02]),
        ("summer barley", 185, 22, 230, 0.9, [0.03, 0.00, -0.02, -0.03, 0.06, 0.01, 0.06, -0.05, -0.02, 0.04, 0.0, 0.02, -0.06]),
        ("summer oat", 200, 22, 240, 0.85, [-0.01, 0.03, 0.05, 0.00, -0.05, 0.06, -0.04, 0.02, 0.06, 0.03, 0.0, -0.03, 0.05]),
        ("corn", 220, 22, 275, 1.2, [0.00, -0.02, 0.04, -0.02, 0.02, -0.06, 0.04, 0.03, -0.05, 0.06, 0.0, 0.07, -0.03]),
        ("fallow", 240, 24, None, 0.5, [0.04, 0.04, 0.00, 0.05, 0.00, 0.03, -0.02, -0.04, 0.02, -0.02, 0.0, -0.04, 0.06]),
    ]
    return [
        PhenologyClassSpec(name, float(peak), float(width), _signature(g, twist), [float(v) for v in SOIL],
                           None if harvest is None else float(harvest))
        for name, peak, width, harvest, g, twist in rows
    ]


def validate_specs(specs: Sequence[PhenologyClassSpec]) -> None:
    problems = []
    if len(specs) < 2:
        problems.append("need at least 2 classes")
    dims = {len(s.base) for s in specs}
    if len(dims) > 1:
        problems.append(f"classes disagree on band count: {sorted(dims)}")
    for s in specs:
        problems.extend(s.problems())
    if problems:
        raise DataError("invalid class specification:\n  " + "\n  ".join(problems))


def save_class_specs(path, specs: Sequence[PhenologyClassSpec]) -> None:
    Path(path).write_text(json.dumps([asdict(s) for s in specs], indent=2) + "\n", encoding="utf-8")


def load_class_specs(path) -> list[PhenologyClassSpec]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        raw = raw.get("classes", [])
    try:
        specs = [PhenologyClassSpec(**entry) for entry in raw]
    except TypeError as exc:
        raise DataError(f"{path}: bad class entry ({exc})") from None
    validate_specs(specs)
    return specs


@dataclass
class TimeSeriesSample:
    sample_id: int
    observations: np.ndarray
    times: np.ndarray
    label: int
    region_id: int

    @property
    def length(self) -> int:
        return len(self.times)


@dataclass
class GeneratorConfig:
    samples_per_class: int = 500
    regions: int = 20
    noise_std: float = 0.02
    revisit_days: float = 2.5
    revisit_jitter: float = 0.5
    cloud_fraction: float = 0.2
    min_observations: int = 70
    peak_jitter: float = 6.0
    region_shift: float = 4.0
    gain_jitter: float = 0.1
    base_jitter: float = 0.1
    decimals: int | None = 4
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.samples_per_class < 1:
            out.append("samples_per_class must be >= 1")
        if self.regions < 3:
            out.append("regions must be >= 3")
        if self.noise_std < 0:
            out.append("noise_std must be >= 0")
        if not 0 <= self.cloud_fraction < 1:
            out.append("cloud_fraction must lie in [0, 1)")
        if self.revisit_days < 2 or not 0 <= self.revisit_jitter <= (self.revisit_days - 1) / 2 - 0.25:
            # rounded acquisition days of neighbouring slots must never collide
            out.append("need revisit_days >= 2 and 0 <= revisit_jitter <= (revisit_days - 1) / 2 - 0.25")
        if self.decimals is not None and self.decimals < 0:
            out.append("decimals must be >= 0")
        slots = int(DAYS_PER_YEAR // self.revisit_days)
        if self.min_observations > slots:
            out.append(f"min_observations {self.min_observations} exceeds the {slots} revisit slots")
        return out


def region_of(sample_id: int, regions: int, seed: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{sample_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % regions


def generate(
    specs: Sequence[PhenologyClassSpec] | None = None,
    cfg: GeneratorConfig | None = None,
    **overrides,
) -> list[TimeSeriesSample]:
    """Draw ``samples_per_class`` labelled sequences per class."""
    specs = default_class_specs() if specs is None else list(specs)
    cfg = GeneratorConfig(**overrides) if cfg is None else cfg
    validate_specs(specs)
    problems = cfg.problems()
    if problems:
        raise DataError("invalid generator settings:\n  " + "\n  ".join(problems))

    rng = np.random.default_rng(cfg.seed)
    region_offsets = rng.normal(0.0, cfg.region_shift, cfg.regions)
    n_slots = int(DAYS_PER_YEAR // cfg.revisit_days)
    grid = cfg.revisit_days * (np.arange(n_slots) + 0.5)

    samples = []
    sample_id = 0
    for label, spec in enumerate(specs):
        for _ in range(cfg.samples_per_class):
            region = region_of(sample_id, cfg.regions, cfg.seed)
            days = grid + rng.uniform(-cfg.revisit_jitter, cfg.revisit_jitter, n_slots)
            keep = rng.random(n_slots) >= cfg.cloud_fraction
            missing = cfg.min_observations - int(keep.sum())
            if missing > 0:
                keep[rng.choice(np.flatnonzero(~keep), size=missing, replace=False)] = True
            days = np.round(days[keep])
            shift = region_offsets[region] + rng.normal(0.0, cfg.peak_jitter)
            gain = 1.0 + rng.normal(0.0, cfg.gain_jitter)
            soil = 1.0 + rng.uniform(-cfg.base_jitter, cfg.base_jitter)
            clean = spec.profile(days, shift, gain) + (soil - 1.0) * np.asarray(spec.base)
            obs = clean + rng.normal(0.0, cfg.noise_std, clean.shape) if cfg.noise_std > 0 else clean
            if cfg.decimals is not None:
                obs = np.round(obs, cfg.decimals)
            samples.append(TimeSeriesSample(sample_id, obs, days, label, region))
            sample_id += 1
    return samples


# ---------------------------------------------------------------------------
# dataset files


def dataset_header(n_bands: int) -> list[str]:
    return ["sample_id", "region_id", "label", "day"] + [f"b{i}" for i in range(n_bands)]


def _dataset_lines(samples: Sequence[TimeSeriesSample], n_bands: int):
    yield ",".join(dataset_header(n_bands))
    for s in samples:
        if s.observations.shape[1] != n_bands:
            raise DataError(f"sample {s.sample_id} has {s.observations.shape[1]} bands, expected {n_bands}")
        prefix = f"{s.sample_id},{s.region_id},{s.label},"
        for day, row in zip(s.times.tolist(), s.observations.tolist()):
            yield prefix + ",".join(map(repr, [day] + row))


def save_dataset(path, samples: Sequence[TimeSeriesSample], n_bands: int | None = None) -> None:
    """Write one CSV row per observation (floats in shortest round-trip form)."""
    if n_bands is None:
        n_bands = samples[0].observations.shape[1] if samples else N_BANDS
    text = "\n".join(_dataset_lines(samples, n_bands)) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_dataset(path, n_bands: int | None = None) -> list[TimeSeriesSample]:
    """Parse a dataset CSV; ``n_bands`` enforces the expected band count."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        D = len(header) - 4
        if D < 1 or header != dataset_header(D):
            raise DataError(f"{path}:1: unexpected header {header[:5]}...")
        if n_bands is not None and D != n_bands:
            raise DataError(f"{path}:1: file has {D} band columns, expected {n_bands}")

        order: list[int] = []
        meta: dict[int, tuple[int, int]] = {}
        rows: dict[int, list[list[float]]] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != D + 4:
                raise DataError(f"{path}:{lineno}: expected {D + 4} fields, got {len(rec)}")
            try:
                sid, region, label = int(rec[0]), int(rec[1]), int(rec[2])
                values = [float(v) for v in rec[3:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if sid not in meta:
                meta[sid] = (region, label)
                rows[sid] = []
                order.append(sid)
            elif meta[sid] != (region, label):
                raise DataError(f"{path}:{lineno}: sample {sid} changes region/label mid-sequence")
            elif values[0] <= rows[sid][-1][0]:
                raise DataError(f"{path}:{lineno}: days of sample {sid} are not strictly increasing")
            rows[sid].append(values)

    out = []
    for sid in order:
        arr = np.array(rows[sid], dtype=np.float64)
        region, label = meta[sid]
        out.append(TimeSeriesSample(sid, arr[:, 1:], arr[:, 0], label, region))
    return out


# ---------------------------------------------------------------------------
# temporal subsampling, splits, normalization


def subsample(sample: TimeSeriesSample, T: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``T`` observations uniformly without replacement, kept in time order."""
    n = sample.length
    if n < T:
        raise DataError(f"sample {sample.sample_id} has {n} observations, cannot draw {T}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=T, replace=False))
    return sample.observations[idx], sample.times[idx]


def subsample_batch(samples: Sequence[TimeSeriesSample], T: int, seed: int, epoch: int = 0):
    """Stack subsampled sequences; each draw is seeded by (seed, epoch, sample_id)."""
    X = np.empty((len(samples), T, samples[0].observations.shape[1]))
    days = np.empty((len(samples), T))
    for i, s in enumerate(samples):
        X[i], days[i] = subsample(s, T, (seed, epoch, s.sample_id))
    return X, days


@dataclass
class DatasetSplit:
    train: list[TimeSeriesSample] = field(default_factory=list)
    val: list[TimeSeriesSample] = field(default_factory=list)
    test: list[TimeSeriesSample] = field(default_factory=list)

    @property
    def regions(self) -> tuple[set[int], set[int], set[int]]:
        return tuple({s.region_id for s in part} for part in (self.train, self.val, self.test))


def split_by_region(
    samples: Sequence[TimeSeriesSample],
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> DatasetSplit:
    """Assign whole regions to train/val/test, greedily tracking sample-count targets."""
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    counts: dict[int, int] = {}
    for s in samples:
        counts[s.region_id] = counts.get(s.region_id, 0) + 1
    regions = sorted(counts)
    if len(regions) < 3:
        raise DataError(f"need at least 3 regions to split, found {len(regions)}")
    rng = np.random.default_rng(seed)
    regions = [regions[i] for i in rng.permutation(len(regions))]

    total = len(samples)
    targets = [f * total for f in fractions]
    assigned: list[list[int]] = [[], [], []]
    sizes = [0, 0, 0]
    for k, region in enumerate(regions):
        if k < 3:
            part = k
        else:
            deficits = [targets[j] - sizes[j] for j in range(3)]
            part = int(np.argmax(deficits))
        assigned[part].append(region)
        sizes[part] += counts[region]

    where = {r: j for j in range(3) for r in assigned[j]}
    split = DatasetSplit()
    parts = (split.train, split.val, split.test)
    for s in samples:
        parts[where[s.region_id]].append(s)
    return split


def fit_normalization(samples: Iterable[TimeSeriesSample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean and standard deviation over every observation of ``samples``."""
    blocks = [s.observations for s in samples]
    if not blocks:
        raise DataError("cannot fit normalization statistics on an empty split")
    stacked = np.concatenate(blocks, axis=0)
    return stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-8)


def summarize(samples: Sequence[TimeSeriesSample]) -> str:
    classes = len({s.label for s in samples})
    regions = len({s.region_id for s in samples})
    return f"{len(samples)} samples, {classes} classes, {regions} regions"
