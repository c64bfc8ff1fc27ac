"""Silos: synthetic non-IID generation, CSV ingestion, oversampling and scaling."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

# Column blocks of the default synthetic layout: temporal groups are read as
# (channels, length) sequences by the conv feature extractors.
DEFAULT_GROUPS = (
    {"name": "weather", "channels": 3, "length": 13, "temporal": True},
    {"name": "soil", "channels": 2, "length": 7, "temporal": True},
    {"name": "management", "channels": 1, "length": 4, "temporal": False},
    {"name": "trend", "channels": 1, "length": 2, "temporal": False},
)


def group_widths(groups: Sequence[dict]) -> list[dict]:
    """Groups with an explicit ``width`` (channels * length) for the architecture builder."""
    return [dict(g, width=int(g["channels"]) * int(g["length"])) for g in groups]


@dataclass(frozen=True, eq=False)
class Silo:
    id: str
    x: np.ndarray
    y: np.ndarray
    year: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y) or len(self.y) != len(self.year):
            raise DataError(f"silo {self.id}: features, targets and years differ in length")
        if np.intersect1d(self.train_idx, self.val_idx).size:
            raise DataError(f"silo {self.id}: train and validation overlap")
        if not np.all(np.isfinite(self.x)) or not np.all(np.isfinite(self.y)):
            raise DataError(f"silo {self.id}: non-finite values")

    @property
    def x_train(self) -> np.ndarray:
        return self.x[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_idx]

    @property
    def x_val(self) -> np.ndarray:
        return self.x[self.val_idx]

    @property
    def y_val(self) -> np.ndarray:
        return self.y[self.val_idx]

    @property
    def n_train(self) -> int:
        return len(self.train_idx)

    @property
    def n_features(self) -> int:
        return self.x.shape[1]


def split_by_year(year: np.ndarray, last_year: int, val_years: int) -> tuple[np.ndarray, np.ndarray]:
    """Validation = the ``val_years`` most recent years up to ``last_year``."""
    is_val = year > last_year - val_years
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


@dataclass(frozen=True)
class SyntheticConfig:
    num_silos: int = 9
    samples_range: tuple[int, int] = (300, 900)
    groups: tuple[dict, ...] = DEFAULT_GROUPS
    # heterogeneity knobs; all zero gives IID silos
    label_shift: float = 6.0  # b_k spread, target units
    scale_shift: float = 0.3  # a_k spread
    rotation: float = 0.5  # radians
    noise_spread: float = 0.5  # relative spread of per-silo noise
    noise: float = 2.0
    target_mean: float = 45.0
    target_scale: float = 8.0
    years: tuple[int, int] = (1999, 2018)
    val_years: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_silos < 2:
            raise ConfigError("need at least 2 silos")
        lo, hi = self.samples_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad samples range {self.samples_range}")
        if not self.groups or any(int(g["channels"]) < 1 or int(g["length"]) < 1 for g in self.groups):
            raise ConfigError("feature groups need positive channels and length")
        knobs = (self.label_shift, self.scale_shift, self.rotation, self.noise_spread, self.noise)
        if min(knobs) < 0:
            raise ConfigError("heterogeneity knobs must be non-negative")
        n_years = self.years[1] - self.years[0] + 1
        if not 1 <= self.val_years < n_years:
            raise ConfigError("val_years must leave at least one training year")

    @property
    def n_features(self) -> int:
        return sum(int(g["channels"]) * int(g["length"]) for g in self.groups)

    def iid(self) -> "SyntheticConfig":
        return replace(self, label_shift=0.0, scale_shift=0.0, rotation=0.0, noise_spread=0.0)


def _spread(rng: np.random.Generator, k: int, magnitude: float) -> np.ndarray:
    """``k`` evenly spaced values in [-magnitude, magnitude], randomly assigned."""
    vals = magnitude * np.linspace(-1.0, 1.0, k)
    return vals[rng.permutation(k)]


def _ar_smooth(z: np.ndarray, channels: int, length: int, phi: float = 0.7) -> np.ndarray:
    seq = z.reshape(len(z), channels, length).copy()
    for t in range(1, length):
        seq[:, :, t] = phi * seq[:, :, t - 1] + math.sqrt(1 - phi ** 2) * seq[:, :, t]
    return seq.reshape(len(z), -1)


def _givens(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate consecutive feature pairs (0,1), (2,3), ... by ``angle``."""
    if angle == 0.0:
        return x
    out = x.copy()
    c, s = math.cos(angle), math.sin(angle)
    d = x.shape[1] - x.shape[1] % 2
    a, b = x[:, 0:d:2], x[:, 1:d:2]
    out[:, 0:d:2] = c * a - s * b
    out[:, 1:d:2] = s * a + c * b
    return out


class _Truth:
    """Fixed random two-layer tanh regressor over per-group summaries."""

    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator, hidden: int = 16):
        self.groups = cfg.groups
        self.filters = []
        for g in cfg.groups:
            ch, ln = int(g["channels"]), int(g["length"])
            if g.get("temporal", False):
                # two smooth temporal filters, each mixing every channel
                t = np.linspace(0.0, 1.0, ln)
                bank = []
                for _ in range(2):
                    centre, width = rng.uniform(0.2, 0.8), rng.uniform(0.15, 0.4)
                    shape = np.exp(-0.5 * ((t - centre) / width) ** 2)
                    bank.append(np.outer(rng.normal(size=ch), shape).reshape(-1) / math.sqrt(ln))
                self.filters.append(np.stack(bank, axis=1))
            else:
                self.filters.append(np.eye(ch * ln))
        d = sum(f.shape[1] for f in self.filters)
        self.w1 = rng.normal(size=(d, hidden)) / math.sqrt(d)
        self.b1 = rng.normal(scale=0.3, size=hidden)
        self.w2 = rng.normal(size=hidden)
        self.lin = rng.normal(size=d) / math.sqrt(d)
        ref = self._raw(_base_features(cfg, rng, 4000))
        self.mu, self.sd = ref.mean(), ref.std()

    def _raw(self, x: np.ndarray) -> np.ndarray:
        parts, col = [], 0
        for g, f in zip(self.groups, self.filters):
            w = int(g["channels"]) * int(g["length"])
            parts.append(x[:, col:col + w] @ f)
            col += w
        s = np.concatenate(parts, axis=1)
        return np.tanh(s @ self.w1 + self.b1) @ self.w2 + s @ self.lin

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (self._raw(x) - self.mu) / self.sd


def _base_features(cfg: SyntheticConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    blocks = []
    for g in cfg.groups:
        ch, ln = int(g["channels"]), int(g["length"])
        z = rng.normal(size=(n, ch * ln))
        blocks.append(_ar_smooth(z, ch, ln) if g.get("temporal", False) else z)
    return np.concatenate(blocks, axis=1)


def gen_synthetic_silos(cfg: SyntheticConfig) -> list[Silo]:
    """Silos sharing one nonlinear regressor, each with its own affine label skew,
    feature-covariance rotation and noise level."""
    rng = np.random.default_rng(cfg.seed)
    truth = _Truth(cfg, rng)
    k = cfg.num_silos
    offsets = _spread(rng, k, cfg.label_shift)
    scales = _spread(rng, k, cfg.scale_shift)
    angles = _spread(rng, k, cfg.rotation)
    noise = cfg.noise * (1.0 + _spread(rng, k, cfg.noise_spread))
    first, last = cfg.years
    n_years = last - first + 1
    lo, hi = cfg.samples_range

    silos = []
    for i in range(k):
        n = int(rng.integers(lo, hi + 1))
        x = _givens(_base_features(cfg, rng, n), angles[i])
        f = cfg.target_scale * truth(x)
        y = cfg.target_mean + f + scales[i] * f + offsets[i] + rng.normal(scale=max(noise[i], 0.0), size=n)
        year = first + rng.permutation(np.arange(n) % n_years)
        tr, va = split_by_year(year, last, cfg.val_years)
        silos.append(Silo(f"silo{i}", x, y, year, tr, va))
    return silos


def oversample_equalize(silos: Sequence[Silo], seed: int = 0) -> list[Silo]:
    """Resample every train set with replacement up to the largest one.

    Each original training row is kept once; only the extra rows are drawn.
    """
    if any(s.n_train == 0 for s in silos):
        raise DataError("cannot oversample an empty silo")
    target = max(s.n_train for s in silos)
    rng = np.random.default_rng(seed)
    out = []
    for s in silos:
        extra = rng.choice(s.train_idx, size=target - s.n_train, replace=True)
        out.append(replace(s, train_idx=np.concatenate([s.train_idx, extra])))
    return out


@dataclass(frozen=True)
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    constant: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def transform_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def inverse_x(self, z: np.ndarray) -> np.ndarray:
        return z * self.x_std + self.x_mean

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def inverse_y(self, z: np.ndarray) -> np.ndarray:
        return z * self.y_std + self.y_mean


def normalize(silos: Sequence[Silo]) -> tuple[list[Silo], NormStats]:
    """Z-score features and targets with statistics of the pooled training rows.

    Constant features map to 0 and are flagged in ``NormStats.constant``.
    """
    rows = [np.unique(s.train_idx) for s in silos]
    if not any(len(r) for r in rows):
        raise DataError("no training rows to normalise with")
    x = np.concatenate([s.x[r] for s, r in zip(silos, rows)])
    y = np.concatenate([s.y[r] for s, r in zip(silos, rows)])
    mean, std = x.mean(axis=0), x.std(axis=0)
    constant = std == 0
    if constant.any():
        log.warning("%d constant feature(s) mapped to 0", int(constant.sum()))
    std = np.where(constant, 1.0, std)
    y_std = float(y.std()) or 1.0
    stats = NormStats(mean, std, float(y.mean()), y_std, constant)
    out = [replace(s, x=stats.transform_x(s.x), y=stats.transform_y(s.y)) for s in silos]
    return out, stats


# -- CSV -------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    silo_col: str = "silo_id"
    year_col: str = "year"
    target_col: str = "target"
    feature_cols: tuple[str, ...] | None = None  # None: every other column, in file order
    val_years: int = 3


class CsvData(NamedTuple):
    silos: list[Silo]
    rejected: int


def _csv_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataError(f"no CSV files in {path}")
        return files
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return [path]


def load_csv(path: str | Path, schema: CsvSchema = CsvSchema()) -> CsvData:
    """Read ``silo_id, year, features..., target`` rows; rows with missing or
    non-numeric fields are skipped and counted. ``path`` may be a directory of CSVs."""
    feature_cols = schema.feature_cols
    rows: dict[str, list[tuple[int, list[float], float]]] = {}
    rejected = 0
    for file in _csv_files(Path(path)):
        with open(file, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            required = {schema.silo_col, schema.year_col, schema.target_col}
            if not required.issubset(header):
                raise DataError(f"{file}: header must contain {sorted(required)}, got {header}")
            cols = feature_cols or tuple(c for c in header if c not in required)
            if feature_cols is None:
                feature_cols = cols
            elif not set(cols).issubset(header):
                raise DataError(f"{file}: missing feature columns")
            if not cols:
                raise DataError(f"{file}: no feature columns")
            for rec in reader:
                try:
                    sid = rec[schema.silo_col]
                    if not sid:
                        raise ValueError
                    year = int(rec[schema.year_col])
                    feats = [float(rec[c]) for c in cols]
                    target = float(rec[schema.target_col])
                    if not all(map(math.isfinite, feats)) or not math.isfinite(target):
                        raise ValueError
                except (TypeError, ValueError):
                    rejected += 1
                    continue
                rows.setdefault(sid, []).append((year, feats, target))
    if not rows:
        raise DataError(f"{path}: no usable rows ({rejected} rejected)")
    if rejected:
        log.warning("%s: rejected %d malformed row(s)", path, rejected)
    last = max(r[0] for recs in rows.values() for r in recs)
    silos = []
    for sid, recs in rows.items():
        year = np.array([r[0] for r in recs], dtype=np.int64)
        x = np.array([r[1] for r in recs], dtype=np.float64)
        y = np.array([r[2] for r in recs], dtype=np.float64)
        tr, va = split_by_year(year, last, schema.val_years)
        silos.append(Silo(sid, x, y, year, tr, va))
    return CsvData(silos, rejected)


def write_csv(silos: Sequence[Silo], path: str | Path, per_silo: bool = False) -> list[Path]:
    """Write silos in the ingestion layout; one file, or one file per silo in directory ``path``."""
    path = Path(path)
    d = silos[0].n_features
    header = ["silo_id", "year", *(f"f{j}" for j in range(d)), "target"]

    def dump(file: Path, group: Sequence[Silo]) -> None:
        with open(file, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for s in group:
                for xi, yi, yr in zip(s.x, s.y, s.year):
                    w.writerow([s.id, int(yr), *map(repr, map(float, xi)), repr(float(yi))])

    if per_silo:
        path.mkdir(parents=True, exist_ok=True)
        files = [path / f"{s.id}.csv" for s in silos]
        for f, s in zip(files, silos):
            dump(f, [s])
        return files
    path.parent.mkdir(parents=True, exist_ok=True)
    dump(path, silos)
    return [path]


def fingerprint(silos: Sequence[Silo]) -> str:
    """Stable hash of silo contents (ids, data and splits)."""
    h = hashlib.sha256()
    for s in silos:
        h.update(s.id.encode())
        for arr in (s.x, s.y, s.year, s.train_idx, s.val_idx):
            a = np.ascontiguousarray(arr)
            h.update(str(a.dtype).encode())
            h.update(a.tobytes())
    return h.hexdigest()[:16]
