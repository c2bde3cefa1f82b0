"""Site records, CSV/shard ingestion, normalisation and dataset splits."""

from __future__ import annotations

import csv
import os
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Base class for ingestion and split errors."""


class MissingSiteError(DataError):
    pass


class DateError(DataError):
    pass


class GroupPartitionError(DataError):
    pass


class ColumnError(DataError):
    pass


class ShardError(DataError):
    pass


@dataclass
class SiteRecord:
    site_id: str
    region_id: str
    forcings: np.ndarray          # (T, C)
    static_attrs: np.ndarray      # (S,)
    dates: np.ndarray             # (T,) datetime64[D]
    target: np.ndarray | None = None

    def __post_init__(self):
        self.forcings = np.asarray(self.forcings, dtype=np.float64)
        self.static_attrs = np.asarray(self.static_attrs, dtype=np.float64)
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        if self.forcings.ndim != 2:
            raise DataError(f"site {self.site_id}: forcings must be (T, C), got {self.forcings.shape}")
        T = self.forcings.shape[0]
        if self.dates.shape != (T,):
            raise DataError(f"site {self.site_id}: {len(self.dates)} dates for {T} forcing rows")
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.target.ndim == 1 and self.target.shape[0] != T:
                raise DataError(f"site {self.site_id}: target length {self.target.shape[0]} != T={T}")

    @property
    def T(self):
        return self.forcings.shape[0]


# -- variable groups -----------------------------------------------------------

@dataclass
class VariableGroupSpec:
    """Ordered groups of variable names; each variable belongs to exactly one group.

    ``dynamic`` holds the names that are time series; all other variables are
    static attributes.
    """

    groups: list[tuple[str, list[str]]]
    dynamic: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.groups = [(name, list(vs)) for name, vs in self.groups]
        seen = {}
        for name, vs in self.groups:
            if not vs:
                raise GroupPartitionError(f"group {name!r} is empty")
            for v in vs:
                if v in seen:
                    raise GroupPartitionError(f"variable {v!r} in both {seen[v]!r} and {name!r}")
                seen[v] = name
        missing = [v for v in self.dynamic if v not in seen]
        if missing:
            raise GroupPartitionError(f"dynamic variables {missing} are not in any group")
        self._group_of = seen

    @property
    def group_names(self):
        return [n for n, _ in self.groups]

    @property
    def all_vars(self):
        return [v for _, vs in self.groups for v in vs]

    @property
    def dynamic_vars(self):
        dyn = set(self.dynamic)
        return [v for v in self.all_vars if v in dyn]

    @property
    def static_vars(self):
        dyn = set(self.dynamic)
        return [v for v in self.all_vars if v not in dyn]

    def is_dynamic(self, var):
        return var in set(self.dynamic)

    def group_of(self, var):
        return self._group_of[var]

    def members(self, group):
        for n, vs in self.groups:
            if n == group:
                return list(vs)
        raise KeyError(f"unknown group {group!r}")

    def group_index_arrays(self):
        """Per-group index arrays into ``dynamic_vars`` and ``static_vars``."""
        dyn = {v: i for i, v in enumerate(self.dynamic_vars)}
        sta = {v: i for i, v in enumerate(self.static_vars)}
        out = []
        for _, vs in self.groups:
            out.append((np.array([dyn[v] for v in vs if v in dyn], dtype=int),
                        np.array([sta[v] for v in vs if v in sta], dtype=int)))
        return out

    def check_partition(self, dynamic_names, static_names, where="input"):
        """Raise unless the given columns are exactly this spec's variables."""
        for kind, given, expected in (("dynamic", dynamic_names, self.dynamic_vars),
                                      ("static", static_names, self.static_vars)):
            given_s, exp_s = set(given), set(expected)
            unknown = sorted(given_s - exp_s)
            missing = sorted(exp_s - given_s)
            if unknown:
                raise ColumnError(f"{where}: unknown {kind} variables {unknown}")
            if missing:
                groups = sorted({self.group_of(v) for v in missing})
                raise GroupPartitionError(
                    f"{where}: {kind} variables {missing} of group(s) {groups} are absent")

    def to_text(self):
        lines = []
        dyn = set(self.dynamic)
        for name, vs in self.groups:
            tag = " [dynamic]" if all(v in dyn for v in vs) else ""
            lines.append(f"{name}{tag}: {', '.join(vs)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        groups, dynamic = [], []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise GroupPartitionError(f"group line without ':' -> {raw!r}")
            head, tail = line.split(":", 1)
            head = head.strip()
            is_dyn = head.endswith("[dynamic]")
            name = head.replace("[dynamic]", "").strip()
            vs = [v.strip() for v in tail.split(",") if v.strip()]
            groups.append((name, vs))
            if is_dyn:
                dynamic.extend(vs)
        return cls(groups, dynamic)

    @classmethod
    def read(cls, path):
        return cls.parse(Path(path).read_text())

    @classmethod
    def with_singleton_forcings(cls, static_groups, forcings):
        """Static groups as given plus one singleton group per dynamic forcing."""
        return cls(list(static_groups) + [(f, [f]) for f in forcings], list(forcings))


# -- CSV ingestion ---------------------------------------------------------------

def _parse_float(text, path, field_name):
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na"):
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise ColumnError(f"{path}: non-numeric value {text!r} in column {field_name!r}") from None


def _read_forcing_csv(path, dynamic_vars, target_column):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ColumnError(f"{path}: empty file") from None
        if not header or header[0] != "date":
            raise ColumnError(f"{path}: first column must be 'date', got {header[:1]}")
        cols = header[1:]
        var_cols = [c for c in cols if c != target_column]
        rows = [r for r in reader if r]
    given, expected = set(var_cols), set(dynamic_vars)
    if given - expected:
        raise ColumnError(f"{path}: unknown forcing columns {sorted(given - expected)}")
    if expected - given:
        raise GroupPartitionError(f"{path}: missing forcing columns {sorted(expected - given)}")
    if target_column is not None and target_column not in cols:
        raise ColumnError(f"{path}: target column {target_column!r} absent")
    idx = {c: i + 1 for i, c in enumerate(cols)}
    try:
        dates = np.array([r[0].strip() for r in rows], dtype="datetime64[D]")
    except ValueError as exc:
        raise DateError(f"{path}: unparseable date ({exc})") from None
    if len(dates) == 0:
        raise DateError(f"{path}: no rows")
    step = np.diff(dates).astype(int)
    if np.any(step <= 0):
        k = int(np.argmax(step <= 0))
        raise DateError(f"{path}: dates not increasing at {dates[k]} -> {dates[k + 1]}")
    if np.any(step != 1):
        k = int(np.argmax(step != 1))
        raise DateError(f"{path}: date gap between {dates[k]} and {dates[k + 1]}")
    forc = np.array([[_parse_float(r[idx[v]], path, v) for v in dynamic_vars] for r in rows])
    forc = forc.reshape(len(rows), len(dynamic_vars))
    target = None
    if target_column is not None:
        target = np.array([_parse_float(r[idx[target_column]], path, target_column) for r in rows])
    return dates, forc, target


def load_sites(forcing_csv_dir, static_csv, groups, target_column=None,
               train_ids=None, exclude=()):
    """Read one forcing CSV per site plus the static attribute table.

    Static NaNs are imputed with the median over ``train_ids`` (all sites when
    None).  Sites listed in ``exclude`` are dropped before anything else.
    """
    forcing_dir = Path(forcing_csv_dir)
    static_csv = Path(static_csv)
    exclude = set(exclude)
    with open(static_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    if header[:2] != ["site_id", "region_id"]:
        raise ColumnError(f"{static_csv}: header must start with site_id,region_id")
    attr_cols = header[2:]
    groups.check_partition(groups.dynamic_vars, attr_cols, where=str(static_csv))
    order = [attr_cols.index(v) + 2 for v in groups.static_vars]

    static_rows = {}
    for r in rows:
        sid = r[0].strip()
        if sid in exclude:
            continue
        if sid in static_rows:
            raise DataError(f"{static_csv}: duplicate site_id {sid!r}")
        vals = np.array([_parse_float(r[k], static_csv, header[k]) for k in order])
        static_rows[sid] = (r[1].strip(), vals)

    present = {p.stem for p in forcing_dir.glob("*.csv")} - exclude
    orphan = sorted(present - set(static_rows))
    if orphan:
        raise MissingSiteError(f"{forcing_dir}: forcing files {orphan} have no row in {static_csv}")
    absent = sorted(set(static_rows) - present)
    if absent:
        raise MissingSiteError(f"{static_csv}: site_id(s) {absent} have no forcing file in {forcing_dir}")

    sites = []
    for sid, (region, vals) in static_rows.items():
        dates, forc, target = _read_forcing_csv(forcing_dir / f"{sid}.csv", groups.dynamic_vars,
                                                target_column)
        sites.append(SiteRecord(sid, region, forc, vals, dates, target))
    impute_static(sites, train_ids)
    return sites


def impute_static(sites, train_ids=None):
    """Replace static NaNs in place by the per-attribute median of training sites."""
    if not sites:
        return sites
    pool = [s for s in sites if train_ids is None or s.site_id in set(train_ids)]
    mat = np.stack([s.static_attrs for s in pool])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(mat, axis=0)
    if np.any(np.isnan(med)):
        bad = np.flatnonzero(np.isnan(med)).tolist()
        raise DataError(f"static attribute columns {bad} are NaN for every training site")
    for s in sites:
        nan = np.isnan(s.static_attrs)
        if nan.any():
            s.static_attrs = np.where(nan, med, s.static_attrs)
    return sites


def _fmt(v):
    return "nan" if np.isnan(v) else format(float(v), ".17g")


def write_sites_csv(sites, out_dir, groups, target_column=None):
    """Write ``<site_id>.csv`` forcing files and ``static.csv`` under ``out_dir``."""
    out = Path(out_dir)
    forc_dir = out / "forcings"
    forc_dir.mkdir(parents=True, exist_ok=True)
    for s in sites:
        with open(forc_dir / f"{s.site_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["date"] + groups.dynamic_vars
            if target_column is not None:
                head.append(target_column)
            w.writerow(head)
            for t in range(s.T):
                row = [str(s.dates[t])] + [_fmt(v) for v in s.forcings[t]]
                if target_column is not None:
                    row.append(_fmt(s.target[t]))
                w.writerow(row)
    with open(out / "static.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "region_id"] + groups.static_vars)
        for s in sites:
            w.writerow([s.site_id, s.region_id] + [_fmt(v) for v in s.static_attrs])
    return forc_dir, out / "static.csv"


# -- normalisation -----------------------------------------------------------------

@dataclass
class NormalizationStats:
    dyn_mean: np.ndarray
    dyn_std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0


def _moments(values, names):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mu = np.nanmean(values, axis=0)
        sd = np.nanstd(values, axis=0)
    if np.any(np.isnan(mu)):
        bad = [names[i] for i in np.flatnonzero(np.isnan(mu))]
        raise DataError(f"variables {bad} are all-NaN in the training split")
    const = sd <= 0.0
    if const.any():
        bad = [names[i] for i in np.flatnonzero(const)]
        warnings.warn(f"constant variables {bad}: std set to 1", stacklevel=3)
        sd = np.where(const, 1.0, sd)
    return mu, sd


def compute_norm_stats(train_sites):
    """Population mean/std per variable over training sites only."""
    if not train_sites:
        raise DataError("compute_norm_stats needs at least one training site")
    C = train_sites[0].forcings.shape[1]
    S = train_sites[0].static_attrs.shape[0]
    dyn = np.concatenate([s.forcings for s in train_sites], axis=0)
    sta = np.stack([s.static_attrs for s in train_sites])
    dm, ds = _moments(dyn, [f"dynamic[{i}]" for i in range(C)])
    sm, ss = _moments(sta, [f"static[{i}]" for i in range(S)])
    tm, ts = 0.0, 1.0
    targets = [s.target for s in train_sites if s.target is not None]
    if targets:
        flat = np.concatenate([np.atleast_1d(t) for t in targets])
        (tm,), (ts,) = _moments(flat[:, None], ["target"])
    return NormalizationStats(dm, ds, sm, ss, float(tm), float(ts))


def apply_norm(sites, stats):
    out = []
    for s in sites:
        tgt = None if s.target is None else (s.target - stats.target_mean) / stats.target_std
        out.append(replace(s, forcings=(s.forcings - stats.dyn_mean) / stats.dyn_std,
                           static_attrs=(s.static_attrs - stats.static_mean) / stats.static_std,
                           target=tgt))
    return out


def invert_norm(sites, stats):
    out = []
    for s in sites:
        tgt = None if s.target is None else s.target * stats.target_std + stats.target_mean
        out.append(replace(s, forcings=s.forcings * stats.dyn_std + stats.dyn_mean,
                           static_attrs=s.static_attrs * stats.static_std + stats.static_mean,
                           target=tgt))
    return out


# -- splits -------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    mode: str                                  # "random_kfold" | "regional_holdout"
    folds: dict = field(default_factory=dict)  # site_id -> fold index
    held_regions: frozenset = frozenset()

    @property
    def n_folds(self):
        return max(self.folds.values()) + 1 if self.folds else 1

    def test_ids(self, fold=0):
        return sorted(s for s, f in self.folds.items() if f == fold)

    def train_ids(self, fold=0):
        return sorted(s for s, f in self.folds.items() if f != fold)

    def fold_sizes(self):
        return [sum(1 for f in self.folds.values() if f == k) for k in range(self.n_folds)]

    def partition(self, sites, fold=0):
        test = set(self.test_ids(fold))
        train = [s for s in sites if s.site_id in self.folds and s.site_id not in test]
        held = [s for s in sites if s.site_id in test]
        return train, held


def split_random_kfold(sites, k, seed):
    """Seeded shuffle of site ids then round-robin fold assignment."""
    ids = sorted({s.site_id for s in sites})
    if not 2 <= k <= len(ids):
        raise DataError(f"k={k} out of range [2, {len(ids)}]")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return DatasetSplit("random_kfold", {ids[j]: i % k for i, j in enumerate(perm)})


def split_regional_holdout(sites, held_regions):
    held = frozenset(held_regions)
    regions = {s.region_id for s in sites}
    unknown = sorted(held - regions)
    if unknown:
        raise DataError(f"unknown region ids {unknown}; observed {sorted(regions)}")
    if not held:
        raise DataError("regional holdout with no held-out region leaves an empty test set")
    if held >= regions:
        raise DataError("holding out every region leaves an empty training set")
    # fold 0 is the held-out (test) fold
    folds = {s.site_id: (0 if s.region_id in held else 1) for s in sites}
    return DatasetSplit("regional_holdout", folds, held)


# -- shards -------------------------------------------------------------------------

SHARD_VERSION = "LANDFM1"


@dataclass
class ShardSet:
    directory: Path
    files: list
    counts: list
    n_dynamic: int
    n_static: int
    T: int
    has_target: bool
    seed: int = 0
    dynamic_names: list = field(default_factory=list)
    static_names: list = field(default_factory=list)
    site_ids: list = field(default_factory=list)
    region_ids: list = field(default_factory=list)
    start_dates: list = field(default_factory=list)

    def __len__(self):
        return int(sum(self.counts))

    @property
    def record_width(self):
        return self.T * self.n_dynamic + self.n_static + (self.T if self.has_target else 0)

    def locate(self, index):
        if not 0 <= index < len(self):
            raise IndexError(f"sample {index} outside 0..{len(self) - 1}")
        for f, n in zip(self.files, self.counts):
            if index < n:
                return f, index
            index -= n

    def read(self, index):
        """Read one sample through a memory map (no full-dataset load)."""
        fname, local = self.locate(index)
        w = self.record_width
        mm = np.memmap(self.directory / fname, dtype="<f8", mode="r",
                       offset=local * w * 8, shape=(w,))
        rec = np.array(mm)
        del mm
        cut = self.T * self.n_dynamic
        forc = rec[:cut].reshape(self.T, self.n_dynamic)
        sta = rec[cut:cut + self.n_static]
        tgt = rec[cut + self.n_static:] if self.has_target else None
        start = np.datetime64(self.start_dates[index], "D")
        dates = start + np.arange(self.T)
        return SiteRecord(self.site_ids[index], self.region_ids[index], forc, sta, dates, tgt)

    def read_all(self):
        return [self.read(i) for i in range(len(self))]

    @classmethod
    def open(cls, directory, seed=0):
        d = Path(directory)
        lines = (d / "manifest.txt").read_text().splitlines()
        head = lines[0].split()
        if head[0] != SHARD_VERSION:
            raise ShardError(f"{d}/manifest.txt: unsupported version {head[0]!r}")
        n_vars, T = int(head[1]), int(head[2])
        meta, files, counts = {}, [], []
        for line in lines[1:]:
            key, _, rest = line.partition(" ")
            if key in ("dtype", "dynamic", "static", "target"):
                meta[key] = rest.strip()
            elif line.strip():
                files.append(key)
                counts.append(int(rest))
        dyn = [v for v in meta.get("dynamic", "").split(",") if v]
        sta = [v for v in meta.get("static", "").split(",") if v]
        if len(dyn) + len(sta) != n_vars:
            raise ShardError(f"{d}/manifest.txt: header says {n_vars} variables, lists {len(dyn) + len(sta)}")
        if meta.get("dtype", "float64") != "float64":
            raise ShardError(f"{d}/manifest.txt: unsupported dtype {meta['dtype']!r}")
        ids, regions, starts = [], [], []
        for line in (d / "sites.txt").read_text().splitlines():
            sid, reg, start = line.split()
            ids.append(sid)
            regions.append(reg)
            starts.append(start)
        return cls(d, files, counts, len(dyn), len(sta), T, meta.get("target", "0") == "1",
                   seed, dyn, sta, ids, regions, starts)


def shard_write(sites, shard_size, directory, seed=0, dynamic_names=None, static_names=None):
    """Write fixed-width little-endian float64 records, ``shard_size`` per file."""
    if shard_size < 1:
        raise ShardError(f"shard_size must be >= 1, got {shard_size}")
    if not sites:
        raise ShardError("no sites to shard")
    d = Path(directory)
    T = sites[0].T
    C = sites[0].forcings.shape[1]
    S = sites[0].static_attrs.shape[0]
    has_target = all(s.target is not None for s in sites)
    for s in sites:
        if s.T != T or s.forcings.shape[1] != C or s.static_attrs.shape[0] != S:
            raise ShardError(f"site {s.site_id}: shape differs from first site (T={T}, C={C}, S={S})")
    dyn = dynamic_names or [f"d{i}" for i in range(C)]
    sta = static_names or [f"s{i}" for i in range(S)]
    try:
        d.mkdir(parents=True, exist_ok=True)
        files, counts = [], []
        for k, lo in enumerate(range(0, len(sites), shard_size)):
            chunk = sites[lo:lo + shard_size]
            name = f"shard_{k:05d}.bin"
            rows = []
            for s in chunk:
                parts = [s.forcings.reshape(-1), s.static_attrs]
                if has_target:
                    parts.append(s.target.reshape(-1))
                rows.append(np.concatenate(parts))
            np.asarray(rows, dtype="<f8").tofile(d / name)
            files.append(name)
            counts.append(len(chunk))
        lines = [f"{SHARD_VERSION} {C + S} {T}", "dtype float64", "dynamic " + ",".join(dyn),
                 "static " + ",".join(sta), f"target {int(has_target)}"]
        lines += [f"{f} {n}" for f, n in zip(files, counts)]
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")
        (d / "sites.txt").write_text("".join(f"{s.site_id} {s.region_id} {s.dates[0]}\n" for s in sites))
    except OSError as exc:
        raise ShardError(f"cannot write shards to {d}: {exc}") from exc
    return ShardSet(d, files, counts, C, S, T, has_target, seed, dyn, sta,
                    [s.site_id for s in sites], [s.region_id for s in sites],
                    [str(s.dates[0]) for s in sites])


def derive_rng(seed, purpose, *counters):
    """Counter-based generator keyed by (seed, purpose string, counters...)."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode())] + [int(c) for c in counters]
    return np.random.default_rng(np.random.SeedSequence(key))


def shard_epoch_order(shards, epoch):
    """Seeded permutation of all sample indices for ``epoch``."""
    return derive_rng(shards.seed, "epoch-order", epoch).permutation(len(shards))


def site_windows(site, seq_len, starts):
    """Slice fixed-length windows from one site at the given start indices."""
    return [SiteRecord(site.site_id, site.region_id, site.forcings[a:a + seq_len], site.static_attrs,
                       site.dates[a:a + seq_len],
                       None if site.target is None else site.target[a:a + seq_len])
            for a in starts]


def ensure_dir_empty(path):
    p = Path(path)
    if p.exists() and any(p.iterdir()):
        raise DataError(f"output directory {p} exists and is not empty")
    p.mkdir(parents=True, exist_ok=True)
    return p


def env_threads():
    raw = os.environ.get("STEFALAND_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"STEFALAND_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)
