"""Signal-interfered IQ (SIIQ) corpus: feature maps, labels, partitions, file format."""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, IntegrityError, TruncatedFileError, VersionMismatchError
from .phy import BlockConfig, transmit_block
from .rng import PRNG_ID, substream

MAP_SIZE = 28
CLASS_LEVELS_DB = (0.0, 5.0, 10.0, 15.0, 20.0)
CLASS_EDGES_DB = (2.5, 7.5, 12.5, 17.5)
FORMAT_VERSION = 1
MAGIC = b"SIIQ"

MEMBERSHIP_CODES = {"retain": 0, "forget": 1, "test": 2}
MEMBERSHIP_NAMES = {v: k for k, v in MEMBERSHIP_CODES.items()}

SiiqFormatError = FormatError


@dataclass(frozen=True)
class IQMap:
    grid: np.ndarray
    label: int
    membership: str
    realized_sinr_db: float


@dataclass(frozen=True)
class CaseConfig:
    name: str
    user_count: int
    interferer_offsets_db: tuple
    interfered_fraction: float
    sample_count: int = 625

    def __post_init__(self):
        object.__setattr__(self, "interferer_offsets_db", tuple(float(o) for o in self.interferer_offsets_db))
        if self.user_count < 1:
            raise ValueError("user_count must be >= 1")
        if len(self.interferer_offsets_db) != self.user_count - 1:
            raise ValueError(f"case {self.name!r}: need {self.user_count - 1} offsets, got {len(self.interferer_offsets_db)}")
        if not 0.0 <= self.interfered_fraction <= 1.0:
            raise ValueError("interfered_fraction must lie in [0, 1]")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")

    def to_dict(self):
        return {
            "name": self.name,
            "user_count": self.user_count,
            "interferer_offsets_db": list(self.interferer_offsets_db),
            "interfered_fraction": self.interfered_fraction,
            "sample_count": self.sample_count,
        }


CANONICAL_CASES = (
    CaseConfig("case1", 2, (-12.0,), 1 / 6),
    CaseConfig("case2", 2, (-4.0,), 1 / 6),
    CaseConfig("case3", 3, (-8.0, -8.0), 1.0),
    CaseConfig("case4", 1, (), 0.0),
)


@dataclass(frozen=True)
class CorpusConfig:
    """Training-side settings for :func:`generate_corpus`."""

    retain_count: int = 3125
    forget_count: int = 625
    forget_offsets_db: tuple = (-4.0,)
    map_size: int = MAP_SIZE
    class_levels_db: tuple = CLASS_LEVELS_DB
    class_edges_db: tuple = CLASS_EDGES_DB
    noise_variance: float = 0.01
    power_control: bool = True
    map_source: str = "received"

    def __post_init__(self):
        if self.retain_count <= 0 or self.forget_count <= 0:
            raise ValueError("retain_count and forget_count must be positive")
        if self.map_size % 2:
            raise ValueError("map_size must be even")
        if self.map_source not in ("received", "equalized"):
            raise ValueError(f"unknown map_source {self.map_source!r}")
        if len(self.class_edges_db) != len(self.class_levels_db) - 1:
            raise ValueError("need one edge fewer than class levels")
        if np.any(np.diff(self.class_edges_db) <= 0):
            raise ValueError("class edges must be strictly increasing")

    def to_dict(self):
        return {
            "retain_count": self.retain_count,
            "forget_count": self.forget_count,
            "forget_offsets_db": list(self.forget_offsets_db),
            "map_size": self.map_size,
            "class_levels_db": list(self.class_levels_db),
            "class_edges_db": list(self.class_edges_db),
            "noise_variance": self.noise_variance,
            "power_control": self.power_control,
            "map_source": self.map_source,
        }


@dataclass
class Partition:
    """Array-backed list of maps sharing one membership tag."""

    name: str
    membership: str
    grids: np.ndarray
    labels: np.ndarray
    sinr_db: np.ndarray
    interfered: np.ndarray

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        for g, y, s in zip(self.grids, self.labels, self.sinr_db):
            yield IQMap(g, int(y), self.membership, float(s))

    @property
    def X(self):
        """Grids with a channel axis, ``[n, 1, A, A]``."""
        return self.grids[:, None, :, :]


@dataclass
class SiiqDataset:
    retain: Partition
    forget: Partition
    tests: dict
    manifest: dict = field(default_factory=dict)

    def partitions(self):
        yield self.retain
        yield self.forget
        yield from self.tests.values()


def blocks_to_map(sequence, A=MAP_SIZE):
    """Stack real parts over imaginary parts, each in row-major order."""
    seq = np.asarray(sequence, dtype=np.complex128).ravel()
    if A % 2 or seq.size != A * A // 2:
        raise ValueError(f"sequence of length {seq.size} does not fill one {A}x{A} map (needs {A * A // 2})")
    return np.concatenate([seq.real.reshape(A // 2, A), seq.imag.reshape(A // 2, A)])


def map_to_blocks(grid):
    grid = np.asarray(grid, dtype=np.float64)
    half = grid.shape[0] // 2
    return grid[:half].ravel() + 1j * grid[half:].ravel()


def quantize_label(sinr_db, class_edges_db=CLASS_EDGES_DB):
    """Number of edges strictly below ``sinr_db``; an edge value joins the upper bin."""
    edges = np.asarray(class_edges_db, dtype=np.float64)
    return int(np.searchsorted(edges, sinr_db, side="right"))


def _balanced_levels(rng, n, n_classes):
    levels = np.resize(np.arange(n_classes), n)
    return rng.permutation(levels)


def _interfered_mask(rng, n, fraction):
    mask = np.zeros(n, dtype=bool)
    mask[: int(round(fraction * n))] = True
    return rng.permutation(mask)


def _make_partition(name, membership, n, offsets, fraction, cfg, seed):
    A = cfg.map_size
    levels = _balanced_levels(substream(seed, f"siiq/{name}/levels"), n, len(cfg.class_levels_db))
    mask = _interfered_mask(substream(seed, f"siiq/{name}/mask"), n, fraction)
    grids = np.empty((n, A, A))
    labels = np.empty(n, dtype=np.int64)
    sinr = np.empty(n)
    for i in range(n):
        block = transmit_block(
            substream(seed, f"siiq/{name}", i),
            BlockConfig(
                symbols_per_block=A * A // 2,
                desired_snr_db=cfg.class_levels_db[levels[i]],
                interferer_offsets_db=offsets if mask[i] else (),
                noise_variance=cfg.noise_variance,
                power_control=cfg.power_control,
            ),
        )
        source = block.received if cfg.map_source == "received" else block.equalized
        grids[i] = blocks_to_map(source, A)
        sinr[i] = block.realized_sinr_db
        labels[i] = quantize_label(sinr[i], cfg.class_edges_db)
    return Partition(name, membership, grids, labels, sinr, mask)


def generate_corpus(cfg=CorpusConfig(), cases=CANONICAL_CASES, seed=0):
    """Build the retain, forget and per-case test partitions.

    Retain maps are interference-free. Every forget map carries the
    ``forget_offsets_db`` interferers. A case test set exposes exactly
    ``round(interfered_fraction * sample_count)`` of its maps. Nominal
    class SNRs are assigned in equal shares, and labels always come from
    the realized SINR.
    """
    names = [c.name for c in cases]
    if len(set(names)) != len(names):
        raise ValueError("case names must be unique")
    retain = _make_partition("retain", "retain", cfg.retain_count, (), 0.0, cfg, seed)
    forget = _make_partition("forget", "forget", cfg.forget_count, cfg.forget_offsets_db, 1.0, cfg, seed)
    tests = {
        c.name: _make_partition(f"test:{c.name}", "test", c.sample_count, c.interferer_offsets_db, c.interfered_fraction, cfg, seed)
        for c in cases
    }
    ds = SiiqDataset(retain, forget, tests)
    ds.manifest = {
        "format_version": FORMAT_VERSION,
        "master_seed": int(seed),
        "prng": PRNG_ID,
        "map_size": cfg.map_size,
        "class_edges_db": list(cfg.class_edges_db),
        "corpus": cfg.to_dict(),
        "cases": [c.to_dict() for c in cases],
        "counts": {p.name: len(p) for p in ds.partitions()},
    }
    return ds


# -- file format -------------------------------------------------------------
#
# "SIIQ" | version u16 | A u16 | classes u8 | n_partitions u16
# per partition: name_len u8, name utf-8, count u32
# per map: label u8, membership u8, sinr f64, A*A f64   (all little-endian)

_HEADER = struct.Struct("<4sHHBH")
_RECORD_HEAD = struct.Struct("<BBd")


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save(dataset, path):
    path = Path(path)
    A = dataset.retain.grids.shape[1]
    parts = list(dataset.partitions())
    n_classes = len(dataset.manifest.get("class_edges_db", CLASS_EDGES_DB)) + 1
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, A, n_classes, len(parts))]
    for p in parts:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<B", len(name)) + name + struct.pack("<I", len(p)))
    for p in parts:
        code = MEMBERSHIP_CODES[p.membership]
        for g, y, s in zip(p.grids, p.labels, p.sinr_db):
            chunks.append(_RECORD_HEAD.pack(int(y), code, float(s)))
            chunks.append(np.ascontiguousarray(g, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))

    manifest = dict(dataset.manifest)
    manifest["counts"] = {p.name: len(p) for p in parts}
    manifest["interfered"] = {p.name: np.flatnonzero(p.interfered).tolist() for p in parts}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load(path):
    path = Path(path)
    r = _Reader(path.read_bytes())
    head = r.take(4, "magic")
    if head != MAGIC:
        raise BadMagicError(f"bad magic {head!r}, expected {MAGIC!r}")
    version, A, n_classes, n_parts = struct.unpack("<HHBH", r.take(_HEADER.size - 4, "header"))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version} not supported (expected {FORMAT_VERSION})")

    table = []
    for _ in range(n_parts):
        (name_len,) = struct.unpack("<B", r.take(1, "partition table"))
        name = r.take(name_len, "partition table").decode("utf-8")
        (count,) = struct.unpack("<I", r.take(4, "partition table"))
        table.append((name, count))

    mpath = manifest_path(path)
    if not mpath.exists():
        raise IntegrityError(f"missing manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("counts") != dict(table):
        raise IntegrityError(f"manifest counts {manifest.get('counts')} do not match payload {dict(table)}")
    interfered = manifest.pop("interfered", {})

    rec_size = _RECORD_HEAD.size + 8 * A * A
    parts = []
    for name, count in table:
        raw = r.take(rec_size * count, f"records of {name!r}")
        recs = np.frombuffer(raw, dtype=np.dtype([("label", "u1"), ("member", "u1"), ("sinr", "<f8"), ("grid", "<f8", (A, A))]))
        members = set(recs["member"].tolist())
        if len(members) > 1:
            raise IntegrityError(f"partition {name!r} mixes membership codes {sorted(members)}")
        code = members.pop() if members else _default_code(name)
        if code not in MEMBERSHIP_NAMES:
            raise IntegrityError(f"unknown membership code {code}")
        mask = np.zeros(count, dtype=bool)
        mask[interfered.get(name, [])] = True
        parts.append(Partition(
            name, MEMBERSHIP_NAMES[code], recs["grid"].astype(np.float64),
            recs["label"].astype(np.int64), recs["sinr"].astype(np.float64), mask,
        ))
    if r.pos != len(r.buf):
        raise IntegrityError(f"{len(r.buf) - r.pos} trailing bytes after last record")

    by_name = {p.name: p for p in parts}
    try:
        retain, forget = by_name.pop("retain"), by_name.pop("forget")
    except KeyError as exc:
        raise IntegrityError(f"missing partition {exc}") from None
    tests = {name.split(":", 1)[1]: p for name, p in by_name.items()}
    return SiiqDataset(retain, forget, tests, manifest)


def _default_code(name):
    return MEMBERSHIP_CODES["test" if name.startswith("test:") else name]
