"""Molecule records and their conversion into dense 1-, 2- and 3-body input tensors.

Discrete attributes become one-hot blocks; continuous ones (hop counts,
distances, angles) are expanded on a Gaussian radial basis.
"""

from __future__ import annotations

import json
import math
import struct
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, FeatureError, InputError

# Category vocabularies. Index in the tuple is the one-hot position.
CHIRALITY_TAGS = ("unspecified", "CW", "CCW", "other")
HYBRIDIZATIONS = ("sp", "sp2", "sp3", "sp3d", "sp3d2")
BOND_TYPES = ("single", "double", "triple", "aromatic")
BOND_DIRS = ("none", "begin_wedge", "begin_dash", "end_downright", "end_upright", "either_double", "unknown")

ATOM_TYPE_WIDTH = 119
FORMAL_CHARGE_WIDTH = 16
FORMAL_CHARGE_OFFSET = 8  # charges -8..+7
DEGREE_WIDTH = 11
NUM_H_WIDTH = 9

ATOM_BLOCK_WIDTHS = (ATOM_TYPE_WIDTH, 2, FORMAL_CHARGE_WIDTH, len(CHIRALITY_TAGS), DEGREE_WIDTH, NUM_H_WIDTH, len(HYBRIDIZATIONS))
# pair blocks carry one extra trailing "no bond" category
PAIR_BLOCK_WIDTHS = (len(BOND_DIRS) + 1, len(BOND_TYPES) + 1, 3)


@dataclass(frozen=True)
class Atom:
    atomic_number: int
    formal_charge: int = 0
    chirality_tag: str = "unspecified"
    aromatic: bool = False
    degree: int = 0
    num_hydrogens: int = 0
    hybridization: str = "sp3"


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    bond_type: str = "single"
    bond_dir: str = "none"
    in_ring: bool = False


@dataclass(frozen=True)
class MoleculeRecord:
    atoms: tuple
    bonds: tuple
    coords: Optional[np.ndarray]
    label: float = 0.0
    id: str = ""
    split: Optional[str] = None

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if not (0 <= b.i < n and 0 <= b.j < n) or b.i == b.j:
                raise InputError(f"molecule {self.id!r}: bond ({b.i}, {b.j}) has invalid endpoints for {n} atoms")
            key = (min(b.i, b.j), max(b.i, b.j))
            if key in seen:
                raise InputError(f"molecule {self.id!r}: duplicate bond {key}")
            seen.add(key)
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=np.float64)
            if coords.shape != (n, 3):
                raise InputError(f"molecule {self.id!r}: coords shape {coords.shape}, expected ({n}, 3)")
            object.__setattr__(self, "coords", coords)

    @property
    def num_atoms(self):
        return len(self.atoms)

    @classmethod
    def from_dict(cls, d):
        try:
            atoms = tuple(Atom(**a) for a in d["atoms"])
            bonds = tuple(Bond(**b) for b in d.get("bonds", ()))
            coords = d.get("coords")
            return cls(
                atoms=atoms,
                bonds=bonds,
                coords=None if coords is None else np.asarray(coords, dtype=np.float64),
                label=d.get("label", 0.0),
                id=str(d.get("id", "")),
                split=d.get("split"),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed molecule record: {exc}") from exc

    def to_dict(self):
        d = {
            "id": self.id,
            "atoms": [asdict(a) for a in self.atoms],
            "bonds": [asdict(b) for b in self.bonds],
            "coords": None if self.coords is None else self.coords.tolist(),
            "label": self.label,
        }
        if self.split is not None:
            d["split"] = self.split
        return d

    def permuted(self, perm):
        """Relabel atoms so that new atom ``k`` is old atom ``perm[k]``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        return MoleculeRecord(
            atoms=tuple(self.atoms[p] for p in perm),
            bonds=tuple(Bond(inv[b.i], inv[b.j], b.bond_type, b.bond_dir, b.in_ring) for b in self.bonds),
            coords=None if self.coords is None else self.coords[perm],
            label=self.label,
            id=self.id,
            split=self.split,
        )


def read_jsonl(path):
    """Parse a JSON-lines file of molecule records; errors name the line number."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(MoleculeRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, InputError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class RbfSpec:
    """Gaussian basis ``exp(-gamma * (x - mu)^2)`` with centers ``lo, lo + stride, ...`` up to ``hi``."""

    lo: float
    hi: float
    gamma: float = 10.0
    stride: float = 0.1

    @property
    def centers(self):
        count = int(math.floor((self.hi - self.lo) / self.stride + 1e-9)) + 1
        return self.lo + self.stride * np.arange(count)

    @property
    def width(self):
        return len(self.centers)


def rbf_expand(x, spec):
    x = np.asarray(x, dtype=np.float64)
    diff = x[..., None] - spec.centers
    return np.exp(-spec.gamma * diff * diff)


@dataclass(frozen=True)
class FeaturizerConfig:
    hop: RbfSpec = field(default_factory=lambda: RbfSpec(0.0, 20.0))
    distance: RbfSpec = field(default_factory=lambda: RbfSpec(0.0, 10.0))
    angle: RbfSpec = field(default_factory=lambda: RbfSpec(0.0, math.pi))

    @property
    def widths(self):
        """Channel widths of (X1, X2, X3)."""
        return (
            sum(ATOM_BLOCK_WIDTHS),
            sum(PAIR_BLOCK_WIDTHS) + self.hop.width + self.distance.width,
            3 * self.angle.width + 3 * self.hop.width,
        )

    def to_dict(self):
        return {k: asdict(getattr(self, k)) for k in ("hop", "distance", "angle")}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"hop", "distance", "angle"}
        if unknown:
            raise ConfigError(f"unknown featurizer fields: {sorted(unknown)}")
        specs = {}
        for k, v in d.items():
            bad = set(v) - {"lo", "hi", "gamma", "stride"}
            if bad:
                raise ConfigError(f"unknown {k} RBF fields: {sorted(bad)}")
            specs[k] = RbfSpec(**v)
        return cls(**specs)


@dataclass
class FeatureSet:
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    atom_mask: np.ndarray
    topo_dist: np.ndarray

    @property
    def num_atoms(self):
        return self.x1.shape[0]

    def order(self, m):
        return (self.x1, self.x2, self.x3)[m - 1]

    def permuted(self, perm):
        p = np.asarray(perm)
        return FeatureSet(
            self.x1[p],
            self.x2[p][:, p],
            self.x3[p][:, p][:, :, p],
            self.atom_mask[p],
            self.topo_dist[p][:, p],
        )

    def padded(self, n):
        """Zero-pad to ``n`` atoms; padded atoms are masked out and sit at sentinel distance ``n``."""
        k = self.num_atoms
        if n < k:
            raise InputError(f"cannot pad {k} atoms down to {n}")
        x1 = np.zeros((n,) + self.x1.shape[1:])
        x1[:k] = self.x1
        x2 = np.zeros((n, n) + self.x2.shape[2:])
        x2[:k, :k] = self.x2
        x3 = np.zeros((n, n, n) + self.x3.shape[3:])
        x3[:k, :k, :k] = self.x3
        mask = np.zeros(n, dtype=bool)
        mask[:k] = self.atom_mask
        topo = np.full((n, n), n, dtype=np.int64)
        topo[:k, :k] = self.topo_dist
        np.fill_diagonal(topo, 0)
        return FeatureSet(x1, x2, x3, mask, topo)


def _one_hot(index, width, what, atom):
    if not 0 <= index < width:
        raise FeatureError(f"atom {atom}: {what} category {index} outside [0, {width})")
    v = np.zeros(width)
    v[index] = 1.0
    return v


def _category(value, vocab, what, where):
    try:
        return vocab.index(value)
    except ValueError:
        raise FeatureError(f"{where}: unknown {what} {value!r}; expected one of {vocab}") from None


def one_hot_features(record):
    """Return ``(atom_blocks, pair_blocks)`` as lists of one-hot arrays."""
    n = record.num_atoms
    cols = [[] for _ in ATOM_BLOCK_WIDTHS]
    for idx, a in enumerate(record.atoms):
        where = f"atom {idx}"
        cols[0].append(_one_hot(a.atomic_number, ATOM_TYPE_WIDTH, "atomic_number", idx))
        cols[1].append(_one_hot(int(bool(a.aromatic)), 2, "aromatic", idx))
        cols[2].append(_one_hot(a.formal_charge + FORMAL_CHARGE_OFFSET, FORMAL_CHARGE_WIDTH, "formal_charge", idx))
        cols[3].append(_one_hot(_category(a.chirality_tag, CHIRALITY_TAGS, "chirality_tag", where), 4, "chirality", idx))
        cols[4].append(_one_hot(a.degree, DEGREE_WIDTH, "degree", idx))
        cols[5].append(_one_hot(a.num_hydrogens, NUM_H_WIDTH, "num_hydrogens", idx))
        cols[6].append(_one_hot(_category(a.hybridization, HYBRIDIZATIONS, "hybridization", where), 5, "hybridization", idx))
    atom_blocks = [np.array(c).reshape(n, w) for c, w in zip(cols, ATOM_BLOCK_WIDTHS)]

    bond_dir = np.zeros((n, n, PAIR_BLOCK_WIDTHS[0]))
    bond_type = np.zeros((n, n, PAIR_BLOCK_WIDTHS[1]))
    in_ring = np.zeros((n, n, PAIR_BLOCK_WIDTHS[2]))
    bond_dir[..., -1] = bond_type[..., -1] = in_ring[..., -1] = 1.0
    for b in record.bonds:
        where = f"bond ({b.i}, {b.j})"
        d = _category(b.bond_dir, BOND_DIRS, "bond_dir", where)
        t = _category(b.bond_type, BOND_TYPES, "bond_type", where)
        for i, j in ((b.i, b.j), (b.j, b.i)):
            bond_dir[i, j] = 0.0
            bond_dir[i, j, d] = 1.0
            bond_type[i, j] = 0.0
            bond_type[i, j, t] = 1.0
            in_ring[i, j] = 0.0
            in_ring[i, j, int(bool(b.in_ring))] = 1.0
    return atom_blocks, [bond_dir, bond_type, in_ring]


def topo_distance(record):
    """All-pairs hop counts by BFS; disconnected pairs get the atom count as sentinel."""
    n = record.num_atoms
    adj = [[] for _ in range(n)]
    for b in record.bonds:
        adj[b.i].append(b.j)
        adj[b.j].append(b.i)
    dist = np.full((n, n), n, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[src, v] == n and v != src:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    return dist


def max_topo_dist(record_or_dist):
    """Largest finite hop distance (graph diameter over connected pairs)."""
    dist = record_or_dist if isinstance(record_or_dist, np.ndarray) else topo_distance(record_or_dist)
    n = dist.shape[0]
    finite = dist[dist < n]
    return int(finite.max()) if finite.size else 0


def _require_coords(record):
    if record.coords is None:
        raise InputError(f"molecule {record.id!r} has no 3D coordinates")
    return record.coords


def pair_distance(record):
    pos = _require_coords(record)
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))
    # symmetrise exactly; the two subtraction orders can round differently
    return np.triu(d, 1) + np.triu(d, 1).T


def triplet_angles(record, collinear_tol=1e-8):
    """Interior angles (at i, at j, at k) of triangle (i, j, k); degenerate triplets give zeros."""
    pos = _require_coords(record)
    n = len(pos)
    d = pair_distance(record)
    dij = d[:, :, None]
    dik = d[:, None, :]
    djk = d[None, :, :]
    u = pos[None, :, None, :] - pos[:, None, None, :]
    v = pos[None, None, :, :] - pos[:, None, None, :]
    area2 = np.linalg.norm(np.cross(u, v), axis=-1)
    idx = np.arange(n)
    distinct = (idx[:, None, None] != idx[None, :, None]) & (idx[:, None, None] != idx[None, None, :]) & (
        idx[None, :, None] != idx[None, None, :]
    )
    valid = distinct & (area2 > collinear_tol * dij * dik)
    out = np.zeros((n, n, n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        for slot, (a, b, c) in enumerate(((dij, dik, djk), (dij, djk, dik), (dik, djk, dij))):
            cos = (a * a + b * b - c * c) / (2.0 * a * b)
            out[..., slot] = np.where(valid, np.arccos(np.clip(np.where(valid, cos, 1.0), -1.0, 1.0)), 0.0)
    return out


def featurize(record, config=None):
    config = config or FeaturizerConfig()
    n = record.num_atoms
    if n == 0:
        raise InputError(f"molecule {record.id!r} has no atoms")
    atom_blocks, pair_blocks = one_hot_features(record)
    topo = topo_distance(record)
    dist = pair_distance(record)
    x1 = np.concatenate(atom_blocks, axis=-1)
    x2 = np.concatenate(pair_blocks + [rbf_expand(topo, config.hop), rbf_expand(dist, config.distance)], axis=-1)
    angles = triplet_angles(record)
    hops = np.stack(
        [
            np.broadcast_to(topo[:, :, None], (n, n, n)),
            np.broadcast_to(topo[:, None, :], (n, n, n)),
            np.broadcast_to(topo[None, :, :], (n, n, n)),
        ],
        axis=-1,
    )
    x3 = np.concatenate(
        [rbf_expand(angles, config.angle).reshape(n, n, n, -1), rbf_expand(hops, config.hop).reshape(n, n, n, -1)],
        axis=-1,
    )
    return FeatureSet(x1, x2, x3, np.ones(n, dtype=bool), topo)


# --- binary cache -------------------------------------------------------------------

FEATURE_MAGIC = b"GEM2FS\0"
FEATURE_VERSION = 1


def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh):
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise InputError("truncated array in binary container")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)


def save_features(path, fs):
    """Layout: magic, u16 version, then X1, X2, X3, atom_mask, topo_dist as
    (u32 ndim, u64 dims..., little-endian float64 data)."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<H", FEATURE_VERSION))
        for arr in (fs.x1, fs.x2, fs.x3, fs.atom_mask, fs.topo_dist):
            _write_array(fh, arr)


def load_features(path):
    with open(path, "rb") as fh:
        if fh.read(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
            raise InputError(f"{path}: not a GEM2 feature cache")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != FEATURE_VERSION:
            raise InputError(f"{path}: unsupported feature cache version {version}")
        x1, x2, x3, mask, topo = (_read_array(fh) for _ in range(5))
    return FeatureSet(x1, x2, x3, mask.astype(bool), topo.astype(np.int64))
