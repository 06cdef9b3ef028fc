"""Random small molecules with exactly computable labels.

Geometry is grown bond by bond with random bond lengths and random
directions, so bond lengths and angles vary freely. Labels are closed-form functions of
the graph and coordinates:

``bonds``   mean over atoms of (element weight + half the summed lengths of its bonds)
``angles``  mean over atoms of the sum of cos(angle) over pairs of its neighbours
"""

from __future__ import annotations

import math

import numpy as np

from .featurize import Atom, Bond, MoleculeRecord

ELEMENTS = (6, 7, 8)
ELEMENT_P = (0.6, 0.25, 0.15)
ELEMENT_WEIGHT = {6: 0.0, 7: 0.5, 8: 1.0}
VALENCE = {6: 4, 7: 3, 8: 2}
BOND_LENGTH = 1.5
BOND_LENGTH_RANGE = (1.2, 1.8)
MIN_SEPARATION = 1.2
LABEL_KINDS = ("bonds", "angles")


def _neighbours(n, bonds):
    nbr = [[] for _ in range(n)]
    for b in bonds:
        nbr[b.i].append(b.j)
        nbr[b.j].append(b.i)
    return nbr


def label_value(kind, atoms, bonds, coords):
    n = len(atoms)
    nbr = _neighbours(n, bonds)
    total = 0.0
    for i in range(n):
        if kind == "bonds":
            total += ELEMENT_WEIGHT.get(atoms[i].atomic_number, 0.0)
            total += 0.5 * sum(float(np.linalg.norm(coords[i] - coords[j])) for j in nbr[i])
        elif kind == "angles":
            for a in range(len(nbr[i])):
                for b in range(a + 1, len(nbr[i])):
                    u = coords[nbr[i][a]] - coords[i]
                    v = coords[nbr[i][b]] - coords[i]
                    total += float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
        else:
            raise ValueError(f"unknown label kind {kind!r}")
    return total / n


def _in_ring(n, bonds, bond):
    """A bond lies on a ring iff its endpoints stay connected without it."""
    adj = [[] for _ in range(n)]
    for b in bonds:
        if b is not bond:
            adj[b.i].append(b.j)
            adj[b.j].append(b.i)
    seen, stack = {bond.i}, [bond.i]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return bond.j in seen


def random_molecule(rng, n_min=4, n_max=9, label="angles", mol_id="", ring_prob=0.3):
    n = int(rng.integers(n_min, n_max + 1))
    elements = [int(e) for e in rng.choice(ELEMENTS, size=n, p=ELEMENT_P)]
    coords = np.zeros((n, 3))
    degree = [0] * n
    pairs = []
    for k in range(1, n):
        for _ in range(200):
            open_atoms = [a for a in range(k) if degree[a] < VALENCE[elements[a]]] or list(range(k))
            parent = int(rng.choice(open_atoms))
            direction = rng.normal(size=3)
            length = rng.uniform(*BOND_LENGTH_RANGE)
            pos = coords[parent] + length * direction / np.linalg.norm(direction)
            if np.min(np.linalg.norm(coords[:k] - pos, axis=1)) >= MIN_SEPARATION - 1e-9:
                break
        coords[k] = pos
        pairs.append((parent, k))
        degree[parent] += 1
        degree[k] += 1
    if n >= 4 and rng.random() < ring_prob:
        bonded = {frozenset(p) for p in pairs}
        candidates = [
            (a, b)
            for a in range(n)
            for b in range(a + 1, n)
            if frozenset((a, b)) not in bonded and np.linalg.norm(coords[a] - coords[b]) < 2.6
        ]
        if candidates:
            a, b = candidates[int(rng.integers(len(candidates)))]
            pairs.append((a, b))
            degree[a] += 1
            degree[b] += 1
    bond_types = ["double" if rng.random() < 0.2 else "single" for _ in pairs]
    bonds = [Bond(i, j, t) for (i, j), t in zip(pairs, bond_types)]
    bonds = tuple(Bond(b.i, b.j, b.bond_type, b.bond_dir, _in_ring(n, bonds, b)) for b in bonds)
    atoms = tuple(
        Atom(
            atomic_number=e,
            degree=degree[i],
            num_hydrogens=max(0, min(8, VALENCE[e] - degree[i])),
            hybridization="sp3",
        )
        for i, e in enumerate(elements)
    )
    y = label_value(label, atoms, bonds, coords)
    return MoleculeRecord(atoms=atoms, bonds=bonds, coords=coords, label=y, id=mol_id)


def synthetic_dataset(count=200, seed=0, label="angles", n_min=4, n_max=9):
    rng = np.random.default_rng(seed)
    return [random_molecule(rng, n_min, n_max, label, mol_id=f"synth-{seed}-{k}") for k in range(count)]


def path_molecule(n, spacing=BOND_LENGTH, label=0.0, mol_id=None):
    """Straight-chain carbon path 0-1-...-(n-1) along the x axis (zig-zagged to avoid collinearity)."""
    atoms = tuple(
        Atom(6, degree=1 if (i in (0, n - 1) and n > 1) else (0 if n == 1 else 2), num_hydrogens=2) for i in range(n)
    )
    bonds = tuple(Bond(i, i + 1) for i in range(n - 1))
    coords = np.array([[i * spacing * math.cos(math.pi / 6), (i % 2) * spacing * 0.5, 0.0] for i in range(n)])
    return MoleculeRecord(atoms=atoms, bonds=bonds, coords=coords, label=label, id=mol_id or f"path-{n}")
