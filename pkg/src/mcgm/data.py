"""Molecule containers, XYZ ingestion, synthetic data, splits, batching.

The synthetic generator is the desk-scale stand-in for long-range chemistry:
a short-range Lennard-Jones term plus an *uncut* Coulomb term over all pairs,
so any model with a finite distance cutoff provably misses part of the
energy. Energies are treated as meV, positions as Angstrom.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, GenerationError, ParseError

_SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca "
    "Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr"
).split()
SYMBOL_TO_Z = {s: i + 1 for i, s in enumerate(_SYMBOLS)}
Z_TO_SYMBOL = {i + 1: s for i, s in enumerate(_SYMBOLS)}

# synthetic-task constants
BOX_SIDE = 12.0
MIN_SEPARATION = 0.8
LJ_SIGMA = 1.5
ELEMENT_CHARGE = {1: 0.2, 6: -0.1, 7: 0.3, 8: -0.4}
MAX_PLACEMENT_TRIES = 10_000

_ENERGY_RE = re.compile(r"(?:^|\s)energy=(\S+)")


@dataclass
class Molecule:
    """One structure: atomic numbers, positions, optional targets."""

    numbers: np.ndarray
    positions: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None

    def __post_init__(self):
        self.numbers = np.asarray(self.numbers, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.numbers.ndim != 1 or self.numbers.size < 1:
            raise ContractError("Molecule: need at least one atom")
        if np.any(self.numbers < 1):
            raise ContractError("Molecule: atomic numbers must be >= 1")
        if self.positions.shape != (self.numbers.size, 3):
            raise ContractError(
                f"Molecule: positions shape {self.positions.shape} does not match "
                f"{self.numbers.size} atoms"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ContractError("Molecule: positions must be finite")
        if self.energy is not None:
            self.energy = float(self.energy)
        if self.forces is not None:
            if self.energy is None:
                raise ContractError("Molecule: forces require an energy target")
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != self.positions.shape:
                raise ContractError("Molecule: forces shape must match positions")

    @property
    def n_atoms(self):
        return self.numbers.size


@dataclass
class Batch:
    """Several molecules concatenated, with per-node graph ids.

    Targets are carried only when every member molecule has them.
    """

    numbers: np.ndarray
    positions: np.ndarray
    graph_index: np.ndarray
    n_graphs: int
    energies: np.ndarray | None = None
    forces: np.ndarray | None = None

    @property
    def n_atoms(self):
        return self.numbers.size

    @property
    def atoms_per_graph(self):
        return np.bincount(self.graph_index, minlength=self.n_graphs)


@dataclass
class DatasetSplit:
    """Disjoint train/val/test index lists covering the full dataset."""

    train: list[int]
    val: list[int]
    test: list[int]
    seed: int = 0

    def as_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test}


# ------------------------------------------------------------------ XYZ IO


def _parse_atom_line(line, lineno, expect_forces):
    parts = line.split()
    if len(parts) not in (4, 7):
        raise ParseError(f"expected 'symbol x y z' (+3 force columns), got {len(parts)} fields", lineno)
    sym = parts[0]
    z = SYMBOL_TO_Z.get(sym) or SYMBOL_TO_Z.get(sym.capitalize())
    if z is None:
        raise ParseError(f"unknown element symbol {sym!r}", lineno)
    try:
        nums = [float(p) for p in parts[1:]]
    except ValueError:
        raise ParseError(f"non-numeric coordinate in {line!r}", lineno) from None
    has_forces = len(parts) == 7
    if expect_forces is not None and has_forces != expect_forces:
        raise ParseError("mixed presence of force columns within one frame", lineno)
    return z, nums[:3], nums[3:6] if has_forces else None


def parse_xyz(text):
    """Parse (multi-frame) XYZ text into a list of molecules.

    Frame layout: atom count, comment (may carry ``energy=<float>``), then
    one ``symbol x y z`` line per atom with three optional force columns.
    Errors carry the 1-based line number.
    """
    lines = text.splitlines()
    molecules = []
    i = 0
    while i < len(lines):
        if lines[i].strip() == "" and all(l.strip() == "" for l in lines[i:]):
            break  # trailing blank lines
        try:
            count = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"malformed atom count {lines[i]!r}", i + 1) from None
        if count < 1:
            raise ParseError(f"atom count must be >= 1, got {count}", i + 1)
        if i + 1 >= len(lines):
            raise ParseError("missing comment line", i + 2)
        comment = lines[i + 1]
        energy = None
        m = _ENERGY_RE.search(comment)
        if m:
            try:
                energy = float(m.group(1))
            except ValueError:
                raise ParseError(f"malformed energy value {m.group(1)!r}", i + 2) from None
        numbers, coords, forces = [], [], []
        expect_forces = None
        for a in range(count):
            lineno = i + 3 + a
            if lineno - 1 >= len(lines):
                raise ParseError(f"frame declares {count} atoms but file ends", lineno)
            z, xyz, f = _parse_atom_line(lines[lineno - 1], lineno, expect_forces)
            expect_forces = f is not None
            numbers.append(z)
            coords.append(xyz)
            if f is not None:
                forces.append(f)
        if forces and energy is None:
            raise ParseError("force columns present but no energy= in comment", i + 2)
        molecules.append(
            Molecule(
                numbers=np.array(numbers),
                positions=np.array(coords),
                energy=energy,
                forces=np.array(forces) if forces else None,
            )
        )
        i += 2 + count
    if not molecules:
        raise ParseError("no frames found", 1)
    return molecules


def write_xyz(molecules):
    """Render molecules as XYZ text; floats use full round-trip precision."""
    out = []
    for mol in molecules:
        out.append(str(mol.n_atoms))
        out.append(f"energy={mol.energy:.17g}" if mol.energy is not None else "")
        for a in range(mol.n_atoms):
            z = int(mol.numbers[a])
            if z not in Z_TO_SYMBOL:
                raise ContractError(f"no symbol known for atomic number {z}")
            fields = [Z_TO_SYMBOL[z]] + [f"{c:.17g}" for c in mol.positions[a]]
            if mol.forces is not None:
                fields += [f"{c:.17g}" for c in mol.forces[a]]
            out.append(" ".join(fields))
    return "\n".join(out) + "\n"


# --------------------------------------------------------- synthetic task


def synthetic_energy_forces(numbers, positions):
    """Closed-form pair energy and its exact negative gradient.

    E = sum_{i<j} q_i q_j / d_ij + (sigma/d_ij)^12 - 2 (sigma/d_ij)^6,
    over all pairs with no cutoff.
    """
    numbers = np.asarray(numbers)
    pos = np.asarray(positions, dtype=np.float64)
    n = numbers.size
    q = np.array([ELEMENT_CHARGE[int(z)] for z in numbers])
    forces = np.zeros_like(pos)
    if n == 1:
        return 0.0, forces
    ii, jj = np.triu_indices(n, k=1)
    rij = pos[ii] - pos[jj]
    d = np.sqrt((rij * rij).sum(axis=1))
    s6 = (LJ_SIGMA / d) ** 6
    energy = float(np.sum(q[ii] * q[jj] / d + s6 * s6 - 2.0 * s6))
    # dE/dd per pair, then chain through the unit vector
    dEdd = -q[ii] * q[jj] / d**2 - (12.0 / d) * (s6 * s6 - s6)
    per_pair = (dEdd / d)[:, None] * rij
    np.add.at(forces, ii, -per_pair)
    np.add.at(forces, jj, per_pair)
    return energy, forces


def _place_atoms(n, rng):
    pos = np.empty((n, 3))
    for a in range(n):
        for _ in range(MAX_PLACEMENT_TRIES):
            cand = rng.uniform(0.0, BOX_SIDE, size=3)
            if a == 0 or np.min(np.linalg.norm(pos[:a] - cand, axis=1)) >= MIN_SEPARATION:
                pos[a] = cand
                break
        else:
            raise GenerationError(
                f"could not place atom {a} after {MAX_PLACEMENT_TRIES} attempts"
            )
    return pos


def make_synthetic(n_molecules, n_atoms_range=(8, 12), seed=0):
    """Generate labeled random-gas molecules; deterministic given seed."""
    lo, hi = int(n_atoms_range[0]), int(n_atoms_range[1])
    if lo < 2 or hi < lo:
        raise ContractError(f"make_synthetic: bad atom count range ({lo}, {hi})")
    if n_molecules < 1:
        raise ContractError("make_synthetic: need at least one molecule")
    elements = np.array(sorted(ELEMENT_CHARGE))
    molecules = []
    for i in range(n_molecules):
        rng = np.random.default_rng((int(seed), 11, i))
        n = int(rng.integers(lo, hi + 1))
        numbers = rng.choice(elements, size=n)
        positions = _place_atoms(n, rng)
        energy, forces = synthetic_energy_forces(numbers, positions)
        molecules.append(Molecule(numbers, positions, energy=energy, forces=forces))
    return molecules


# ------------------------------------------------------------------ splits


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Deterministic 3-way split; floor sizes, remainder goes to train."""
    n = len(dataset)
    if n < 3:
        raise ContractError(f"split: need at least 3 molecules, got {n}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"split: fractions {fractions} must sum to 1")
    n_val = math.floor(n * fractions[1])
    n_test = math.floor(n * fractions[2])
    n_train = n - n_val - n_test
    perm = np.random.default_rng((int(seed), 23)).permutation(n)
    return DatasetSplit(
        train=sorted(int(j) for j in perm[:n_train]),
        val=sorted(int(j) for j in perm[n_train : n_train + n_val]),
        test=sorted(int(j) for j in perm[n_train + n_val :]),
        seed=int(seed),
    )


def write_manifest(path, indices):
    with open(path, "w") as fh:
        for j in indices:
            fh.write(f"{int(j)}\n")


def read_manifest(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise ParseError(f"manifest entry {line!r} is not an index", lineno) from None
    return out


# ---------------------------------------------------------------- batching


def make_batch(molecules):
    """Concatenate molecules into one disjoint graph batch."""
    if not molecules:
        raise ContractError("make_batch: empty molecule list")
    numbers = np.concatenate([m.numbers for m in molecules])
    positions = np.concatenate([m.positions for m in molecules])
    graph_index = np.concatenate(
        [np.full(m.n_atoms, g, dtype=np.int64) for g, m in enumerate(molecules)]
    )
    energies = None
    forces = None
    if all(m.energy is not None for m in molecules):
        energies = np.array([m.energy for m in molecules])
        if all(m.forces is not None for m in molecules):
            forces = np.concatenate([m.forces for m in molecules])
    return Batch(
        numbers=numbers,
        positions=positions,
        graph_index=graph_index,
        n_graphs=len(molecules),
        energies=energies,
        forces=forces,
    )


def unbatch(batch):
    """Split a batch back into its member molecules."""
    molecules = []
    for g in range(batch.n_graphs):
        mask = batch.graph_index == g
        molecules.append(
            Molecule(
                numbers=batch.numbers[mask].copy(),
                positions=batch.positions[mask].copy(),
                energy=None if batch.energies is None else float(batch.energies[g]),
                forces=None if batch.forces is None else batch.forces[mask].copy(),
            )
        )
    return molecules


def require_energies(batch):
    """Raise unless the batch carries energy targets."""
    if batch.energies is None:
        raise DataError("this task needs energy targets on every molecule")


def require_forces(batch):
    """Raise unless the batch carries force targets."""
    if batch.forces is None:
        raise DataError("this task needs force targets on every molecule")
