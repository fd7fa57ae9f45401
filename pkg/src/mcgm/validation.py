"""Input validation helpers shared by the estimator facade and the CLI.

Every helper either returns a normalized value or raises one of the
package error types with a message naming the offending entry; nothing
here mutates its inputs.
"""

from __future__ import annotations

import numpy as np

from .data import Molecule
from .errors import ContractError, DataError


def check_molecule_list(X, require_energy=False, require_forces=False, max_z=None):
    """Validate a sequence of molecules; returns it as a plain list.

    ``max_z`` bounds the atomic numbers (the embedding table size of a
    model the molecules are headed for).
    """
    try:
        mols = list(X)
    except TypeError:
        raise ContractError(f"expected a sequence of molecules, got {type(X).__name__}") from None
    if not mols:
        raise ContractError("expected at least one molecule, got an empty sequence")
    for i, m in enumerate(mols):
        if not isinstance(m, Molecule):
            raise ContractError(f"entry {i} is {type(m).__name__}, expected Molecule")
        if require_energy and m.energy is None:
            raise DataError(f"molecule {i} has no energy target")
        if require_forces and m.forces is None:
            raise DataError(f"molecule {i} has no force targets")
        if max_z is not None and int(m.numbers.max()) > max_z:
            raise ContractError(
                f"molecule {i} contains element {int(m.numbers.max())}, "
                f"beyond the model's max_z={max_z}"
            )
    return mols


def check_targets_1d(y, n, name="y"):
    """Validate per-molecule scalar targets; returns a float64 array [n]."""
    arr = np.asarray(y, dtype=np.float64)
    if arr.shape != (n,):
        raise ContractError(f"{name} must have shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def attach_energies(mols, y):
    """Copies of ``mols`` with energies from ``y`` (forces dropped: stored
    force targets would no longer be consistent with the new energies)."""
    y = check_targets_1d(y, len(mols), name="y")
    return [
        Molecule(m.numbers.copy(), m.positions.copy(), energy=float(e))
        for m, e in zip(mols, y)
    ]


def check_is_fitted(estimator, attributes=("state_",)):
    """Raise unless ``fit`` has set the given trailing-underscore attributes."""
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise ContractError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first "
            f"(missing {missing})"
        )
