"""Estimator facade and validation helper tests."""

import numpy as np
import pytest
from sklearn.base import clone

from mcgm.data import Molecule, make_synthetic
from mcgm.errors import ContractError, DataError
from mcgm.estimator import MCGMRegressor
from mcgm.validation import (
    attach_energies,
    check_is_fitted,
    check_molecule_list,
    check_targets_1d,
)

# -------------------------------------------------------------- validation


def test_check_molecule_list_accepts_and_rejects():
    mols = make_synthetic(3, n_atoms_range=(4, 5), seed=0)
    assert check_molecule_list(mols) == mols
    with pytest.raises(ContractError, match="empty"):
        check_molecule_list([])
    with pytest.raises(ContractError, match="entry 1"):
        check_molecule_list([mols[0], "water"])
    with pytest.raises(ContractError, match="not.*sequence|expected a sequence"):
        check_molecule_list(7)
    bare = Molecule(mols[0].numbers, mols[0].positions)
    with pytest.raises(DataError, match="molecule 0"):
        check_molecule_list([bare], require_energy=True)
    with pytest.raises(DataError, match="force"):
        check_molecule_list([Molecule(mols[0].numbers, mols[0].positions, energy=1.0)],
                            require_forces=True)
    heavy = Molecule(np.array([26, 1]), np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    with pytest.raises(ContractError, match="max_z"):
        check_molecule_list([heavy], max_z=10)


def test_check_targets_and_attach():
    mols = make_synthetic(2, n_atoms_range=(4, 4), seed=1)
    y = check_targets_1d([1.0, -2.0], 2)
    assert y.dtype == np.float64
    with pytest.raises(ContractError, match="shape"):
        check_targets_1d([1.0], 2)
    with pytest.raises(DataError, match="finite"):
        check_targets_1d([1.0, np.nan], 2)
    attached = attach_energies(mols, [5.0, 6.0])
    assert [m.energy for m in attached] == [5.0, 6.0]
    assert all(m.forces is None for m in attached)
    assert mols[0].energy != 5.0  # originals untouched


def test_check_is_fitted():
    est = MCGMRegressor()
    with pytest.raises(ContractError, match="not fitted"):
        check_is_fitted(est)


# --------------------------------------------------------------- estimator


def tiny_estimator(**kw):
    base = dict(
        hidden_dim=8,
        n_layers=2,
        atom_cutoff=4.0,
        cluster_cutoff=4.0,
        n_rbf_atom=6,
        n_rbf_cluster=5,
        n_levels=2,
        lr=5e-3,
        batch_size=8,
        warmup_steps=5,
        max_epochs=10,
        validation_fraction=0.25,
        seed=0,
    )
    base.update(kw)
    return MCGMRegressor(**base)


@pytest.fixture(scope="module")
def fitted():
    mols = make_synthetic(8, n_atoms_range=(4, 6), seed=7)
    est = tiny_estimator()
    est.fit(mols)
    return est, mols


def test_fit_sets_state_and_improves(fitted):
    est, mols = fitted
    assert hasattr(est, "state_") and hasattr(est, "history_")
    assert est.best_val_mae_ <= est.history_[0]["val_mae_e"]
    assert est.best_val_mae_ == min(h["val_mae_e"] for h in est.history_)


def test_predict_shapes_and_score(fitted):
    est, mols = fitted
    energies = est.predict(mols)
    assert energies.shape == (8,)
    assert np.all(np.isfinite(energies))
    forces = est.predict_forces(mols[:2])
    assert len(forces) == 2
    assert forces[0].shape == (mols[0].n_atoms, 3)
    assert np.isfinite(est.score(mols))


def test_transform_returns_per_atom_features(fitted):
    est, mols = fitted
    feats = est.transform(mols[:3])
    assert len(feats) == 3
    for f, m in zip(feats, mols[:3]):
        assert f.shape == (m.n_atoms, est.hidden_dim)


def test_predict_before_fit_raises():
    mols = make_synthetic(2, n_atoms_range=(4, 4), seed=0)
    with pytest.raises(ContractError, match="not fitted"):
        tiny_estimator().predict(mols)


def test_fit_with_explicit_targets():
    mols = [Molecule(m.numbers, m.positions) for m in make_synthetic(6, (4, 5), seed=3)]
    y = np.linspace(-1.0, 1.0, 6)
    est = tiny_estimator(max_epochs=2).fit(mols, y)
    assert est.predict(mols).shape == (6,)
    with pytest.raises(DataError, match="energy"):
        tiny_estimator().fit(mols)  # no stored energies, no y


def test_get_params_clone_roundtrip():
    est = tiny_estimator(variant="baseline", clustering="random")
    params = est.get_params()
    assert params["variant"] == "baseline"
    assert params["clustering"] == "random"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(lr=0.5)
    assert est.lr == 0.5


def test_fit_is_deterministic():
    mols = make_synthetic(8, n_atoms_range=(4, 5), seed=9)
    e1 = tiny_estimator(max_epochs=3).fit(mols)
    e2 = tiny_estimator(max_epochs=3).fit(mols)
    assert np.array_equal(e1.predict(mols), e2.predict(mols))


def test_bad_constructor_values_fail_at_fit():
    mols = make_synthetic(4, n_atoms_range=(4, 4), seed=0)
    with pytest.raises(ContractError, match="clustering"):
        tiny_estimator(clustering="agglomerative").fit(mols)
    with pytest.raises(ContractError, match="validation_fraction"):
        tiny_estimator(validation_fraction=0.0).fit(mols)
    with pytest.raises(ContractError, match="variant"):
        tiny_estimator(variant="mega").fit(mols)
