import numpy as np
import pytest

from porodiff import cell, fem, geometry as geo


@pytest.fixture(scope="session")
def disc_spec():
    return geo.InclusionSpec.disc((0.5, 0.5), 0.25)


@pytest.fixture(scope="session")
def cell_mesh(disc_spec):
    return geo.build_unit_cell_mesh(disc_spec, 0.05)


@pytest.fixture(scope="session")
def cell_ctx(cell_mesh):
    return cell.CellContext.from_mesh(cell_mesh)


@pytest.fixture(scope="session")
def coarse_ctx(disc_spec):
    return cell.CellContext.from_mesh(geo.build_unit_cell_mesh(disc_spec, 1 / 8))


@pytest.fixture(scope="session")
def identity_field():
    return fem.CoefficientField.isotropic(1.0)


@pytest.fixture(scope="session")
def aniso_field():
    return fem.CoefficientField.constant(np.diag([2.0, 1.0]))


@pytest.fixture(scope="session")
def macro_mesh_16():
    return geo.build_macro_mesh(geo.RectUnion.unit_square(), 1 / 16)
