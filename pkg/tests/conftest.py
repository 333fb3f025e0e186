import pytest

from spinesim import (default_spine_2d, default_spine_3d, default_sweep,
                      larger_spine_2d)


@pytest.fixture(scope="session")
def spine2d():
    return default_spine_2d()


@pytest.fixture(scope="session")
def spine2d_large():
    return larger_spine_2d()


@pytest.fixture(scope="session")
def spine3d():
    return default_spine_3d()


@pytest.fixture(scope="session")
def sweep2d(spine2d):
    return default_sweep(spine2d)


@pytest.fixture(scope="session")
def equilibrium_2d(spine2d, sweep2d):
    """(state, input) pair holding the start pose of the default sweep."""
    from spinesim import assemble_rigid_body, node_positions, solve_min_norm_tensions
    from spinesim import rest_lengths_from_densities
    from spinesim.trajectory import state_at

    xi = state_at(sweep2d, spine2d, 0.0)
    positions = node_positions(spine2d, spine2d.poses_from_state(xi))
    dens = solve_min_norm_tensions(assemble_rigid_body(spine2d, positions))
    u = rest_lengths_from_densities(spine2d, positions, dens.q_s)
    return xi, u
