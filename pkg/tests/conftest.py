
import pytest

from feederkit.feeder import default_dataset_path, load_default_feeder, parse_feeder
from feederkit.placement import greedy_placement, partition_zones
from feederkit.powerflow import SweepOptions, solve_power_flow


@pytest.fixture(scope="session")
def raw_feeder():
    return parse_feeder(default_dataset_path())


@pytest.fixture(scope="session")
def feeder():
    return load_default_feeder()


@pytest.fixture(scope="session")
def solution(feeder):
    return solve_power_flow(feeder, SweepOptions(tolerance_pu=1e-9))


@pytest.fixture(scope="session")
def tight_solution(feeder):
    return solve_power_flow(feeder, SweepOptions(tolerance_pu=1e-12))


@pytest.fixture(scope="session")
def zone_placement(feeder):
    placement = greedy_placement(feeder, 3, zone_ready=True)
    return placement, partition_zones(feeder, placement)
