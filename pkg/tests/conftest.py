"""Pytest configuration and fixtures for quenched-lab tests"""
import json
import logging
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from quenched_lab import (
    BasePath, BaseProcess, DensityTrack, FiberSystem, Observable, UlamCache,
    build_map, center_observable, load_preset,
)


@pytest.fixture
def quiet_logger():
    """Logger that stays silent unless a test raises its level"""
    test_logger = logging.getLogger("quenched_lab.tests")
    test_logger.setLevel(logging.WARNING)
    return test_logger


@pytest.fixture
def doubling_map():
    """x -> 2x mod 1"""
    return build_map("T2", {"family": "beta", "beta": 2})


@pytest.fixture
def beta_maps():
    """The b2/b3 pair used by the random-beta presets"""
    return {
        "b2": build_map("b2", {"family": "beta", "beta": 2}),
        "b3": build_map("b3", {"family": "beta", "beta": 3}),
    }


@pytest.fixture
def lasota_yorke_map():
    """Two affine branches, the second orientation-reversing"""
    return build_map("LY", {"family": "lasota_yorke", "breakpoints": [0.0, 0.4, 1.0],
                            "slopes": [2.5, -1.0 / 0.6]})


@pytest.fixture
def mixed_map():
    """One curved slack branch followed by one branch of slope 2"""
    return build_map("MX", {"family": "mixed", "q": 1, "d": 2, "l": 0.6, "eta": 2.0})


@pytest.fixture
def doubling_system(doubling_map):
    """Doubling map on 256 bins"""
    return FiberSystem({"T2": doubling_map}, n_bins=256, cache=UlamCache())


@pytest.fixture
def doubling_path():
    """Constant doubling path on [-80, 200]"""
    return BasePath.constant(("T2",), "T2", 80, 200)


@pytest.fixture
def random_beta_process():
    return BaseProcess.iid(["b2", "b3"], [0.5, 0.5])


@pytest.fixture
def random_beta_system(beta_maps):
    return FiberSystem(beta_maps, n_bins=512, cache=UlamCache())


@pytest.fixture
def markov_process():
    """Sticky two-state chain; psi_U(k) = 0.8^k"""
    return BaseProcess.markov(["b2", "b3"], [[0.9, 0.1], [0.1, 0.9]])


@pytest.fixture
def non_lebesgue_system(lasota_yorke_map, mixed_map):
    """Markov-driven pair whose equivariant densities are not uniform"""
    return FiberSystem({"LY": lasota_yorke_map, "MX": mixed_map}, n_bins=512, cache=UlamCache())


@pytest.fixture
def linear_observable():
    return Observable.from_formulas("x_minus_half")


@pytest.fixture
def cosine_observable():
    return Observable.from_formulas("cos2pi")


@pytest.fixture
def doubling_window(doubling_system, doubling_path, linear_observable):
    """(system, path, track, centered x - 1/2) for the doubling map on [-60, 200]"""
    track = DensityTrack(doubling_system, doubling_path, -60, 200, k_pullback=20)
    v = center_observable(linear_observable, doubling_system, doubling_path, track)
    return doubling_system, doubling_path, track, v


@pytest.fixture
def preset_config_file(tmp_path):
    """conditions-iid preset written as a JSON config file"""
    config = load_preset("conditions-iid")
    data = config.to_dict()
    data["output_dir"] = str(tmp_path / "results")
    config_file = tmp_path / "conditions.json"
    config_file.write_text(json.dumps(data))
    return str(config_file)


@pytest.fixture
def invalid_config_file(tmp_path):
    """Config with several independent violations"""
    data = {
        "scenario": "clt",
        "base": {"kind": "markov", "alphabet": ["b2", "b3"], "transition": [[0.5, 0.4], [0.5, 0.5]]},
        "maps": {"b2": {"family": "beta", "beta": 2}},
        "observable": {"components": [{"formula": "x_minus_half"}]},
        "numerics": {"epsilon": 1.5},
    }
    config_file = tmp_path / "invalid.json"
    config_file.write_text(json.dumps(data))
    return str(config_file)
