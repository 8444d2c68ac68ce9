"""Tests for the martingale-coboundary decomposition

Validates that:
1. Centering removes the fiber means
2. chi has the requested truncation and matches the doubling-map series
3. m rebuilds v exactly and is annihilated by the transfer operator, also when
   branch edges of the fiber maps fall inside Ulam bins
4. chi is linear in the observable and acts componentwise on stacked observables
5. Missing indices and uncentered observables are rejected
6. Reverse martingale orthogonality holds under Monte Carlo
7. Decomposition dumps have the documented layout
"""
import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from quenched_lab import (
    BasePath, DecompositionError, DensityTrack, EnsembleRunner, EstimationError, FiberSystem, Observable,
    PathWindowError, UlamCache, bin_midpoints, center_observable, compute_chi, compute_m, dump_decomposition_csv,
    fiber_values, reconstruction_error, reverse_martingale_check, sample_path, verify_vanishing, BaseProcess,
)


class TestCentering:
    """Test fiber-mean subtraction"""

    def test_doubling_offsets_vanish(self, doubling_window):
        _, _, _, v = doubling_window
        np.testing.assert_allclose(v.offsets, 0.0, atol=1e-14)
        assert v.first_index == -60
        assert v.last_index == 200

    def test_non_lebesgue_means_removed(self, non_lebesgue_system, cosine_observable):
        process = BaseProcess.markov(["LY", "MX"], [[0.7, 0.3], [0.4, 0.6]])
        path = sample_path(process, 20, 10, seed=2)
        track = DensityTrack(non_lebesgue_system, path, 0, 10, k_pullback=20)
        v = center_observable(cosine_observable, non_lebesgue_system, path, track)
        assert np.abs(v.offsets).max() > 1e-4
        for j in range(0, 11):
            mean = fiber_values(v, non_lebesgue_system, path, j)[:, 0] @ track.mass(j)
            assert abs(mean) < 1e-14

    def test_range_outside_track(self, doubling_window, linear_observable):
        system, path, track, _ = doubling_window
        with pytest.raises(PathWindowError):
            center_observable(linear_observable, system, path, track, start=-61)


class TestChi:
    """Test the truncated transfer series"""

    def test_shape_and_truncation(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 20, track, first=0, last=10)
        assert chi.truncation_k == 20
        assert chi.values.shape == (11, 256, 1)
        assert chi.first_index == 0
        assert chi.last_index == 10

    def test_doubling_series(self, doubling_window):
        """For x -> 2x the series sums to (1 - 2^-k)(x - 1/2) up to bin error"""
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 20, track, first=0, last=2)
        expected = bin_midpoints(256) - 0.5
        assert np.abs(chi.at(0)[:, 0] - expected).max() < 0.03

    def test_error_estimate(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 20, track, first=0, last=2)
        assert 0.0 < chi.est_error < 1e-3

    def test_uncentered_rejected(self, doubling_window, linear_observable):
        system, path, track, _ = doubling_window
        with pytest.raises(DecompositionError, match="center first"):
            compute_chi(system, path, linear_observable, 5, track)

    def test_bad_arguments(self, doubling_window):
        system, path, track, v = doubling_window
        with pytest.raises(DecompositionError):
            compute_chi(system, path, v, -1, track)
        with pytest.raises(DecompositionError):
            compute_chi(system, path, v, 5, track, first=3, last=2)

    def test_truncation_beyond_window(self, doubling_window):
        system, path, track, v = doubling_window
        with pytest.raises(PathWindowError):
            compute_chi(system, path, v, 100, track)

    def test_missing_index(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 5, track, first=0, last=3)
        with pytest.raises(DecompositionError, match="missing index 4"):
            chi.at(4)

    def test_lookup(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 5, track, first=0, last=3)
        x = np.array([0.0, 0.5, 0.999])
        looked_up = chi.lookup(1, x)
        assert looked_up.shape == (3, 1)
        np.testing.assert_array_equal(looked_up[:, 0], chi.at(1)[[0, 128, 255], 0])


class TestMartingaleField:
    """Test m = v + chi - chi o T"""

    def test_reconstruction_and_vanishing(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 20, track, first=0, last=10)
        m = compute_m(system, path, v, chi)
        assert m.first_index == 0
        assert m.last_index == 9
        assert reconstruction_error(system, path, v, chi, m) < 1e-12
        residual = verify_vanishing(system, path, m, track)
        assert residual.shape == (10,)
        assert residual.max() < 1e-12

    def test_needs_chi_one_index_ahead(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 5, track, first=0, last=3)
        with pytest.raises(DecompositionError, match="missing index"):
            compute_m(system, path, v, chi, last=3)

    def test_random_path_vanishing(self, random_beta_process, random_beta_system, linear_observable):
        path = sample_path(random_beta_process, 40, 12, seed=9)
        track = DensityTrack(random_beta_system, path, -30, 12, k_pullback=10)
        v = center_observable(linear_observable, random_beta_system, path, track)
        chi = compute_chi(random_beta_system, path, v, 25, track, first=0, last=8)
        m = compute_m(random_beta_system, path, v, chi)
        assert reconstruction_error(random_beta_system, path, v, chi, m) < 1e-12
        assert verify_vanishing(random_beta_system, path, m, track).max() <= 1e-3

    @pytest.mark.parametrize("n_bins", [4096, 6561])
    def test_vanishing_with_branch_edges_inside_bins(self, beta_maps, random_beta_process, linear_observable, n_bins):
        system = FiberSystem(beta_maps, n_bins=n_bins, cache=UlamCache())
        path = sample_path(random_beta_process, 60, 12, seed=4)
        track = DensityTrack(system, path, -45, 12, k_pullback=10)
        v = center_observable(linear_observable, system, path, track)
        chi = compute_chi(system, path, v, 40, track, first=0, last=8)
        m = compute_m(system, path, v, chi)
        assert reconstruction_error(system, path, v, chi, m) < 1e-12
        assert verify_vanishing(system, path, m, track).max() <= 1e-3

    def test_m_stores_bin_averaged_composition(self, random_beta_process, random_beta_system, linear_observable):
        path = sample_path(random_beta_process, 40, 12, seed=9)
        track = DensityTrack(random_beta_system, path, -30, 12, k_pullback=10)
        v = center_observable(linear_observable, random_beta_system, path, track)
        chi = compute_chi(random_beta_system, path, v, 25, track, first=0, last=4)
        m = compute_m(random_beta_system, path, v, chi)
        for j in range(0, 4):
            op = random_beta_system.operator_at(path, j)
            np.testing.assert_allclose(m.composed[j], op.pull(chi.at(j + 1)), atol=1e-14)
            np.testing.assert_array_equal(m.successor[j], chi.at(j + 1))

    def test_linearity_in_observable(self, non_lebesgue_system):
        process = BaseProcess.markov(["LY", "MX"], [[0.7, 0.3], [0.4, 0.6]])
        path = sample_path(process, 60, 10, seed=3)
        track = DensityTrack(non_lebesgue_system, path, -30, 10, k_pullback=20)
        first = Observable.from_formulas("x_minus_half")
        second = Observable.from_formulas("cos2pi")
        alpha = -1.7
        combined = Observable.linear_combination([(alpha, first), (1.0, second)])
        fields = [
            compute_chi(non_lebesgue_system, path, center_observable(obs, non_lebesgue_system, path, track),
                        20, track, first=0, last=5)
            for obs in (first, second, combined)
        ]
        np.testing.assert_allclose(fields[2].values, alpha * fields[0].values + fields[1].values, atol=1e-10)

    def test_stacked_observable_matches_components(self, non_lebesgue_system):
        process = BaseProcess.markov(["LY", "MX"], [[0.7, 0.3], [0.4, 0.6]])
        path = sample_path(process, 60, 10, seed=3)
        track = DensityTrack(non_lebesgue_system, path, -30, 10, k_pullback=20)
        first = Observable.from_formulas("x_minus_half")
        second = Observable.from_formulas("sin2pi")

        def decompose(obs):
            v = center_observable(obs, non_lebesgue_system, path, track)
            chi = compute_chi(non_lebesgue_system, path, v, 20, track, first=0, last=5)
            return chi, compute_m(non_lebesgue_system, path, v, chi)

        chi_pair, m_pair = decompose(first.stack(second))
        for c, obs in enumerate((first, second)):
            chi, m = decompose(obs)
            np.testing.assert_allclose(chi_pair.values[..., c], chi.values[..., 0], atol=1e-12)
            np.testing.assert_allclose(m_pair.values[..., c], m.values[..., 0], atol=1e-12)


class TestReverseMartingale:
    """Test E[m_a(x_a) g(x_b)] = 0 for a < b"""

    def test_doubling_orthogonality(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 20, track, first=1, last=3)
        m = compute_m(system, path, v, chi)
        table = reverse_martingale_check(system, path, m, n=3, n_paths=4000, seed=7, track=track)
        assert list(table.columns) == ['a', 'b', 'g', 'component', 'estimate', 'stderr', 'z', 'pass']
        assert len(table) == 9
        assert table['z'].abs().max() < 4.5

    def test_worker_count_does_not_change_result(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 10, track, first=1, last=3)
        m = compute_m(system, path, v, chi)
        serial = reverse_martingale_check(system, path, m, 3, 600, 5, track, EnsembleRunner(batch_size=100))
        threaded = reverse_martingale_check(system, path, m, 3, 600, 5, track,
                                            EnsembleRunner(workers=3, batch_size=100))
        np.testing.assert_allclose(serial['estimate'], threaded['estimate'], rtol=1e-12, atol=1e-15)

    def test_needs_two_indices(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 5, track, first=1, last=3)
        m = compute_m(system, path, v, chi)
        with pytest.raises(EstimationError):
            reverse_martingale_check(system, path, m, 1, 10, 0, track)

    def test_m_must_cover_range(self, doubling_window):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 5, track, first=1, last=3)
        m = compute_m(system, path, v, chi)
        with pytest.raises(DecompositionError, match="m must cover"):
            reverse_martingale_check(system, path, m, 5, 10, 0, track)


class TestDecompositionDump:
    """Test chi/m/residual CSV output"""

    def test_files_written(self, doubling_window, tmp_path):
        system, path, track, v = doubling_window
        chi = compute_chi(system, path, v, 5, track, first=0, last=3)
        m = compute_m(system, path, v, chi)
        residual = verify_vanishing(system, path, m, track)
        written = dump_decomposition_csv(chi, m, residual, tmp_path / "decomp")
        assert [p.name for p in written] == ["chi.csv", "m.csv", "residual.csv"]

        chi_frame = pd.read_csv(written[0], comment='#')
        assert list(chi_frame.columns) == ['index', 'bin', 'component', 'value']
        assert len(chi_frame) == 4 * 256
        residual_frame = pd.read_csv(written[2], comment='#')
        assert list(residual_frame['index']) == [0, 1, 2]
