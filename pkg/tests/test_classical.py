import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aoa_lab.array_model import (
    ArrayGeometry,
    SceneDistribution,
    SourceScene,
    sample_scene,
    steering_matrix,
    synthesize_snapshot,
)
from aoa_lab.classical import (
    GridSpec,
    ap_estimate,
    bartlett_estimate,
    bartlett_spectrum,
    beamwidth_3db,
    ml_estimate,
    ml_objective,
    music_estimate,
    omp_estimate,
    pick_peaks,
    spatial_smooth,
)
from aoa_lab.errors import BudgetError, DomainError
from aoa_lab.net import chamfer_rmse
from aoa_lab.numerics import hermitian_eig, projector

ULA = ArrayGeometry.ula()
GRID = GridSpec((-10.0, 10.0), 0.2)


def noiseless(angles, gains=None):
    gains = np.ones(len(angles)) if gains is None else gains
    return synthesize_snapshot(ULA, SourceScene(angles, gains), 0.0, 0, noise=False)


def brute_force_ml(y, m, grid):
    """Reference ML: explicit projector for every combination."""
    angles = grid.angles()
    best, best_j = None, -np.inf
    for combo in itertools.combinations(range(angles.size), m):
        a = steering_matrix(ULA, angles[list(combo)])
        j = np.real(np.vdot(y, projector(a) @ y))
        if j > best_j + 1e-12:
            best, best_j = combo, j
    return angles[list(best)], best_j


class TestGrid:
    def test_points(self):
        g = GridSpec((-25, 25), 0.1)
        assert g.size == 501
        assert g.angles()[0] == -25 and g.angles()[-1] == pytest.approx(25)

    def test_invalid(self):
        with pytest.raises(DomainError):
            GridSpec((-1, 1), 0.0)


class TestBartlett:
    def test_on_grid_peak(self):
        snap = noiseless([3.4])
        spec = bartlett_spectrum(snap, GRID)
        k = int(np.argmax(spec))
        assert GRID.angles()[k] == pytest.approx(3.4)
        assert spec[k] == pytest.approx(16.0)

    def test_cauchy_schwarz_bound(self):
        y = np.random.default_rng(0).standard_normal(16) * (1 + 1j)
        assert np.all(bartlett_spectrum(y, GRID) <= np.vdot(y, y).real + 1e-12)

    def test_monte_carlo_single_source(self):
        # at 30 dB the single-source CRLB std is about 0.02 deg, well inside one 0.1 deg step
        grid = GridSpec((-25, 25), 0.1)
        theta = 7.33
        errs = []
        for seed in range(500):
            snap = synthesize_snapshot(ULA, SourceScene([theta], [1.0]), 30.0, seed)
            errs.append(bartlett_estimate(snap, 1, grid).angles_deg[0] - theta)
        assert np.sqrt(np.mean(np.square(errs))) <= grid.step_deg
        assert np.max(np.abs(errs)) <= 2 * grid.step_deg

    def test_beamwidth_reported(self):
        # standard half-power width of a 16-element half-wavelength ULA
        assert beamwidth_3db(ULA) == pytest.approx(6.36, abs=0.05)


class TestML:
    def test_single_source_equals_bartlett(self):
        snap = synthesize_snapshot(ULA, SourceScene([-4.1], [1.0]), 5.0, 3)
        assert ml_estimate(snap, 1, GRID).angles_deg[0] == bartlett_estimate(snap, 1, GRID).angles_deg[0]

    def test_exact_recovery_two_sources(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            i, k = sorted(rng.choice(GRID.size, 2, replace=False))
            if abs(i - k) * GRID.step_deg < 3:
                continue
            truth = GRID.angles()[[i, k]]
            snap = noiseless(truth, np.exp(1j * rng.uniform(0, 6, 2)))
            est = ml_estimate(snap, 2, GRID)
            np.testing.assert_allclose(est.angles_deg, truth)
            assert est.objective == pytest.approx(np.vdot(snap.y, snap.y).real, rel=1e-10)

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_matches_brute_force(self, m):
        grid = GridSpec((-6, 6), 1.0)
        snap = synthesize_snapshot(ULA, SourceScene([-3.3, 0.4, 4.2][:m], [1, 1j, -0.7][:m]), 10.0, 11)
        est = ml_estimate(snap, m, grid)
        angles, j = brute_force_ml(snap.y, m, grid)
        np.testing.assert_allclose(est.angles_deg, angles)
        assert est.objective == pytest.approx(j, rel=1e-9)

    def test_objective_bounds(self):
        snap = synthesize_snapshot(ULA, SourceScene([1.0, 6.0], [1, 1]), 0.0, 2)
        est = ml_estimate(snap, 2, GRID)
        assert 0 <= est.objective <= np.vdot(snap.y, snap.y).real

    def test_budget_refusal(self):
        snap = noiseless([0.0])
        with pytest.raises(BudgetError) as info:
            ml_estimate(snap, 4, GridSpec((-25, 25), 0.1))
        assert info.value.operations == pytest.approx((256 + 64) * 501**4)
        with pytest.raises(BudgetError):
            ml_estimate(snap, 3, GridSpec((-25, 25), 0.1))

    def test_tie_break_lexicographic(self):
        # zero observation: every combination scores 0, first combination wins
        est = ml_estimate(np.zeros(16, dtype=complex), 2, GRID)
        np.testing.assert_allclose(est.angles_deg, GRID.angles()[[0, 1]])


class TestAP:
    def test_single_source(self):
        snap = synthesize_snapshot(ULA, SourceScene([2.2], [1.0]), 10.0, 0)
        est = ap_estimate(snap, 1, GRID)
        assert est.angles_deg[0] == bartlett_estimate(snap, 1, GRID).angles_deg[0]
        assert est.iterations == 1

    def test_bounded_by_ml_and_coordinatewise_optimal(self):
        # the AP fixed point cannot beat exhaustive ML, and no single-angle move improves it
        dist = SceneDistribution(fov_deg=(-10, 10), source_counts=(2,), min_separation_deg=3)
        angles = GRID.angles()
        for seed in range(10):
            snap = synthesize_snapshot(ULA, sample_scene(dist, seed), 0.0, seed, noise=False)
            ap = ap_estimate(snap, 2, GRID, 10)
            ml = ml_estimate(snap, 2, GRID)
            assert ap.objective <= ml.objective * (1 + 1e-9)
            if ap.iterations == 10:
                continue
            for keep, move in ((0, 1), (1, 0)):
                fixed = ap.angles_deg[keep]
                best = max(
                    ml_objective(snap, steering_matrix(ULA, [fixed, t]))
                    for t in angles
                    if abs(t - fixed) > 1e-9
                )
                assert best <= ap.objective * (1 + 1e-9)

    def test_exact_on_grid_well_separated(self):
        truth = GRID.angles()[[20, 70]]
        snap = noiseless(truth, [1.0, 0.8j])
        ap = ap_estimate(snap, 2, GRID, 10)
        np.testing.assert_allclose(ap.angles_deg, truth)
        assert ap.objective == pytest.approx(ml_estimate(snap, 2, GRID).objective, rel=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 4), snr=st.floats(-5, 30))
    def test_monotone_objective(self, seed, m, snr):
        dist = SceneDistribution(source_counts=(m,))
        snap = synthesize_snapshot(ULA, sample_scene(dist, seed), snr, seed)
        est = ap_estimate(snap, m, GridSpec((-25, 25), 0.5), 10)
        trace = np.array(est.trace)
        assert np.all(np.diff(trace) >= -1e-9 * trace[-1])
        assert est.objective == pytest.approx(
            ml_objective(snap, steering_matrix(ULA, est.angles_deg)), rel=1e-9
        )


class TestOMP:
    def test_single_source(self):
        snap = synthesize_snapshot(ULA, SourceScene([-7.0], [1.0]), 0.0, 4)
        assert omp_estimate(snap, 1, GRID).angles_deg[0] == bartlett_estimate(snap, 1, GRID).angles_deg[0]

    def test_orthogonal_atoms_exact(self):
        # sin-space separation 2/N makes the two steering vectors orthogonal
        # a grid of such angles is an (almost) orthogonal dictionary, where OMP is exact
        theta2 = np.degrees(np.arcsin(2 / 16))
        grid = GridSpec((-theta2, 2.5 * theta2), theta2)
        a = steering_matrix(ULA, [0.0, theta2])
        assert abs(np.vdot(a[:, 0], a[:, 1])) < 1e-12
        snap = noiseless([0.0, theta2], [1.0, 0.6 * np.exp(2j)])
        est = omp_estimate(snap, 2, grid)
        np.testing.assert_allclose(est.angles_deg, [0.0, theta2], atol=1e-9)
        assert est.trace[-1] < 1e-9

    def test_residuals_decrease(self):
        dist = SceneDistribution(source_counts=(4,), min_separation_deg=4)
        for seed in range(20):
            snap = synthesize_snapshot(ULA, sample_scene(dist, seed), 0.0, seed, noise=False)
            norms = np.array(omp_estimate(snap, 4, GridSpec((-25, 25), 0.5)).trace)
            assert np.all(np.diff(norms) < 0)

    def test_duplicate_skipped(self):
        # a single atom: the second pick must skip the (now zero-residual) duplicate
        snap = noiseless([GRID.angles()[40]])
        est = omp_estimate(snap, 2, GRID)
        assert len(set(est.angles_deg)) == 2


class TestSmoothing:
    def test_reference_partition(self):
        cov = spatial_smooth(np.ones(16), 8)
        assert cov.subarray_count == 9 and cov.matrix.shape == (8, 8)

    def test_full_size_is_outer_product(self):
        y = np.random.default_rng(0).standard_normal(16) + 1j
        cov = spatial_smooth(y, 16)
        assert cov.subarray_count == 1
        np.testing.assert_allclose(cov.matrix, np.outer(y, y.conj()), atol=1e-14)

    def test_single_source_rank_one(self):
        cov = spatial_smooth(noiseless([12.0], [0.7j]), 8)
        lam = hermitian_eig(cov.matrix).eigenvalues
        assert lam[1] / lam[0] <= 1e-10

    def test_hermitian_psd(self):
        cov = spatial_smooth(synthesize_snapshot(ULA, SourceScene([1, 5], [1, 1]), 0, 3), 6)
        np.testing.assert_allclose(cov.matrix, cov.matrix.conj().T)
        assert np.min(np.linalg.eigvalsh(cov.matrix)) >= -1e-12

    def test_bad_size(self):
        with pytest.raises(DomainError):
            spatial_smooth(np.ones(16), 17)


class TestMUSIC:
    def test_single_source_on_grid(self):
        cov = spatial_smooth(noiseless([GRID.angles()[37]], [1.3]), 8)
        est = music_estimate(cov, 1, GRID)
        assert est.angles_deg[0] == GRID.angles()[37]

    @pytest.mark.parametrize("noise", [False, True])
    def test_two_sources_four_degrees(self, noise):
        grid = GridSpec((-25, 25), 0.1)
        errs = []
        for seed in range(50):
            rng = np.random.default_rng(seed)
            c = rng.uniform(-18, 18)
            scene = SourceScene([c, c + 4.0], np.exp(1j * rng.uniform(0, 2 * np.pi, 2)))
            snap = synthesize_snapshot(ULA, scene, 30.0, rng, noise=noise)
            est = music_estimate(spatial_smooth(snap, 8), 2, grid)
            errs.append(np.max(np.abs(est.angles_deg - scene.angles_deg)))
        if noise:
            # with 30 dB noise a few trials exceed 0.5 deg; the typical trial does not
            assert np.median(errs) <= 0.5
        else:
            assert np.max(errs) <= 0.5

    def test_no_noise_subspace(self):
        with pytest.raises(DomainError):
            music_estimate(spatial_smooth(np.ones(16), 8), 8, GRID)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), scale=st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, scale):
        dist = SceneDistribution(source_counts=(2,))
        snap = synthesize_snapshot(ULA, sample_scene(dist, seed), 10.0, seed)
        cov = spatial_smooth(snap, 8)
        scaled = type(cov)(cov.matrix * scale, cov.subarray_size, cov.subarray_count)
        grid = GridSpec((-25, 25), 0.2)
        np.testing.assert_array_equal(
            music_estimate(cov, 2, grid).angles_deg, music_estimate(scaled, 2, grid).angles_deg
        )


class TestPeaks:
    def test_boundary_and_padding(self):
        s = np.array([5.0, 1.0, 2.0, 1.0, 0.5])
        np.testing.assert_array_equal(pick_peaks(s, 2), [0, 2])
        # monotone spectrum has a single boundary peak; padding takes the next largest
        np.testing.assert_array_equal(pick_peaks(np.arange(5.0), 2), [3, 4])


def test_chamfer_helper_consistency():
    assert chamfer_rmse([1.0], [1.0]) == 0.0
