import numpy as np
import pytest

from aoa_lab import evaluation as ev
from aoa_lab.array_model import ArrayGeometry, SceneDistribution, SourceScene, noise_variance, steering_vector
from aoa_lab.classical import GridSpec
from aoa_lab.errors import ConditioningError, ConfigurationError, SweepError
from aoa_lab.net import NetworkSpec, chamfer_rmse

ULA = ArrayGeometry.ula()


def fd_crlb(scene, geometry, snr_db, h=1e-6):
    """
    Independent oracle: full Fisher information over (angles, Re s, Im s) by
    finite differences of the noiseless mean, inverted, angle block taken.
    """
    theta = np.asarray(scene.angles_deg, float)
    s = np.asarray(scene.gains, complex)
    m = theta.size

    def mean(p):
        th, re, im = p[:m], p[m : 2 * m], p[2 * m :]
        return sum((re[k] + 1j * im[k]) * steering_vector(geometry, th[k]) for k in range(m))

    p0 = np.concatenate([theta, s.real, s.imag])
    jac = []
    for i in range(p0.size):
        step = np.zeros_like(p0)
        step[i] = h
        jac.append((mean(p0 + step) - mean(p0 - step)) / (2 * h))
    j = np.column_stack(jac)
    fim = 2.0 / noise_variance(snr_db) * np.real(j.conj().T @ j)
    return np.sqrt(np.diag(np.linalg.inv(fim))[:m])


class TestRMSE:
    def test_exact(self):
        scenes = [SourceScene([1.0, 5.0], [1, 1]), SourceScene([-3.0], [1])]
        assert ev.rmse_metric(scenes, [[5.0, 1.0], [-3.0]]) == 0.0

    def test_single_trial_is_chamfer(self):
        sc = SourceScene([10.0, 20.0], [1, 1])
        assert ev.rmse_metric([sc], [[10.5, 19.0]]) == pytest.approx(chamfer_rmse([10, 20], [10.5, 19]))

    def test_two_trials_by_hand(self):
        scenes = [SourceScene([0.0], [1]), SourceScene([0.0, 10.0], [1, 1])]
        # trial 1: 1^2 ; trial 2: (0 + 4)/2 = 2 ; mean 1.5
        assert ev.rmse_metric(scenes, [[1.0], [0.0, 12.0]]) == pytest.approx(np.sqrt(1.5))

    def test_stderr_shrinks_with_trials(self):
        rng = np.random.default_rng(0)
        se = []
        for n in (400, 1600):
            reps = [ev.rmse_with_stderr(rng.standard_normal(n) ** 2)[1] for _ in range(50)]
            se.append(np.mean(reps))
        assert se[0] / se[1] == pytest.approx(2.0, rel=0.1)


class TestCRLB:
    @pytest.mark.parametrize(
        "angles,gains,snr",
        [([7.0], [1.0], 10.0), ([-5.0, 5.0], [1.0, 0.7j], 20.0), ([-20, -3, 4, 18], [1, 1j, -0.8, 0.6], 0.0)],
    )
    def test_matches_finite_difference_fim(self, angles, gains, snr):
        sc = SourceScene(angles, gains)
        np.testing.assert_allclose(ev.crlb(sc, ULA, snr), fd_crlb(sc, ULA, snr), rtol=1e-5)

    def test_gain_scaling(self):
        a = ev.crlb(SourceScene([3.0], [1.0]), ULA, 10.0)
        b = ev.crlb(SourceScene([3.0], [2.0]), ULA, 10.0)
        assert b[0] == pytest.approx(a[0] / 2)

    def test_snr_monotone(self):
        sc = SourceScene([-4.0, 6.0], [1, 1])
        bounds = [ev.crlb(sc, ULA, snr)[0] for snr in (0, 10, 20, 30)]
        np.testing.assert_allclose(np.array(bounds[:-1]) / bounds[1:], np.sqrt(10))

    def test_merged_sources(self):
        with pytest.raises(ConditioningError):
            ev.crlb(SourceScene([2.0, 2.0], [1, 1]), ULA, 10.0)


def quick(**kw):
    base = dict(
        methods=("bartlett",),
        snr_points_db=(20.0, 30.0),
        trials_per_point=20,
        scene_distribution=SceneDistribution(source_counts=(1,)),
        grid=GridSpec((-25, 25), 0.1),
        timing=False,
        seed=5,
    )
    base.update(kw)
    return ev.SweepConfig(**base)


class TestSweep:
    def test_bartlett_high_snr(self):
        res = ev.run_sweep(quick(snr_points_db=(30.0,), trials_per_point=100))
        assert res.row("bartlett", 30.0).rmse_deg <= 0.1

    def test_paired_snapshots(self):
        a = ev.run_sweep(quick(methods=("bartlett",)))
        b = ev.run_sweep(quick(methods=("omp", "bartlett")))
        assert [p["snapshot_digest"] for p in a.metadata["points"]] == [
            p["snapshot_digest"] for p in b.metadata["points"]
        ]
        cfg = quick()
        assert a.metadata["points"][1]["snapshot_digest"] == ev.snapshot_digest(ev.sweep_snapshots(cfg, 1))
        # the per-method rows do not depend on which other methods ran
        ra, rb = a.row("bartlett", 20.0), b.row("bartlett", 20.0)
        assert (ra.rmse_deg, ra.rmse_stderr, ra.trials) == (rb.rmse_deg, rb.rmse_stderr, rb.trials)

    def test_csv_schema_and_determinism(self, tmp_path):
        res = ev.run_sweep(quick(methods=("bartlett", "music")))
        res.write(tmp_path / "a.csv")
        ev.run_sweep(quick(methods=("bartlett", "music"), workers=2)).write(tmp_path / "b.csv")
        text = (tmp_path / "a.csv").read_text()
        assert text.splitlines()[0] == "method,snr_db,rmse_deg,rmse_stderr,accuracy,mean_runtime_s,trials"
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert len(text.splitlines()) == 1 + 2 * 2
        assert (tmp_path / "a.json").exists()

    def test_failing_method(self):
        # exhaustive ML refuses M=4, so every trial errors
        with pytest.raises(SweepError, match="ml"):
            ev.run_sweep(quick(methods=("ml",), scene_distribution=SceneDistribution(source_counts=(4,))))

    def test_unknown_method(self):
        with pytest.raises(ConfigurationError):
            ev.run_sweep(quick(methods=("capon",)))

    def test_dnn_needs_network(self):
        with pytest.raises(ConfigurationError):
            ev.run_sweep(quick(methods=("dnn",)))

    @pytest.mark.xfail(
        strict=True,
        reason="grid coordinate ascent stalls on the coupled ridge for sources within about "
        "10 degrees, so AP trails ML by more than 10% at high SNR",
    )
    def test_ap_tracks_ml(self):
        cfg = ev.SweepConfig(
            methods=("ml", "ap"),
            snr_points_db=(10.0, 20.0, 30.0),
            trials_per_point=200,
            scene_distribution=SceneDistribution(fov_deg=(-10, 10), source_counts=(2,)),
            grid=GridSpec((-10, 10), 0.2),
            timing=False,
        )
        res = ev.run_sweep(cfg)
        ml, ap = res.curve("ml"), res.curve("ap")
        assert np.all(np.abs(ap - ml) <= 0.10 * ml)


class TestOrderSweep:
    def test_noiseless_single_source(self):
        cfg = quick(methods=("mdl", "aic"), snr_points_db=(float("inf"),), trials_per_point=200,
                    scene_distribution=SceneDistribution(source_counts=(1,)))
        res = ev.order_accuracy_sweep(cfg)
        assert res.row("mdl", float("inf")).accuracy >= 0.99

    def test_rejects_aoa_methods(self):
        with pytest.raises(ConfigurationError):
            ev.order_accuracy_sweep(quick(methods=("music",)))


def test_crlb_flags():
    rows = [ev.SweepRow("x", 10.0, rmse_deg=0.1, rmse_stderr=0.01), ev.SweepRow("y", 10.0, rmse_deg=0.5, rmse_stderr=0.01)]
    flags = ev.crlb_flags(rows, [{"snr_db": 10.0, "crlb_rmse_deg": 0.3}])
    assert [f["method"] for f in flags] == ["x"]


class TestComplexity:
    def test_reference_counts(self):
        rows = {r["method"]: r for r in ev.complexity_report(grid=500, m=4, k=10, n=16)}
        assert rows["ml"]["operations"] == (256 + 64) * 500.0**4
        assert rows["ap"]["operations"] == 256 * 500 * 10
        assert rows["dnn"]["operations"] == 2048**2

    def test_measured(self):
        rows = ev.complexity_report(
            grid=GridSpec((-10, 10), 0.5), m=2, measure=True,
            spec=NetworkSpec(hidden_widths=(32,)),
        )
        assert all(r["measured_seconds"] > 0 for r in rows)


def test_default_workers(monkeypatch):
    monkeypatch.setenv("AOA_LAB_WORKERS", "3")
    assert ev.default_workers() == 3
    monkeypatch.setenv("AOA_LAB_WORKERS", "many")
    with pytest.raises(ConfigurationError):
        ev.default_workers()
