import xml.etree.ElementTree as ET

import numpy as np
import pytest

from irsce import evaluate as ev
from irsce.channel import realize
from irsce.config import SystemConfig
from irsce.sensing import assemble_problem, build_design


@pytest.fixture
def rng():
    return np.random.default_rng(17)


@pytest.fixture(scope="module")
def small_cfg():
    return SystemConfig(n_b=4, n_ix=2, n_iy=2, k=2, t=6, g_b=8, g_i=16)


def _h(rng):
    return rng.standard_normal((12, 3)) + 1j * rng.standard_normal((12, 3))


class TestNmse:
    def test_exact_floor(self, rng):
        h = _h(rng)
        assert ev.nmse_db(h, h) == ev.FLOOR_DB

    def test_zero_estimate(self, rng):
        h = _h(rng)
        assert ev.nmse_db(h, np.zeros_like(h)) == pytest.approx(0.0)

    def test_double(self, rng):
        h = _h(rng)
        assert ev.nmse_db(h, 2 * h) == pytest.approx(0.0, abs=1e-12)

    def test_zero_label_excluded(self, rng):
        h = np.stack([_h(rng), np.zeros((12, 3))])
        assert np.isnan(ev.nmse_ratios(h, np.zeros_like(h))[1])
        assert ev.nmse_db(h, np.zeros_like(h)) == pytest.approx(0.0)
        assert np.isnan(ev.nmse_db(np.zeros((2, 2)), np.ones((2, 2))))

    def test_mean_before_log(self, rng):
        h = np.stack([_h(rng), _h(rng)])
        h_hat = h.copy()
        h_hat[0] = 0
        # ratios 1 and 0 average to 0.5, not to the mean of their dB values
        assert ev.nmse_db(h, h_hat) == pytest.approx(10 * np.log10(0.5))

    def test_scale_detecting(self, rng):
        h = _h(rng)
        assert ev.nmse_db(h, 0.5 * h) != ev.nmse_db(h, 0.9 * h)
        assert ev.best_scale(h, 0.5 * h) == pytest.approx(2.0)
        assert ev.best_scale(h, np.zeros_like(h)) == 0.0


class TestSpectralEfficiency:
    def test_zero_channel(self):
        assert ev.spectral_efficiency(np.zeros((2, 3)), np.ones(3), np.ones(3), np.ones(2), 1.0) == 0.0

    def test_unit_snr(self):
        g = np.zeros((2, 3), dtype=complex)
        g[0, 0] = 1.0
        assert ev.spectral_efficiency(g, np.ones(3), np.ones(3), np.array([1.0, 0.0]), 1.0) == pytest.approx(1.0)

    def test_scaled_channel(self):
        g = np.zeros((2, 3), dtype=complex)
        g[0, 0] = np.sqrt(3.0)
        assert ev.spectral_efficiency(g, np.ones(3), np.ones(3), np.array([1.0, 0.0]), 1.0) == pytest.approx(2.0)

    def test_per_subcarrier(self, rng):
        g = rng.standard_normal((4, 3, 5)) + 0j
        f = rng.standard_normal((4, 5)) + 0j
        r = np.exp(1j * rng.uniform(0, 6, 5))
        w = rng.standard_normal(3) + 0j
        se = ev.spectral_efficiency(g, f, r, w, 0.5)
        assert se.shape == (4,)
        assert se[2] == pytest.approx(ev.spectral_efficiency(g[2], f[2], r, w, 0.5))

    def test_proxy_ordering(self, rng, small_cfg):
        real = realize(small_cfg, rng)
        hc = real.hc[0]
        perfect = ev.se_proxy(hc, hc, 1e-2)
        noisy = ev.se_proxy(hc, hc + 2 * np.std(hc) * rng.standard_normal(hc.shape), 1e-2)
        rand = ev.se_proxy(hc, hc, 1e-2, rng, precoder="random")
        assert perfect.shape == (small_cfg.k,)
        assert np.mean(perfect) >= np.mean(noisy)
        assert np.mean(perfect) >= np.mean(rand)


class TestSweep:
    def test_single_point_direct(self, small_cfg):
        res = ev.sweep(small_cfg, {"swomp": ev.swomp_estimator()}, "snr_db", [10.0], 1, seed=4)
        assert len(res.rows) == 1
        design = build_design(small_cfg)
        real = realize(small_cfg, np.random.default_rng([4, 0]))
        prob = assemble_problem(real, design, np.random.default_rng([4, 0, 1]), 10.0)
        direct = ev.nmse_db(prob.h, ev.swomp_estimator()(prob, {}))
        assert res.rows[0].mean_nmse_db == pytest.approx(direct, abs=1e-12)
        assert res.rows[0].trials == 1

    def test_crn_bytes(self, tmp_path, small_cfg):
        methods = {"swomp": ev.swomp_estimator(), "zero": ev.zero_estimator()}
        paths = []
        for i in range(2):
            res = ev.sweep(small_cfg, methods, "snr_db", [0.0, 10.0], 3, seed=1)
            paths.append(tmp_path / f"r{i}.csv")
            ev.emit_csv(res, paths[-1])
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_same_channels_across_points(self, small_cfg):
        res = ev.sweep(small_cfg, {"zero": ev.zero_estimator()}, "snr_db", [0.0, 20.0], 2)
        # the zero estimator sees only the channel, so every point gives 0 dB
        assert [r.mean_nmse_db for r in res.rows] == pytest.approx([0.0, 0.0])

    def test_pilots_axis(self, small_cfg):
        res = ev.sweep(small_cfg, {"swomp": ev.swomp_estimator()}, "pilots", [4, 8], 2)
        assert res.values == [4, 8] and len(res.rows) == 2

    def test_bad_axis(self, small_cfg):
        with pytest.raises(ValueError):
            ev.sweep(small_cfg, {}, "bandwidth", [1], 1)
        with pytest.raises(ValueError):
            ev.sweep(small_cfg, {}, "snr_db", [1], 0)


class TestEmission:
    @pytest.fixture
    def result(self):
        res = ev.SweepResult("snr_db", [0.0, 5.0], config_hash="x")
        for m, off in (("a", 0.0), ("b", -2.5)):
            for v in (0.0, 5.0):
                res.rows.append(ev.SweepRow(m, v, off - v / 3, 1.25, 10, 0.875))
        return res

    def test_csv_round_trip(self, tmp_path, result):
        path = tmp_path / "r.csv"
        ev.emit_csv(result, path)
        back = ev.read_csv(path)
        assert back.axis == result.axis and back.values == result.values
        assert back.rows == result.rows
        assert b"\r" not in path.read_bytes()

    def test_empty_csv(self, tmp_path):
        path = tmp_path / "e.csv"
        ev.emit_csv(ev.SweepResult("snr_db", []), path)
        assert path.read_text().splitlines() == [",".join(ev.CSV_COLUMNS)]

    def test_svg_well_formed(self, tmp_path, result):
        path = tmp_path / "r.svg"
        ev.emit_svg(result, path)
        root = ET.parse(path).getroot()
        ns = {"s": "http://www.w3.org/2000/svg"}
        assert len(root.findall(".//s:polyline", ns)) == 2
        texts = [t.text for t in root.iter("{http://www.w3.org/2000/svg}text")]
        assert any("NMSE" in (t or "") for t in texts)
