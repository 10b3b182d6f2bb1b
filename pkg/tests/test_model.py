import numpy as np
import pytest
import torch

from dispfield import precision
from dispfield.errors import ConfigError, DegenerateGeometryError, ShapeError
from dispfield.model import (
    AblationSwitches,
    DisplacementModel,
    attenuation,
    build_model,
)
from dispfield.sirens import Siren
from oracles import fd_input_gradient


def small_model(seed=0, **kwargs):
    return build_model(omega_base=9.0, omega_disp=21.0, hidden_dim=24, depth=2,
                       seed=seed, **kwargs)


class TestAttenuation:
    def test_matches_formula(self):
        nu = 0.02
        v = np.linspace(-0.5, 0.5, 1001)
        expected = 1.0 / (1.0 + (v / nu) ** 4)
        got = attenuation(v, nu)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_reference_points(self):
        assert attenuation(np.float64(0.0), 0.02) == 1.0
        assert attenuation(np.float64(0.02), 0.02) == pytest.approx(0.5, abs=1e-15)
        assert attenuation(np.float64(-0.02), 0.02) == pytest.approx(0.5, abs=1e-15)
        assert attenuation(np.float64(1.0), 0.02) < 1e-6

    def test_torch_tensors(self):
        v = torch.linspace(-1, 1, 101, dtype=torch.float64)
        got = attenuation(v, 0.05)
        expected = 1.0 / (1.0 + (v / 0.05) ** 4)
        assert torch.allclose(got, expected, rtol=0, atol=1e-12)

    def test_bad_width(self):
        with pytest.raises(ConfigError):
            attenuation(np.zeros(3), 0.0)
        with pytest.raises(ConfigError):
            attenuation(np.zeros(3), -1.0)


class TestConstruction:
    def test_head_switch_consistency(self):
        base = Siren(3, 16, 2, 1, omega=9.0, seed=0)
        disp_linear = Siren(3, 16, 2, 1, omega=21.0, seed=1)
        with pytest.raises(ConfigError):
            DisplacementModel(base, disp_linear)  # bounded switch, linear head
        disp_bad_scale = Siren(3, 16, 2, 1, omega=21.0, head="bounded",
                               head_scale=0.5, seed=1)
        with pytest.raises(ConfigError):
            DisplacementModel(base, disp_bad_scale, alpha=0.05)
        disp_bounded = Siren(3, 16, 2, 1, omega=21.0, head="bounded",
                             head_scale=0.05, seed=1)
        with pytest.raises(ConfigError):
            DisplacementModel(base, disp_bounded,
                              switches=AblationSwitches(bounded_head=False))

    def test_scalar_networks_required(self):
        base = Siren(3, 16, 2, 2, omega=9.0, seed=0)
        disp = Siren(3, 16, 2, 1, omega=21.0, head="bounded", seed=1)
        with pytest.raises(ConfigError):
            DisplacementModel(base, disp)

    def test_build_model_deterministic(self):
        a, b = small_model(seed=4), small_model(seed=4)
        for k in a.state_dict():
            assert torch.equal(a.state_dict()[k], b.state_dict()[k])


class TestComposition:
    def test_zero_displacement_is_bitwise_base(self):
        m = small_model(seed=1)
        with torch.no_grad():
            m.disp.head.weight.zero_()
            m.disp.head.bias.zero_()
        x = torch.rand(200, 3) * 2 - 1
        assert torch.equal(m.detail_sdf(x), m.base_sdf(x))

    def test_displacement_magnitude_bounded(self):
        m = small_model(seed=2)
        x = torch.rand(100_000, 3) * 2 - 1
        with torch.no_grad():
            d = m.displacement(x)
        assert d.abs().max().item() <= m.alpha

    def test_composition_matches_manual_evaluation(self):
        precision.set_precision("float64")
        m = small_model(seed=3)
        x = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (50, 3)))
        with torch.no_grad():
            base_vals = m.base(x)
            grads = m.base.input_gradient(x)
            n = grads / grads.norm(dim=1, keepdim=True)
            d = attenuation(base_vals, m.nu) * m.disp(x)
            manual = m.base(x + d.unsqueeze(-1) * n)
            got = m.detail_sdf(x)
        assert torch.allclose(got, manual, rtol=0, atol=1e-14)

    def test_attenuation_ablation(self):
        m = small_model(seed=5, switches=AblationSwitches(attenuate=False))
        x = torch.rand(20, 3) * 2 - 1
        with torch.no_grad():
            base_vals = m.base(x)
            grads = m.base.input_gradient(x)
            n = grads / grads.norm(dim=1, keepdim=True)
            manual = m.base(x + m.disp(x).unsqueeze(-1) * n)
        assert torch.allclose(m.detail_sdf(x), manual, rtol=0, atol=1e-6)

    def test_detail_gradient_matches_fd(self):
        precision.set_precision("float64")
        m = small_model(seed=6)
        x = torch.from_numpy(np.random.default_rng(1).uniform(-0.8, 0.8, (10, 3)))
        analytic = m.detail_gradient(x).numpy()
        numeric = fd_input_gradient(lambda p: m.detail_sdf(p), x.numpy())
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
        assert rel < 1e-6

    def test_shape_validation(self):
        m = small_model()
        with pytest.raises(ShapeError):
            m.detail_sdf(torch.zeros(4, 2))


class TestDegenerateNormals:
    def make_flat_base_model(self):
        base = Siren(3, 8, 1, 1, omega=5.0, seed=0)
        with torch.no_grad():
            for layer in base.hidden:
                layer.weight.zero_()
            base.head.weight.zero_()
            base.head.bias.fill_(0.1)
        disp = Siren(3, 8, 1, 1, omega=15.0, head="bounded", head_scale=0.05, seed=1)
        return DisplacementModel(base, disp)

    def test_error_policy(self):
        m = self.make_flat_base_model()
        with pytest.raises(DegenerateGeometryError):
            m.detail_sdf(torch.zeros(3, 3))
        with pytest.raises(DegenerateGeometryError):
            m.base_normal(torch.zeros(3, 3))

    def test_zero_policy_falls_back_to_base(self):
        m = self.make_flat_base_model()
        x = torch.rand(6, 3)
        out = m.detail_sdf(x, on_degenerate="zero")
        assert torch.equal(out, m.base_sdf(x))
        n = m.base_normal(x, on_degenerate="zero")
        assert torch.all(n == 0)
        assert torch.all(m.displacement(x, on_degenerate="zero") == 0)

    def test_unknown_policy_rejected(self):
        m = small_model()
        with pytest.raises(ConfigError):
            m.detail_sdf(torch.zeros(2, 3), on_degenerate="clamp")


class TestGridEvaluation:
    def test_detail_grid_deterministic_across_chunks(self):
        precision.set_deterministic(True)
        m = small_model(seed=7)
        full = m.grid_values(9, chunk=9 ** 3)
        for chunk in (1, 17, 100):
            g = m.grid_values(9, chunk=chunk)
            assert np.array_equal(g.values, full.values), f"chunk={chunk}"

    def test_base_selector(self):
        m = small_model(seed=8)
        g = m.grid_values(5, which="base")
        pts = torch.from_numpy(g.node_positions()).float()
        with torch.no_grad():
            expected = m.base_sdf(pts).numpy()
        np.testing.assert_allclose(g.flat_values(), expected, atol=1e-7)

    def test_unknown_selector(self):
        with pytest.raises(ConfigError):
            small_model().grid_values(5, which="relief")


class TestBundleIO:
    def test_round_trip(self, tmp_path):
        m = small_model(seed=9, alpha=0.03, nu=0.01)
        d = tmp_path / "bundle"
        m.save_bundle(d)
        back = DisplacementModel.load_bundle(d)
        assert back.alpha == m.alpha and back.nu == m.nu
        assert back.switches == m.switches
        for k, v in m.state_dict().items():
            assert torch.equal(back.state_dict()[k], v)
        x = torch.rand(7, 3)
        assert torch.equal(back.detail_sdf(x), m.detail_sdf(x))

    def test_save_twice_byte_identical(self, tmp_path):
        m = small_model(seed=10)
        d1, d2 = tmp_path / "b1", tmp_path / "b2"
        m.save_bundle(d1)
        m.save_bundle(d2)
        for name in ("base.ckpt", "disp.ckpt", "manifest.json"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            DisplacementModel.load_bundle(tmp_path / "nope")

    def test_ablation_switches_round_trip(self, tmp_path):
        sw = AblationSwitches(bounded_head=False, attenuate=False, progressive=False)
        m = small_model(seed=11, switches=sw)
        d = tmp_path / "b"
        m.save_bundle(d)
        assert DisplacementModel.load_bundle(d).switches == sw
