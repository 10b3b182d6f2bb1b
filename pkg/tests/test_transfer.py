"""Transfer stack: encoder, feature grid, modulation, composition,
pipeline staging, and bundle round trips."""

import numpy as np
import pytest
import torch

from dispfield.errors import (ConfigError, ParseError, PipelineOrderError,
                              ShapeError, ValidationError)
from dispfield.geometry import OrientedPointCloud
from dispfield.model import attenuation
from dispfield.sirens import Siren
from dispfield.training import TrainConfig
from dispfield.transfer import (ConditioningCodes, FeatureGrid, FilmSiren,
                                GridSettings, MappingNet, PointEncoder,
                                PropagationNet, TransferConfig, TransferModel,
                                TransferPipeline, build_feature_grid,
                                build_transfer_model, scatter_mean_features,
                                transfer_pipeline)


def unit_normals(n, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(n, 3, generator=g, dtype=dtype)
    return v / v.norm(dim=1, keepdim=True)


def random_cloud(n, seed=0, dtype=torch.float32, scale=0.8):
    g = torch.Generator().manual_seed(seed + 100)
    pts = (torch.rand(n, 3, generator=g, dtype=dtype) * 2 - 1) * scale
    return pts, unit_normals(n, seed=seed, dtype=dtype)


def sphere_cloud(n, radius=0.5, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return OrientedPointCloud(points=(radius * d).astype(np.float64),
                              normals=d.astype(np.float64))


def tiny_transfer_config(**overrides):
    kwargs = dict(base_hidden=16, base_depth=2, film_hidden=16, film_depth=2,
                  feature_channels=8, encoder_hidden=8, mapping_hidden=16,
                  grid=GridSettings(resolution=4))
    kwargs.update(overrides)
    return TransferConfig(**kwargs)


# ---------------------------------------------------------------- encoder

def test_encoder_output_shape_and_determinism():
    a = PointEncoder(hidden_dim=16, out_channels=8, seed=5)
    b = PointEncoder(hidden_dim=16, out_channels=8, seed=5)
    n = unit_normals(20)
    assert a(n).shape == (20, 8)
    assert torch.equal(a(n), b(n))


def test_encoder_is_per_point():
    # a point's feature depends on its own normal only
    enc = PointEncoder(hidden_dim=16, out_channels=8, seed=1)
    n = unit_normals(30)
    full = enc(n)
    perm = torch.randperm(30, generator=torch.Generator().manual_seed(2))
    assert torch.equal(enc(n[perm]), full[perm])
    assert torch.equal(enc(n[:7]), full[:7])


def test_encoder_equal_normals_equal_features():
    enc = PointEncoder(seed=0)
    n = unit_normals(1).repeat(12, 1)
    out = enc(n)
    assert torch.equal(out, out[0].expand_as(out))


def test_encoder_rejects_non_unit_normals():
    enc = PointEncoder(seed=0)
    bad = unit_normals(5) * 1.5
    with pytest.raises(ValidationError):
        enc(bad)
    with pytest.raises(ShapeError):
        enc(torch.zeros(5, 2))


def test_encoder_never_sees_positions():
    import inspect
    sig = inspect.signature(PointEncoder.forward)
    assert list(sig.parameters) == ["self", "normals"]


# ----------------------------------------------------------- scatter mean

def test_scatter_mean_two_points_one_cell():
    lo = torch.zeros(3)
    spacing = torch.ones(3)
    feats = torch.tensor([[2.0, 4.0], [6.0, 0.0]])
    coords = torch.tensor([[1.1, 0.9, 2.0], [0.9, 1.2, 1.8]])  # both round to (1,1,2)
    grid = scatter_mean_features(feats, coords, lo, spacing, resolution=4)
    assert grid.shape == (4, 4, 4, 2)
    assert torch.equal(grid[1, 1, 2], torch.tensor([4.0, 2.0]))
    mask = torch.ones(4, 4, 4, dtype=torch.bool)
    mask[1, 1, 2] = False
    assert torch.equal(grid[mask], torch.zeros_like(grid[mask]))


def test_scatter_mean_out_of_range_clamps_to_edge_node():
    lo = torch.zeros(2)
    spacing = torch.ones(2)
    feats = torch.tensor([[1.0]])
    grid = scatter_mean_features(feats, torch.tensor([[9.0, -3.0]]), lo,
                                 spacing, resolution=3)
    assert float(grid[2, 0, 0]) == 1.0


def test_scatter_mean_is_differentiable():
    feats = torch.randn(6, 4, requires_grad=True)
    coords = torch.rand(6, 3) * 3
    grid = scatter_mean_features(feats, coords, torch.zeros(3), torch.ones(3), 4)
    grid.sum().backward()
    # every feature lands in exactly one cell with weight 1/count
    assert feats.grad is not None
    assert bool((feats.grad > 0).all())


# ------------------------------------------------------------ feature grid

def test_grid_single_point_at_node_identity_propagation():
    enc = PointEncoder(hidden_dim=8, out_channels=4, seed=3)
    # place the point exactly on a node of a 5-node grid over [-1, 1]
    node = torch.tensor([[-1.0 + 2 * 2.0 / 4, -1.0, 1.0]])
    nrm = unit_normals(1, seed=4)
    grid = build_feature_grid((node, nrm), enc, propagation=None, resolution=5)
    expected = enc(nrm)[0]
    assert torch.equal(grid.features[2, 0, 4], expected)
    assert torch.allclose(grid.query(node)[0], expected, atol=1e-6)


def test_grid_query_node_exactness():
    enc = PointEncoder(hidden_dim=8, out_channels=4, seed=0)
    pts, nrm = random_cloud(40, seed=1)
    grid = build_feature_grid((pts, nrm), enc, propagation=None, resolution=5)
    for idx in [(0, 0, 0), (4, 4, 4), (2, 3, 1)]:
        world = grid.node_position(idx)
        got = grid.query(world.unsqueeze(0))[0]
        assert torch.equal(got, grid.features[idx])


def test_grid_query_midpoint_mean():
    feats = torch.zeros(3, 3, 3, 2)
    feats[1, 1, 1] = torch.tensor([2.0, 0.0])
    feats[2, 1, 1] = torch.tensor([4.0, 8.0])
    grid = FeatureGrid(feats, lo=torch.full((3,), -1.0), spacing=torch.ones(3),
                       axes=(0, 1, 2))
    mid = torch.tensor([[0.5, 0.0, 0.0]])  # halfway between nodes 1 and 2 in x
    assert torch.allclose(grid.query(mid)[0], torch.tensor([3.0, 4.0]))


def test_grid_query_gradient_matches_finite_differences():
    torch.manual_seed(0)
    feats = torch.randn(4, 4, 4, 3, dtype=torch.float64)
    grid = FeatureGrid(feats, lo=torch.full((3,), -1.0, dtype=torch.float64),
                       spacing=torch.full((3,), 2.0 / 3, dtype=torch.float64),
                       axes=(0, 1, 2))
    x = torch.tensor([[0.11, -0.37, 0.52]], dtype=torch.float64,
                     requires_grad=True)
    out = grid.query(x).sum()
    (grad,) = torch.autograd.grad(out, x)
    h = 1e-6
    for a in range(3):
        xp = x.detach().clone(); xp[0, a] += h
        xm = x.detach().clone(); xm[0, a] -= h
        fd = (grid.query(xp).sum() - grid.query(xm).sum()) / (2 * h)
        assert abs(float(grad[0, a]) - float(fd)) <= 1e-5 * max(1.0, abs(float(fd)))


def test_grid_out_of_domain_clamps_and_counts():
    feats = torch.arange(3.0).reshape(3, 1).expand(3, 2).clone()
    feats = feats.reshape(3, 1, 1, 2).expand(3, 3, 3, 2).clone()
    grid = FeatureGrid(feats.contiguous(), lo=torch.full((3,), -1.0),
                       spacing=torch.ones(3), axes=(0, 1, 2))
    inside = grid.query(torch.tensor([[0.0, 0.0, 0.0]]))
    assert grid.clamped_queries == 0
    far = grid.query(torch.tensor([[9.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
    assert grid.clamped_queries == 1
    assert torch.equal(far[0], grid.features[2, 1, 1])
    assert torch.equal(far[1], inside[0])


def test_grid_build_permutation_invariant():
    enc = PointEncoder(hidden_dim=8, out_channels=4, seed=2)
    pts, nrm = random_cloud(60, seed=3)
    a = build_feature_grid((pts, nrm), enc, propagation=None, resolution=6)
    perm = torch.randperm(60, generator=torch.Generator().manual_seed(9))
    b = build_feature_grid((pts[perm], nrm[perm]), enc, propagation=None,
                           resolution=6)
    assert torch.allclose(a.features, b.features, atol=1e-6)


def test_grid_features_translation_invariant_with_domain():
    # shifting the cloud and the grid domain together changes nothing:
    # the encoder sees normals only and cells keep their occupants
    enc = PointEncoder(hidden_dim=8, out_channels=4, seed=7)
    pts, nrm = random_cloud(50, seed=5, scale=0.5)
    here = build_feature_grid((pts, nrm), enc, propagation=None, resolution=5,
                              bounds=(np.full(3, -1.0), np.full(3, 1.0)))
    shift = torch.tensor([10.0, -4.0, 2.5])
    there = build_feature_grid((pts + shift, nrm), enc, propagation=None,
                               resolution=5,
                               bounds=(np.full(3, -1.0) + shift.numpy(),
                                       np.full(3, 1.0) + shift.numpy()))
    assert torch.allclose(here.features, there.features, atol=1e-5)


def test_grid_2d_projects_one_axis():
    enc = PointEncoder(hidden_dim=8, out_channels=4, seed=1)
    pts, nrm = random_cloud(30, seed=2)
    grid = build_feature_grid((pts, nrm), enc, propagation=None, resolution=9,
                              dim=2, axis=2)
    assert grid.features.shape == (9, 9, 4)
    assert grid.axes == (0, 1)
    # queries ignore the projected axis entirely
    q = torch.tensor([[0.3, -0.2, 0.9], [0.3, -0.2, -0.6]])
    out = grid.query(q)
    assert torch.equal(out[0], out[1])


def test_grid_2d_default_resolution():
    enc = PointEncoder(hidden_dim=8, out_channels=4, seed=1)
    pts, nrm = random_cloud(5, seed=2)
    g3 = build_feature_grid((pts, nrm), enc, propagation=None)
    g2 = build_feature_grid((pts, nrm), enc, propagation=None, dim=2)
    assert g3.resolution == 32 and g2.resolution == 128


def test_propagation_receptive_field_is_three_cells():
    prop = PropagationNet(channels=4, dim=3, seed=0)
    spike = torch.zeros(9, 9, 9, 4)
    spike[8, 8, 8] = 1.0
    with torch.no_grad():
        diff = prop(spike) - prop(torch.zeros(9, 9, 9, 4))
    assert diff.shape == spike.shape
    # three kernel-3 convolutions spread influence exactly 3 cells
    assert float(diff[5, 5, 5].abs().sum()) > 0.0
    assert torch.equal(diff[4, 4, 4], torch.zeros(4))
    assert torch.equal(diff[0, 0, 0], torch.zeros(4))


def test_propagation_2d_mode():
    prop = PropagationNet(channels=3, dim=2, seed=0)
    out = prop(torch.randn(7, 7, 3))
    assert out.shape == (7, 7, 3)
    with pytest.raises(ShapeError):
        prop(torch.randn(7, 7, 7, 3))


# ------------------------------------------------------------ mapping net

def test_mapping_emits_one_pair_per_layer():
    m = MappingNet(in_channels=6, hidden_dim=8, depth=3, code_channels=5, seed=0)
    codes = m(torch.randn(4, 6))
    assert codes.depth == 3
    assert codes.channels == 5
    assert all(g.shape == (4, 5) for g in codes.gammas)
    assert all(b.shape == (4, 5) for b in codes.betas)
    total = sum(g.numel() + b.numel() for g, b in zip(codes.gammas, codes.betas))
    assert total == 4 * 2 * 3 * 5


def test_mapping_layout_gamma_then_beta_per_layer():
    m = MappingNet(in_channels=2, hidden_dim=4, depth=2, code_channels=3, seed=0)
    with torch.no_grad():
        m.layers[-1].weight.zero_()
        m.layers[-1].bias.copy_(torch.arange(12.0))
    codes = m(torch.zeros(1, 2))
    assert torch.equal(codes.gammas[0][0], torch.tensor([0.0, 1.0, 2.0]))
    assert torch.equal(codes.betas[0][0], torch.tensor([3.0, 4.0, 5.0]))
    assert torch.equal(codes.gammas[1][0], torch.tensor([6.0, 7.0, 8.0]))
    assert torch.equal(codes.betas[1][0], torch.tensor([9.0, 10.0, 11.0]))


def test_mapping_rejects_wrong_width():
    m = MappingNet(in_channels=6, seed=0)
    with pytest.raises(ShapeError):
        m(torch.randn(3, 7))


def test_conditioning_codes_validation():
    g = [torch.zeros(2, 3)]
    with pytest.raises(ShapeError):
        ConditioningCodes(g, [])
    with pytest.raises(ShapeError):
        ConditioningCodes(g, [torch.zeros(2, 4)])
    z = ConditioningCodes.zeros(batch=5, depth=2, channels=3)
    assert z.depth == 2 and z.channels == 3
    assert all(torch.equal(t, torch.zeros(5, 3)) for t in z.gammas + z.betas)


# ------------------------------------------------------------- film siren

def test_film_zero_codes_exactly_match_plain_siren():
    plain = Siren(in_dim=1, hidden_dim=32, depth=3, omega=60.0, head="bounded",
                  head_scale=0.05, seed=11)
    film = FilmSiren(in_dim=1, hidden_dim=32, depth=3, omega=60.0,
                     head_scale=0.05, seed=99)
    film.load_state_dict(plain.state_dict())
    x = torch.rand(64, 1) * 2 - 1
    zero = ConditioningCodes.zeros(batch=64, depth=3, channels=32)
    assert torch.equal(film(x, zero), plain(x))
    assert torch.equal(film(x, None), plain(x))


def test_film_gamma_scales_preactivations():
    film = FilmSiren(in_dim=1, hidden_dim=4, depth=1, omega=2.0,
                     head_scale=0.05, seed=0)
    x = torch.rand(6, 1)
    codes = ConditioningCodes([torch.full((6, 4), 2.0)], [torch.zeros(6, 4)])
    got = film(x, codes)
    pre = torch.nn.functional.linear(x, film.hidden[0].weight, film.hidden[0].bias)
    h = torch.sin(2.0 * (2.0 * pre))
    want = (0.05 * torch.tanh(
        torch.nn.functional.linear(h, film.head.weight, film.head.bias))).squeeze(-1)
    assert torch.equal(got, want)


def test_film_beta_shifts_preactivations():
    film = FilmSiren(in_dim=1, hidden_dim=4, depth=1, omega=3.0,
                     head_scale=0.02, seed=1)
    x = torch.rand(5, 1)
    beta = torch.randn(5, 4)
    codes = ConditioningCodes([torch.zeros(5, 4)], [beta])
    got = film(x, codes)
    pre = torch.nn.functional.linear(x, film.hidden[0].weight, film.hidden[0].bias)
    h = torch.sin(3.0 * (pre + beta))
    want = (0.02 * torch.tanh(
        torch.nn.functional.linear(h, film.head.weight, film.head.bias))).squeeze(-1)
    assert torch.equal(got, want)


def test_film_output_bounded():
    # saturated tanh rounds to exactly 1 in float32, so the bound is
    # closed there; unsaturated outputs stay strictly inside
    film = FilmSiren(in_dim=1, hidden_dim=16, depth=2, head_scale=0.05, seed=2)
    x = torch.rand(200, 1) * 2 - 1
    assert bool((film(x).abs() < 0.05).all())
    with torch.no_grad():
        film.head.weight.fill_(50.0)
        film.head.bias.fill_(50.0)
    assert bool((film(x).abs() <= 0.05).all())


def test_film_code_shape_mismatch():
    film = FilmSiren(in_dim=1, hidden_dim=8, depth=2, seed=0)
    x = torch.rand(3, 1)
    with pytest.raises(ShapeError):
        film(x, ConditioningCodes.zeros(3, 1, 8))
    with pytest.raises(ShapeError):
        film(x, ConditioningCodes.zeros(3, 2, 4))
    with pytest.raises(ShapeError):
        film(torch.rand(3, 2), None)


def test_film_invalid_construction():
    with pytest.raises(ConfigError):
        FilmSiren(depth=0)
    with pytest.raises(ConfigError):
        FilmSiren(head_scale=0.0)
    with pytest.raises(ConfigError):
        FilmSiren(omega=-1.0)


# ---------------------------------------------------------- transfer model

def test_transfer_squash_value():
    # the film net sees tanh(f/nu): one nu of base distance maps to
    # tanh(1), deep distances saturate towards +-1
    v = torch.tanh(torch.tensor(1.0, dtype=torch.float64))
    assert abs(float(v) - 0.7615941559557649) < 1e-12


def test_transfer_displacement_plumbing():
    model = build_transfer_model(tiny_transfer_config())
    pts, nrm = random_cloud(40, seed=0)
    grid = model.build_grid((pts, nrm))
    x = torch.rand(9, 3) * 0.6 - 0.3
    got = model.displacement(x, grid)
    f = model.base(x)
    codes = model.mapping(grid.query(x))
    raw = model.film(torch.tanh(f / model.nu).unsqueeze(-1), codes)
    want = attenuation(f, model.nu) * raw
    assert torch.equal(got, want)


def test_transfer_displacement_bounded():
    model = build_transfer_model(tiny_transfer_config())
    pts, nrm = random_cloud(30, seed=1)
    grid = model.build_grid((pts, nrm))
    x = torch.rand(500, 3) * 2 - 1
    assert bool((model.displacement(x, grid).abs() < model.alpha).all())
    # adversarial weights saturate the tanh head; the closed bound holds
    with torch.no_grad():
        for p in model.film.parameters():
            p.mul_(0).add_(torch.randn_like(p) * 10)
    d = model.displacement(x, grid)
    assert bool((d.abs() <= model.alpha).all())


def test_transfer_zero_film_head_reduces_to_base():
    model = build_transfer_model(tiny_transfer_config())
    with torch.no_grad():
        model.film.head.weight.zero_()
        model.film.head.bias.zero_()
    pts, nrm = random_cloud(30, seed=2)
    grid = model.build_grid((pts, nrm))
    x = torch.rand(50, 3) * 2 - 1
    assert torch.equal(model.detail_sdf(x, grid, on_degenerate="zero"),
                       model.base(x))


def test_transfer_displacement_gradient_matches_fd():
    cfg = tiny_transfer_config()
    model = build_transfer_model(cfg, dtype=torch.float64)
    pts, nrm = random_cloud(40, seed=3, dtype=torch.float64)
    grid = model.build_grid((pts, nrm))
    grid.features = grid.features.detach()
    x = torch.tensor([[0.13, -0.21, 0.34]], dtype=torch.float64,
                     requires_grad=True)
    d = model.displacement(x, grid).sum()
    (grad,) = torch.autograd.grad(d, x)
    h = 1e-6
    with torch.no_grad():
        for a in range(3):
            xp = x.detach().clone(); xp[0, a] += h
            xm = x.detach().clone(); xm[0, a] -= h
            fd = float((model.displacement(xp, grid)
                        - model.displacement(xm, grid)) / (2 * h))
            assert abs(float(grad[0, a]) - fd) <= 1e-4 * max(1.0, abs(fd))


def test_transfer_model_component_mismatches():
    cfg = tiny_transfer_config()
    model = build_transfer_model(cfg)
    bad_film = FilmSiren(in_dim=1, hidden_dim=16, depth=2, head_scale=0.10, seed=0)
    with pytest.raises(ConfigError):
        TransferModel(model.base, bad_film, model.encoder, model.propagation,
                      model.mapping, grid=cfg.grid, alpha=0.05, nu=0.02)
    bad_mapping = MappingNet(in_channels=8, hidden_dim=16, depth=3,
                             code_channels=16, seed=0)
    with pytest.raises(ConfigError):
        TransferModel(model.base, model.film, model.encoder, model.propagation,
                      bad_mapping, grid=cfg.grid, alpha=0.05, nu=0.02)
    bad_encoder = PointEncoder(hidden_dim=8, out_channels=5, seed=0)
    with pytest.raises(ConfigError):
        TransferModel(model.base, model.film, bad_encoder, model.propagation,
                      model.mapping, grid=cfg.grid, alpha=0.05, nu=0.02)


def test_transfer_config_validation():
    with pytest.raises(ConfigError):
        TransferConfig(omega_base=0.0)
    with pytest.raises(ConfigError):
        TransferConfig(film_depth=0)
    with pytest.raises(ConfigError):
        GridSettings(resolution=1)
    with pytest.raises(ConfigError):
        GridSettings(dim=4)
    with pytest.raises(ConfigError):
        GridSettings(axis=5)


def test_transfer_defaults_match_recipe():
    cfg = TransferConfig()
    assert cfg.omega_base == 5.0
    assert cfg.base_hidden == 96 and cfg.base_depth == 3
    assert cfg.omega_disp == 60.0
    assert cfg.grid.resolution == 32 and cfg.grid.dim == 3
    assert cfg.alpha == 0.05 and cfg.nu == 0.02


# ----------------------------------------------------------------- bundle

def test_transfer_bundle_round_trip(tmp_path):
    model = build_transfer_model(tiny_transfer_config(seed=4))
    d = str(tmp_path / "bundle")
    model.save_bundle(d)
    back = TransferModel.load_bundle(d)
    assert back.alpha == model.alpha and back.nu == model.nu
    assert back.grid_settings == model.grid_settings
    a, b = model.state_dict(), back.state_dict()
    assert list(a) == list(b)
    for k in a:
        assert torch.equal(a[k], b[k]), k
    pts, nrm = random_cloud(20, seed=5)
    x = torch.rand(6, 3)
    g1, g2 = model.build_grid((pts, nrm)), back.build_grid((pts, nrm))
    assert torch.equal(model.detail_sdf(x, g1, on_degenerate="zero"),
                       back.detail_sdf(x, g2, on_degenerate="zero"))


def test_transfer_bundle_rejects_wrong_manifest(tmp_path):
    model = build_transfer_model(tiny_transfer_config())
    d = str(tmp_path / "bundle")
    model.save_bundle(d)
    (tmp_path / "bundle" / "manifest.json").write_text('{"kind": "other"}')
    with pytest.raises(ParseError):
        TransferModel.load_bundle(d)
    with pytest.raises(ParseError):
        TransferModel.load_bundle(str(tmp_path / "missing"))


# ----------------------------------------------------------------- pipeline

def test_pipeline_stage_order_enforced():
    cfg = tiny_transfer_config()
    tc = TrainConfig(epochs=1, batch_surface=32, batch_offsurface=32)
    pipe = TransferPipeline(config=cfg, base_train=tc, transfer_train=tc)
    cloud = sphere_cloud(32, 0.5, seed=0)
    with pytest.raises(PipelineOrderError):
        pipe.fit_transfer(cloud)
    with pytest.raises(PipelineOrderError):
        pipe.fit_target_base(cloud)
    with pytest.raises(PipelineOrderError):
        pipe.compose()
    pipe.fit_source_base(cloud)
    with pytest.raises(PipelineOrderError):
        pipe.fit_target_base(cloud)


def test_pipeline_transfer_freezes_base_and_trains_stack():
    cfg = tiny_transfer_config()
    tc = TrainConfig(epochs=2, batch_surface=32, batch_offsurface=32)
    pipe = TransferPipeline(config=cfg, base_train=tc, transfer_train=tc)
    cloud = sphere_cloud(64, 0.5, seed=1)
    pipe.fit_source_base(cloud)
    model = pipe.source_model
    base_before = {k: v.clone() for k, v in model.base.state_dict().items()}
    stack_before = {k: v.clone() for k, v in model.state_dict().items()
                    if not k.startswith("base.")}
    result = pipe.fit_transfer(cloud)
    assert result.steps == 2 * 2  # 64 points / 32 per batch, 2 epochs
    for k, v in model.base.state_dict().items():
        assert torch.equal(v, base_before[k]), k
    moved = [k for k, v in model.state_dict().items()
             if not k.startswith("base.") and not torch.equal(v, stack_before[k])]
    assert any(k.startswith("film.") for k in moved)
    assert any(k.startswith("encoder.") for k in moved)
    assert any(k.startswith("mapping.") for k in moved)
    # base params are trainable again afterwards
    assert all(p.requires_grad for p in model.base.parameters())


def test_pipeline_history_columns():
    cfg = tiny_transfer_config()
    tc = TrainConfig(epochs=2, batch_surface=64, batch_offsurface=32)
    pipe = TransferPipeline(config=cfg, base_train=tc, transfer_train=tc)
    cloud = sphere_cloud(64, 0.5, seed=2)
    pipe.fit_source_base(cloud)
    result = pipe.fit_transfer(cloud)
    assert result.history.column("kappa") == [0.0, 0.0]
    for name in ("eikonal", "surface_abs", "normal", "offsurface", "total"):
        col = result.history.column(name)
        assert len(col) == 2 and all(np.isfinite(col))


def test_pipeline_compose_shares_stack_swaps_base():
    cfg = tiny_transfer_config()
    tc = TrainConfig(epochs=1, batch_surface=64, batch_offsurface=32)
    pipe = TransferPipeline(config=cfg, base_train=tc, transfer_train=tc)
    pipe.fit_source_base(sphere_cloud(64, 0.5, seed=3))
    pipe.fit_transfer(sphere_cloud(64, 0.5, seed=3))
    pipe.fit_target_base(sphere_cloud(64, 0.3, seed=4))
    target = pipe.compose()
    assert target.film is pipe.source_model.film
    assert target.encoder is pipe.source_model.encoder
    assert target.mapping is pipe.source_model.mapping
    assert target.base is pipe.target_base
    assert target.base is not pipe.source_model.base


def test_pipeline_convenience_runs_all_stages():
    cfg = tiny_transfer_config()
    tc = TrainConfig(epochs=1, batch_surface=64, batch_offsurface=32)
    pipe, target = transfer_pipeline(sphere_cloud(64, 0.5, seed=5),
                                     sphere_cloud(64, 0.3, seed=6),
                                     config=cfg, base_train=tc,
                                     transfer_train=tc)
    assert isinstance(target, TransferModel)
    field = target.sdf_with_cloud(sphere_cloud(64, 0.3, seed=6))
    out = field(torch.rand(5, 3, dtype=target.dtype))
    assert out.shape == (5,)
    assert bool(torch.isfinite(out).all())


def test_pipeline_grid_subsampling_trains():
    cfg = tiny_transfer_config(grid_points=16)
    tc = TrainConfig(epochs=1, batch_surface=64, batch_offsurface=32)
    pipe = TransferPipeline(config=cfg, base_train=tc, transfer_train=tc)
    cloud = sphere_cloud(64, 0.5, seed=11)
    pipe.fit_source_base(cloud)
    before = {k: v.clone() for k, v in pipe.source_model.encoder.state_dict().items()}
    pipe.fit_transfer(cloud)
    moved = any(not torch.equal(v, before[k])
                for k, v in pipe.source_model.encoder.state_dict().items())
    assert moved  # gradients reach the encoder through the subsampled grid
    with pytest.raises(ConfigError):
        tiny_transfer_config(grid_points=-1)


def test_pipeline_sphere_pretrain_shifts_base_start():
    tc = TrainConfig(epochs=1, batch_surface=32, batch_offsurface=32)
    cloud = sphere_cloud(32, 0.5, seed=12)
    plain = TransferPipeline(config=tiny_transfer_config(),
                             base_train=tc, transfer_train=tc)
    plain.fit_source_base(cloud)
    warmed = TransferPipeline(
        config=tiny_transfer_config(pretrain_radius=0.5, pretrain_steps=40),
        base_train=tc, transfer_train=tc)
    warmed.fit_source_base(cloud)
    same = all(torch.equal(v, dict(warmed.source_model.base.state_dict())[k])
               for k, v in plain.source_model.base.state_dict().items())
    assert not same
    with pytest.raises(ConfigError):
        tiny_transfer_config(pretrain_radius=1.5)
    with pytest.raises(ConfigError):
        tiny_transfer_config(pretrain_steps=-1)


def test_pipeline_accepts_separate_base_clouds():
    cfg = tiny_transfer_config()
    tc = TrainConfig(epochs=1, batch_surface=64, batch_offsurface=32)
    pipe, target = transfer_pipeline(
        sphere_cloud(64, 0.5, seed=7), sphere_cloud(64, 0.3, seed=8),
        source_base_cloud=sphere_cloud(64, 0.5, seed=9),
        target_base_cloud=sphere_cloud(64, 0.3, seed=10),
        config=cfg, base_train=tc, transfer_train=tc)
    assert pipe.target_base is target.base
