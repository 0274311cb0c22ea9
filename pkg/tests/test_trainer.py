import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsr.field import FieldGrads, GaussianField, Grid, init_from_volume, voxelize_array
from ctsr.geometry import default_geometry
from ctsr.projector import Projection, ProjectionSet, project_all
from ctsr.trainer import (AdamState, GradAccumulator, ResidualTargets, TrainConfig, TrainingError, adam_step,
                          compose_prediction, densify_and_prune, final_volume, loss_recon, loss_tv, train)
from ctsr.volume import VoxelVolume, make_phantom, shepp_logan_specs

from .oracles import central_diff, rel_err, scalar_adam


def small_field(rng, n, **kw):
    return GaussianField(rng.uniform(-0.5, 0.5, (n, 3)), np.log(rng.uniform(0.02, 0.2, (n, 3))),
                         rng.normal(size=(n, 4)), rng.uniform(-1, 1, n), **kw)


# -- config -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=100, densify_from=200, densify_until=100)
    with pytest.raises(ValueError):
        TrainConfig(lr_density=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="max")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"iterations": 10, "warmup": 3})
    TrainConfig(iterations=0)


def test_config_round_trip():
    cfg = TrainConfig(iterations=300, densify_from=10, densify_until=200, lambda2=0.1)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_learning_rate_decay_endpoints():
    cfg = TrainConfig(iterations=1000, densify_until=1000)
    assert cfg.learning_rates(0)["position"] == pytest.approx(2e-4)
    assert cfg.learning_rates(1000)["raw_density"] == pytest.approx(1e-4)
    assert cfg.learning_rates(500)["log_scale"] == pytest.approx(5e-3 * math.sqrt(0.1))


# -- targets and losses -------------------------------------------------------

def _sets(rng, n=3):
    g = default_geometry(16, n)
    y = ProjectionSet(g, [Projection(rng.random((24, 24)), i) for i in range(n)])
    lr = ProjectionSet(g, [Projection(rng.random((24, 24)), i) for i in range(n)])
    return g, y, lr


def test_residual_targets_recompose_exactly(rng):
    g, y, lr = _sets(rng)
    t = ResidualTargets(y, lr, VoxelVolume(np.zeros((16, 16, 16))))
    for k in range(3):
        assert np.array_equal(t.y_hat[k].data + lr[k].data, t.y[k].data)
        np.testing.assert_allclose(t.y[k].data, y[k].data, atol=1e-15)
    other = ProjectionSet(default_geometry(16, 4), [Projection(np.zeros((24, 24)), i) for i in range(4)])
    with pytest.raises(ValueError):
        ResidualTargets(other, lr, VoxelVolume(np.zeros((16, 16, 16))))


def test_compose_prediction(rng):
    a, b = rng.random((4, 5)), rng.random((4, 5))
    np.testing.assert_array_equal(compose_prediction(a, b), a + b)
    assert compose_prediction(Projection(a, 3), b).angle_index == 3
    with pytest.raises(ValueError):
        compose_prediction(a, rng.random((5, 4)))


def test_loss_recon_examples(rng):
    y = rng.random((16, 16))
    out = loss_recon(y, y, y * 0, y * 0)
    assert out.total == 0.0 and out.dssim == pytest.approx(0.0, abs=1e-12)
    off = loss_recon(y, y + 0.1, y * 0, y * 0 + 0.1, lambda1=0.0)
    assert off.l1 == pytest.approx(0.1) and off.l_res == pytest.approx(0.1) and off.total == pytest.approx(0.2)
    with pytest.raises(ValueError):
        loss_recon(y, y, y, y[:4])


@pytest.mark.parametrize("seed", range(3))
def test_loss_recon_gradient(seed):
    rng = np.random.default_rng(seed)
    y, lr = rng.random((12, 13)), rng.random((12, 13))
    y_hat = y - lr
    x_hat = rng.normal(scale=0.3, size=(12, 13))

    def loss():
        return loss_recon(y, x_hat + lr, y_hat, x_hat, 0.5).total

    g = loss_recon(y, x_hat + lr, y_hat, x_hat, 0.5).grad
    assert rel_err(g, central_diff(loss, x_hat)) < 1e-4


def test_loss_tv_examples(rng):
    ramp = np.broadcast_to(np.arange(4.0)[:, None, None], (4, 4, 4)).copy()
    value, _ = loss_tv(ramp)
    assert value == pytest.approx(1.0 / 3.0)
    assert loss_tv(np.full((3, 3, 3), 0.4))[0] == 0.0
    with pytest.raises(ValueError):
        loss_tv(np.zeros((1, 4, 4)))


@pytest.mark.parametrize("seed", range(3))
def test_loss_tv_gradient(seed):
    v = np.random.default_rng(seed).random((5, 4, 6))
    _, g = loss_tv(v)
    assert rel_err(g, central_diff(lambda: loss_tv(v)[0], v)) < 1e-6


# -- Adam ---------------------------------------------------------------------

def test_adam_matches_scalar_oracle():
    cfg = TrainConfig(iterations=50, densify_from=0, densify_until=50)
    fld = GaussianField([[0, 0, 0]], [[-2.0] * 3], [[1, 0, 0, 0]], [0.7])
    state = AdamState.for_field(fld)
    target = -0.3

    def grad(x):
        return 2 * (x - target) + math.sin(3 * x)

    for it in range(1, 51):
        g = FieldGrads.zeros(1)
        g.raw_density[0] = grad(fld.raw_density[0])
        adam_step(fld, g, state, cfg, it)
    expected = scalar_adam(grad, 0.7, lambda t: cfg.learning_rates(t)["raw_density"], 50)
    assert fld.raw_density[0] == pytest.approx(expected, rel=1e-12)
    assert np.array_equal(fld.position, np.zeros((1, 3)))


def test_adam_isotropic_ties_scales(rng):
    cfg = TrainConfig(iterations=10, densify_from=0, densify_until=10)
    fld = GaussianField([[0, 0, 0]], [[-2.0] * 3], [[1, 0, 0, 0]], [0.5], isotropic=True)
    g = FieldGrads.zeros(1)
    g.log_scale[0] = [1.0, -3.0, 0.5]
    adam_step(fld, g, AdamState.for_field(fld), cfg, 1)
    assert len(set(fld.log_scale[0])) == 1 and fld.log_scale[0, 0] > -2.0


def test_adam_clamps_scale_and_normalizes_rotation():
    cfg = TrainConfig(iterations=10, densify_from=0, densify_until=10, lr_scale=10.0, lr_rotation=0.5)
    fld = GaussianField([[0, 0, 0]], [[-0.05] * 3], [[1, 0, 0, 0]], [0.5])
    g = FieldGrads.zeros(1)
    g.log_scale[0] = -1.0
    g.rotation[0] = [0.0, 1.0, -2.0, 0.3]
    adam_step(fld, g, AdamState.for_field(fld), cfg, 1)
    assert np.all(fld.log_scale == 0.0)
    assert np.linalg.norm(fld.rotation[0]) == pytest.approx(1.0)


def test_adam_rejects_non_finite():
    cfg = TrainConfig(iterations=10, densify_from=0, densify_until=10)
    fld = GaussianField([[0, 0, 0]], [[-2.0] * 3], [[1, 0, 0, 0]], [0.5])
    g = FieldGrads.zeros(1)
    g.position[0, 1] = np.nan
    with pytest.raises(TrainingError):
        adam_step(fld, g, AdamState.for_field(fld), cfg, 1)


# -- adaptive control ---------------------------------------------------------

def _accum(n, screen, position=None):
    acc = GradAccumulator.zeros(n)
    acc.screen[:] = screen
    acc.count[:] = 1
    if position is not None:
        acc.position[:] = position
    return acc


def test_prune_removes_near_zero_densities():
    cfg = TrainConfig()
    fld = GaussianField(np.zeros((4, 3)), np.full((4, 3), -3.0), np.tile([1.0, 0, 0, 0], (4, 1)),
                        [0.5, 5e-6, -5e-6, -0.2])
    out, acc, stats = densify_and_prune(fld, _accum(4, 0.0), None, cfg)
    assert stats.pruned == 2 and out.raw_density.tolist() == [0.5, -0.2]
    assert len(acc.screen) == 2 and not acc.count.any()


def test_all_zero_densities_empty_the_field():
    cfg = TrainConfig()
    fld = GaussianField(np.zeros((5, 3)), np.full((5, 3), -3.0), np.tile([1.0, 0, 0, 0], (5, 1)), np.zeros(5))
    out, _, stats = densify_and_prune(fld, _accum(5, 1.0), AdamState.for_field(fld), cfg)
    assert len(out) == 0 and stats.pruned == 5 and stats.split == stats.cloned == 0


def test_split_geometry():
    cfg = TrainConfig(grad_threshold=1e-3)
    s = [0.2, 0.05, 0.04]
    c, h = math.cos(0.3), math.sin(0.3)
    q = [c, 0, 0, h]                                  # rotation by 0.6 rad about z
    fld = GaussianField([[0.1, 0.2, 0.3]], [np.log(s)], [q], [0.8])
    out, _, stats = densify_and_prune(fld, _accum(1, 1.0), None, cfg)
    assert stats.split == 1 and len(out) == 2
    axis = np.array([math.cos(0.6), math.sin(0.6), 0.0])
    np.testing.assert_allclose(out.position[0], [0.1, 0.2, 0.3] + 0.5 * 0.2 * axis, atol=1e-12)
    np.testing.assert_allclose(out.position[1], [0.1, 0.2, 0.3] - 0.5 * 0.2 * axis, atol=1e-12)
    np.testing.assert_allclose(np.exp(out.log_scale), np.array([s, s]) / 1.6, rtol=1e-12)
    assert out.raw_density.tolist() == [0.8, 0.8]


def test_clone_moves_against_accumulated_gradient():
    cfg = TrainConfig(grad_threshold=1e-3)
    fld = GaussianField([[0.0, 0.0, 0.0]], [[math.log(0.01)] * 3], [[1, 0, 0, 0]], [0.3])
    out, _, stats = densify_and_prune(fld, _accum(1, 1.0, [[0.0, 3.0, 4.0]]), None, cfg)
    assert stats.cloned == 1 and len(out) == 2
    np.testing.assert_array_equal(out.position[0], [0, 0, 0])
    np.testing.assert_allclose(out.position[1], -0.5 * 0.01 * np.array([0, 0.6, 0.8]), atol=1e-15)
    np.testing.assert_array_equal(out.log_scale[1], out.log_scale[0])


def test_cap_keeps_highest_gradients():
    cfg = TrainConfig(grad_threshold=1e-3)
    n = 6
    fld = GaussianField(np.zeros((n, 3)), np.full((n, 3), math.log(0.01)), np.tile([1.0, 0, 0, 0], (n, 1)),
                        np.arange(1, n + 1) * 0.1, max_count=8)
    screen = np.array([5.0, 1.0, 4.0, 0.5, 3.0, 2.0])
    out, _, stats = densify_and_prune(fld, _accum(n, screen), None, cfg)
    assert len(out) == 8 and stats.cloned == 2 and stats.capped == 4
    np.testing.assert_allclose(sorted(out.raw_density[n:]), [0.1, 0.3])


def test_config_cap_applies_to_roomier_field():
    n = 6
    fld = GaussianField(np.zeros((n, 3)), np.full((n, 3), math.log(0.01)), np.tile([1.0, 0, 0, 0], (n, 1)),
                        np.arange(1, n + 1) * 0.1)
    out, _, stats = densify_and_prune(fld, _accum(n, np.ones(n)), None,
                                      TrainConfig(grad_threshold=1e-3, max_count=7))
    assert len(out) == 7 and stats.capped == 5


def test_moments_follow_their_gaussians():
    cfg = TrainConfig(grad_threshold=1e-3)
    fld = GaussianField(np.zeros((3, 3)), np.full((3, 3), math.log(0.01)), np.tile([1.0, 0, 0, 0], (3, 1)),
                        [0.5, 0.0, 0.7])
    state = AdamState.for_field(fld)
    state.m["raw_density"][:] = [1.0, 2.0, 3.0]
    out, _, _ = densify_and_prune(fld, _accum(3, [0.0, 0.0, 1.0]), state, cfg)
    assert state.m["raw_density"].tolist() == [1.0, 3.0, 3.0]
    assert out.raw_density.tolist() == [0.5, 0.7, 0.7]


@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40), st.integers(1, 60))
def test_densify_invariants(seed, n, cap_extra):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-1, 1, n) * rng.choice([1.0, 1e-6], n)
    fld = GaussianField(rng.uniform(-1, 1, (n, 3)), np.log(rng.uniform(0.005, 0.1, (n, 3))),
                        rng.normal(size=(n, 4)), raw, max_count=n + cap_extra // 3)
    cfg = TrainConfig(grad_threshold=0.5)
    out, acc, _ = densify_and_prune(fld, _accum(n, rng.random(n), rng.normal(size=(n, 3))),
                                    AdamState.for_field(fld), cfg)
    assert len(out) <= fld.max_count
    assert not np.any(np.abs(out.raw_density) < 1e-5)
    assert len(acc.screen) == len(out)


# -- training loop ------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_problem():
    n = 16
    gt = make_phantom(shepp_logan_specs(), (n, n, n), (2.0 / n,) * 3)
    up = VoxelVolume(np.clip(gt.data * 0.8, 0, 1), gt.spacing)
    geom = default_geometry(n, 8)
    return gt, up, geom, project_all(gt, geom), project_all(up, geom)


def _train(problem, y=None, **kw):
    gt, up, geom, gt_p, up_p = problem
    fld = init_from_volume(up, n_init=300, seed=0)
    opts = dict(iterations=60, densify_from=20, densify_until=60, densify_interval=20, tv_crop=8,
                grad_threshold=1e-4)
    opts.update(kw)
    return train(fld, ResidualTargets(y or gt_p, up_p, up), TrainConfig(**opts))


def test_training_reduces_projection_loss(tiny_problem):
    res = _train(tiny_problem, log_interval=10)
    first, last = res.history[0]["total"], res.history[-1]["total"]
    assert last < first
    assert res.volume.dims == (16, 16, 16)


def test_zero_residual_stays_zero(tiny_problem):
    gt, up, geom, _, up_p = tiny_problem
    res = _train(tiny_problem, y=up_p)
    grid = Grid(up.dims, geom.volume_extent)
    assert np.max(np.abs(voxelize_array(res.field, grid))) < 1e-2
    np.testing.assert_allclose(res.volume.data, up.data, atol=1e-2)


def test_training_is_deterministic(tiny_problem):
    a = _train(tiny_problem, iterations=30, densify_from=10, densify_until=30, densify_interval=10)
    b = _train(tiny_problem, iterations=30, densify_from=10, densify_until=30, densify_interval=10)
    assert np.array_equal(a.field.position, b.field.position)
    assert np.array_equal(a.volume.data, b.volume.data)
    assert a.history == b.history


def test_full_softplus_mode_runs(tiny_problem):
    gt, up, geom, gt_p, up_p = tiny_problem
    fld = init_from_volume(up, n_init=300, residual_mode=False, activation="softplus")
    cfg = TrainConfig(iterations=20, densify_from=10, densify_until=20, densify_interval=10, tv_crop=8,
                      residual=False)
    res = train(fld, ResidualTargets(gt_p, up_p, up), cfg)
    assert np.all(res.field.density() > 0)
    assert np.all((res.volume.data >= 0) & (res.volume.data <= 1))


def test_log_and_checkpoints(tiny_problem, tmp_path):
    gt, up, geom, gt_p, up_p = tiny_problem
    fld = init_from_volume(up, n_init=200)
    cfg = TrainConfig(iterations=20, densify_from=10, densify_until=20, densify_interval=10, tv_crop=8,
                      log_interval=5, checkpoint_interval=10)
    train(fld, ResidualTargets(gt_p, up_p, up), cfg, log_path=tmp_path / "log.jsonl", checkpoint_dir=tmp_path)
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [e["iter"] for e in lines] == [5, 10, 15, 20]
    assert {"total", "l1", "l_res", "dssim", "tv", "count", "lr_position"} <= set(lines[0])
    assert (tmp_path / "field_000010.f32raw").exists() and (tmp_path / "field_000020.json").exists()


def test_final_volume_adds_base_and_clips():
    fld = GaussianField([[0, 0, 0]], [[math.log(0.3)] * 3], [[1, 0, 0, 0]], [2.0])
    base = VoxelVolume(np.full((8, 8, 8), 0.5))
    out = final_volume(fld, base, Grid((8, 8, 8)))
    assert out.data.max() == 1.0 and out.data.min() >= 0.5
    assert np.array_equal(final_volume(GaussianField.empty(), base, Grid((8, 8, 8))).data, base.data)
