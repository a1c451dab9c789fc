import math

import numpy as np
import pytest

from noiseflow import layers as layers_mod
from noiseflow.config import RunConfig
from noiseflow.data import SyntheticSpec, generate_synthetic
from noiseflow.layers import ConditioningContext
from noiseflow.model import (
    ArchitectureError,
    ArchitectureSpec,
    CheckpointError,
    build,
    expected_param_count,
    load,
    save,
)
from noiseflow.numerics import RngStream, adam_step, finite_diff_gradient
from noiseflow.training import train

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def perturb(model, gen, scale=0.2):
    for _, p in model.params.items():
        p.value += scale * gen.standard_normal(p.value.shape)


# -- architecture strings ------------------------------------------------------

@pytest.mark.parametrize("text", ["S-G", "S-G-CAM", "S-Ax1-G-Ax1-CAM", "S-Ax4-G-Ax4-CAM", "Ax2", "G-S-Ax0"])
def test_arch_round_trip(text):
    spec = ArchitectureSpec.parse(text)
    assert spec.render() == text
    assert ArchitectureSpec.parse(spec.render()) == spec


@pytest.mark.parametrize("text,pos", [("S-S", 2), ("S-G-G", 4), ("CAM-S", 0), ("S-Bx4", 2), ("S-", 1), ("", 0), ("S-Ax", 2)])
def test_arch_errors(text, pos):
    with pytest.raises(ArchitectureError) as err:
        ArchitectureSpec.parse(text)
    assert err.value.position == pos


# -- parameter counts ---------------------------------------------------------------

@pytest.mark.parametrize("text,count", [
    ("S-G", 6),
    ("S-G-CAM", 11),
    ("S-Ax4-G-Ax4-CAM", 2 + (4 + 5) + 8 * 16 + 8 * (7 * 32 + 4)),
])
def test_param_counts(text, count):
    model = build(text)
    assert model.param_count() == count == expected_param_count(model.spec)


def test_full_model_under_budget():
    assert build("S-Ax4-G-Ax4-CAM").param_count() == 1963 < 2500


def test_layer_count_s_g():
    model = build("S-G")
    assert [l.kind for l in model.layers] == ["S", "G"]


# -- likelihood ------------------------------------------------------------------------

def test_identity_flow_nll_is_base_measure():
    model = build("S-G")
    ctx = ConditioningContext(np.zeros((1, 4, 4, 4)), iso=200, camera_id=0)
    model.nearest_iso = True
    nll = model.nll_per_dim(np.zeros((1, 4, 4, 4)), ctx)
    assert nll[0] == pytest.approx(HALF_LOG_2PI, abs=1e-12)
    assert nll[0] == pytest.approx(0.9189, abs=1e-4)


def test_identity_flow_nll_matches_quadratic(gen):
    model = build("S-G", iso_set=(200, 400))
    n = gen.standard_normal((3, 4, 4, 4))
    ctx = ConditioningContext(np.zeros_like(n), iso=200, camera_id=0)
    expected = HALF_LOG_2PI + 0.5 * (n**2).reshape(3, -1).mean(axis=1)
    assert np.allclose(model.nll_per_dim(n, ctx), expected, atol=1e-12)


@pytest.mark.parametrize("arch", ["S-G", "S-G-CAM", "S-Ax1-G-Ax1-CAM", "S-Ax4-G-Ax4-CAM"])
def test_sample_nll_self_consistency(arch, gen, make_ctx):
    model = build(arch, rng=3, camera_count=3, scale_clamp=2.0)
    perturb(model, gen, 0.1)
    ctx = make_ctx(4, (4, 4, 4))
    eps = gen.standard_normal((4, 4, 4, 4))
    noise, logdet_f = model.forward(eps, ctx)
    expected = 0.5 * (eps**2).sum(axis=(1, 2, 3)) + 64 * HALF_LOG_2PI + logdet_f
    assert np.allclose(model.nll(noise, ctx), expected, atol=1e-9)
    z, _ = model.inverse(noise, ctx)
    assert np.max(np.abs(z - eps)) < 1e-9


def test_nll_reports_failing_layer(make_ctx):
    model = build("S-Ax1-G", rng=0, camera_count=3)
    model.params["step0.coupling.bias2"][:2] = -1e4
    ctx = make_ctx(1, (2, 2, 4))
    with pytest.raises(FloatingPointError, match="layer"):
        model.nll(np.ones((1, 2, 2, 4)), ctx)


def test_nll_shape_mismatch(make_ctx):
    with pytest.raises(ValueError):
        build("S-G").nll(np.zeros((1, 2, 2, 4)), make_ctx(1, (4, 4, 4)))


# -- gradients -----------------------------------------------------------------------------

@pytest.mark.parametrize("arch", ["S-G", "S-G-CAM", "S-Ax1-G-Ax1-CAM"])
@pytest.mark.parametrize("amplified", [False, True])
def test_loss_gradient_matches_finite_differences(arch, amplified, gen, make_ctx):
    model = build(arch, rng=5, camera_count=3, scale_clamp=2.0)
    perturb(model, gen, 0.3)
    ctx = make_ctx(6, (2, 2, 4), amplified=amplified)
    noise = 0.1 * gen.standard_normal((6, 2, 2, 4))
    model.params.zero_grad()
    model.loss_and_grad(noise, ctx)
    analytic = model.params.split_flat(model.params.flat_grads())
    numeric = model.params.split_flat(finite_diff_gradient(lambda p: model.loss(noise, ctx), model.params, 1e-5))
    for name in analytic:
        a, f = analytic[name], numeric[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(f))
        if denom < 1e-10:
            continue
        assert np.linalg.norm(a - f) / denom < 1e-4, name


def test_signal_b2_gradient_at_identity_init(gen, make_ctx):
    model = build("S-Ax1-G-Ax1-CAM", rng=0, camera_count=3)
    ctx = make_ctx(4, (2, 2, 4))
    noise = gen.standard_normal((4, 2, 2, 4))
    model.params.zero_grad()
    model.loss_and_grad(noise, ctx)
    fd = model.params.split_flat(finite_diff_gradient(lambda p: model.loss(noise, ctx), model.params, 1e-5))
    assert model.params.grad("signal.b2")[0] == pytest.approx(fd["signal.b2"][0], rel=1e-4)


def test_zero_init_coupling_output_gets_gradient(gen, make_ctx):
    model = build("S-Ax1-G", rng=0, camera_count=3)
    ctx = make_ctx(4, (2, 2, 4))
    noise = gen.standard_normal((4, 2, 2, 4))
    model.params.zero_grad()
    model.loss_and_grad(noise, ctx)
    g = model.params.grad("step0.coupling.W2")
    fd = model.params.split_flat(finite_diff_gradient(lambda p: model.loss(noise, ctx), model.params, 1e-5))
    assert np.linalg.norm(g) > 1e-3
    assert np.allclose(g, fd["step0.coupling.W2"], rtol=1e-4, atol=1e-9)


def test_fused_and_numpy_paths_agree(gen, make_ctx, monkeypatch):
    if layers_mod._kernels is None:
        pytest.skip("numba unavailable")
    model = build("S-Ax2-G-Ax2-CAM", rng=1, camera_count=3, scale_clamp=2.0)
    perturb(model, gen, 0.3)
    ctx = make_ctx(5, (3, 3, 4))
    noise = 0.1 * gen.standard_normal((5, 3, 3, 4))
    results = []
    for flag in (True, False):
        monkeypatch.setattr(layers_mod, "USE_FUSED_KERNELS", flag)
        model.params.zero_grad()
        loss = model.loss_and_grad(noise, ctx)
        results.append((loss, model.params.flat_grads(), model.nll(noise, ctx)))
    assert results[0][0] == pytest.approx(results[1][0], abs=1e-12)
    assert np.allclose(results[0][1], results[1][1], rtol=1e-10, atol=1e-13)
    assert np.allclose(results[0][2], results[1][2], atol=1e-10)


# -- sampling ----------------------------------------------------------------------------------

def test_sample_variance_matches_gaussian():
    sigma2 = 0.04
    model = build("S-G", iso_set=(200,))
    model.params["signal.b1"][0] = -20.0
    model.params["signal.b2"][0] = math.log(sigma2)
    ctx = ConditioningContext(np.full((25, 20, 50, 4), 0.5), iso=200, camera_id=0)
    noise = model.sample(ctx, RngStream(11))
    assert noise.var() == pytest.approx(sigma2, rel=0.02)


def test_identity_model_sample_is_base_draw():
    model = build("S-G", iso_set=(200,))
    model.params["signal.b1"][0] = -np.inf
    ctx = ConditioningContext(np.zeros((2, 3, 3, 4)), iso=200, camera_id=0)
    eps = RngStream(4).generator.standard_normal((2, 3, 3, 4))
    assert np.allclose(model.sample(ctx, RngStream(4)), eps, atol=1e-15)


def test_sample_deterministic(make_ctx):
    model = build("S-Ax1-G-Ax1-CAM", rng=2, camera_count=3)
    ctx = make_ctx(2, (4, 4, 4))
    assert np.array_equal(model.sample(ctx, RngStream(9)), model.sample(ctx, RngStream(9)))


# -- checkpoints ---------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, gen, make_ctx):
    model = build("S-Ax2-G-Ax2-CAM", rng=4, camera_count=3, scale_clamp=2.0)
    perturb(model, gen)
    model.config = {"seed": 3}
    path = tmp_path / "m.nflow"
    save(model, path)
    again = load(path)
    assert again.spec == model.spec
    assert again.config == {"seed": 3}
    for name in model.params:
        assert np.array_equal(model.params[name], again.params[name])
    for _ in range(10):
        ctx = make_ctx(1, (4, 4, 4))
        n = 0.1 * gen.standard_normal((1, 4, 4, 4))
        assert model.nll(n, ctx)[0] - again.nll(n, ctx)[0] == 0.0


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.nflow"
    save(build("S-G"), path)
    raw = bytearray(path.read_bytes())
    raw[0:2] = b"XX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.nflow"
    save(build("S-G-CAM"), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load(path)


def test_checkpoint_iso_mismatch(tmp_path):
    path = tmp_path / "m.nflow"
    save(build("S-G"), path)
    with pytest.raises(CheckpointError, match="ISO set mismatch"):
        load(path, iso_set=(100, 200, 400, 800, 1600))


def test_checkpoint_version(tmp_path):
    path = tmp_path / "m.nflow"
    save(build("S-G"), path)
    raw = bytearray(path.read_bytes())
    raw[7] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load(path)


# -- training ---------------------------------------------------------------------------------------

def test_smoothed_training_nll_decreases():
    ds = generate_synthetic(SyntheticSpec(psi=(1.0,), iso_set=(400,), patches_per_cell=16, shape=(8, 8, 4), seed=2))
    noise, ctx = ds.batch()
    model = build("S-G", iso_set=(400,))
    losses = []
    for t in range(1, 201):
        model.params.zero_grad()
        losses.append(model.loss_and_grad(noise, ctx))
        adam_step(model.params, lr=0.01, t=t)
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) < 0)


def test_trained_s_g_reaches_entropy():
    spec = SyntheticSpec(psi=(1.0,), iso_set=(800,), patches_per_cell=200, shape=(16, 16, 4), seed=3)
    ds = generate_synthetic(spec)
    model = build("S-G", iso_set=(800,))
    cfg = RunConfig(arch="S-G", iso_set=(800,), lr=0.05, epochs=60, batch_size=20, log_every=10**9, scalar_lr_scale=1.0,
                    lr_final_fraction=0.01)
    train(model, ds, cfg)
    noise, ctx = ds.batch()
    from noiseflow.data import true_entropy_per_dim
    assert abs(model.nll_per_dim(noise, ctx).mean() - true_entropy_per_dim(ds).mean()) < 0.01


def test_zero_epochs_keeps_initialisation():
    ds = generate_synthetic(SyntheticSpec(patches_per_cell=2, shape=(4, 4, 4)))
    model = build("S-G-CAM", camera_count=3)
    before = model.params.flat_values()
    train(model, ds, RunConfig(arch="S-G-CAM", cameras=3, epochs=0))
    assert np.array_equal(before, model.params.flat_values())
