import json
import math

import numpy as np
import pytest

from noiseflow.baselines import GaussianModel, NlfModel, gaussian_fit
from noiseflow.data import SyntheticSpec, generate_synthetic, true_entropy_per_dim
from noiseflow.evaluation import (
    emit_plot_data,
    emit_report,
    evaluate,
    NoiseHistogram,
    histogram,
    kl_divergence,
    likelihood_improvement,
    read_report,
)


def test_histogram_counts_and_clipping():
    h = histogram([-1.0, -0.05, 0.05, 0.3], r=0.2, bins=4)
    assert h.counts.tolist() == [1, 1, 1, 1]
    assert h.clipped == 2
    assert h.total == 4


def test_kl_identical_is_zero(gen):
    h = histogram(0.05 * gen.standard_normal(5000))
    assert kl_divergence(h, h) == pytest.approx(0.0, abs=1e-12)


def test_kl_non_negative_and_asymmetric(gen):
    p = histogram(0.03 * gen.standard_normal(5000))
    q = histogram(0.06 * gen.standard_normal(5000))
    assert kl_divergence(p, q) > 0
    assert kl_divergence(p, q) != pytest.approx(kl_divergence(q, p))


def test_kl_edge_mismatch():
    with pytest.raises(ValueError, match="edges"):
        kl_divergence(histogram([0.0], bins=8), histogram([0.0], bins=16))


def test_kl_disjoint_is_large_but_finite():
    p = histogram([-0.15] * 100, bins=8)
    q = histogram([0.15] * 100, bins=8)
    kl = kl_divergence(p, q)
    assert math.isfinite(kl) and kl > 20


@pytest.mark.parametrize("delta,expected", [(0.69, 0.994), (0.42, 0.522), (0.416, 0.516), (0.0, 0.0)])
def test_likelihood_improvement(delta, expected):
    assert likelihood_improvement(delta, 0.0) == pytest.approx(expected, abs=0.005)


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(SyntheticSpec(patches_per_cell=4, shape=(8, 8, 4), seed=2))


def test_evaluate_orders_true_nlf_first(tiny):
    models = {"nlf": NlfModel(), "gaussian": gaussian_fit(tiny.noise)}
    rep = evaluate(models, tiny, rng=1)
    assert rep.models["nlf"]["nll_per_dim"] < rep.models["gaussian"]["nll_per_dim"]
    imp = rep.improvements["gaussian"]
    assert imp["reference"] == "nlf"
    assert imp["likelihood_improvement"] > 0
    assert len(rep.breakdown["nlf"]) == 12
    assert sum(c["count"] for c in rep.breakdown["nlf"]) == len(tiny)


def test_evaluate_deterministic(tiny):
    m = {"g": GaussianModel(1e-3)}
    a = evaluate(m, tiny, rng=7)
    b = evaluate(m, tiny, rng=7)
    assert a.records == b.records


def test_evaluate_names_failing_model(tiny):
    tiny2 = tiny.subset(np.arange(3))
    tiny2.nlf_beta1[:] = np.nan
    with pytest.raises(ValueError, match="nlf"):
        evaluate({"nlf": NlfModel()}, tiny2)


def test_report_round_trip(tiny, tmp_path):
    rep = evaluate({"g": GaussianModel(1e-3)}, tiny, rng=0)
    path = tmp_path / "r.json"
    emit_report(rep, path, config={"seed": 0})
    assert json.loads(path.read_text())["config"] == {"seed": 0}
    assert read_report(path) == rep
    emit_report(rep, tmp_path / "r.csv", fmt="csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == len(tiny) + 1
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path / "r.x", fmt="xml")


def test_plot_data_columns(tmp_path):
    trace = [{"step": 1, "train_nll": 0.5, "test_nll": None, "w_0": 0.1, "b1": -5.0, "v_100": 1.0}]
    emit_plot_data(trace, tmp_path / "t.csv")
    head = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert head == "step,train_nll,test_nll,b1,v_100,w_0"


def test_kl_closed_form():
    edges = np.array([-0.2, 0.0, 0.2])
    p = NoiseHistogram(edges, np.array([2, 2]))
    q = NoiseHistogram(edges, np.array([1, 3]))
    assert kl_divergence(p, q) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-9)
    assert kl_divergence(p, q) == pytest.approx(0.14384, abs=1e-5)


def test_kl_random_pairs_non_negative(gen):
    for _ in range(100):
        p = histogram(gen.normal(0, gen.uniform(0.01, 0.1), 500), bins=32)
        q = histogram(gen.normal(0, gen.uniform(0.01, 0.1), 500), bins=32)
        assert kl_divergence(p, q) >= 0


def test_exact_generator_matches_entropy():
    ds = generate_synthetic(SyntheticSpec(patches_per_cell=10, shape=(16, 16, 4), seed=8))
    rep = evaluate({"nlf": NlfModel()}, ds)
    assert abs(rep.models["nlf"]["nll_per_dim"] - true_entropy_per_dim(ds).mean()) < 0.01


def test_empty_model_list(tiny):
    assert evaluate({}, tiny).models == {}
