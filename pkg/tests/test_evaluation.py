import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from e4elab import evaluation as ev
from e4elab.editing import EditDirection, apply_edit
from e4elab.errors import InvalidArgument, NumericError
from e4elab.latent_geometry import interpolate, variance_metric
from e4elab.objectives import Embedder, _frozen
from e4elab.scenes import SceneSpec, render_array, sample_specs

import oracles
from oracles import lookup_codec, swd_oracle_case

K, D = oracles.LOOKUP_K, oracles.LOOKUP_D


def unit(v):
    return v / np.linalg.norm(v)


@pytest.fixture(scope="module")
def emb():
    torch.manual_seed(0)
    return _frozen(Embedder(16, widths=(4, 8, 8)).double())


# -- reports ---------------------------------------------------------------------

def test_metric_report_validation_and_csv_roundtrip():
    rows = [ev.MetricReport("l2", 0.125, 512, "A", 0), ev.MetricReport("lec:hue", 1 / 3, 512, "D", 2)]
    text = ev.reports_to_csv(rows)
    assert text.splitlines()[0] == "metric,value,n,config,seed"
    assert ev.reports_from_csv(text) == rows
    assert ev.reports_to_csv([]) == "metric,value,n,config,seed\n"
    with pytest.raises(NumericError):
        ev.MetricReport("x", float("nan"), 1)
    with pytest.raises(InvalidArgument):
        ev.MetricReport("x", 1.0, 0)


# -- distortion --------------------------------------------------------------------

def test_distortion_examples(emb):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(5, 8, 8, 3))
    assert ev.distortion_metrics(x, x, emb) == {"l2": 0.0, "perceptual": 0.0}
    assert ev.distortion_metrics(x, x + 0.1, emb)["l2"] == pytest.approx(0.01, rel=1e-12)
    y = rng.uniform(-1, 1, size=x.shape)
    batched = ev.distortion_metrics(x, y, emb)
    single = [ev.distortion_metrics(a, b, emb) for a, b in zip(x, y)]
    for key in ("l2", "perceptual"):
        assert batched[key] == pytest.approx(np.mean([s[key] for s in single]), rel=1e-9)
    with pytest.raises(InvalidArgument):
        ev.distortion_metrics(x, y[:3], emb)


# -- SWD ------------------------------------------------------------------------------

def test_swd_examples():
    assert ev.swd(np.zeros((1, 1)), np.full((1, 1), 3.0), projections=np.ones((1, 1))) == 3.0
    x = np.random.default_rng(1).normal(size=(50, 4))
    assert ev.swd(x, x, n_proj=16, seed=0) == 0.0
    with pytest.raises(InvalidArgument):
        ev.swd(np.zeros((3, 2)), np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(200))
def test_swd_matches_sorted_transport_oracle(seed):
    got, oracle = swd_oracle_case(seed)
    np.testing.assert_allclose(got, oracle, rtol=1e-9, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_swd_symmetric_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(31, 3))
    assert ev.swd(a, b, seed=4) == pytest.approx(ev.swd(b, a, seed=4), rel=1e-12)
    assert ev.swd(a, b, seed=4) == ev.swd(a, b, seed=4)


# -- Frechet distance -------------------------------------------------------------------

def test_frechet_two_gaussians():
    rng = np.random.default_rng(2)
    a = rng.normal(0.0, 1.0, size=(100_000, 1))
    b = rng.normal(2.0, 1.0, size=(100_000, 1))
    # analytic: (0 - 2)^2 + (1 + 1 - 2 * 1) = 4
    assert ev.frechet_distance(a, b) == pytest.approx(4.0, rel=0.05)


def test_frechet_multivariate_against_analytic():
    rng = np.random.default_rng(3)
    s1, s2 = np.diag([1.0, 4.0, 0.25]), np.diag([2.0, 1.0, 1.0])
    a = rng.multivariate_normal(np.zeros(3), s1, size=200_000)
    b = rng.multivariate_normal(np.ones(3), s2, size=200_000)
    analytic = 3 + np.trace(s1 + s2) - 2 * np.sum(np.sqrt(np.diag(s1) * np.diag(s2)))
    assert ev.frechet_distance(a, b) == pytest.approx(analytic, rel=0.02)


def test_frechet_identity_symmetry_and_errors():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(80, 5)), rng.normal(size=(90, 5)) @ rng.normal(size=(5, 5))
    assert ev.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)
    assert ev.frechet_distance(a, b) == pytest.approx(ev.frechet_distance(b, a), rel=1e-9)
    with pytest.raises(InvalidArgument):
        ev.frechet_distance(a[:5], b)


def test_psd_check_raises_numeric_error():
    with pytest.raises(NumericError):
        ev._psd_eig(np.diag([1.0, -0.5]), "test")
    lam, _ = ev._psd_eig(np.diag([1.0, -1e-9]), "test")
    assert lam.min() == 0.0


# -- LEC ---------------------------------------------------------------------------------

def random_direction(rng, layer_range=None):
    return EditDirection(v=unit(rng.normal(size=D)), method="pca", name="r", layer_range=layer_range)


def test_lec_zero_for_lookup_inverse():
    rng = np.random.default_rng(5)
    encode, synth = lookup_codec()
    images = rng.normal(size=(32, 4, 4, 3))
    for i in range(10):
        lr = None if i % 2 else (int(rng.integers(0, 3)), int(rng.integers(3, 6)))
        value = ev.lec(encode, synth, random_direction(rng, lr), float(rng.uniform(-3, 3)), images)
        assert abs(value) <= 1e-9


def test_lec_alpha_zero_and_identity():
    encode, synth = lookup_codec()
    images = np.random.default_rng(6).normal(size=(4, 4, 4, 3))
    assert ev.lec(encode, synth, random_direction(np.random.default_rng(0)), 0.0, images) == 0.0


def test_lec_single_sample_trace_oracle():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(K * D, 48)) * 0.2
    g = rng.normal(size=(48, K * D)) * 0.2

    def encode(images):
        return (images.reshape(-1, 48) @ a.T).reshape(-1, K, D)

    def synth(stacks):
        return np.tanh(stacks.reshape(-1, K * D) @ g.T).reshape(-1, 4, 4, 3)

    x = rng.normal(size=(1, 4, 4, 3))
    d = random_direction(rng, (1, 4))
    alpha = 1.5
    # step-by-step: encode, edit, synthesize, re-encode, invert the edit, compare
    w = (x.reshape(48) @ a.T).reshape(K, D)
    w_edit = w.copy()
    w_edit[1:5] += alpha * d.v
    img = np.tanh(w_edit.reshape(K * D) @ g.T)
    w_re = (img @ a.T).reshape(K, D)
    w_re[1:5] -= alpha * d.v
    oracle = np.linalg.norm((w - w_re).ravel())
    assert ev.lec(encode, synth, d, alpha, x) == pytest.approx(oracle, rel=1e-6)


def test_lec_reports_nonfinite_sample():
    encode, synth = lookup_codec()
    images = np.zeros((3, 4, 4, 3))
    bad = lambda s: np.where(np.arange(s.shape[0])[:, None, None] == 2, np.nan, s)  # noqa: E731

    def bad_synth(stacks):
        return synth(bad(stacks))

    with pytest.raises(NumericError, match="sample 2"):
        ev.lec(encode, bad_synth, random_direction(np.random.default_rng(1)), 1.0, images)


def test_lec_is_seed_deterministic():
    encode, synth = lookup_codec()
    images = np.random.default_rng(8).normal(size=(40, 4, 4, 3))

    def noisy_synth(stacks):
        return synth(stacks) + 0.01 * np.sin(np.arange(48)).reshape(4, 4, 3)

    d = random_direction(np.random.default_rng(2))
    assert ev.lec(encode, noisy_synth, d, 0.7, images, seed=3, n=10) == ev.lec(
        encode, noisy_synth, d, 0.7, images, seed=3, n=10)


# -- equivariance ------------------------------------------------------------------------------

def _specs(n, seed):
    return [SceneSpec.from_array(s) for s in sample_specs(n, seed)]


def test_equivariance_zero_cases():
    specs = _specs(12, 0)
    rng = np.random.default_rng(9)
    a = rng.normal(size=(K * D, 8 * 8 * 3)) * 0.01

    def encode(images):
        return (images.reshape(images.shape[0], -1) @ a.T).reshape(-1, K, D)

    d = random_direction(rng)
    assert ev.equivariance_gap(encode, d, 0.0, "hue", 0.0, specs, 8) == 0.0


def test_equivariance_trace_oracle_and_skips():
    specs = _specs(40, 1)
    rng = np.random.default_rng(10)
    a = rng.normal(size=(K * D, 8 * 8 * 3)) * 0.05

    def encode(images):
        return (images.reshape(images.shape[0], -1) @ a.T).reshape(-1, K, D)

    d = random_direction(rng)
    value, skipped = ev.equivariance_gap(encode, d, 0.3, "cx", 0.05, specs, 8, return_skipped=True)
    kept = [s for s in specs if s.cx + 0.05 <= 0.8]
    assert skipped == len(specs) - len(kept)
    dists = []
    for s in kept:
        lhs = apply_edit(encode(render_array(s.as_array()[None], 8))[0], d, 0.3)
        moved = SceneSpec.from_array(s.as_array())
        moved = SceneSpec(**{**moved.__dict__, "cx": moved.cx + 0.05})
        rhs = encode(render_array(moved.as_array()[None], 8))[0]
        dists.append(np.linalg.norm((lhs - rhs).ravel()))
    assert value == pytest.approx(float(np.mean(dists)), rel=1e-6)
    with pytest.raises(InvalidArgument, match="20%"):
        ev.equivariance_gap(encode, d, 0.3, "cx", 0.3, specs, 8)


# -- tradeoff curve ----------------------------------------------------------------------------

def test_tradeoff_endpoints_and_variation(emb):
    rng = np.random.default_rng(11)
    g = rng.normal(size=(8 * 8 * 3, K * D)) * 0.1

    def synth(stacks):
        return np.tanh(stacks.reshape(stacks.shape[0], -1) @ g.T).reshape(-1, 8, 8, 3)

    n = 40
    base = rng.normal(size=(n, 1, D))
    stacks_a = base + rng.normal(size=(n, K, D))
    stacks_d = base + 0.1 * rng.normal(size=(n, K, D))
    images = synth(base + 0.3 * rng.normal(size=(n, K, D)))
    d = random_direction(rng)
    rows = ev.tradeoff_curve(stacks_a, stacks_d, synth, d, 0.5, images, emb, [0.0, 0.25, 0.5, 0.75, 1.0])
    for row, stacks in ((rows[0], stacks_a), (rows[-1], stacks_d)):
        dist = ev.distortion_metrics(images, synth(stacks), emb)
        assert row.l2 == pytest.approx(dist["l2"], rel=1e-6)
        assert row.perceptual == pytest.approx(dist["perceptual"], rel=1e-6)
        edited = synth(np.stack([apply_edit(s, d, 0.5) for s in stacks]))
        fd = ev.frechet_distance(ev.embed(images, emb), ev.embed(edited, emb))
        assert row.fd_edit == pytest.approx(fd, rel=1e-6)
    # interpolated variation is convex in t and bounded by the chord between the endpoints
    ts = np.linspace(0, 1, 11)
    for sa, sd in zip(stacks_a, stacks_d):
        f = np.array([variance_metric(interpolate(sa, sd, t)) for t in ts])
        assert np.all(f <= (1 - ts) * f[0] + ts * f[-1] + 1e-12)
        assert np.all(f[:-2] + f[2:] >= 2 * f[1:-1] - 1e-12)
    with pytest.raises(InvalidArgument):
        ev.tradeoff_curve(stacks_a, stacks_d, synth, d, 0.5, images, emb, [0.5, 0.2])


def test_interpolated_variation_need_not_be_monotone():
    # v = -u/2: the variation dips to 0 at t = 2/3 and rises again to |u|/2
    u = np.random.default_rng(12).normal(size=(K, D))
    u -= u.mean(axis=0)
    base = np.ones((K, D))
    a, d = base + u, base - 0.5 * u
    f = [variance_metric(interpolate(a, d, t)) for t in (0.0, 2 / 3, 1.0)]
    assert f[2] < f[0] and f[1] < f[2]
    assert f[1] == pytest.approx(0.0, abs=1e-12)
