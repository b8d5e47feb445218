"""Acceptance suite: trained-model orderings between configurations A and D plus the contract checks.

The trained artifacts (embedder, toy GAN and three seeds each of A and D) are
cached under ``.e4e_cache/<config hash>/`` in the repository root, or under
``$E4E_ACCEPT_CACHE`` when set. A cold run trains everything, which takes
roughly 1.5 h on one CPU core; later runs only re-evaluate.
"""
import dataclasses
import json
import os
import time

import numpy as np
import pytest
import torch

import oracles
from e4elab import evaluation as ev
from e4elab import scenes
from e4elab.editing import EditDirection, apply_edit
from e4elab.encoder import E4EEncoder, ProgressiveSchedule, active_deltas, encode_images
from e4elab.objectives import LossWeights
from e4elab.pipeline import cli
from e4elab.pipeline import experiment as X
from e4elab.pipeline.checkpoint import Checkpoint
from e4elab.pipeline.config import (EmbedderConfig, EncoderTrainConfig, ExperimentConfig, GanConfig, TrainConfig,
                                    config_from_dict)
from e4elab.pipeline.training import (SceneData, encoder_config, load_embedder, load_encoder, load_generator,
                                      train_encoder)
from e4elab.toygen import tensor_to_images

pytestmark = pytest.mark.slow

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def acceptance_config() -> TrainConfig:
    """Desk-scale run: default 32x32 models with shortened training stages.

    The offset penalty and the latent discriminator learning rate are raised
    for the 3000-step budget; both only act in configuration D.
    """
    return TrainConfig(
        weights=LossWeights(lambda_dreg=1e-2),
        embedder=EmbedderConfig(steps=600),
        gan=GanConfig(steps=3000, max_steps=3000, fd_gate=8.0, gate_every=1000),
        encoder=EncoderTrainConfig(steps=3000, disc_lr=2e-4, eval_every=500, checkpoint_every=1000),
        schedule=ProgressiveSchedule(500, 250),
        experiment=ExperimentConfig(configurations=("A", "D"), seeds=(0, 1, 2)),
    )


def _cache_dir(cfg: TrainConfig) -> str:
    base = os.environ.get("E4E_ACCEPT_CACHE") or os.path.join(ROOT, ".e4e_cache")
    return os.path.join(base, cfg.config_hash())


@pytest.fixture(scope="module")
def bundle():
    cfg = acceptance_config()
    root = _cache_dir(cfg)
    os.makedirs(root, exist_ok=True)
    timing_path = os.path.join(root, "timings.json")
    timings = json.load(open(timing_path)) if os.path.exists(timing_path) else {"build_seconds": 0.0}
    data = SceneData.build(cfg)
    t0 = time.perf_counter()
    X.build_artifacts(cfg, root, data)
    timings["build_seconds"] += time.perf_counter() - t0
    t0 = time.perf_counter()
    result = X.run_experiment(cfg, root, os.path.join(root, "report"))
    timings["evaluate_seconds"] = time.perf_counter() - t0
    with open(timing_path, "w") as fh:
        json.dump(timings, fh)
    return {"cfg": cfg, "root": root, "data": data, "result": result, "timings": timings}


def _checks(bundle) -> dict:
    return {c.name: c for c in bundle["result"].checks}


def _assert_checks(record_property, bundle, names):
    checks = _checks(bundle)
    missing = [n for n in names if n not in checks]
    assert not missing, f"checks not computed: {missing}"
    for n in names:
        record_property("detail", f"{n}: {'ok' if checks[n].passed else 'no'} ({checks[n].detail})")
    failed = [f"{n} ({checks[n].detail})" for n in names if not checks[n].passed]
    assert not failed, "; ".join(failed)


# -- trained-model orderings -------------------------------------------------------------

@pytest.mark.criterion(1, "proximity ordering: variation and round-trip deviation")
def test_criterion_1_proximity_ordering(bundle, record_property):
    hours = (bundle["timings"]["build_seconds"] + bundle["timings"]["evaluate_seconds"]) / 3600
    record_property("detail", f"train+evaluate {hours:.2f} h CPU")
    n_eval = {r.sample_count for r in bundle["result"].reports if r.name == "variation"}
    assert n_eval == {512}
    _assert_checks(record_property, bundle, ["variation(D) < variation(A)/3", "roundtrip(D) < roundtrip(A)/2"])


@pytest.mark.criterion(2, "distortion ordering: A <= D <= 2.5 A")
def test_criterion_2_distortion_ordering(bundle, record_property):
    _assert_checks(record_property, bundle, ["Distortion(A) <= Distortion(D)", "Distortion(D) <= 2.5 Distortion(A)"])


@pytest.mark.criterion(3, "LEC ordering on calibrated edits")
def test_criterion_3_lec_ordering(bundle, record_property):
    assert len(bundle["result"].edits) == 3
    _assert_checks(record_property, bundle, ["LEC(D) < LEC(A) for >= 2 of 3 edits"])


@pytest.mark.criterion(4, "equivariance gap ordering for the hue edit")
def test_criterion_4_equivariance(bundle, record_property):
    assert bundle["cfg"].experiment.equivariance_attribute == "hue"
    _assert_checks(record_property, bundle, ["equivariance(D) < equivariance(A)", "equivariance(D) < 0.5 untrained"])


def test_radius_edit_changes_foreground_monotonically(bundle):
    """Rendered foreground pixel count moves monotonically in alpha for >= 80% of 100 inversions."""
    cfg, root = bundle["cfg"], bundle["root"]
    edit = next(e for e in bundle["result"].edits if e.attribute == "radius")
    gen = load_generator(X.gan_path(root))
    enc = load_encoder(X.encoder_path(root, "D", cfg.experiment.seeds[0]))
    images = tensor_to_images(bundle["data"].eval[:100]).astype(np.float64)
    stacks = encode_images(enc, images)
    syn = X.synthesize_fn(gen)
    # the calibrated edit and its inverse bound the grid
    alphas = np.linspace(-1.0, 1.0, 7) * edit.alpha
    counts = np.stack([[scenes.foreground_pixel_count(img) for img in
                        syn(np.stack([apply_edit(s, edit.direction, a) for s in stacks]))] for a in alphas], axis=1)
    steps = np.diff(counts, axis=1)
    monotone = (steps >= 0).all(axis=1) & (counts[:, -1] > counts[:, 0])
    assert monotone.mean() >= 0.8, f"monotone for {monotone.mean():.0%} of images"


# -- oracle and contract suites ----------------------------------------------------------

@pytest.mark.criterion(5, "SWD, FD-toy and loss-gradient oracles")
def test_criterion_5_oracle_suites(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        got, oracle = oracles.swd_oracle_case(seed)
        np.testing.assert_allclose(got, oracle, rtol=1e-9, atol=1e-12)
        worst = max(worst, float(np.max(np.abs(got - oracle) / np.maximum(np.abs(oracle), 1e-12))))
    rng = np.random.default_rng(11)
    d, shift, scale = 8, np.full(8, 0.5), 2.0
    a = rng.normal(size=(100_000, d))
    b = shift + scale * rng.normal(size=(100_000, d))
    analytic = float(shift @ shift + d * (1.0 - scale) ** 2)
    fd = ev.frechet_distance(a, b)
    assert fd == pytest.approx(analytic, rel=0.05)
    models = oracles.debug_models()
    for term in oracles.LOSS_TERMS:
        g, g_fd = oracles.loss_gradient_pair(models, term)
        torch.testing.assert_close(g, g_fd, rtol=1e-3, atol=1e-6, msg=lambda m: f"{term}: {m}")
    elapsed = time.perf_counter() - t0
    record_property("detail", f"SWD worst rel err {worst:.1e}; FD {fd:.4g} vs {analytic:.4g}; {elapsed:.0f} s")
    assert elapsed < 300


@pytest.mark.criterion(6, "progressive-schedule invariants")
def test_criterion_6_schedule_invariants(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    for _ in range(10_000):
        warmup, interval = int(rng.integers(0, 5000)), int(rng.integers(1, 2000))
        n, step = int(rng.integers(1, 20)), int(rng.integers(0, 40_000))
        thresholds = [warmup + j * interval for j in range(n)]
        assert active_deltas(step, ProgressiveSchedule(warmup, interval), n) == sum(step >= t for t in thresholds)

    cfg = acceptance_config().with_overrides(
        configuration="D", data=dataclasses.replace(acceptance_config().data, train_size=256, eval_size=64),
        encoder=dataclasses.replace(acceptance_config().encoder, steps=12, eval_every=6, checkpoint_every=100))
    data = SceneData.build(cfg)
    torch.manual_seed(cfg.seed)
    init = E4EEncoder(encoder_config(cfg))
    enc = init.__class__(encoder_config(cfg))
    enc.load_state_dict(init.state_dict())
    x = data.train[:8]
    out = enc(x, 0)
    assert torch.count_nonzero(out.deltas) == 0
    out.base.pow(2).sum().backward()
    for head in enc.offset_heads:
        assert head.weight.grad is None or torch.count_nonzero(head.weight.grad) == 0

    # through the real training loop: heads stay bitwise at init while step < warmup
    from e4elab.objectives import Embedder
    from e4elab.toygen import ToyGenerator
    from e4elab.pipeline.training import generator_config

    torch.manual_seed(1)
    gen = ToyGenerator(generator_config(cfg)).eval()
    emb = Embedder(cfg.model.embed_dim)
    seen = []
    trained = train_encoder(cfg, gen, emb, data, os.path.join(_scratch(), "warmup.ckpt"),
                            on_step=lambda step, rec: seen.append(rec["active"]))
    assert seen == [0] * cfg.encoder.steps
    for h0, h1 in zip(init.offset_heads, trained.offset_heads):
        assert torch.equal(h0.weight, h1.weight) and torch.equal(h0.bias, h1.bias)
    with torch.no_grad():
        assert torch.count_nonzero(trained(x, 0).deltas) == 0
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{elapsed:.1f} s")
    assert elapsed < 60


def _scratch() -> str:
    path = os.path.join(_cache_dir(acceptance_config()), "scratch")
    os.makedirs(path, exist_ok=True)
    return path


@pytest.mark.criterion(7, "LEC is zero for a lookup-inverse encoder")
def test_criterion_7_lec_optimum(record_property):
    encode, synth = oracles.lookup_codec()
    rng = np.random.default_rng(7)
    images = rng.normal(size=(64, 4, 4, 3))
    worst = 0.0
    for i in range(10):
        v = rng.normal(size=oracles.LOOKUP_D)
        lr = None if i % 2 == 0 else (int(rng.integers(0, 3)), int(rng.integers(3, oracles.LOOKUP_K)))
        d = EditDirection(v=v / np.linalg.norm(v), method="pca", name=f"r{i}", layer_range=lr)
        worst = max(worst, abs(ev.lec(encode, synth, d, float(rng.uniform(-5, 5)), images)))
    record_property("detail", f"max |LEC| {worst:.1e}")
    assert worst <= 1e-9


def _short_run_config(bundle, deterministic: bool) -> TrainConfig:
    cfg = bundle["cfg"]
    return cfg.with_overrides(configuration="D", seed=5, deterministic=deterministic,
                              schedule=ProgressiveSchedule(20, 10),
                              encoder=dataclasses.replace(cfg.encoder, steps=80, eval_every=40, checkpoint_every=40))


@pytest.mark.criterion(8, "reproducibility: bitwise checkpoints and metric reruns")
def test_criterion_8_reproducibility(bundle, record_property, tmp_path):
    root = bundle["root"]
    gen, emb = load_generator(X.gan_path(root)), load_embedder(X.embedder_path(root))
    data = bundle["data"]

    # deterministic mode: two trainings give identical checkpoint bytes
    cfg = _short_run_config(bundle, True)
    paths = [str(tmp_path / f"det{i}.ckpt") for i in range(2)]
    for p in paths:
        train_encoder(cfg, gen, emb, data, p)
    blobs = [open(p, "rb").read() for p in paths]
    assert blobs[0] == blobs[1]

    # default mode: two trainings reproduce their metrics
    cfg = _short_run_config(bundle, False)
    images = tensor_to_images(data.eval[:128]).astype(np.float64)
    metrics = ("l2", "perceptual", "variation", "roundtrip", "fd_recon", "swd_recon")
    runs = []
    for i in range(2):
        enc = train_encoder(cfg, gen, emb, data, str(tmp_path / f"def{i}.ckpt"))
        runs.append(X.evaluate_encoder(cfg, enc, gen, emb, images, data.eval_specs[:128], [], "D", cfg.seed,
                                       metrics=metrics))
    for r0, r1 in zip(*runs):
        assert r0.name == r1.name
        np.testing.assert_allclose(r1.value, r0.value, rtol=1e-4, err_msg=r0.name)

    # the full report: re-evaluate D seed 0 from scratch and compare every shared row
    base = bundle["cfg"]
    sub = base.with_overrides(experiment=dataclasses.replace(base.experiment, configurations=("D",),
                                                             seeds=(base.experiment.seeds[0],)))
    rerun = X.run_experiment(sub, root, str(tmp_path / "rerun"))
    ref = {(r.name, r.config_id, r.seed): r.value for r in bundle["result"].reports}
    compared = 0
    for r in rerun.reports:
        key = (r.name, r.config_id, r.seed)
        assert key in ref, key
        np.testing.assert_allclose(r.value, ref[key], rtol=1e-4, err_msg=str(key))
        compared += 1
    record_property("detail", f"bitwise checkpoints; {len(runs[0])} + {compared} metrics within rtol 1e-4")
    assert compared >= 10


@pytest.mark.criterion(9, "checkpoint and config round-trips; malformed configs exit 2")
def test_criterion_9_roundtrips_and_config_errors(bundle, record_property, tmp_path, capsys):
    cfg, root = bundle["cfg"], bundle["root"]
    names = [X.embedder_path(root), X.gan_path(root)]
    names += [X.encoder_path(root, c, s) for c in cfg.experiment.configurations for s in cfg.experiment.seeds]
    for path in names:
        blob = open(path, "rb").read()
        assert Checkpoint.from_bytes(blob).to_bytes() == blob, path
    text = cfg.to_json()
    again = config_from_dict(json.loads(text))
    assert again == cfg and again.to_json() == text

    cases = {
        "bogus": (lambda d: d.update(bogus=1), "bogus: unknown key"),
        "version": (lambda d: d.update(version=99), "version:"),
        "type": (lambda d: d["encoder"].update(steps="many"), "encoder.steps: expected an integer"),
        "range": (lambda d: d["gan"].update(fd_gate=0), "gan.fd_gate:"),
        "nested": (lambda d: d["schedule"].update(warmup_steps=-1), "schedule.warmup_steps:"),
        "edit": (lambda d: d["experiment"]["edits"][0].update(attribute="size"), "experiment.edits[0].attribute:"),
        "weight": (lambda d: d["weights"].update(lambda_l2=-1.0), "weights.lambda_l2:"),
    }
    for name, (mutate, expected) in cases.items():
        d = json.loads(text)
        mutate(d)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(d))
        code = cli.main(["datagen", "--config", str(path), "--out", str(tmp_path / "out"), "--n", "1"])
        err = capsys.readouterr().err
        assert code == 2, name
        assert expected in err, (name, err)
    record_property("detail", f"{len(names)} checkpoints, {len(cases)} malformed configs")
