"""Experiment orchestration: artifact building, edit calibration, metrics and reports.

Layout of an artifact directory::

    embedder.ckpt  gan.ckpt  encoder_<config>_s<seed>.ckpt

``build_artifacts`` trains whatever is missing; ``run_experiment`` only reads
checkpoints, so the same bundle can be re-evaluated any number of times.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .. import scenes
from ..editing import EditDirection, apply_edit, supervised_direction
from ..encoder import E4EEncoder, encode_images
from ..errors import ConfigError, InvalidArgument
from ..evaluation import (MetricReport, distortion_metrics, embed, equivariance_gap, frechet_distance,
                          lec, random_projections, reports_to_csv, swd, tradeoff_curve)
from ..latent_geometry import replicate, roundtrip_deviation, variance_metric
from ..toygen import ToyGenerator, sample_w, tensor_to_images
from .config import TrainConfig
from .training import (SceneData, embedder_stage, encoder_config, load_embedder, load_encoder,
                       load_generator, pretrain_gan, train_encoder)

log = logging.getLogger(__name__)

BASELINE_ID = "untrained"


def embedder_path(root: str) -> str:
    return os.path.join(root, "embedder.ckpt")


def gan_path(root: str) -> str:
    return os.path.join(root, "gan.ckpt")


def encoder_path(root: str, configuration: str, seed: int) -> str:
    return os.path.join(root, f"encoder_{configuration}_s{seed}.ckpt")


def build_artifacts(cfg: TrainConfig, root: str, data: SceneData | None = None) -> None:
    """Train the embedder, the toy GAN and every (configuration, seed) encoder that is missing."""
    os.makedirs(root, exist_ok=True)
    data = SceneData.build(cfg) if data is None else data
    if not os.path.exists(embedder_path(root)):
        log.info("training embedder")
        embedder_stage(cfg, data, embedder_path(root))
    emb = load_embedder(embedder_path(root))
    if not os.path.exists(gan_path(root)):
        log.info("pretraining toy GAN")
        pretrain_gan(cfg, data, emb, gan_path(root))
    gen = load_generator(gan_path(root))
    for c in cfg.experiment.configurations:
        for s in cfg.experiment.seeds:
            path = encoder_path(root, c, s)
            if not os.path.exists(path):
                log.info("training encoder %s seed %d", c, s)
                train_encoder(cfg.with_overrides(configuration=c, seed=s), gen, emb, data, path)


# -- model wrappers -------------------------------------------------------------

def synthesize_fn(gen: ToyGenerator, batch: int = 256):
    dtype = next(gen.parameters()).dtype

    def fn(stacks: np.ndarray) -> np.ndarray:
        stacks = np.asarray(stacks)
        outs = []
        with torch.no_grad():
            for i in range(0, stacks.shape[0], batch):
                outs.append(gen.synthesize(torch.from_numpy(stacks[i:i + batch]).to(dtype)))
        return tensor_to_images(torch.cat(outs)).astype(np.float64)

    return fn


def encode_fn(enc: E4EEncoder):
    return lambda images: encode_images(enc, images)


def untrained_encoder(cfg: TrainConfig, gen: ToyGenerator) -> E4EEncoder:
    """Randomly initialized encoder (all offsets unlocked) used as the equivariance reference."""
    from .training import mean_w

    torch.manual_seed(cfg.seed)
    enc = E4EEncoder(encoder_config(cfg))
    enc.w_avg.copy_(mean_w(gen, seed=cfg.seed))
    return enc.eval()


# -- edit calibration -----------------------------------------------------------

@dataclass(frozen=True)
class CalibratedEdit:
    """A supervised direction plus the step size that moves ``attribute`` by ``amount`` on average."""

    attribute: str
    amount: float
    direction: EditDirection
    alpha: float
    feasible: tuple[float, float]  # alpha interval on which the response is monotone
    band: tuple[float, ...] = ()

    def in_band(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if not self.band:
            return np.isfinite(values)
        return (values >= self.band[0]) & (values <= self.band[1])

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "amount": self.amount, "alpha": self.alpha,
                "feasible": list(self.feasible), "band": list(self.band),
                "direction": json.loads(self.direction.to_json())}


def attribute_change(attribute: str, before: np.ndarray, after: np.ndarray) -> np.ndarray:
    diff = after - before
    if attribute == "hue":
        diff = np.mod(diff + math.pi, 2 * math.pi) - math.pi
    return diff


def _response(gen_fn, w: np.ndarray, direction: EditDirection, attribute: str, alphas: np.ndarray,
              k: int) -> np.ndarray:
    stacks = np.stack([replicate(v, k) for v in w])
    base = scenes.estimate_attributes(gen_fn(stacks))[attribute]
    out = []
    for a in alphas:
        moved = scenes.estimate_attributes(gen_fn(np.stack([apply_edit(s, direction, a) for s in stacks])))[attribute]
        diff = attribute_change(attribute, base, moved)
        out.append(float(np.nanmean(diff)))
    return np.array(out)


def calibrate_edit(gen: ToyGenerator, attribute: str, amount: float, n: int, seed: int,
                   band: tuple[float, ...] = (), n_response: int = 256, n_alpha: int = 17,
                   max_sigma: float = 6.0) -> CalibratedEdit:
    """Fit a supervised direction for ``attribute`` and the ``alpha`` matching ``amount``.

    Generated images are labeled by thresholding the attribute measured with
    :func:`scenes.estimate_attributes`; the response curve (mean attribute
    change vs alpha) is inverted by linear interpolation on its monotone
    stretch around 0. With a ``band`` only samples whose attribute lies in
    ``[lo, hi]`` enter the fit and the response curve.
    """
    if attribute not in scenes.FIELD_NAMES:
        raise InvalidArgument(f"unknown attribute {attribute!r}")
    k = gen.config.num_layers
    gen_fn = synthesize_fn(gen)
    w = sample_w(n, gen, seed)
    measured = scenes.estimate_attributes(gen_fn(np.stack([replicate(v, k) for v in w])))[attribute]
    ok = np.isfinite(measured)
    if band:
        ok &= (measured >= band[0]) & (measured <= band[1])
    labels = np.where(measured[ok] > scenes.THRESHOLDS[attribute], 1.0, -1.0)
    direction = supervised_direction(w[ok], labels, name=attribute)

    # Probe alphas out to max_sigma standard deviations of the codes along the direction.
    spread = max_sigma * float(np.std(w[ok] @ direction.v))
    sign = 1.0 if amount >= 0 else -1.0
    alphas = sign * np.linspace(0.0, spread, n_alpha)
    resp = sign * _response(gen_fn, w[ok][:n_response], direction, attribute, alphas, k)
    target = abs(amount)
    # monotone stretch starting at alpha = 0
    end = 1
    while end < len(resp) and resp[end] > resp[end - 1]:
        end += 1
    feasible = tuple(sorted((0.0, float(alphas[end - 1]))))
    if target == 0:
        alpha = 0.0
    elif resp[end - 1] < target:
        raise InvalidArgument(f"edit {attribute} {amount:+g} is outside the calibrated range "
                              f"(max mean change {sign * resp[end - 1]:+.4g})")
    else:
        alpha = float(np.interp(target, resp[:end], np.abs(alphas[:end])) * sign)
    return CalibratedEdit(attribute, float(amount), direction, alpha, feasible, tuple(band))


def calibrate_edits(cfg: TrainConfig, gen: ToyGenerator) -> list[CalibratedEdit]:
    return [calibrate_edit(gen, e.attribute, e.amount, cfg.experiment.calibration_samples, cfg.seed, e.band)
            for e in cfg.experiment.edits]


# -- metrics --------------------------------------------------------------------

KNOWN_METRICS = ("l2", "perceptual", "variation", "roundtrip", "fd_recon", "swd_recon",
                 "fd_edit", "swd_edit", "fd_edit_recon", "lec", "equivariance")


def evaluate_encoder(cfg: TrainConfig, enc: E4EEncoder, gen: ToyGenerator, emb, images: np.ndarray,
                     specs: np.ndarray, edits: list[CalibratedEdit], config_id: str, seed: int,
                     metrics: tuple[str, ...] | None = None) -> list[MetricReport]:
    """All requested metrics for one encoder, as MetricReport rows."""
    metrics = tuple(cfg.experiment.metrics if metrics is None else metrics)
    for m in metrics:
        if m not in KNOWN_METRICS:
            raise ConfigError(f"experiment.metrics: unknown metric {m!r}")
    if not metrics:
        return []
    ex = cfg.experiment
    enc_fn, syn_fn = encode_fn(enc), synthesize_fn(gen)
    n = images.shape[0]
    stacks = enc_fn(images)
    recon = syn_fn(stacks)
    real_feats = embed(images, emb)
    proj = random_projections(real_feats.shape[1], ex.n_proj, seed)
    rows: list[MetricReport] = []

    def add(name, value, count):
        rows.append(MetricReport(name, float(value), int(count), config_id, seed))

    if "l2" in metrics or "perceptual" in metrics:
        dist = distortion_metrics(images, recon, emb)
        for name in ("l2", "perceptual"):
            if name in metrics:
                add(name, dist[name], n)
    if "variation" in metrics:
        add("variation", np.mean([variance_metric(s) for s in stacks]), n)
    if "roundtrip" in metrics:
        k = gen.config.num_layers
        value = roundtrip_deviation(lambda m, s: sample_w(m, gen, s), lambda x: enc_fn(x[None])[0],
                                    lambda s: syn_fn(s[None])[0], ex.roundtrip_samples, seed, k=k)
        add("roundtrip", value, ex.roundtrip_samples)
    recon_feats = None
    if "fd_recon" in metrics or "swd_recon" in metrics or "fd_edit_recon" in metrics:
        recon_feats = embed(recon, emb)
    if "fd_recon" in metrics:
        add("fd_recon", frechet_distance(real_feats, recon_feats), n)
    if "swd_recon" in metrics:
        add("swd_recon", swd(real_feats, recon_feats, projections=proj), n)
    for e in edits:
        needs_edit = any(m in metrics for m in ("fd_edit", "swd_edit", "fd_edit_recon"))
        if needs_edit:
            edited = syn_fn(np.stack([apply_edit(s, e.direction, e.alpha) for s in stacks]))
            edit_feats = embed(edited, emb)
            if "fd_edit" in metrics:
                add(f"fd_edit:{e.attribute}", frechet_distance(real_feats, edit_feats), n)
            if "swd_edit" in metrics:
                add(f"swd_edit:{e.attribute}", swd(real_feats, edit_feats, projections=proj), n)
            if "fd_edit_recon" in metrics:
                add(f"fd_edit_recon:{e.attribute}", frechet_distance(recon_feats, edit_feats), n)
        if "lec" in metrics:
            add(f"lec:{e.attribute}", lec(enc_fn, syn_fn, e.direction, e.alpha, images, seed=seed), n)
    if "equivariance" in metrics:
        e = _equivariance_edit(cfg, edits)
        col = scenes.FIELD_NAMES.index(e.attribute)
        subset = [scenes.SceneSpec.from_array(s) for s in specs[e.in_band(specs[:, col])]]
        value, skipped = equivariance_gap(enc_fn, e.direction, e.alpha, e.attribute, e.amount, subset,
                                          cfg.model.resolution, return_skipped=True)
        add("equivariance", value, len(subset) - skipped)
    return rows


def _equivariance_edit(cfg: TrainConfig, edits: list[CalibratedEdit]) -> CalibratedEdit:
    for e in edits:
        if e.attribute == cfg.experiment.equivariance_attribute:
            return e
    raise ConfigError(f"experiment.equivariance_attribute: no calibrated edit for "
                      f"{cfg.experiment.equivariance_attribute!r}")


# -- assertions and reports -----------------------------------------------------

@dataclass(frozen=True)
class OrderingCheck:
    name: str
    passed: bool
    detail: str


def _mean(reports: list[MetricReport], metric: str, config: str) -> float | None:
    vals = [r.value for r in reports if r.name == metric and r.config_id == config]
    return float(np.mean(vals)) if vals else None


def ordering_checks(reports: list[MetricReport], edits: list[str]) -> list[OrderingCheck]:
    """Directional orderings between configurations A and D (seed-averaged)."""
    checks = []
    m = lambda metric, c: _mean(reports, metric, c)  # noqa: E731
    va, vd = m("variation", "A"), m("variation", "D")
    if va is not None and vd is not None:
        checks.append(OrderingCheck("variation(D) < variation(A)/3", vd < va / 3, f"D={vd:.4g} A={va:.4g}"))
    ra, rd = m("roundtrip", "A"), m("roundtrip", "D")
    if ra is not None and rd is not None:
        checks.append(OrderingCheck("roundtrip(D) < roundtrip(A)/2", rd < ra / 2, f"D={rd:.4g} A={ra:.4g}"))
    la, ld = m("l2", "A"), m("l2", "D")
    if la is not None and ld is not None:
        checks.append(OrderingCheck("Distortion(A) <= Distortion(D)", la <= ld, f"A={la:.4g} D={ld:.4g}"))
        checks.append(OrderingCheck("Distortion(D) <= 2.5 Distortion(A)", ld <= 2.5 * la, f"A={la:.4g} D={ld:.4g}"))
    wins, seen = [], 0
    for attr in edits:
        a, d = m(f"lec:{attr}", "A"), m(f"lec:{attr}", "D")
        if a is not None and d is not None:
            seen += 1
            if d < a:
                wins.append(attr)
    if seen:
        need = min(2, seen)
        checks.append(OrderingCheck(f"LEC(D) < LEC(A) for >= {need} of {seen} edits", len(wins) >= need,
                                    "wins: " + (", ".join(wins) or "none")))
    ea, ed, eb = m("equivariance", "A"), m("equivariance", "D"), m("equivariance", BASELINE_ID)
    if ea is not None and ed is not None:
        checks.append(OrderingCheck("equivariance(D) < equivariance(A)", ed < ea, f"D={ed:.4g} A={ea:.4g}"))
    if ed is not None and eb is not None:
        checks.append(OrderingCheck("equivariance(D) < 0.5 untrained", ed < 0.5 * eb, f"D={ed:.4g} base={eb:.4g}"))
    return checks


def _plots(out_dir: str, reports: list[MetricReport], tradeoff: list[dict], edits: list[str]) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if tradeoff:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([r["l2"] for r in tradeoff], [r["fd_edit"] for r in tradeoff], "o-")
        for r in tradeoff:
            ax.annotate(f"t={r['t']:g}", (r["l2"], r["fd_edit"]), fontsize=7)
        ax.set_xlabel("L2 distortion")
        ax.set_ylabel("FD-toy of edited images")
        fig.tight_layout()
        path = os.path.join(out_dir, "tradeoff.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    configs = sorted({r.config_id for r in reports if r.name.startswith("lec:")})
    if configs and edits:
        fig, ax = plt.subplots(figsize=(4, 3))
        width = 0.8 / len(configs)
        for j, c in enumerate(configs):
            vals = [_mean(reports, f"lec:{a}", c) or 0.0 for a in edits]
            ax.bar(np.arange(len(edits)) + j * width, vals, width, label=c)
        ax.set_xticks(np.arange(len(edits)) + 0.4 - width / 2, edits)
        ax.set_ylabel("LEC")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "lec.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def _markdown(cfg: TrainConfig, reports: list[MetricReport], checks: list[OrderingCheck],
              edits: list[CalibratedEdit], tradeoff: list[dict]) -> str:
    lines = ["# Experiment report", "", f"configurations: {', '.join(cfg.experiment.configurations)}; "
             f"seeds: {', '.join(map(str, cfg.experiment.seeds))}", ""]
    if edits:
        lines += ["## Calibrated edits", "", "| attribute | amount | alpha |", "|---|---|---|"]
        lines += [f"| {e.attribute} | {e.amount:g} | {e.alpha:.4g} |" for e in edits]
        lines.append("")
    names = sorted({r.name for r in reports})
    configs = sorted({r.config_id for r in reports})
    if names:
        lines += ["## Seed-averaged metrics", "", "| metric | " + " | ".join(configs) + " |",
                  "|---" * (len(configs) + 1) + "|"]
        for name in names:
            cells = [_mean(reports, name, c) for c in configs]
            lines.append(f"| {name} | " + " | ".join("" if v is None else f"{v:.4g}" for v in cells) + " |")
        lines.append("")
    if tradeoff:
        lines += ["## Interpolation tradeoff (A at t=0, D at t=1)", "", "| t | l2 | perceptual | fd_edit | variation |",
                  "|---|---|---|---|---|"]
        lines += [f"| {r['t']:g} | {r['l2']:.4g} | {r['perceptual']:.4g} | {r['fd_edit']:.4g} | {r['variation']:.4g} |"
                  for r in tradeoff]
        lines.append("")
    lines += ["## Ordering checks", ""]
    lines += [f"- [{'PASS' if c.passed else 'FAIL'}] {c.name} ({c.detail})" for c in checks] or ["- none evaluated"]
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    reports: list[MetricReport]
    checks: list[OrderingCheck]
    edits: list[CalibratedEdit]
    tradeoff: list[dict]
    files: dict[str, str]


def run_experiment(cfg: TrainConfig, artifacts: str, out_dir: str) -> ExperimentResult:
    """Evaluate every (configuration, seed) encoder in ``artifacts`` and write the report bundle."""
    ex = cfg.experiment
    paths = [embedder_path(artifacts), gan_path(artifacts)]
    paths += [encoder_path(artifacts, c, s) for c in ex.configurations for s in ex.seeds]
    for p in paths:
        if not os.path.exists(p):
            raise ConfigError(f"missing checkpoint: {p}")
    os.makedirs(out_dir, exist_ok=True)
    reports: list[MetricReport] = []
    edits: list[CalibratedEdit] = []
    tradeoff: list[dict] = []
    if ex.metrics:
        emb = load_embedder(paths[0])
        gen = load_generator(paths[1])
        data = SceneData.build(cfg)
        images = tensor_to_images(data.eval).astype(np.float64)
        edit_metrics = {"fd_edit", "swd_edit", "fd_edit_recon", "lec", "equivariance"}
        edits = calibrate_edits(cfg, gen) if edit_metrics & set(ex.metrics) else []
        for c in ex.configurations:
            for s in ex.seeds:
                enc = load_encoder(encoder_path(artifacts, c, s))
                reports += evaluate_encoder(cfg, enc, gen, emb, images, data.eval_specs, edits, c, s)
        if "equivariance" in ex.metrics:
            for s in ex.seeds:
                base = untrained_encoder(cfg.with_overrides(seed=s), gen)
                reports += evaluate_encoder(cfg, base, gen, emb, images, data.eval_specs, edits, BASELINE_ID, s,
                                            metrics=("equivariance",))
        if {"A", "D"} <= set(ex.configurations) and edits:
            s = ex.seeds[0]
            stacks_a = encode_images(load_encoder(encoder_path(artifacts, "A", s)), images)
            stacks_d = encode_images(load_encoder(encoder_path(artifacts, "D", s)), images)
            e = edits[0]
            tradeoff = [r.as_dict() for r in tradeoff_curve(stacks_a, stacks_d, synthesize_fn(gen), e.direction,
                                                            e.alpha, images, emb, ex.t_grid)]
    checks = ordering_checks(reports, [e.attribute for e in ex.edits])
    files = {"csv": os.path.join(out_dir, "metrics.csv"), "json": os.path.join(out_dir, "summary.json"),
             "markdown": os.path.join(out_dir, "report.md")}
    with open(files["csv"], "w") as fh:
        fh.write(reports_to_csv(reports))
    summary = {"config_hash": cfg.config_hash(), "reports": [asdict(r) for r in reports],
               "checks": [asdict(c) for c in checks], "edits": [e.to_dict() for e in edits],
               "tradeoff": tradeoff}
    with open(files["json"], "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(files["markdown"], "w") as fh:
        fh.write(_markdown(cfg, reports, checks, edits, tradeoff))
    for path in _plots(out_dir, reports, tradeoff, [e.attribute for e in ex.edits] if edits else []):
        files[os.path.splitext(os.path.basename(path))[0]] = path
    return ExperimentResult(reports, checks, edits, tradeoff, files)
