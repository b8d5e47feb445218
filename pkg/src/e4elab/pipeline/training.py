"""Training stages: toy embedder, toy GAN, and the e4e encoder.

Each stage writes one checkpoint. Downstream stages rebuild their inputs
from checkpoints only, so stages can run in separate processes.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import scenes
from ..encoder import E4EEncoder, EncoderConfig, active_deltas, final_codes
from ..errors import ConfigError, NumericError, TrainingError
from ..evaluation import frechet_distance
from ..latent_geometry import variance_metric
from ..objectives import (Embedder, LatentDiscriminator, _frozen, discriminator_loss, embed_images,
                          nonsaturating_d_loss, r1_penalty, total_loss, train_embedder)
from ..toygen import GeneratorConfig, ToyGenerator, images_to_tensor
from .checkpoint import Checkpoint, load_optimizer, module_tensors, optimizer_tensors
from .config import TrainConfig

log = logging.getLogger(__name__)


def set_deterministic(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


class JsonlLog:
    """Append-only JSON-lines log; ``None`` path keeps records in memory only."""

    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            open(path, "w").close()

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


@dataclass
class SceneData:
    train_specs: np.ndarray
    eval_specs: np.ndarray
    train: torch.Tensor  # (n, 3, H, W)
    eval: torch.Tensor

    @classmethod
    def build(cls, cfg: TrainConfig) -> "SceneData":
        r = cfg.model.resolution
        tr = scenes.sample_specs(cfg.data.train_size, cfg.data.seed)
        ev = scenes.sample_specs(cfg.data.eval_size, cfg.data.seed + 1)
        return cls(tr, ev, images_to_tensor(scenes.render_array(tr, r)), images_to_tensor(scenes.render_array(ev, r)))


# -- model construction ---------------------------------------------------------

def generator_config(cfg: TrainConfig) -> GeneratorConfig:
    m = cfg.model
    return GeneratorConfig(z_dim=m.z_dim, latent_dim=m.latent_dim, num_layers=m.num_layers,
                           resolution=m.resolution, channels=m.gen_channels, mapping_layers=m.mapping_layers)


def encoder_config(cfg: TrainConfig) -> EncoderConfig:
    m = cfg.model
    return EncoderConfig(latent_dim=m.latent_dim, num_layers=m.num_layers, resolution=m.resolution,
                         widths=tuple(m.encoder_widths))


class ImageDiscriminator(nn.Module):
    def __init__(self, resolution: int, widths=(32, 64, 128, 128)):
        super().__init__()
        layers, c, r = [], 3, resolution
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c, r = w, max(1, (r + 1) // 2)
        self.features = nn.Sequential(*layers)
        self.out = nn.Linear(c * r * r, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.features(x).flatten(1)).squeeze(-1)


def load_embedder(path: str) -> Embedder:
    ckpt = Checkpoint.load(path)
    emb = Embedder(ckpt.meta["embed_dim"])
    emb.load_state_dict(ckpt.state_dict("embedder"))
    return _frozen(emb)


def load_generator(path: str) -> ToyGenerator:
    ckpt = Checkpoint.load(path)
    gen = ToyGenerator(GeneratorConfig(**ckpt.meta["generator_config"]))
    gen.load_state_dict(ckpt.state_dict("generator_ema"))
    return _frozen(gen)


def load_encoder(path: str) -> E4EEncoder:
    ckpt = Checkpoint.load(path)
    c = dict(ckpt.meta["encoder_config"])
    c["widths"] = tuple(c["widths"])
    enc = E4EEncoder(EncoderConfig(**c))
    enc.load_state_dict(ckpt.state_dict("encoder"))
    return enc.eval()


# -- embedder ----------------------------------------------------------------------

def embedder_stage(cfg: TrainConfig, data: SceneData, out_path: str) -> Embedder:
    set_deterministic(cfg.deterministic)
    logger = JsonlLog(out_path + ".log.jsonl")
    e = cfg.embedder
    emb = train_embedder(data.train, seed=cfg.data.seed, steps=e.steps, batch_size=e.batch_size,
                         lr=e.lr, dim=cfg.model.embed_dim, log=logger)
    Checkpoint(module_tensors("embedder", emb), step=e.steps, config_hash=cfg.config_hash(),
               meta={"embed_dim": cfg.model.embed_dim, "stage": "embedder"}).save(out_path)
    return emb


# -- toy GAN -----------------------------------------------------------------------

def fd_gate_values(gen: ToyGenerator, emb: Embedder, data: SceneData, n: int, seed: int) -> tuple[float, float]:
    """(FD-toy of real vs generated, FD-toy of two disjoint real halves)."""
    n = min(n, data.train.shape[0] // 2)
    real_a = embed_images(emb, data.train[:n])
    real_b = embed_images(emb, data.train[n:2 * n])
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        fake = torch.cat([gen(torch.randn(256, gen.config.z_dim, generator=g)) for _ in range(math.ceil(n / 256))])[:n]
    return frechet_distance(real_a, embed_images(emb, fake)), frechet_distance(real_a, real_b)


def _ema_update(ema: nn.Module, model: nn.Module, beta: float) -> None:
    with torch.no_grad():
        for pe, pm in zip(ema.parameters(), model.parameters()):
            pe.lerp_(pm, 1.0 - beta)


def pretrain_gan(cfg: TrainConfig, data: SceneData, emb: Embedder, out_path: str,
                 resume: str | None = None) -> ToyGenerator:
    """Adversarial training of the toy generator (non-saturating loss + lazy R1 on real images)."""
    if data.train.shape[0] < 2048:
        raise ConfigError(f"GAN pretraining needs >= 2048 images, got {data.train.shape[0]}")
    set_deterministic(cfg.deterministic)
    g_cfg = cfg.gan
    torch.manual_seed(cfg.seed)
    gen = ToyGenerator(generator_config(cfg))
    disc = ImageDiscriminator(cfg.model.resolution, cfg.model.image_disc_widths)
    ema = copy.deepcopy(gen).requires_grad_(False)
    mapping = list(gen.mapping.parameters())
    mapping_ids = {id(p) for p in mapping}
    opt_g = torch.optim.Adam([
        {"params": [p for p in gen.parameters() if id(p) not in mapping_ids]},
        {"params": mapping, "lr": g_cfg.lr * g_cfg.mapping_lr_mult},
    ], lr=g_cfg.lr, betas=g_cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=g_cfg.lr, betas=g_cfg.betas)
    start = 0
    logger = JsonlLog(out_path + ".log.jsonl")
    if resume is not None:
        ck = Checkpoint.load(resume)
        gen.load_state_dict(ck.state_dict("generator"))
        ema.load_state_dict(ck.state_dict("generator_ema"))
        disc.load_state_dict(ck.state_dict("image_disc"))
        load_optimizer(opt_g, ck, "opt_g")
        load_optimizer(opt_d, ck, "opt_d")
        start = ck.step
        for rec in ck.meta.get("log", []):
            logger(rec)
    rng = torch.Generator().manual_seed(cfg.seed * 7919 + start)
    n_train = data.train.shape[0]
    gate = None

    def save(step: int, gate_info) -> None:
        tensors = {**module_tensors("generator", gen), **module_tensors("generator_ema", ema),
                   **module_tensors("image_disc", disc), **optimizer_tensors("opt_g", opt_g),
                   **optimizer_tensors("opt_d", opt_d)}
        meta = {"stage": "gan", "generator_config": gen.config.to_dict(), "gate": gate_info,
                "log": logger.records}
        Checkpoint(tensors, step=step, config_hash=cfg.config_hash(), meta=meta).save(out_path)

    def check_gate(step: int) -> dict:
        fd, floor = fd_gate_values(ema, emb, data, g_cfg.gate_samples, cfg.seed)
        logger({"step": step, "gate_fd": fd, "gate_floor": floor})
        return {"fd": fd, "floor": floor, "threshold": g_cfg.fd_gate * floor, "step": step,
                "passed": fd <= g_cfg.fd_gate * floor}

    step = start
    while step < g_cfg.max_steps:
        if step >= g_cfg.steps and step % g_cfg.gate_every == 0 and step > start:
            gate = check_gate(step)
            if gate["passed"]:
                break
        idx = torch.randint(0, n_train, (g_cfg.batch_size,), generator=rng)
        z = torch.randn(g_cfg.batch_size, gen.config.z_dim, generator=rng)
        real = data.train[idx]
        with torch.no_grad():
            fake = gen(z)
        real_req = real.requires_grad_(step % g_cfg.r1_every == 0)
        real_logits = disc(real_req)
        loss_d = nonsaturating_d_loss(real_logits, disc(fake))
        r1 = torch.zeros(())
        if step % g_cfg.r1_every == 0:
            r1 = r1_penalty(real_req, real_logits, g_cfg.r1_gamma) * g_cfg.r1_every
        opt_d.zero_grad(set_to_none=True)
        (loss_d + r1).backward()
        opt_d.step()

        z = torch.randn(g_cfg.batch_size, gen.config.z_dim, generator=rng)
        loss_g = F.softplus(-disc(gen(z))).mean()
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()
        _ema_update(ema, gen, g_cfg.ema_beta)
        if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
            raise TrainingError(f"GAN loss became non-finite at step {step}")
        if step % g_cfg.log_every == 0:
            logger({"step": step, "loss_d": float(loss_d.detach()), "loss_g": float(loss_g.detach()), "r1": float(r1.detach())})
        step += 1
    if gate is None or gate["step"] != step:
        gate = check_gate(step)
    save(step, gate)
    if not gate["passed"]:
        raise TrainingError(f"FD-toy gate not met after {step} steps: FD {gate['fd']:.4g} > "
                            f"{gate['threshold']:.4g}; checkpoint kept at {out_path}")
    return _frozen(ema)


# -- encoder -------------------------------------------------------------------------

def _sample_real_w(gen: ToyGenerator, n: int, rng: torch.Generator) -> torch.Tensor:
    with torch.no_grad():
        return gen.mapping(torch.randn(n, gen.config.z_dim, generator=rng))


def mean_w(gen: ToyGenerator, n: int = 10000, seed: int = 0) -> torch.Tensor:
    return _sample_real_w(gen, n, torch.Generator().manual_seed(seed)).mean(dim=0)


def train_encoder(cfg: TrainConfig, gen: ToyGenerator, emb: Embedder, data: SceneData, out_path: str,
                  on_step: Callable[[int, dict], None] | None = None) -> E4EEncoder:
    """Alternating latent-discriminator / encoder updates under the configuration's gates."""
    set_deterministic(cfg.deterministic)
    e_cfg, gates = cfg.encoder, cfg.gates
    torch.manual_seed(cfg.seed)
    enc = E4EEncoder(encoder_config(cfg))
    enc.w_avg.copy_(mean_w(gen, seed=cfg.seed))
    disc = LatentDiscriminator(cfg.model.latent_dim, cfg.model.latent_disc_hidden) if gates["disc"] else None
    opt_e = torch.optim.Adam(enc.parameters(), lr=e_cfg.lr, betas=e_cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=e_cfg.disc_lr, betas=e_cfg.betas) if disc else None
    rng = torch.Generator().manual_seed(cfg.seed * 104729 + 1)
    logger = JsonlLog(out_path + ".log.jsonl")
    n_train = data.train.shape[0]
    eval_x = data.eval[: e_cfg.eval_samples]
    last_good = None

    def save(step: int) -> None:
        tensors = module_tensors("encoder", enc)
        if disc is not None:
            tensors.update(module_tensors("latent_disc", disc))
        meta = {"stage": "encoder", "configuration": cfg.configuration, "seed": cfg.seed,
                "encoder_config": enc.config.to_dict(),
                "schedule": {"warmup": cfg.schedule.warmup_steps, "interval": cfg.schedule.unlock_interval,
                             "step_at_save": step}}
        Checkpoint(tensors, step=step, config_hash=cfg.config_hash(), meta=meta).save(out_path)

    for step in range(e_cfg.steps):
        n_active = active_deltas(step, cfg.schedule, enc.num_deltas)
        x = data.train[torch.randint(0, n_train, (e_cfg.batch_size,), generator=rng)]
        out = enc(x, n_active)
        codes = final_codes(out)
        record = {"step": step, "active": n_active}
        if disc is not None:
            real_w = _sample_real_w(gen, e_cfg.batch_size, rng)
            loss_d, parts_d = discriminator_loss(real_w, codes, disc, cfg.weights.r1_gamma)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
            record.update(parts_d)
        else:
            record.update(adv_d=0.0, r1=0.0)
        where = f"; last good checkpoint (step {last_good}) at {out_path}" if last_good is not None else ""
        try:
            x_hat = gen.synthesize(codes)
        except NumericError as exc:
            raise TrainingError(f"encoder loss became non-finite at step {step} ({exc}){where}") from exc
        loss, parts = total_loss(x, out, x_hat, disc, emb, cfg.weights, use_dreg=gates["dreg"])
        if not torch.isfinite(loss):
            raise TrainingError(f"encoder loss became non-finite at step {step}{where}")
        opt_e.zero_grad(set_to_none=True)
        if disc is not None:
            disc.requires_grad_(False)
        loss.backward()
        if disc is not None:
            disc.requires_grad_(True)
        opt_e.step()
        record.update(parts)
        if step % e_cfg.log_every == 0:
            logger(record)
        if on_step is not None:
            on_step(step, record)
        if (step + 1) % e_cfg.eval_every == 0 or step + 1 == e_cfg.steps:
            with torch.no_grad():
                s = enc.encode(eval_x, n_active)
                x_rec = gen.synthesize(s)
            logger({"step": step, "eval_l2": float((x_rec - eval_x).pow(2).mean()),
                    "eval_variation": float(np.mean([variance_metric(v) for v in s.double().numpy()]))})
        if (step + 1) % e_cfg.checkpoint_every == 0:
            save(step + 1)
            last_good = step + 1
    save(e_cfg.steps)
    return enc.eval()
