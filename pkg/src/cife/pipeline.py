"""The scripted end-to-end run behind the acceptance gate.

Stages (each cached under ``root/<stage>`` and keyed by its inputs):

    data (character set, held-out set, two pretraining corpora)
         -> vae -> backbone base -> backbones A, B (sibling fine-tunes)
         -> same-place encoder on A -> evaluations (identity, control, transfer)
         -> mix smoke run, autoencoder stage 1 and stage 2

A stage whose ``stage.json`` key matches is loaded from its checkpoints
instead of being retrained.

The VAE and backbones learn from a pretraining corpus of many characters
drawn from the same sprite generator, disjoint from both the encoder's
characters and the held-out ones. With only the eight training characters
nearly every caption occurs once, so a backbone trained on them memorises
caption -> character and leaks identity through the prompt channel.
Backbone B fine-tunes on a second, independent corpus draw.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import store
from .character_encoder import init_character_encoder
from .checkpoint import params_hash
from .config import RunConfig
from .dataset import build_dataset, caption_for, SpriteSpec, write_dataset
from .evaluation import eval_control, eval_identity, eval_transfer, probe_calibration
from .imageio import contact_sheet, save_png
from .numerics import Tensor
from .training import (
    TrainConfig,
    ae_pretrain_config,
    backbone_config,
    caption_sensitivity,
    conditioned_loss,
    encoder_config,
    finetune_autoencoder_stage2,
    pretrain_autoencoder,
    reconstruction_mse,
    smoothed,
    train_backbone_diffusion,
    train_character_encoder,
    train_vae,
    vae_config,
    write_loss_tsv,
)
from .backbone.vae import encode_moments, psnr, vae_decode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    characters: int = 8
    c_per: int = 2
    f_per: int = 16
    data_seed: int = 1
    heldout_characters: int = 2
    heldout_seed: int = 99
    calibration_seed: int = 2024
    corpus_characters: int = 96
    corpus_f_per: int = 16
    corpus_seed: int = 7
    seed: int = 0
    vae_steps: int = 2000
    base_steps: int = 5000
    finetune_steps: int = 1000
    finetune_lr: float = 1e-4  # siblings stay near the base; full lr drifts the hue prior
    encoder_steps: int = 3000
    mix_steps: int = 200
    ae_stage1_steps: int = 1500
    ae_stage2_steps: int = 300
    compare_batches: int = 32
    eval_samples: int = 64
    eval_seed: int = 5
    sample_steps: int = 20


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()


class _Stage:
    def __init__(self, root: Path, name: str, key_obj):
        self.dir = root / name
        self.key = _key(key_obj)

    def cached(self) -> Optional[dict]:
        path = self.dir / "stage.json"
        if not path.exists():
            return None
        info = json.loads(path.read_text(encoding="utf-8"))
        return info if info.get("key") == self.key else None

    def finish(self, info: dict) -> dict:
        info = {"key": self.key, **info}
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "stage.json").write_text(json.dumps(info, indent=1, sort_keys=True), encoding="utf-8")
        return info


def _record_run(directory: Path, config: TrainConfig, losses) -> None:
    RunConfig(train=config).write(directory / "config.txt")
    write_loss_tsv(directory / "loss.tsv", losses)


@dataclass
class PipelineResult:
    root: str
    config: dict
    stages: dict = field(default_factory=dict)
    backbone_a: dict = field(default_factory=dict, repr=False)
    backbone_b: dict = field(default_factory=dict, repr=False)
    encoder: dict = field(default_factory=dict, repr=False)
    train_ids: list = field(default_factory=list)
    heldout: list = field(default_factory=list, repr=False)


def run_pipeline(root, cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    res = PipelineResult(str(root), asdict(cfg))

    records = build_dataset(cfg.characters, cfg.c_per, cfg.f_per, seed=cfg.data_seed)
    train_ids = [r.char_id for r in records]
    held = build_dataset(cfg.heldout_characters, cfg.c_per, cfg.f_per, seed=cfg.heldout_seed, exclude=train_ids)
    res.train_ids, res.heldout = train_ids, held
    unseen = train_ids + [h.char_id for h in held]
    corpora = [build_dataset(cfg.corpus_characters, 1, cfg.corpus_f_per, seed=cfg.corpus_seed + i, exclude=unseen)
               for i in range(2)]
    data = _Stage(root, "data", [cfg.characters, cfg.c_per, cfg.f_per, cfg.data_seed,
                                 cfg.heldout_characters, cfg.heldout_seed, cfg.calibration_seed,
                                 cfg.corpus_characters, cfg.corpus_f_per, cfg.corpus_seed])
    info = data.cached()
    if info is None:
        params = {"characters": cfg.characters, "c_per": cfg.c_per, "f_per": cfg.f_per, "seed": cfg.data_seed}
        m_train = write_dataset(records, data.dir / "train", params)
        m_held = write_dataset(held, data.dir / "heldout", {**params, "characters": cfg.heldout_characters,
                                                            "seed": cfg.heldout_seed, "exclude": train_ids})
        m_corpus = [write_dataset(c, data.dir / name, {"characters": cfg.corpus_characters, "c_per": 1,
                                                       "f_per": cfg.corpus_f_per, "seed": cfg.corpus_seed + i,
                                                       "exclude": unseen})
                    for i, (c, name) in enumerate(zip(corpora, ("corpus", "corpus_b")))]
        calib = build_dataset(16, 2, 14, seed=cfg.calibration_seed)
        info = data.finish({"manifest_train": m_train, "manifest_heldout": m_held,
                            "manifest_corpus": m_corpus[0], "manifest_corpus_b": m_corpus[1],
                            "probe_calibration": probe_calibration(calib),
                            "calibration_images": sum(len(r.appearance_images) + len(r.variation_images)
                                                      for r in calib)})
    res.stages["data"] = info
    if info["probe_calibration"] != 1.0:
        raise RuntimeError(f"identity probe calibration {info['probe_calibration']} != 1.0")

    # -- VAE
    vcfg = vae_config(total_steps=cfg.vae_steps, seed=cfg.seed, init_seed=cfg.seed)
    st = _Stage(root, "vae", [info["manifest_corpus"], vcfg.as_dict()])
    vinfo = st.cached()
    if vinfo is None:
        log.info("training VAE (%d steps)", cfg.vae_steps)
        r = train_vae(corpora[0], vcfg)
        vae = r.params
        store.save_component(st.dir / "vae.cife", vae, "vae", {"config": vcfg.as_dict()})
        _record_run(st.dir, vcfg, r.losses)
        ims = np.stack([im for h in held for im in h.variation_images]).astype(np.float32)
        rec = vae_decode(encode_moments(ims, vae)[0], vae).data
        vinfo = st.finish({"loss_first": r.losses[0], "loss_last": r.losses[-1],
                           "heldout_psnr": psnr(ims, rec)})
    vae = store.load_component(st.dir / "vae.cife", "vae")
    res.stages["vae"] = vinfo

    # -- backbone base, then two sibling fine-tunes
    bcfg = backbone_config(total_steps=cfg.base_steps, seed=cfg.seed, init_seed=cfg.seed)
    st = _Stage(root, "backbone_base", [vinfo["key"], bcfg.as_dict()])
    binfo = st.cached()
    if binfo is None:
        log.info("training base backbone (%d steps)", cfg.base_steps)
        r = train_backbone_diffusion(corpora[0], vae, bcfg)
        text = {k: v for k, v in r.params.items() if k.startswith("text.")}
        unet = {k: v for k, v in r.params.items() if k.startswith("unet.")}
        store.save_backbone(st.dir, {"vae": vae, "text": text, "unet": unet}, {"config": bcfg.as_dict()})
        _record_run(st.dir, bcfg, r.losses)
        first, last = smoothed(r.losses, 100)
        binfo = st.finish({"smoothed_first": first, "smoothed_last": last,
                           "vae_hash_before": r.frozen_hashes_before["vae"],
                           "vae_hash_after": r.frozen_hashes_after["vae"]})
    base = store.load_backbone(st.dir)
    res.stages["backbone_base"] = binfo

    branches = {}
    for label, offset in (("a", 1), ("b", 2)):
        fcfg = backbone_config(total_steps=cfg.finetune_steps, learning_rate=cfg.finetune_lr,
                              seed=cfg.seed + offset, init_seed=cfg.seed)
        corpus = corpora[offset - 1]
        st = _Stage(root, f"backbone_{label}", [binfo["key"], info[("manifest_corpus", "manifest_corpus_b")[offset - 1]],
                                                fcfg.as_dict()])
        finfo = st.cached()
        if finfo is None:
            log.info("fine-tuning backbone %s (%d steps)", label.upper(), cfg.finetune_steps)
            r = train_backbone_diffusion(corpus, vae, fcfg, init=(base["text"], base["unet"]))
            text = {k: v for k, v in r.params.items() if k.startswith("text.")}
            unet = {k: v for k, v in r.params.items() if k.startswith("unet.")}
            store.save_backbone(st.dir, {"vae": vae, "text": text, "unet": unet}, {"config": fcfg.as_dict()})
            _record_run(st.dir, fcfg, r.losses)
            finfo = st.finish({"hash": store.backbone_hash(st.dir)})
        branches[label] = (store.load_backbone(st.dir), finfo)
        res.stages[f"backbone_{label}"] = finfo
    bb_a, bb_b = branches["a"][0], branches["b"][0]
    res.backbone_a, res.backbone_b = bb_a, bb_b

    # -- same-place encoder on backbone A
    ecfg = encoder_config(total_steps=cfg.encoder_steps, seed=cfg.seed, init_seed=cfg.seed)
    st = _Stage(root, "encoder_same_place", [branches["a"][1]["key"], ecfg.as_dict()])
    einfo = st.cached()
    if einfo is None:
        log.info("training same-place encoder (%d steps)", cfg.encoder_steps)
        r = train_character_encoder(records, bb_a, ecfg)
        store.save_encoder(st.dir / "encoder.cife", r.params, {"config": ecfg.as_dict()})
        _record_run(st.dir, ecfg, r.losses)
        init = init_character_encoder(ecfg.init_seed, ecfg.variant, ecfg.k_rows)
        before = conditioned_loss(records, bb_a, init, ecfg.variant, cfg.seed + 17, 16, cfg.compare_batches)
        after = conditioned_loss(records, bb_a, r.params, ecfg.variant, cfg.seed + 17, 16, cfg.compare_batches)
        first, last = smoothed(r.losses, 200)
        einfo = st.finish({"hashes_before": r.frozen_hashes_before, "hashes_after": r.frozen_hashes_after,
                           "encoder_init_hash": params_hash(init, "encoder:same-place"),
                           "encoder_hash": params_hash(r.params, "encoder:same-place"),
                           "first_grad_norm": r.first_grad_norm, "smoothed_first": first,
                           "smoothed_last": last, "paired_loss_init": float(np.mean(before)),
                           "paired_loss_trained": float(np.mean(after))})
    enc = store.load_encoder(st.dir / "encoder.cife")
    res.encoder = enc
    res.stages["encoder_same_place"] = einfo

    # -- evaluations
    st = _Stage(root, "eval", [einfo["key"], branches["b"][1]["key"], info["manifest_heldout"],
                               cfg.eval_samples, cfg.eval_seed, cfg.sample_steps])
    evinfo = st.cached()
    if evinfo is None:
        log.info("evaluating identity, control and transfer")
        n, seed, steps = cfg.eval_samples, cfg.eval_seed, cfg.sample_steps
        ident, imgs = eval_identity(enc, bb_a, held, n, seed, steps, train_ids, return_images=True)
        untrained = eval_identity(random_weights_encoder(cfg.seed, "same-place"), bb_a, held, n, seed, steps,
                                  train_ids)
        ctrl, cimgs = eval_control(bb_a, held, n, seed, steps, return_images=True)
        transfer = eval_transfer(enc, bb_a, bb_b, held, n, seed, branches["a"][1]["hash"],
                                 branches["b"][1]["hash"], steps, train_ids)
        diffs = [_per_pixel_l2(imgs[h.char_id], cimgs[h.char_id]) for h in held]
        for name, rep in (("identity", ident.to_dict()), ("control", ctrl.to_dict()), ("transfer", transfer),
                          ("untrained", untrained.to_dict())):
            (st.dir / name).mkdir(parents=True, exist_ok=True)
            (st.dir / name / "eval.json").write_text(json.dumps(rep, indent=1, sort_keys=True), encoding="utf-8")
        for h in held:
            save_png(contact_sheet(list(imgs[h.char_id][:32])), st.dir / "identity" / f"{h.char_id}.png")
            save_png(contact_sheet(list(cimgs[h.char_id][:32])), st.dir / "control" / f"{h.char_id}.png")
        evinfo = st.finish({"identity": ident.to_dict(), "control": ctrl.to_dict(), "transfer": transfer,
                            "untrained_identity": untrained.to_dict(),
                            "encoder_on_off_pixel_l2": float(np.mean(diffs))})
    res.stages["eval"] = evinfo

    # -- mix variant smoke run
    mcfg = encoder_config(total_steps=cfg.mix_steps, seed=cfg.seed, init_seed=cfg.seed, variant="mix")
    st = _Stage(root, "encoder_mix", [branches["a"][1]["key"], mcfg.as_dict()])
    minfo = st.cached()
    if minfo is None:
        log.info("mix variant smoke run (%d steps)", cfg.mix_steps)
        r = train_character_encoder(records, bb_a, mcfg)
        store.save_encoder(st.dir / "encoder.cife", r.params, {"config": mcfg.as_dict()})
        _record_run(st.dir, mcfg, r.losses)
        minfo = st.finish({"hashes_before": r.frozen_hashes_before, "hashes_after": r.frozen_hashes_after,
                           "steps": len(r.losses), "loss_last": r.losses[-1],
                           "first_grad_norm": r.first_grad_norm})
    res.stages["encoder_mix"] = minfo

    # -- autoencoder: stage 1 reconstruction, stage 2 diffusion fine-tune
    acfg = ae_pretrain_config(total_steps=cfg.ae_stage1_steps, seed=cfg.seed, init_seed=cfg.seed)
    st = _Stage(root, "ae_stage1", [branches["a"][1]["key"], acfg.as_dict()])
    a1 = st.cached()
    if a1 is None:
        log.info("autoencoder stage 1 (%d steps)", cfg.ae_stage1_steps)
        init = init_character_encoder(acfg.init_seed, "autoencoder", acfg.k_rows)
        r = pretrain_autoencoder(records, bb_a["text"], acfg, init=init)
        store.save_encoder(st.dir / "encoder.cife", r.params, {"config": acfg.as_dict(), "stage": 1})
        _record_run(st.dir, acfg, r.losses)
        before = reconstruction_mse(records, bb_a["text"], init, cfg.seed + 23, 16, cfg.compare_batches)
        after = reconstruction_mse(records, bb_a["text"], r.params, cfg.seed + 23, 16, cfg.compare_batches)
        ref = records[0].appearance_images[0]
        caps = [caption_for(SpriteSpec(records[0].identity, dx=-4, dy=-4, scale=0.7, rotation=0, background=0)),
                caption_for(SpriteSpec(records[0].identity, dx=4, dy=4, scale=1.0, rotation=2, background=7))]
        a1 = st.finish({"recon_mse_init": float(np.mean(before)), "recon_mse_trained": float(np.mean(after)),
                        "caption_swap_l2": caption_sensitivity(ref, caps, bb_a["text"], r.params),
                        "loss_first": r.losses[0], "loss_last": r.losses[-1]})
    stage1 = store.load_encoder(st.dir / "encoder.cife")
    res.stages["ae_stage1"] = a1

    scfg = encoder_config(total_steps=cfg.ae_stage2_steps, seed=cfg.seed, init_seed=cfg.seed, variant="autoencoder")
    st = _Stage(root, "ae_stage2", [a1["key"], scfg.as_dict()])
    a2 = st.cached()
    if a2 is None:
        log.info("autoencoder stage 2 (%d steps)", cfg.ae_stage2_steps)
        fresh = init_character_encoder(cfg.seed, "autoencoder", scfg.k_rows)
        pair_seed = cfg.seed + 31
        from_stage1 = conditioned_loss(records, bb_a, stage1, "autoencoder", pair_seed, 16, cfg.compare_batches)
        from_random = conditioned_loss(records, bb_a, fresh, "autoencoder", pair_seed, 16, cfg.compare_batches)
        from_noise = conditioned_loss(records, bb_a, random_weights_encoder(cfg.seed, "autoencoder"), "autoencoder",
                                      pair_seed, 16, cfg.compare_batches)
        r = finetune_autoencoder_stage2(records, bb_a, stage1, scfg)
        store.save_encoder(st.dir / "encoder.cife", r.params, {"config": scfg.as_dict(), "stage": 2})
        _record_run(st.dir, scfg, r.losses)
        after = conditioned_loss(records, bb_a, r.params, "autoencoder", pair_seed, 16, cfg.compare_batches)
        a2 = st.finish({"init_loss_stage1": float(np.mean(from_stage1)),
                        "init_loss_random": float(np.mean(from_random)),
                        "init_loss_random_weights": float(np.mean(from_noise)),
                        "paired_stage1_wins": int(sum(a < b for a, b in zip(from_stage1, from_random))),
                        "loss_after": float(np.mean(after)),
                        "hashes_before": r.frozen_hashes_before, "hashes_after": r.frozen_hashes_after})
    res.stages["ae_stage2"] = a2

    (root / "results.json").write_text(json.dumps(res.stages, indent=1, sort_keys=True), encoding="utf-8")
    return res


def random_weights_encoder(seed: int, variant) -> dict:
    """An untrained encoder whose output layer is random too (the default init zeroes it)."""
    enc = init_character_encoder(seed, variant)
    w = enc["enc.deep.fc2.weight"].data
    g = np.random.default_rng(seed + 4242)
    enc["enc.deep.fc2.weight"] = Tensor((g.standard_normal(w.shape) / np.sqrt(w.shape[1])).astype(w.dtype))
    return enc


def _per_pixel_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over pixels of the RGB Euclidean distance."""
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.sqrt((d ** 2).sum(axis=1)).mean())
