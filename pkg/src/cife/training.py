"""Training loops: VAE, backbone diffusion, character encoder (all variants).

Every loop is a pure function of (data, config, seed): batch indices,
timesteps and noise come from counter-based streams keyed by the step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .backbone.text import encode_prompts, init_text_encoder, text_encode, tokenize_batch
from .backbone.unet import init_unet
from .backbone.vae import encode_moments, init_vae, to_diffusion_latent, vae_decode, vae_encode, vae_loss
from .character_encoder import (
    VariantKind,
    ae_decode,
    compose_conditions,
    encode_reference,
    init_character_encoder,
)
from .checkpoint import params_hash
from .dataset import CharacterRecord, pair_stream
from .diffusion import NoiseSchedule, default_schedule, diffusion_loss, training_noise
from .nn import Params, copy_params
from .numerics import Tape, Tensor
from .numerics import ops

log = logging.getLogger(__name__)

COMPONENT_PREFIXES = {
    "vae": ("vae.",),
    "text_encoder": ("text.",),
    "unet": ("unet.",),
    "character_encoder": ("enc.features.", "enc.deep."),
    "mixer": ("enc.mixer.",),
    "ae_decoder": ("enc.aedec.",),
}
BACKBONE = ("vae", "text_encoder", "unet")


class TrainingDiverged(RuntimeError):
    pass


class FreezeViolation(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    init_seed: int = 0
    variant: str = "same-place"
    k_rows: int = 4
    kl_weight: float = 1e-3
    freeze_vae: bool = True
    freeze_text_encoder: bool = True
    freeze_unet: bool = True
    freeze_character_encoder: bool = False
    freeze_mixer: bool = False
    freeze_ae_decoder: bool = True
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for name in ("batch_size", "total_steps", "beta1", "beta2", "adam_eps", "k_rows"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.beta1 >= 1 or self.beta2 >= 1:
            raise ValueError("moment decay rates must be < 1")
        VariantKind.parse(self.variant)

    def frozen(self, component: str) -> bool:
        return bool(getattr(self, f"freeze_{component}"))

    def trainable_names(self, params: Params) -> list[str]:
        prefixes = tuple(p for comp, pre in COMPONENT_PREFIXES.items() if not self.frozen(comp) for p in pre)
        names = sorted(k for k in params if k.startswith(prefixes) and k != "vae.latent_scale")
        return names

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def vae_config(**kw) -> TrainConfig:
    base = dict(learning_rate=2e-3, total_steps=2000, freeze_vae=False, freeze_character_encoder=True,
                freeze_mixer=True)
    base.update(kw)
    return TrainConfig(**base)


def backbone_config(**kw) -> TrainConfig:
    base = dict(learning_rate=1e-3, total_steps=4000, freeze_text_encoder=False, freeze_unet=False,
                freeze_character_encoder=True, freeze_mixer=True)
    base.update(kw)
    return TrainConfig(**base)


def encoder_config(**kw) -> TrainConfig:
    base = dict(learning_rate=1e-3, total_steps=3000)
    base.update(kw)
    return TrainConfig(**base)


def ae_pretrain_config(**kw) -> TrainConfig:
    base = dict(learning_rate=1e-3, total_steps=1500, variant="autoencoder", freeze_ae_decoder=False)
    base.update(kw)
    return TrainConfig(**base)


# -- optimiser -----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Params, names: Sequence[str]) -> "OptimizerState":
        st = cls()
        for n in names:
            st.m[n] = np.zeros_like(params[n].data)
            st.v[n] = np.zeros_like(params[n].data)
        return st

    def keys(self) -> set:
        return set(self.m)


def apply_gradients(params: Params, grads: dict, state: OptimizerState, config: TrainConfig) -> None:
    """Bias-corrected adaptive-moment update of the parameters named in ``state``."""
    extra = set(grads) - state.keys()
    if extra:
        raise FreezeViolation(f"gradients supplied for frozen parameters: {sorted(extra)[:5]}")
    missing = state.keys() - set(grads)
    if missing:
        raise ValueError(f"missing gradients for trainable parameters: {sorted(missing)[:5]}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = config.learning_rate
    for name in sorted(grads):
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        if lr == 0:
            continue
        p = params[name]
        update = lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        p.data = (p.data - update).astype(p.data.dtype)


# -- shared loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: Params
    losses: list
    frozen_hashes_before: dict = field(default_factory=dict)
    frozen_hashes_after: dict = field(default_factory=dict)
    first_grad_norm: float = float("nan")
    optimizer: Optional[OptimizerState] = None
    tuned_unet: Optional[Params] = None


def _mark_trainable(params: Params, names: Sequence[str]) -> None:
    wanted = set(names)
    for k, t in params.items():
        t.requires_grad = k in wanted


def _run(params: Params, names: Sequence[str], config: TrainConfig,
         loss_fn: Callable[[int], Tensor], label: str) -> TrainResult:
    if not names:
        raise FreezeViolation(f"{label}: every component is frozen, nothing to train")
    _mark_trainable(params, names)
    state = OptimizerState.for_params(params, names)
    losses = []
    first_norm = float("nan")
    try:
        for step in range(config.total_steps):
            with Tape() as tape:
                loss = loss_fn(step)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"{label}: loss became {value} at step {step}")
            grads = dict(zip(names, tape.gradient(loss, [params[n] for n in names])))
            if step == 0:
                first_norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            apply_gradients(params, grads, state, config)
            losses.append(value)
            if config.log_every and (step % config.log_every == 0 or step == config.total_steps - 1):
                log.info("%s step %d loss %.5f", label, step, value)
    finally:
        for t in params.values():
            t.requires_grad = False
            t.grad = None
    return TrainResult(params, losses, first_grad_norm=first_norm, optimizer=state)


def _batch(seed: int, stream: str, step: int, n: int, size: int) -> np.ndarray:
    return rng.generator(seed, stream, step).choice(n, size=min(size, n), replace=False)


def write_loss_tsv(path, losses: Sequence[float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step\tloss\n"] + [f"{i}\t{v:.8g}\n" for i, v in enumerate(losses)]
    path.write_text("".join(lines), encoding="utf-8")


def smoothed(losses: Sequence[float], window: int = 50) -> tuple[float, float]:
    """Mean of the first and last ``window`` losses."""
    w = max(1, min(window, len(losses) // 2 or 1))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


def _all_images(records: Sequence[CharacterRecord]) -> np.ndarray:
    ims = []
    for r in records:
        ims.extend(r.appearance_images)
        ims.extend(r.variation_images)
    return np.stack(ims).astype(np.float32)


# -- VAE -----------------------------------------------------------------------

def train_vae(records: Sequence[CharacterRecord], config: TrainConfig,
              init: Optional[Params] = None) -> TrainResult:
    if not records:
        raise ValueError("empty dataset")
    images = _all_images(records)
    params = copy_params(init) if init is not None else init_vae(config.init_seed)
    names = config.trainable_names(params)
    if any(not n.startswith("vae.") for n in names):
        raise FreezeViolation("train_vae only trains the VAE")

    def loss_fn(step):
        idx = _batch(config.seed, "vae.batch", step, len(images), config.batch_size)
        x = Tensor(images[idx])
        z, mu, logvar = vae_encode(x, params, noise_seed=config.seed * 1_000_003 + step)
        return vae_loss(x, vae_decode(z, params), mu, logvar, config.kl_weight)

    result = _run(params, names, config, loss_fn, "vae")
    mus = np.concatenate([encode_moments(images[i:i + 64], params)[0].data for i in range(0, len(images), 64)])
    params["vae.latent_scale"].data = np.array([1.0 / max(float(mus.std()), 1e-6)], dtype=np.float32)
    return result


def encode_latents(images: np.ndarray, vae: Params, chunk: int = 64) -> np.ndarray:
    """Deterministic-mode latents scaled for diffusion."""
    out = [encode_moments(images[i:i + chunk], vae)[0].data for i in range(0, len(images), chunk)]
    return to_diffusion_latent(np.concatenate(out), vae).astype(np.float32)


def decode_latents(latents: np.ndarray, vae: Params, chunk: int = 64) -> np.ndarray:
    from .backbone.vae import from_diffusion_latent
    out = [vae_decode(from_diffusion_latent(latents[i:i + chunk], vae), vae).data
           for i in range(0, len(latents), chunk)]
    return np.concatenate(out)


# -- backbone diffusion --------------------------------------------------------

def train_backbone_diffusion(records: Sequence[CharacterRecord], vae: Params, config: TrainConfig,
                             init: Optional[tuple[Params, Params]] = None,
                             sched: Optional[NoiseSchedule] = None) -> TrainResult:
    """Train text encoder + UNet on (caption, variation image) with text-only conditioning.

    ``init`` continues from an existing (text, unet) pair instead of a fresh
    initialisation. Returned params hold both components.
    """
    if not config.frozen("vae"):
        raise FreezeViolation("the VAE must stay frozen while training the diffusion backbone")
    sched = sched or default_schedule()
    images = np.stack([im for r in records for im in r.variation_images]).astype(np.float32)
    captions = [c for r in records for c in r.captions]
    x0_all = encode_latents(images, vae)
    tokens_all = tokenize_batch(captions)
    if init is None:
        params = {**init_text_encoder(config.init_seed), **init_unet(config.init_seed)}
    else:
        params = {**copy_params(init[0]), **copy_params(init[1])}
    names = config.trainable_names(params)
    vae_before = params_hash(vae, "vae")

    def loss_fn(step):
        idx = _batch(config.seed, "backbone.batch", step, len(images), config.batch_size)
        t, eps = training_noise(config.seed, step, len(idx), sched.T)
        cond = text_encode(tokens_all[idx], params)
        return diffusion_loss(x0_all[idx], cond, t, 0, params, sched, eps=eps)

    result = _run(params, names, config, loss_fn, "backbone")
    result.frozen_hashes_before = {"vae": vae_before}
    result.frozen_hashes_after = {"vae": params_hash(vae, "vae")}
    return result


# -- character encoder ---------------------------------------------------------

class _PairBatches:
    """Consecutive batches over a freshly shuffled pair stream per epoch."""

    def __init__(self, records, seed: int, batch_size: int):
        self.records = records
        self.seed = seed
        self.batch_size = batch_size
        self._epoch = -1
        self._pairs = []

    def get(self, step: int):
        n = sum(len(r.appearance_images) * len(r.variation_images) for r in self.records)
        per_epoch = max(1, n // self.batch_size)
        epoch, k = divmod(step, per_epoch)
        if epoch != self._epoch:
            self._pairs = pair_stream(self.records, self.seed * 7919 + epoch)
            self._epoch = epoch
        return self._pairs[k * self.batch_size:(k + 1) * self.batch_size]


def _caption_cache(records, text: Params) -> dict:
    caps = sorted({c for r in records for c in r.captions})
    hidden = encode_prompts(caps, text)
    return {c: hidden[i] for i, c in enumerate(caps)}


def _target_cache(records, vae: Params) -> dict:
    ims = np.stack([im for r in records for im in r.variation_images]).astype(np.float32)
    lat = encode_latents(ims, vae)
    keys = [(r.char_id, j) for r in records for j in range(len(r.variation_images))]
    return dict(zip(keys, lat))


def _train_conditioned(records, backbone: dict, enc: Params, config: TrainConfig, label: str,
                       sched: Optional[NoiseSchedule] = None) -> TrainResult:
    sched = sched or default_schedule()
    variant = VariantKind.parse(config.variant)
    vae, text, unet = backbone["vae"], backbone["text"], backbone["unet"]
    before = {"vae": params_hash(vae, "vae"), "text": params_hash(text, "text"), "unet": params_hash(unet, "unet")}
    hidden = _caption_cache(records, text)
    targets = _target_cache(records, vae)
    batches = _PairBatches(records, config.seed, config.batch_size)
    params = {**enc, **unet}
    names = config.trainable_names(params)

    def loss_fn(step):
        batch = batches.get(step)
        refs = Tensor(np.stack([p.reference for p in batch]))
        x0 = np.stack([targets[(p.char_id, p.target_index)] for p in batch])
        text_rows = Tensor(np.stack([hidden[p.caption] for p in batch]))
        char = encode_reference(refs, params)
        cond = compose_conditions(text_rows, char, variant, params)
        t, eps = training_noise(config.seed, step, len(batch), sched.T)
        return diffusion_loss(x0, cond, t, 0, params, sched, eps=eps)

    result = _run(params, names, config, loss_fn, label)
    result.params = {k: v for k, v in params.items() if k.startswith("enc.")}
    if not config.frozen("unet"):
        backbone["unet"] = result.tuned_unet = {k: v for k, v in params.items() if k.startswith("unet.")}
    result.frozen_hashes_before = before
    result.frozen_hashes_after = {"vae": params_hash(vae, "vae"), "text": params_hash(text, "text"),
                                  "unet": params_hash(backbone["unet"], "unet")}
    return result


def train_character_encoder(records, backbone: dict, config: TrainConfig,
                            init: Optional[Params] = None,
                            sched: Optional[NoiseSchedule] = None) -> TrainResult:
    """Frozen-backbone encoder training; only encoder (and mixer) weights move."""
    variant = VariantKind.parse(config.variant)
    if variant is VariantKind.AUTOENCODER:
        raise ValueError("autoencoder variant trains via pretrain_autoencoder + finetune_autoencoder_stage2")
    unfrozen = [c for c in BACKBONE if not config.frozen(c)]
    if unfrozen:
        raise FreezeViolation(f"train_character_encoder requires a frozen backbone; unfrozen: {unfrozen}")
    enc = copy_params(init) if init is not None else init_character_encoder(config.init_seed, variant, config.k_rows)
    return _train_conditioned(records, backbone, enc, config, f"encoder[{variant.value}]", sched)


def pretrain_autoencoder(records, text: Params, config: TrainConfig,
                         init: Optional[Params] = None) -> TrainResult:
    """Stage 1: reconstruct the target image from (reference rows, target caption states)."""
    if VariantKind.parse(config.variant) is not VariantKind.AUTOENCODER:
        raise ValueError("pretrain_autoencoder needs variant=autoencoder")
    if not config.frozen("text_encoder"):
        raise FreezeViolation("the text encoder stays frozen during autoencoder pre-training")
    enc = copy_params(init) if init is not None else init_character_encoder(config.init_seed, "autoencoder", config.k_rows)
    hidden = _caption_cache(records, text)
    batches = _PairBatches(records, config.seed, config.batch_size)
    names = config.trainable_names(enc)

    def loss_fn(step):
        batch = batches.get(step)
        refs = Tensor(np.stack([p.reference for p in batch]))
        targets = np.stack([p.target for p in batch])
        text_rows = Tensor(np.stack([hidden[p.caption] for p in batch]))
        return ops.mse(ae_decode(encode_reference(refs, enc), text_rows, enc), targets)

    return _run(enc, names, config, loss_fn, "autoencoder[stage1]")


def finetune_autoencoder_stage2(records, backbone: dict, stage1: Params, config: TrainConfig,
                                sched: Optional[NoiseSchedule] = None) -> TrainResult:
    """Stage 2: diffusion objective from stage-1 weights; UNet may be unfrozen via config."""
    if VariantKind.parse(config.variant) is not VariantKind.AUTOENCODER:
        raise ValueError("finetune_autoencoder_stage2 needs variant=autoencoder")
    if not (config.frozen("vae") and config.frozen("text_encoder")):
        raise FreezeViolation("stage 2 may only unfreeze the UNet among backbone components")
    backbone = dict(backbone)
    if not config.frozen("unet"):
        backbone["unet"] = copy_params(backbone["unet"])
    return _train_conditioned(records, backbone, copy_params(stage1), config, "autoencoder[stage2]", sched)


def conditioned_loss(records, backbone: dict, enc: Params, variant, seed: int, batch_size: int,
                     n_batches: int, sched: Optional[NoiseSchedule] = None) -> list[float]:
    """Diffusion losses of a fixed encoder over ``n_batches`` seeded batches (no training)."""
    sched = sched or default_schedule()
    variant = VariantKind.parse(variant)
    hidden = _caption_cache(records, backbone["text"])
    targets = _target_cache(records, backbone["vae"])
    batches = _PairBatches(records, seed, batch_size)
    params = {**enc, **backbone["unet"]}
    out = []
    for step in range(n_batches):
        batch = batches.get(step)
        refs = np.stack([p.reference for p in batch])
        x0 = np.stack([targets[(p.char_id, p.target_index)] for p in batch])
        text_rows = Tensor(np.stack([hidden[p.caption] for p in batch]))
        cond = compose_conditions(text_rows, encode_reference(refs, params), variant, params)
        t, eps = training_noise(seed, step, len(batch), sched.T)
        out.append(float(diffusion_loss(x0, cond, t, 0, params, sched, eps=eps).data))
    return out


def reconstruction_mse(records, text: Params, enc: Params, seed: int, batch_size: int,
                       n_batches: int) -> list[float]:
    """Stage-1 reconstruction errors of a fixed autoencoder over seeded batches."""
    hidden = _caption_cache(records, text)
    batches = _PairBatches(records, seed, batch_size)
    out = []
    for step in range(n_batches):
        batch = batches.get(step)
        refs = np.stack([p.reference for p in batch])
        targets = np.stack([p.target for p in batch])
        text_rows = Tensor(np.stack([hidden[p.caption] for p in batch]))
        out.append(float(ops.mse(ae_decode(encode_reference(refs, enc), text_rows, enc), targets).data))
    return out


def caption_sensitivity(reference: np.ndarray, captions: Sequence[str], text: Params, enc: Params) -> float:
    """L2 distance between stage-1 reconstructions of one reference under two captions."""
    if len(captions) != 2:
        raise ValueError("need exactly two captions")
    hidden = Tensor(encode_prompts(list(captions), text))
    refs = np.stack([reference, reference]).astype(np.float32)
    recon = ae_decode(encode_reference(refs, enc), hidden, enc).data.astype(np.float64)
    return float(np.sqrt(np.sum((recon[0] - recon[1]) ** 2)))
