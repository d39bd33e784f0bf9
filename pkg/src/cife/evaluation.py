"""Machine-graded identity experiments.

Identity is judged by a closed-form probe (dominant foreground hue bin plus
a fill-ratio shape guess) rather than by eye. Significance is an exact
one-sided binomial tail against chance = 1/8.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .backbone.text import encode_prompts
from .character_encoder import VariantKind, compose_conditions, encode_reference, variant_of
from .dataset import BACKGROUNDS, N_HUES, CharacterRecord, neutral_caption
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample, default_schedule
from .nn import Params
from .numerics import Tensor
from .training import decode_latents

CHANCE = 1.0 / N_HUES
MIN_SAMPLES = 32
SAT_THRESHOLD = 0.4
VALUE_THRESHOLD = 0.35


class EvaluationError(ValueError):
    pass


def rgb_to_hsv(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(3, H, W) RGB -> hue in [0, 1), saturation, value."""
    r, g, b = (np.asarray(image[i], dtype=np.float64) for i in range(3))
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = mx - mn
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(mx == r, ((g - b) / safe) % 6.0,
                   np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0)) / 6.0
    hue = np.where(delta > 0, hue, 0.0) % 1.0
    return hue, sat, mx


@dataclass(frozen=True)
class ProbeResult:
    hue_bin: int
    shape: str
    foreground_pixels: int


class IdentityProbe:
    """Pixel-statistics identity classifier."""

    def foreground(self, image: np.ndarray) -> np.ndarray:
        _, sat, val = rgb_to_hsv(image)
        return (sat > SAT_THRESHOLD) & (val > VALUE_THRESHOLD)

    def hue_bin(self, image: np.ndarray) -> int:
        hue, sat, val = rgb_to_hsv(image)
        mask = (sat > SAT_THRESHOLD) & (val > VALUE_THRESHOLD)
        weights = mask.astype(np.float64)
        if not mask.any():
            weights = sat * sat * val
        bins = np.round(hue * N_HUES).astype(int) % N_HUES
        hist = np.bincount(bins.ravel(), weights=weights.ravel(), minlength=N_HUES)
        return int(np.argmax(hist))

    def shape(self, image: np.ndarray) -> str:
        mask = ndimage.binary_fill_holes(self.foreground(image))
        labels, n = ndimage.label(mask)
        if n == 0:
            return "unknown"
        sizes = ndimage.sum(mask, labels, range(1, n + 1))
        blob = labels == (int(np.argmax(sizes)) + 1)
        ys, xs = np.nonzero(blob)
        box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        fill = blob.sum() / box
        if fill > 0.88:
            return "square"
        if fill > 0.64:
            return "circle"
        return "triangle"

    def __call__(self, image: np.ndarray) -> ProbeResult:
        return ProbeResult(self.hue_bin(image), self.shape(image), int(self.foreground(image).sum()))


def binomial_pvalue(successes: int, trials: int, chance: float) -> float:
    """Exact one-sided P(X >= successes) for X ~ Binomial(trials, chance)."""
    if not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials")
    if successes == 0:
        return 1.0
    q = 1.0 - chance
    total = math.fsum(math.comb(trials, k) * chance ** k * q ** (trials - k)
                      for k in range(successes, trials + 1))
    return min(1.0, max(0.0, total))


def mean_pairwise_l2(images: np.ndarray, limit: int = 64) -> float:
    x = np.asarray(images[:limit], dtype=np.float64).reshape(min(len(images), limit), -1)
    if len(x) < 2:
        return 0.0
    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0.0))
    iu = np.triu_indices(len(x), 1)
    return float(d[iu].mean())


@dataclass
class ConditionReport:
    target: str
    target_hue: int
    samples: int
    correct: int
    accuracy: float
    p_value: float
    diversity: float
    predicted_hues: list = field(default_factory=list)


@dataclass
class EvalReport:
    kind: str
    conditions: list
    total_samples: int
    total_correct: int
    accuracy: float
    p_value: float
    chance: float = CHANCE
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _summarise(kind: str, conditions: list, config: dict) -> EvalReport:
    n = sum(c.samples for c in conditions)
    k = sum(c.correct for c in conditions)
    return EvalReport(kind, conditions, n, k, k / n if n else 0.0, binomial_pvalue(k, n, CHANCE), config=config)


def eval_prompts(n: int) -> list[str]:
    """Neutral captions: centred, upright, large, cycling backgrounds."""
    return [neutral_caption(i % len(BACKGROUNDS)) for i in range(n)]


def sample_seeds(seed: int, n: int, salt: int = 0) -> list[int]:
    return [seed * 100_003 + salt * 10_007 + i for i in range(n)]


def generate(backbone: dict, prompts: Sequence[str], seeds: Sequence[int], steps: int,
             enc: Optional[Params] = None, reference: Optional[np.ndarray] = None,
             sched: Optional[NoiseSchedule] = None, eta: float = 0.0) -> np.ndarray:
    """DDIM samples decoded to (N, 3, 32, 32) images; encoder optional."""
    sched = sched or default_schedule()
    text_rows = encode_prompts(prompts, backbone["text"])
    cond = Tensor(text_rows)
    if enc is not None:
        if reference is None:
            raise EvaluationError("an encoder needs a reference image")
        refs = np.broadcast_to(np.asarray(reference, np.float32), (len(prompts),) + np.shape(reference))
        char = encode_reference(np.ascontiguousarray(refs), enc)
        cond = compose_conditions(cond, char, variant_of(enc), enc)
    cfg = SamplerConfig(steps=steps, eta=eta, seed=int(seeds[0]))
    latents = ddim_sample(cond, cfg, backbone["unet"], sched, sample_seeds=list(seeds))
    return np.clip(decode_latents(latents, backbone["vae"]), 0.0, 1.0)


def _check_count(n: int) -> None:
    if n < MIN_SAMPLES:
        raise EvaluationError(f"need at least {MIN_SAMPLES} samples per condition, got {n}")


def eval_identity(enc: Params, backbone: dict, held_out: Sequence[CharacterRecord], n_samples: int,
                  seed: int, steps: int = 20, training_ids: Sequence[str] = (),
                  kind: str = "identity", return_images: bool = False):
    """Sample each held-out character through the encoder and grade its hue."""
    _check_count(n_samples)
    overlap = sorted(set(r.char_id for r in held_out) & set(training_ids))
    if overlap:
        raise EvaluationError(f"held-out characters overlap the encoder's training set: {overlap}")
    probe = IdentityProbe()
    conditions, images = [], {}
    for ci, rec in enumerate(held_out):
        ref = rec.appearance_images[0]
        imgs = generate(backbone, eval_prompts(n_samples), sample_seeds(seed, n_samples, ci), steps, enc, ref)
        hues = [probe.hue_bin(im) for im in imgs]
        k = sum(h == rec.identity.hue for h in hues)
        conditions.append(ConditionReport(rec.char_id, rec.identity.hue, n_samples, k, k / n_samples,
                                          binomial_pvalue(k, n_samples, CHANCE), mean_pairwise_l2(imgs), hues))
        images[rec.char_id] = imgs
    cfg = {"n_samples": n_samples, "seed": seed, "steps": steps, "variant": variant_of(enc).value}
    report = _summarise(kind, conditions, cfg)
    return (report, images) if return_images else report


def eval_control(backbone: dict, targets: Sequence[CharacterRecord], n_samples: int, seed: int,
                 steps: int = 20, return_images: bool = False):
    """Same prompts and seeds as :func:`eval_identity` with the encoder switched off."""
    _check_count(n_samples)
    probe = IdentityProbe()
    conditions, images = [], {}
    for ci, rec in enumerate(targets):
        imgs = generate(backbone, eval_prompts(n_samples), sample_seeds(seed, n_samples, ci), steps)
        hues = [probe.hue_bin(im) for im in imgs]
        k = sum(h == rec.identity.hue for h in hues)
        conditions.append(ConditionReport(rec.char_id, rec.identity.hue, n_samples, k, k / n_samples,
                                          binomial_pvalue(k, n_samples, CHANCE), mean_pairwise_l2(imgs), hues))
        images[rec.char_id] = imgs
    report = _summarise("control", conditions, {"n_samples": n_samples, "seed": seed, "steps": steps})
    return (report, images) if return_images else report


def eval_transfer(enc: Params, backbone_a: dict, backbone_b: dict, held_out, n_samples: int, seed: int,
                  hash_a: str, hash_b: str, steps: int = 20, training_ids: Sequence[str] = ()) -> dict:
    if hash_a == hash_b:
        raise EvaluationError("transfer test needs two different backbones (hashes are identical)")
    rep_a = eval_identity(enc, backbone_a, held_out, n_samples, seed, steps, training_ids, kind="transfer-a")
    rep_b = eval_identity(enc, backbone_b, held_out, n_samples, seed, steps, training_ids, kind="transfer-b")
    return {"backbone_a": {"hash": hash_a, **rep_a.to_dict()},
            "backbone_b": {"hash": hash_b, **rep_b.to_dict()}}


def probe_calibration(records: Sequence[CharacterRecord]) -> float:
    """Hue accuracy of the probe on clean renders (must be 1.0 before evaluating)."""
    probe = IdentityProbe()
    total = correct = 0
    for r in records:
        for im in list(r.appearance_images) + list(r.variation_images):
            total += 1
            correct += probe.hue_bin(im) == r.identity.hue
    return correct / total if total else 0.0
