"""Procedural sprite characters.

Each character has a fixed identity (body hue, shape, accessory, eye colour)
and two image sets: canonical *appearance* images that feed the character
encoder, and *variation* images (random placement, scale, rotation,
background) with captions that describe only the variation.
"""

from __future__ import annotations

import colorsys
import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from . import rng
from .imageio import load_png, save_png
from .lexicon import ACCESSORIES, BACKGROUNDS, EYE_NAMES, HORIZONTAL, ROTATIONS, SHAPES, SIZES, VERTICAL

SIZE = 32
N_HUES = 8
BODY_SATURATION = 0.85
BODY_VALUE = 0.9

BACKGROUND_RGB = np.array([
    (0.45, 0.48, 0.52),  # slate
    (0.80, 0.76, 0.68),  # sand
    (0.62, 0.62, 0.62),  # ash
    (0.85, 0.87, 0.88),  # fog
    (0.50, 0.54, 0.46),  # moss
    (0.40, 0.37, 0.44),  # dusk
    (0.66, 0.58, 0.54),  # clay
    (0.96, 0.96, 0.96),  # snow
], dtype=np.float64)

EYE_RGB = np.array([
    (0.05, 0.05, 0.05),
    (0.95, 0.95, 0.95),
    (0.50, 0.50, 0.50),
    (0.08, 0.08, 0.25),
], dtype=np.float64)

BADGE_RGB = (0.95, 0.95, 0.95)
APPEARANCE_BACKGROUNDS = (2, 3, 7, 0)  # ash, fog, snow, slate
MAX_OFFSET = 5

IDENTITY_SPACE = N_HUES * len(SHAPES) * len(ACCESSORIES) * len(EYE_NAMES)


@dataclass(frozen=True)
class Identity:
    hue: int
    shape: str
    accessory: str
    eye: int

    @property
    def char_id(self) -> str:
        return f"h{self.hue}-{self.shape}-{self.accessory}-e{self.eye}"

    @classmethod
    def from_id(cls, char_id: str) -> "Identity":
        hue, shape, accessory, eye = char_id.split("-")
        return cls(int(hue[1:]), shape, accessory, int(eye[1:]))


@dataclass(frozen=True)
class SpriteSpec:
    identity: Identity
    dx: int = 0
    dy: int = 0
    scale: float = 1.0
    rotation: int = 0  # quarter turns clockwise
    background: int = 2


def hue_rgb(hue_bin: int, value: float = BODY_VALUE) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue_bin / N_HUES, BODY_SATURATION, value))


_YY, _XX = np.mgrid[0:SIZE, 0:SIZE] + 0.5


def render_sprite(spec: SpriteSpec) -> np.ndarray:
    """Deterministic (3, 32, 32) rendering quantised to 8-bit levels."""
    ident = spec.identity
    img = np.empty((SIZE, SIZE, 3), dtype=np.float64)
    img[:] = BACKGROUND_RGB[spec.background]
    cx, cy = SIZE / 2 + spec.dx, SIZE / 2 + spec.dy
    x, y = _XX - cx, _YY - cy
    # express pixel offsets in the sprite's own (unrotated) frame
    for _ in range(spec.rotation % 4):
        x, y = y, -x
    r = 9.0 * spec.scale
    if ident.shape == "circle":
        body = x * x + y * y <= r * r
    elif ident.shape == "square":
        body = (np.abs(x) <= 0.85 * r) & (np.abs(y) <= 0.85 * r)
    elif ident.shape == "triangle":
        body = (y >= -r) & (y <= 0.8 * r) & (np.abs(x) <= (y + r) / 1.8)
    else:
        raise ValueError(f"unknown shape {ident.shape!r}")
    img[body] = hue_rgb(ident.hue)
    if ident.accessory == "hat":
        top = -r if ident.shape != "square" else -0.85 * r
        hat = (np.abs(x) <= 0.45 * r) & (y >= top - 0.4 * r) & (y <= top + 0.05 * r)
        img[hat] = hue_rgb(ident.hue, value=0.5)
    elif ident.accessory == "badge":
        badge = (np.abs(x) <= 0.18 * r) & (np.abs(y - 0.45 * r) <= 0.18 * r) & body
        img[badge] = BADGE_RGB
    er = max(1.2 * spec.scale, 0.9)
    for side in (-1, 1):
        eye = (x - side * 0.3 * r) ** 2 + (y - 0.05 * r) ** 2 <= er * er
        img[eye & body] = EYE_RGB[ident.eye]
    img = np.round(img * 255.0) / 255.0
    return img.transpose(2, 0, 1).astype(np.float32)


def caption_for(spec: SpriteSpec) -> str:
    horiz = HORIZONTAL[0] if spec.dx <= -2 else HORIZONTAL[2] if spec.dx >= 2 else HORIZONTAL[1]
    vert = VERTICAL[0] if spec.dy <= -2 else VERTICAL[2] if spec.dy >= 2 else VERTICAL[1]
    size = SIZES[0] if spec.scale < 0.8 else SIZES[1] if spec.scale < 0.9 else SIZES[2]
    return (f"a sprite at {horiz} {vert} {size} turned {ROTATIONS[spec.rotation % 4]} "
            f"on {BACKGROUNDS[spec.background]} background")


def neutral_caption(background: int = 2) -> str:
    return caption_for(SpriteSpec(Identity(0, "circle", "none", 0), background=background))


@dataclass
class CharacterRecord:
    identity: Identity
    appearance_images: list = field(default_factory=list)
    variation_images: list = field(default_factory=list)
    captions: list = field(default_factory=list)

    @property
    def char_id(self) -> str:
        return self.identity.char_id


@dataclass(frozen=True)
class TrainingPair:
    char_id: str
    reference: np.ndarray
    target: np.ndarray
    caption: str
    ref_index: int
    target_index: int


def all_identities() -> list[Identity]:
    return [Identity(h, s, a, e) for h, s, a, e in
            itertools.product(range(N_HUES), SHAPES, ACCESSORIES, range(len(EYE_NAMES)))]


def sample_identities(n: int, seed: int, exclude: Iterable[str] = ()) -> list[Identity]:
    """Hue-balanced sampling without replacement.

    Character ``i`` gets hue ``order[i % 8]`` for a seeded hue permutation,
    so any 8 consecutive characters cover every hue bin.
    """
    excluded = set(exclude)
    pool = [i for i in all_identities() if i.char_id not in excluded]
    if n > len(pool):
        raise ValueError(f"requested {n} characters but only {len(pool)} identities are available "
                         f"(identity space is {IDENTITY_SPACE})")
    gen = rng.generator(seed, "dataset.identities")
    by_hue = {h: [i for i in pool if i.hue == h] for h in range(N_HUES)}
    for h in by_hue:
        order = gen.permutation(len(by_hue[h]))
        by_hue[h] = [by_hue[h][j] for j in order]
    hue_order = list(gen.permutation(N_HUES))
    chosen = []
    i = 0
    while len(chosen) < n:
        for offset in range(N_HUES):
            h = int(hue_order[(i + offset) % N_HUES])
            if by_hue[h]:
                chosen.append(by_hue[h].pop())
                break
        i += 1
    return chosen


def _count(spec: Union[int, Sequence[int]], gen: np.random.Generator) -> int:
    if isinstance(spec, int):
        return spec
    lo, hi = spec
    return int(gen.integers(lo, hi + 1))


def random_variation(identity: Identity, gen: np.random.Generator) -> SpriteSpec:
    return SpriteSpec(
        identity,
        dx=int(gen.integers(-MAX_OFFSET, MAX_OFFSET + 1)),
        dy=int(gen.integers(-MAX_OFFSET, MAX_OFFSET + 1)),
        scale=float(np.round(gen.uniform(0.7, 1.0), 3)),
        rotation=int(gen.integers(0, 4)),
        background=int(gen.integers(0, len(BACKGROUNDS))),
    )


def appearance_spec(identity: Identity, index: int) -> SpriteSpec:
    return SpriteSpec(identity, scale=1.0 - 0.05 * (index % 3),
                      background=APPEARANCE_BACKGROUNDS[index % len(APPEARANCE_BACKGROUNDS)])


def build_dataset(n_characters: int, c_per=2, f_per=16, seed: int = 1,
                  exclude: Iterable[str] = ()) -> list[CharacterRecord]:
    """``c_per``/``f_per`` are counts or inclusive ``(lo, hi)`` ranges drawn per character."""
    if n_characters < 1:
        raise ValueError("need at least one character")
    identities = sample_identities(n_characters, seed, exclude)
    records = []
    for ident in identities:
        gen = rng.generator(seed, f"dataset.char.{ident.char_id}")
        c, f = _count(c_per, gen), _count(f_per, gen)
        if c < 1 or f < 1:
            raise ValueError("each character needs >= 1 appearance and variation image")
        rec = CharacterRecord(ident)
        rec.appearance_images = [render_sprite(appearance_spec(ident, j)) for j in range(c)]
        for _ in range(f):
            spec = random_variation(ident, gen)
            rec.variation_images.append(render_sprite(spec))
            rec.captions.append(caption_for(spec))
        records.append(rec)
    return records


def pair_count(records: Sequence[CharacterRecord]) -> int:
    return sum(len(r.appearance_images) * len(r.variation_images) for r in records)


def pair_stream(records: Sequence[CharacterRecord], epoch_seed: int) -> list[TrainingPair]:
    """Full appearance x variation cross product, shuffled by ``epoch_seed``."""
    if not records:
        raise ValueError("no characters")
    pairs = []
    for rec in records:
        for i, ref in enumerate(rec.appearance_images):
            for j, (target, cap) in enumerate(zip(rec.variation_images, rec.captions)):
                pairs.append(TrainingPair(rec.char_id, ref, target, cap, i, j))
    order = rng.generator(epoch_seed, "dataset.pairs").permutation(len(pairs))
    return [pairs[k] for k in order]


# -- on-disk layout ------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(records: Sequence[CharacterRecord], out_dir, params: dict) -> str:
    """Write ``<char_id>/{appearance,variation}/<n>.png``, captions.tsv and manifest.json.

    Returns the manifest hash.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    characters = []
    for rec in records:
        base = out / rec.char_id
        (base / "appearance").mkdir(parents=True, exist_ok=True)
        (base / "variation").mkdir(parents=True, exist_ok=True)
        for n, im in enumerate(rec.appearance_images):
            save_png(im, base / "appearance" / f"{n}.png")
        lines = []
        for n, (im, cap) in enumerate(zip(rec.variation_images, rec.captions)):
            save_png(im, base / "variation" / f"{n}.png")
            lines.append(f"{n}.png\t{cap}\n")
        (base / "captions.tsv").write_text("".join(lines), encoding="utf-8")
        characters.append({"id": rec.char_id, **asdict(rec.identity),
                           "appearance": len(rec.appearance_images),
                           "variation": len(rec.variation_images)})
        for path in sorted(base.rglob("*")):
            if path.is_file():
                files[path.relative_to(out).as_posix()] = _sha256_file(path)
    manifest = {"params": params, "characters": characters, "files": files,
                "pairs": pair_count(records)}
    data = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    (out / "manifest.json").write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def manifest_hash(dataset_dir) -> str:
    return hashlib.sha256((Path(dataset_dir) / "manifest.json").read_bytes()).hexdigest()


def load_dataset(dataset_dir) -> list[CharacterRecord]:
    root = Path(dataset_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{root} has no manifest.json; create it with `cife gen-data`")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    records = []
    for entry in manifest["characters"]:
        ident = Identity(entry["hue"], entry["shape"], entry["accessory"], entry["eye"])
        base = root / entry["id"]
        rec = CharacterRecord(ident)
        rec.appearance_images = [load_png(base / "appearance" / f"{n}.png") for n in range(entry["appearance"])]
        for line in (base / "captions.tsv").read_text(encoding="utf-8").splitlines():
            name, cap = line.split("\t", 1)
            rec.variation_images.append(load_png(base / "variation" / name))
            rec.captions.append(cap)
        records.append(rec)
    return records
