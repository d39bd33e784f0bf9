import colorsys
import json

import numpy as np
import pytest

from cife.dataset import (
    IDENTITY_SPACE, N_HUES, Identity, SpriteSpec, all_identities, build_dataset, caption_for,
    load_dataset, manifest_hash, pair_count, pair_stream, render_sprite, sample_identities, write_dataset,
)
from cife.lexicon import IDENTITY_WORDS
from cife.evaluation import probe_calibration


def _mean_hue_bin(image):
    """Independent oracle: circular mean hue of saturated pixels via colorsys, per pixel."""
    angles = []
    for r, g, b in image.reshape(3, -1).T:
        h, s, v = colorsys.rgb_to_hsv(float(r), float(g), float(b))
        if s > 0.5 and v > 0.6:
            angles.append(2 * np.pi * h)
    mean = np.arctan2(np.mean(np.sin(angles)), np.mean(np.cos(angles))) % (2 * np.pi)
    return int(round(mean / (2 * np.pi) * N_HUES)) % N_HUES


def _foreground(image):
    mx, mn = image.max(0), image.min(0)
    return ((mx - mn) / np.maximum(mx, 1e-9) > 0.5).sum()


def test_identity_space_and_ids():
    assert IDENTITY_SPACE == 288 == len(all_identities())
    ident = Identity(3, "triangle", "hat", 2)
    assert Identity.from_id(ident.char_id) == ident


def test_render_is_deterministic_and_quantised():
    spec = SpriteSpec(Identity(5, "square", "badge", 1), dx=2, dy=-3, scale=0.8, rotation=1, background=4)
    a, b = render_sprite(spec), render_sprite(spec)
    assert a.shape == (3, 32, 32) and a.dtype == np.float32
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a * 255, np.round(a * 255), atol=1e-4)


@pytest.mark.parametrize("hue", range(N_HUES))
def test_rendered_hue_matches_oracle(hue):
    g = np.random.default_rng(hue)
    for shape in ("circle", "square", "triangle"):
        spec = SpriteSpec(Identity(hue, shape, "hat", int(g.integers(4))), dx=int(g.integers(-5, 6)),
                          dy=int(g.integers(-5, 6)), scale=float(g.uniform(0.7, 1.0)),
                          rotation=int(g.integers(4)), background=int(g.integers(8)))
        assert _mean_hue_bin(render_sprite(spec)) == hue


def test_scale_changes_area_not_hue():
    ident = Identity(2, "circle", "none", 0)
    big, small = render_sprite(SpriteSpec(ident, scale=1.0)), render_sprite(SpriteSpec(ident, scale=0.7))
    assert _mean_hue_bin(big) == _mean_hue_bin(small) == 2
    assert _foreground(big) > _foreground(small)


def test_captions_never_mention_identity():
    records = build_dataset(8, 1, 12, seed=4)
    words = set(IDENTITY_WORDS)
    for rec in records:
        for cap in rec.captions:
            assert not words & set(cap.split()), cap


def test_caption_describes_variation():
    spec = SpriteSpec(Identity(0, "circle", "none", 0), dx=-4, dy=3, scale=0.7, rotation=2, background=5)
    assert caption_for(spec) == "a sprite at left bottom small turned inverted on dusk background"


def test_hue_balanced_sampling():
    idents = sample_identities(16, seed=3)
    assert len({i.char_id for i in idents}) == 16
    assert sorted(i.hue for i in idents[:8]) == list(range(8))
    with pytest.raises(ValueError):
        sample_identities(289, seed=0)
    assert len(sample_identities(288, seed=0)) == 288


def test_exclusion():
    first = build_dataset(4, 1, 1, seed=2)
    ids = {r.char_id for r in first}
    second = build_dataset(4, 1, 1, seed=2, exclude=ids)
    assert not ids & {r.char_id for r in second}


def test_toy_default_pairs():
    records = build_dataset(8, 2, 16, seed=1)
    assert pair_count(records) == 256
    pairs = pair_stream(records, 0)
    assert len(pairs) == 256
    assert len({(p.char_id, p.ref_index, p.target_index) for p in pairs}) == 256
    for p in pairs:
        assert p.char_id in {r.char_id for r in records}
        rec = next(r for r in records if r.char_id == p.char_id)
        assert np.array_equal(p.reference, rec.appearance_images[p.ref_index])
        assert np.array_equal(p.target, rec.variation_images[p.target_index])


def test_epoch_seeds_shuffle_same_multiset():
    records = build_dataset(3, 2, 5, seed=1)
    a = [(p.char_id, p.ref_index, p.target_index) for p in pair_stream(records, 1)]
    b = [(p.char_id, p.ref_index, p.target_index) for p in pair_stream(records, 2)]
    assert a != b
    assert sorted(a) == sorted(b)


def test_paper_scale_counts():
    records = build_dataset(18, (2, 4), (50, 70), seed=7)
    n = pair_count(records)
    assert 18 * 2 * 50 <= n <= 18 * 4 * 70
    assert all(2 <= len(r.appearance_images) <= 4 and 50 <= len(r.variation_images) <= 70 for r in records)
    assert pair_count(build_dataset(18, 3, 60, seed=7)) == 3240


def test_same_seed_same_dataset():
    a, b = build_dataset(3, 2, 4, seed=9), build_dataset(3, 2, 4, seed=9)
    for ra, rb in zip(a, b):
        assert ra.char_id == rb.char_id and ra.captions == rb.captions
        assert all(np.array_equal(x, y) for x, y in zip(ra.variation_images, rb.variation_images))


def test_probe_calibration_on_256_renders():
    records = build_dataset(16, 2, 14, seed=2024)
    assert sum(len(r.appearance_images) + len(r.variation_images) for r in records) == 256
    assert probe_calibration(records) == 1.0


def test_disk_round_trip(tmp_path):
    records = build_dataset(2, 2, 3, seed=5)
    digest = write_dataset(records, tmp_path / "d", {"seed": 5})
    assert digest == manifest_hash(tmp_path / "d")
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["pairs"] == 12
    cid = records[0].char_id
    assert (tmp_path / "d" / cid / "appearance" / "1.png").exists()
    assert (tmp_path / "d" / cid / "captions.tsv").read_text().splitlines()[0].split("\t")[0] == "0.png"
    loaded = load_dataset(tmp_path / "d")
    for a, b in zip(records, loaded):
        assert a.char_id == b.char_id and a.captions == b.captions
        np.testing.assert_allclose(a.variation_images[0], b.variation_images[0], atol=1e-6)
    again = write_dataset(records, tmp_path / "e", {"seed": 5})
    assert again == digest


def test_load_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
