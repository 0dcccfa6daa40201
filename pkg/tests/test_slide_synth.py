import hashlib
from dataclasses import replace

import numpy as np
import pytest

from wsialign import slide_synth as ss
from wsialign.errors import InvalidSpec
from wsialign.report_corpus import build_pair_sets, parse_report
from wsialign.tiler import hsv_saturation


def _corpus_digest(cases):
    h = hashlib.sha256()
    for c in cases:
        h.update(c.report.raw_text.encode())
        for s in c.slides:
            h.update(repr(s).encode())
    return h.hexdigest()


def test_single_class_single_case():
    cls = ss.default_classes()[:1]
    spec = ss.SynthSpec(n_cases=1, classes=cls, seed=1)
    cases = ss.generate_corpus(spec)
    assert len(cases) == 1 and len(cases[0].slides) == 1
    parts = parse_report(cases[0].report)
    assert parts[0].text == cases[0].part_texts[0]
    assert cases[0].part_texts[0] in {f"duodenum, biopsy : {t}." for t in cls[0].finding_templates}


def test_default_corpus_is_deterministic():
    spec = ss.default_spec(n_cases=256, seed=13)
    assert _corpus_digest(ss.generate_corpus(spec)) == _corpus_digest(ss.generate_corpus(spec))


def test_generation_commutes_with_subsetting():
    big = ss.generate_corpus(ss.default_spec(n_cases=40, seed=5))
    small = ss.generate_corpus(ss.default_spec(n_cases=15, seed=5))
    assert big[:15] == small


def test_cat2_only_gives_empty_clean_set():
    spec = ss.default_spec(n_cases=10, seed=2, slides_per_part_distribution={"Cat2": 1.0}, slides_per_part=3)
    cases = ss.generate_corpus(spec)
    assert all(len(c.slides) == 3 for c in cases)
    parts = [p for c in cases for p in parse_report(c.report)]
    clean, noisy = build_pair_sets(parts, [s for c in cases for s in c.slides])
    assert clean == [] and len(noisy) == 30


def test_cat3_spans_blocks():
    spec = ss.default_spec(n_cases=4, seed=2, slides_per_part_distribution={"Cat3": 1.0})
    for c in ss.generate_corpus(spec):
        assert len({s.block_index for s in c.slides}) == 2


@pytest.mark.parametrize("kw", [
    {"slides_per_part_distribution": {"Cat1": 0.5}},
    {"slides_per_part_distribution": {"Cat9": 1.0}},
    {"image_size": (400, 640)},
    {"n_cases": -1},
    {"parts_per_case": (2, 1)},
])
def test_invalid_specs(kw):
    spec = replace(ss.default_spec(n_cases=2), **kw)
    with pytest.raises(InvalidSpec):
        ss.generate_corpus(spec)


def test_part_texts_follow_template():
    spec = ss.default_spec(n_cases=30, seed=4, parts_per_case=(1, 3))
    for c in ss.generate_corpus(spec):
        parts = parse_report(c.report)
        assert [p.text for p in parts] == list(c.part_texts)
        for text, cid in zip(c.part_texts, c.part_classes):
            cls = spec.classes[cid]
            assert text in {f"{cls.organ}, biopsy : {t}." for t in cls.finding_templates}


def _hue_deg(rgb):
    from skimage.color import rgb2hsv

    return rgb2hsv(rgb.reshape(-1, 1, 3))[:, 0, 0] * 360.0


def test_rendering_contract():
    spec = ss.default_spec(n_cases=8, seed=21)
    for case in ss.generate_corpus(spec):
        s = case.slides[0]
        img = ss.render_slide(spec, case, s)
        assert img.dtype == np.uint8 and img.shape == (640, 640, 3)
        assert np.array_equal(img, ss.render_slide(spec, case, s))
        sat = hsv_saturation(img)
        tissue = sat > 0.1
        frac = tissue.mean()
        assert 0 < frac < 1
        assert img[~tissue].min() >= 245
        assert sat[tissue].min() >= 0.2
        # mean hue of tissue falls inside the class band
        cls = spec.classes[ss.class_of_slide(case, s)]
        hue = _hue_deg(img[tissue])
        ang = np.deg2rad(hue)
        mean_hue = np.rad2deg(np.arctan2(np.sin(ang).mean(), np.cos(ang).mean())) % 360
        lo, hi = cls.texture.hue - cls.texture.hue_width / 2, cls.texture.hue + cls.texture.hue_width / 2
        assert lo <= mean_hue <= hi


def test_render_rejects_foreign_slide():
    spec = ss.default_spec(n_cases=2)
    a, b = ss.generate_corpus(spec)
    with pytest.raises(ValueError):
        ss.render_slide(spec, a, b.slides[0])


def test_nearest_mean_color_separates_classes():
    spec = ss.default_spec(n_cases=96, seed=13)
    cases = ss.generate_corpus(spec)
    feats, labels = [], []
    for c in cases:
        s = c.slides[0]
        img = ss.render_slide(spec, c, s).astype(float)
        tissue = hsv_saturation(img.astype(np.uint8)) > 0.1
        feats.append(img[tissue].mean(axis=0))
        labels.append(ss.class_of_slide(c, s))
    feats, labels = np.array(feats), np.array(labels)
    train, test = slice(0, 48), slice(48, 96)
    means = {k: feats[train][labels[train] == k].mean(axis=0) for k in np.unique(labels[train])}
    keys = np.array(list(means))
    cent = np.stack([means[k] for k in keys])
    pred = keys[np.argmin(((feats[test][:, None] - cent[None]) ** 2).sum(-1), axis=1)]
    assert (pred == labels[test]).mean() >= 0.95


def test_png_round_trip(tmp_path):
    spec = ss.default_spec(n_cases=1)
    case = ss.generate_corpus(spec)[0]
    img = ss.render_slide(spec, case, case.slides[0])
    ss.write_png(tmp_path / "x.png", img)
    assert np.array_equal(ss.read_png(tmp_path / "x.png"), img)


def test_category_counts():
    spec = ss.default_spec(n_cases=20, slides_per_part_distribution={"Cat1": 0.5, "Cat2": 0.5})
    counts = ss.category_counts(ss.generate_corpus(spec))
    assert counts["Cat1"] + counts["Cat2"] == 20 and counts["Cat3"] == 0
