"""Procedural slides and reports with known latent classes.

Every slide is a white canvas carrying a few Gaussian tissue blobs filled with
class-colored band-limited noise; every report part reads
``<organ>, biopsy : <finding>.``. Randomness is keyed on
``(seed, case_index, ...)`` so that a corpus of ``n`` cases is a prefix of a
corpus of ``n + k`` cases.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import hsv2rgb

from .errors import InvalidSpec
from .report_corpus import AssociationCategory, ReportDocument, SlideRecord

PATCH_STRIDE = 192


@dataclass(frozen=True)
class TextureParams:
    hue: float  # degrees, center of the class hue band
    hue_width: float  # degrees, full width of the band
    saturation: float
    value: float
    noise_sigma: float  # low-pass sigma in px; larger means coarser texture
    noise_amp: float = 0.12


@dataclass(frozen=True)
class SynthClass:
    class_id: int
    organ: str
    finding_templates: tuple[str, ...]
    texture: TextureParams
    keyword: str = ""
    severity: int = 1


@dataclass(frozen=True)
class SynthSpec:
    n_cases: int
    classes: tuple[SynthClass, ...]
    slides_per_part_distribution: dict = field(default_factory=lambda: {"Cat1": 1.0})
    image_size: tuple[int, int] = (640, 640)  # (width, height)
    seed: int = 0
    parts_per_case: tuple[int, int] = (1, 1)
    slides_per_part: int = 3
    decorate_labels: bool = True

    def validate(self) -> None:
        if self.n_cases < 0:
            raise InvalidSpec("n_cases must be >= 0")
        if not self.classes:
            raise InvalidSpec("at least one class required")
        probs = self.slides_per_part_distribution
        if set(probs) - {"Cat1", "Cat2", "Cat3"}:
            raise InvalidSpec(f"unknown categories {set(probs) - {'Cat1', 'Cat2', 'Cat3'}}")
        if any(p < 0 for p in probs.values()) or abs(sum(probs.values()) - 1.0) > 1e-9:
            raise InvalidSpec("category probabilities must be nonnegative and sum to 1")
        w, h = self.image_size
        if w < 2 * 224 or h < 2 * 224:
            raise InvalidSpec("image dimensions must be >= 448 px")
        lo, hi = self.parts_per_case
        if lo < 1 or hi < lo:
            raise InvalidSpec("parts_per_case must satisfy 1 <= lo <= hi")
        if self.slides_per_part < 2:
            raise InvalidSpec("slides_per_part must be >= 2 for Cat2/Cat3 parts")
        for c in self.classes:
            if not c.finding_templates:
                raise InvalidSpec(f"class {c.class_id} has no finding templates")


@dataclass(frozen=True)
class SynthCase:
    case_index: int
    report: ReportDocument
    slides: tuple[SlideRecord, ...]
    part_classes: tuple[int, ...]
    part_texts: tuple[str, ...]

    @property
    def case_id(self) -> str:
        return self.report.case_id


def default_classes() -> tuple[SynthClass, ...]:
    """Eight classes with disjoint 20-degree hue bands spaced 45 degrees apart."""
    rows = [
        ("duodenum", (
            "unremarkable small intestinal mucosa with no pathologic diagnosis",
            "unremarkable small-intestinal mucosa, with no pathologic diagnosis",
            "unremarkable small intestinal mucosa; with no pathologic diagnosis",
        ), "intestinal mucosa", 1),
        ("colon", (
            "tubular adenoma with low grade dysplasia",
            "tubular adenoma with low-grade dysplasia",
            "tubular adenoma, with low grade dysplasia",
        ), "tubular adenoma", 2),
        ("colon", (
            "invasive moderately differentiated adenocarcinoma",
            "invasive, moderately differentiated adenocarcinoma",
            "invasive moderately-differentiated adenocarcinoma",
        ), "adenocarcinoma", 3),
        ("skin", (
            "intradermal melanocytic nevus",
            "intradermal, melanocytic nevus",
            "intradermal melanocytic-nevus",
        ), "nevus", 1),
        ("cervix", (
            "low grade squamous intraepithelial lesion (cin 1)",
            "low-grade squamous intraepithelial lesion (cin-1)",
            "low grade squamous intraepithelial lesion, cin 1",
        ), "intraepithelial lesion", 2),
        ("stomach", (
            "chronic inactive gastritis, negative for helicobacter pylori",
            "chronic inactive gastritis; negative for helicobacter pylori",
            "chronic inactive gastritis - negative for helicobacter pylori",
        ), "gastritis", 1),
        ("lung", (
            "invasive squamous cell carcinoma",
            "invasive squamous-cell carcinoma",
            "invasive, squamous cell carcinoma",
        ), "squamous cell carcinoma", 3),
        ("breast", (
            "invasive ductal carcinoma, grade 2",
            "invasive ductal carcinoma (grade 2)",
            "invasive ductal carcinoma; grade 2",
        ), "ductal carcinoma", 3),
    ]
    out = []
    for i, (organ, templates, keyword, severity) in enumerate(rows):
        tex = TextureParams(
            hue=45.0 * i + 10.0,
            hue_width=20.0,
            saturation=0.35 + 0.05 * (i % 4),
            value=0.55 + 0.04 * (i % 5),
            noise_sigma=1.5 + 1.0 * (i % 3),
        )
        out.append(SynthClass(i, organ, templates, tex, keyword, severity))
    return tuple(out)


def default_spec(n_cases: int = 256, seed: int = 13, n_classes: int = 8, **kw) -> SynthSpec:
    classes = default_classes()[:n_classes]
    return SynthSpec(n_cases=n_cases, classes=classes, seed=seed, **kw)


# ------------------------------------------------------------------ corpus

_LATERALITY = ("left", "right")
_SUBSITE = {"colon": ("sigmoid", "transverse", "ascending"), "lung": ("upper", "lower")}


def part_text(organ: str, finding: str) -> str:
    return f"{organ}, biopsy : {finding}."


def _raw_label(organ: str, rng: np.random.Generator, decorate: bool) -> str:
    # decorations are exactly what the shipped redaction rules strip
    bits = [organ]
    if decorate and rng.random() < 0.3 and organ in _SUBSITE:
        bits.append(_SUBSITE[organ][rng.integers(len(_SUBSITE[organ]))])
    if decorate and rng.random() < 0.3:
        bits.append(_LATERALITY[rng.integers(2)])
    bits.append("biopsy")
    return ", ".join(bits)


def _case(spec: SynthSpec, case_index: int) -> SynthCase:
    rng = np.random.default_rng([spec.seed, case_index])
    case_id = f"case{case_index:05d}"
    lo, hi = spec.parts_per_case
    n_parts = int(rng.integers(lo, hi + 1))
    cats = sorted(spec.slides_per_part_distribution)
    probs = np.array([spec.slides_per_part_distribution[c] for c in cats])
    lines, slides, classes, texts = [], [], [], []
    for p in range(n_parts):
        cls = spec.classes[int(rng.integers(len(spec.classes)))]
        finding = cls.finding_templates[int(rng.integers(len(cls.finding_templates)))]
        raw_label = _raw_label(cls.organ, rng, spec.decorate_labels)
        lines.append(f"{chr(ord('a') + p)}. {raw_label} : {finding}.")
        classes.append(cls.class_id)
        texts.append(part_text(cls.organ, finding))
        cat = cats[int(rng.choice(len(cats), p=probs))]
        if cat == "Cat1":
            layout = [0]
        elif cat == "Cat2":
            layout = [0] * spec.slides_per_part
        else:
            # spread slides over at least two blocks
            layout = [i % 2 for i in range(spec.slides_per_part)]
        for k, block in enumerate(layout):
            sid = f"{case_id}-p{p}-b{block}-s{k}"
            slides.append(SlideRecord(sid, case_id, p, block, f"images/{sid}.png"))
    report = ReportDocument(case_id, "final diagnosis:\n" + "\n".join(lines))
    return SynthCase(case_index, report, tuple(slides), tuple(classes), tuple(texts))


def generate_corpus(spec: SynthSpec) -> list[SynthCase]:
    spec.validate()
    return [_case(spec, i) for i in range(spec.n_cases)]


def class_of_slide(case: SynthCase, slide: SlideRecord) -> int:
    return case.part_classes[slide.part_index]


# --------------------------------------------------------------- rendering


def _slide_rng(spec: SynthSpec, case: SynthCase, slide: SlideRecord) -> np.random.Generator:
    digest = hashlib.sha256(slide.slide_id.encode()).digest()[:4]
    return np.random.default_rng([spec.seed, case.case_index, int.from_bytes(digest, "little")])


def _blob_mask(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    field_ = np.zeros((h, w), np.float32)
    m = min(w, h)
    for _ in range(int(rng.integers(1, 4))):
        cx = rng.uniform(0.3, 0.7) * w
        cy = rng.uniform(0.3, 0.7) * h
        sx = rng.uniform(0.10, 0.22) * m
        sy = rng.uniform(0.10, 0.22) * m
        field_ += np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
    return field_ > 0.5


def _band_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    # drawn at half resolution and upsampled; the field is low-pass anyway
    h, w = shape
    small = ndimage.gaussian_filter(rng.standard_normal(((h + 1) // 2, (w + 1) // 2)).astype(np.float32), sigma / 2)
    small /= small.std() + 1e-8
    return np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)[:h, :w]


def render_slide(spec: SynthSpec, case: SynthCase, slide: SlideRecord) -> np.ndarray:
    """Render one slide as an ``(H, W, 3)`` uint8 array."""
    if slide.case_id != case.case_id:
        raise ValueError(f"slide {slide.slide_id} does not belong to {case.case_id}")
    cls = spec.classes[[c.class_id for c in spec.classes].index(class_of_slide(case, slide))]
    tex = cls.texture
    rng = _slide_rng(spec, case, slide)
    w, h = spec.image_size
    img = rng.integers(246, 256, size=(h, w, 3)).astype(np.uint8)
    mask = _blob_mask(rng, w, h)
    slide_hue = tex.hue + rng.uniform(-0.35, 0.35) * tex.hue_width
    fields = [_band_noise(rng, (h, w), tex.noise_sigma)[mask] for _ in range(3)]
    hue = slide_hue + 0.1 * tex.hue_width * np.clip(fields[0], -1.5, 1.5)
    sat = np.clip(tex.saturation + tex.noise_amp * fields[1], 0.22, 0.95)
    val = np.clip(tex.value + tex.noise_amp * fields[2], 0.25, 0.85)
    hsv = np.stack([(hue % 360.0) / 360.0, sat, val], axis=-1)[:, None, :]
    img[mask] = np.round(hsv2rgb(hsv)[:, 0] * 255).astype(np.uint8)
    return img


def write_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(image, mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def category_counts(cases: Sequence[SynthCase]) -> dict[str, int]:
    from .report_corpus import assign_category
    counts = {c.value: 0 for c in AssociationCategory}
    for case in cases:
        for p in range(len(case.part_classes)):
            group = [s for s in case.slides if s.part_index == p]
            counts[assign_category((case.case_id, p), group).value] += 1
    return counts
