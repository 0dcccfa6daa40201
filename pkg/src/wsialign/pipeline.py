"""Glue from a synthetic corpus definition to model-ready slide inputs.

Both the CLI and the experiment helpers go through :func:`prepare_slide` so a
slide is rendered, masked, tiled and embedded the same way everywhere.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import patch_embedder as pe
from . import slide_synth as ss
from . import tiler
from .report_corpus import assign_splits, build_pair_sets, parse_report, split_cases


def prepare_slide(
    spec: ss.SynthSpec,
    case: ss.SynthCase,
    slide,
    params: tiler.MaskParams = tiler.MaskParams(),
    min_tissue_fraction: float = 0.05,
    image: np.ndarray | None = None,
) -> tuple[tiler.PatchSet, pe.PatchEmbedding]:
    if image is None:
        image = ss.render_slide(spec, case, slide)
    ps = tiler.tile_slide(slide.slide_id, image, params, min_tissue_fraction, seed=0, with_pixels=True)
    if not ps.coords:
        # a slide whose blobs all fall below the tissue floor still needs one patch
        ps = tiler.PatchSet(slide.slide_id, [(0, 0)], 0, tiler.extract_pixels(image, [(0, 0)]))
    emb = pe.embed_patches(ps.pixels, ps.coords, slide.slide_id)
    return ps, emb


@dataclass
class Example:
    slide_id: str
    case_id: str
    text: str
    class_id: int
    severity: int
    keyword: str
    split: str
    input: np.ndarray  # (n_patches, 384) embeddings plus position codes


@dataclass
class DeskCorpus:
    examples: list[Example]

    def subset(self, split: str) -> list[Example]:
        return [e for e in self.examples if e.split == split]

    def arrays(self, split: str) -> tuple[list[np.ndarray], list[str]]:
        sub = self.subset(split)
        return [e.input for e in sub], [e.text for e in sub]


def spec_digest(spec: ss.SynthSpec, **extra) -> str:
    blob = json.dumps({"spec": asdict(spec), **extra}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _severity_table(spec: ss.SynthSpec) -> dict[int, ss.SynthClass]:
    return {c.class_id: c for c in spec.classes}


def build_examples(
    spec: ss.SynthSpec,
    cases: Sequence[ss.SynthCase],
    assignment: dict[str, str] | None = None,
) -> list[Example]:
    """Parse, pair and embed the clean slides of ``cases``."""
    classes = _severity_table(spec)
    parts, slides, by_case = [], [], {}
    for case in cases:
        parts.extend(parse_report(case.report))
        slides.extend(case.slides)
        by_case[case.case_id] = case
    clean, noisy = build_pair_sets(parts, slides)
    if assignment is not None:
        clean, _ = assign_splits(clean, noisy, assignment)
    slide_by_id = {s.slide_id: s for s in slides}
    out = []
    for ex in clean:
        slide = slide_by_id[ex.slide_id]
        case = by_case[ex.case_id]
        _, emb = prepare_slide(spec, case, slide)
        cls = classes[ss.class_of_slide(case, slide)]
        out.append(Example(ex.slide_id, ex.case_id, ex.text, cls.class_id, cls.severity, cls.keyword,
                           ex.split, pe.wsi_input(emb)))
    return out


def desk_corpus(
    spec: ss.SynthSpec,
    fractions: Sequence[float] = (0.8, 0.2, 0.0),
    split_seed: int = 0,
    cache_dir: str | Path | None = None,
) -> DeskCorpus:
    """Synthetic corpus split by case; optionally cached as one ``.npz`` per spec."""
    key = spec_digest(spec, fractions=list(fractions), split_seed=split_seed)
    path = Path(cache_dir) / f"desk-{key}.npz" if cache_dir else None
    if path is not None and path.exists():
        return _load(path)
    cases = ss.generate_corpus(spec)
    parts = [p for c in cases for p in parse_report(c.report)]
    clean, _ = build_pair_sets(parts, [s for c in cases for s in c.slides])
    assignment = split_cases(clean, split_seed, fractions)
    corpus = DeskCorpus(build_examples(spec, cases, assignment))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        _save(path, corpus)
    return corpus


def _save(path: Path, corpus: DeskCorpus) -> None:
    meta = [{k: v for k, v in asdict(e).items() if k != "input"} for e in corpus.examples]
    arrays = {f"x{i}": e.input for i, e in enumerate(corpus.examples)}
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, meta=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)


def _load(path: Path) -> DeskCorpus:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        return DeskCorpus([Example(**m, input=z[f"x{i}"]) for i, m in enumerate(meta)])
