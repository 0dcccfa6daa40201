"""Part-level report parsing, slide/text association, and dataset splits.

A final-diagnosis section is split into parts with line-anchored part
indicators, each part into ``label : finding``, and both halves are scrubbed
of content that cannot be read off a slide (laterality, sub-site, sizes).
Slides are then paired with their part text and binned into association
categories; only single-slide parts enter the clean set.
"""
from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptySlideList, EmptyStudy, MalformedPart, NoPartIndicators, OrphanSlide

SEPARATOR = " : "
_SEP_RE = re.compile(r"\s+:\s+")
_WS_RE = re.compile(r"\s+")

SPLITS = ("train", "validation", "test")


class AssociationCategory(str, Enum):
    CAT1 = "Cat1"
    CAT2 = "Cat2"
    CAT3 = "Cat3"


@dataclass(frozen=True)
class ReportDocument:
    case_id: str
    raw_text: str

    def __post_init__(self):
        if not self.case_id:
            raise ValueError("case_id must be non-empty")


@dataclass(frozen=True)
class Redaction:
    field: str  # "label" or "finding"
    start: int
    end: int
    text: str
    rule_id: str


@dataclass(frozen=True)
class PartRecord:
    case_id: str
    part_index: int
    label: str
    finding: str
    redactions: tuple[Redaction, ...] = ()

    @property
    def text(self) -> str:
        return serialize_part(self.label, self.finding)


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    case_id: str
    part_index: int
    block_index: int
    image_uri: str = ""


@dataclass(frozen=True)
class PairedExample:
    slide_id: str
    text: str
    category: AssociationCategory
    split: str
    source: str  # "clean" | "noisy"
    case_id: str = field(default="", compare=False)

    def to_record(self) -> dict:
        # fixed field order for the pair manifest
        return {
            "slide_id": self.slide_id,
            "text": self.text,
            "category": self.category.value,
            "split": self.split,
            "source": self.source,
        }


# ---------------------------------------------------------------- rule files


@dataclass(frozen=True)
class Rule:
    rule_id: str
    pattern: re.Pattern


def load_rules(path: str | Path | None = None, *, default: str = "redaction_rules.txt") -> list[Rule]:
    """Read a ``rule_id<TAB>regex`` rule file; ``#`` lines are comments."""
    if path is None:
        text = resources.files("wsialign.data").joinpath(default).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    rules = []
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        rule_id, _, pattern = line.partition("\t")
        rules.append(Rule(rule_id.strip(), re.compile(pattern.strip(), re.IGNORECASE)))
    return rules


def load_part_indicators(path: str | Path | None = None) -> re.Pattern:
    rules = load_rules(path, default="part_indicators.txt")
    # each alternative gets its own group name; python forbids duplicates
    alts = []
    for i, rule in enumerate(rules):
        alts.append(rule.pattern.pattern.replace("(?P<key>", f"(?P<key{i}>"))
    return re.compile(r"^[ \t]*(?:" + "|".join(alts) + r")[ \t]*", re.IGNORECASE | re.MULTILINE)


REDACTION_RULES = load_rules()
PART_INDICATORS = load_part_indicators()


# ------------------------------------------------------------------- parsing


def normalize(text: str) -> str:
    return _WS_RE.sub(" ", text.lower()).strip()


def serialize_part(label: str, finding: str) -> str:
    return f"{label}{SEPARATOR}{finding}"


def _tidy(text: str) -> str:
    text = _WS_RE.sub(" ", text)
    text = re.sub(r"\s+([,.;])", r"\1", text)
    text = re.sub(r",(\s*,)+", ",", text)
    # a comma or semicolon orphaned in front of other punctuation by a removal
    text = re.sub(r"[,;](?=[.;,])", "", text)
    text = re.sub(r"^[\s,;]+|[\s,;]+$", "", text)
    text = re.sub(r"^[\s,;]+|[\s,;]+$", "", text)
    return _WS_RE.sub(" ", text).strip()


def redact(text: str, rules: Sequence[Rule], field_name: str) -> tuple[str, list[Redaction]]:
    """Remove every rule match from ``text``.

    Matches are collected against the unmodified text; when two rules overlap
    the earlier rule in the file wins. Spans index into the input string.
    """
    taken: list[tuple[int, int, str]] = []
    for rule in rules:
        for m in rule.pattern.finditer(text):
            if m.end() == m.start():
                continue
            if any(m.start() < e and s < m.end() for s, e, _ in taken):
                continue
            taken.append((m.start(), m.end(), rule.rule_id))
    taken.sort()
    out, pos = [], 0
    for s, e, _ in taken:
        out.append(text[pos:s])
        pos = e
    out.append(text[pos:])
    records = [Redaction(field_name, s, e, text[s:e], rid) for s, e, rid in taken]
    return _tidy("".join(out)), records


def parse_part(text: str, rules: Sequence[Rule] = (), *, case_id: str = "", part_index: int = 0) -> PartRecord:
    """Parse one ``label : finding`` string (no part indicator)."""
    text = normalize(text)
    m = _SEP_RE.search(text)
    if m is None:
        raise MalformedPart(f"{case_id}/{part_index}: missing ' : ' separator in {text!r}")
    label, finding = text[: m.start()].strip(), text[m.end():].strip()
    if not label or not finding:
        raise MalformedPart(f"{case_id}/{part_index}: empty label or finding in {text!r}")
    label, red_l = redact(label, rules, "label")
    finding, red_f = redact(finding, rules, "finding")
    if not label or not finding:
        raise MalformedPart(f"{case_id}/{part_index}: redaction emptied the part {text!r}")
    return PartRecord(case_id, part_index, label, finding, tuple(red_l + red_f))


def parse_report(
    doc: ReportDocument,
    rules: Sequence[Rule] | None = None,
    indicators: re.Pattern | None = None,
) -> list[PartRecord]:
    """Split a final-diagnosis section into one PartRecord per part indicator."""
    rules = REDACTION_RULES if rules is None else rules
    indicators = PART_INDICATORS if indicators is None else indicators
    if not doc.raw_text or not doc.raw_text.strip():
        raise NoPartIndicators(f"{doc.case_id}: empty report")
    matches = list(indicators.finditer(doc.raw_text))
    if not matches:
        raise NoPartIndicators(f"{doc.case_id}: no part indicator found")
    parts = []
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(doc.raw_text)
        body = doc.raw_text[m.end(): end]
        parts.append(parse_part(body, rules, case_id=doc.case_id, part_index=i))
    return parts


# -------------------------------------------------------------- association


def assign_category(part: tuple[str, int], slides: Sequence[SlideRecord]) -> AssociationCategory:
    if not slides:
        raise EmptySlideList(f"part {part} has no slides")
    for s in slides:
        if (s.case_id, s.part_index) != tuple(part):
            raise ValueError(f"slide {s.slide_id} does not belong to part {part}")
    if len({s.block_index for s in slides}) > 1:
        return AssociationCategory.CAT3
    return AssociationCategory.CAT1 if len(slides) == 1 else AssociationCategory.CAT2


def build_pair_sets(
    parts: Sequence[PartRecord], slides: Sequence[SlideRecord]
) -> tuple[list[PairedExample], list[PairedExample]]:
    """Pair each slide with its part text.

    Returns ``(clean, noisy)``; clean holds only parts with exactly one slide,
    noisy holds every slide/text pair. Splits are left as ``train`` until
    :func:`assign_splits` runs.
    """
    by_part = {(p.case_id, p.part_index): p for p in parts}
    grouped: dict[tuple[str, int], list[SlideRecord]] = defaultdict(list)
    for s in slides:
        key = (s.case_id, s.part_index)
        if key not in by_part:
            raise OrphanSlide(f"slide {s.slide_id} has no part record for {key}")
        grouped[key].append(s)
    clean, noisy = [], []
    for p in parts:
        key = (p.case_id, p.part_index)
        group = grouped.get(key)
        if not group:
            continue
        cat = assign_category(key, group)
        for s in group:
            noisy.append(PairedExample(s.slide_id, p.text, cat, "train", "noisy", p.case_id))
        if len(group) == 1:
            clean.append(PairedExample(group[0].slide_id, p.text, cat, "train", "clean", p.case_id))
    return clean, noisy


# ------------------------------------------------------------------- splits


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    exact = [n * f for f in fractions]
    counts = [int(np.floor(x)) for x in exact]
    rem = n - sum(counts)
    # stable sort: ties go to the earlier (larger) bucket
    order = sorted(range(len(exact)), key=lambda i: -(exact[i] - counts[i]))
    for i in order[:rem]:
        counts[i] += 1
    return counts


def split_cases(
    clean: Sequence[PairedExample],
    seed: int,
    fractions: Sequence[float] = (0.9, 0.05, 0.05),
) -> dict[str, str]:
    """Randomly assign whole cases to train/validation/test."""
    cases = sorted({ex.case_id for ex in clean})
    rng = np.random.default_rng(seed)
    order = [cases[i] for i in rng.permutation(len(cases))]
    counts = _largest_remainder(len(cases), fractions)
    assignment = {}
    start = 0
    for split, n in zip(SPLITS, counts):
        for case_id in order[start: start + n]:
            assignment[case_id] = split
        start += n
    return assignment


def assign_splits(
    clean: Sequence[PairedExample],
    noisy: Sequence[PairedExample],
    assignment: dict[str, str],
) -> tuple[list[PairedExample], list[PairedExample]]:
    """Stamp clean pairs with their case split; keep noisy pairs from non-held-out cases."""
    held_out = {c for c, s in assignment.items() if s != "train"}
    clean_out = [
        PairedExample(ex.slide_id, ex.text, ex.category, assignment.get(ex.case_id, "train"), ex.source, ex.case_id)
        for ex in clean
    ]
    noisy_out = [ex for ex in noisy if ex.case_id not in held_out]
    return clean_out, noisy_out


@dataclass(frozen=True)
class SiteCase:
    case_id: str
    study: str
    site_code: str


def split_by_site(cases: Iterable[SiteCase], max_train_fraction: float = 0.55) -> dict[tuple[str, str], str]:
    """Assign whole tissue-source sites to splits, study by study.

    Sites are taken largest first into train until the next one would push
    train past ``max_train_fraction`` of the study's cases; the rest alternate
    validation, test, validation, ... A study whose largest site alone exceeds
    the cap still gets that site in train.

    Returns ``{(study, site_code): split}``.
    """
    by_study: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for c in cases:
        by_study[c.study][c.site_code] += 1
    if not by_study:
        raise EmptyStudy("no cases supplied")
    out: dict[tuple[str, str], str] = {}
    for study in sorted(by_study):
        sites = by_study[study]
        total = sum(sites.values())
        if total == 0:
            raise EmptyStudy(study)
        ranked = sorted(sites.items(), key=lambda kv: (-kv[1], kv[0]))
        cap = max_train_fraction * total
        train_total = 0
        i = 0
        while i < len(ranked):
            size = ranked[i][1]
            if train_total + size > cap and i > 0:
                break
            out[(study, ranked[i][0])] = "train"
            train_total += size
            i += 1
            if train_total > cap:  # oversized single site
                break
        for j, (site, _) in enumerate(ranked[i:]):
            out[(study, site)] = "validation" if j % 2 == 0 else "test"
    return out


# ---------------------------------------------------------------------- io


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def read_reports(path) -> list[ReportDocument]:
    return [ReportDocument(r["case_id"], r["raw_text"]) for r in read_jsonl(path)]


def read_slides(path) -> list[SlideRecord]:
    return [
        SlideRecord(r["slide_id"], r["case_id"], int(r["part_index"]), int(r["block_index"]), r.get("image_uri", ""))
        for r in read_jsonl(path)
    ]


def slide_to_record(s: SlideRecord) -> dict:
    return asdict(s)


def read_pairs(path) -> list[PairedExample]:
    return [
        PairedExample(r["slide_id"], r["text"], AssociationCategory(r["category"]), r["split"], r["source"])
        for r in read_jsonl(path)
    ]
