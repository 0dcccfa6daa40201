"""Command-line pipeline; every stage reads and writes files under ``--workdir``.

Layout of a work directory::

    corpus/   reports.jsonl slides.jsonl truth.jsonl prompts.json spec.json
              parts.jsonl pairs.jsonl
    images/   <slide_id>.png
    tiles/    patches.bin
    embeddings/ <slide_id>.wsie
    models/   stage1-R.ckpt stage1-G.ckpt decoder.ckpt stage2.ckpt
    logs/     training logs (jsonl)
    results/  metric outputs
    manifests/ <command>.json

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, DataError, WsiAlignError

SCHEMA_VERSION = 1
PRESETS = ("stage1-R", "stage1-G", "desk")


# -------------------------------------------------------------------- config


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_yaml(text: str, origin: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{origin}: schema_version {data.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return data


def load_config(name_or_path: str, _seen: tuple = ()) -> dict:
    """Load a preset by name or a YAML file by path, resolving ``extends`` chains."""
    if name_or_path in _seen:
        raise ConfigError(f"circular extends: {' -> '.join(_seen + (name_or_path,))}")
    if name_or_path in PRESETS:
        text = resources.files("wsialign.presets").joinpath(f"{name_or_path}.yaml").read_text("utf-8")
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise ConfigError(f"no preset or config file named {name_or_path!r}")
        text = path.read_text("utf-8")
    data = _read_yaml(text, name_or_path)
    parent = data.pop("extends", None)
    if parent:
        data = deep_merge(load_config(parent, _seen + (name_or_path,)), data)
    return data


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a config section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"override {key!r}: unknown key")
    node[parts[-1]] = yaml.safe_load(raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def stage1_settings(cfg: dict, variant: str) -> dict:
    s = {k: v for k, v in cfg["stage1"].items() if k != "variants"}
    variants = cfg["stage1"].get("variants", {})
    if variant not in variants:
        raise ConfigError(f"stage1.variants has no entry for {variant!r}")
    s.update(variants[variant])
    s["variant"] = variant
    return s


# ------------------------------------------------------------------ manifest


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seeds: dict
    versions: dict
    inputs: dict
    outputs: dict
    timings: dict
    schema_version: int = SCHEMA_VERSION
    package_version: str = __version__
    extra: dict = field(default_factory=dict)


def write_json_atomic(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def verify_manifest(path: str | Path, root: str | Path) -> list[str]:
    """Paths whose current checksum differs from the manifest (empty when consistent)."""
    man = json.loads(Path(path).read_text("utf-8"))
    bad = []
    for rel, digest in man["outputs"].items():
        p = Path(root) / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


# ------------------------------------------------------------------- workdir


class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def p(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    def need(self, *parts) -> Path:
        path = self.p(*parts)
        if not path.exists():
            raise DataError(f"missing input {self.rel(path)}; run the producing subcommand first")
        return path

    def embedding(self, slide_id: str) -> Path:
        return self.p("embeddings", f"{slide_id}.wsie")


@dataclass
class Outcome:
    outputs: list[Path]
    inputs: list[Path] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _jsonl(path: Path, records) -> Path:
    _write_text_atomic(path, "".join(json.dumps(r) + "\n" for r in records))
    return path


def _mask_params(cfg):
    from .tiler import MaskParams

    t = cfg["tiler"]
    return MaskParams(float(t["saturation_threshold"]), float(t["intensity_threshold"]),
                      int(t["closing_radius"]), int(t["erosion_radius"]))


# ------------------------------------------------------------------ commands


def _synth_spec(cfg):
    from .slide_synth import default_spec

    s = cfg["synth"]
    return default_spec(n_cases=int(s["cases"]), seed=int(s["seed"]), n_classes=int(s["classes"]),
                        image_size=tuple(s["image_size"]), slides_per_part_distribution=dict(s["categories"]))


def cmd_synth(args, cfg, wd: Workdir) -> Outcome:
    from .report_corpus import slide_to_record
    from .slide_synth import class_of_slide, generate_corpus, render_slide, write_png

    spec = _synth_spec(cfg)
    cases = generate_corpus(spec)
    wd.p("images").mkdir(parents=True, exist_ok=True)
    classes = {c.class_id: c for c in spec.classes}
    reports, slides, truth, outs = [], [], [], []
    for case in cases:
        reports.append({"case_id": case.case_id, "raw_text": case.report.raw_text})
        for s in case.slides:
            slides.append(slide_to_record(s))
            cls = classes[class_of_slide(case, s)]
            truth.append({"slide_id": s.slide_id, "class_id": cls.class_id, "organ": cls.organ,
                          "keyword": cls.keyword, "severity": cls.severity,
                          "text": case.part_texts[s.part_index]})
            path = wd.p(s.image_uri)
            write_png(path, render_slide(spec, case, s))
            outs.append(path)
    prompts = {"tasks": {"synthetic": {"prefixes": [], "classes": {
        str(c.class_id): [f"{c.organ}, biopsy : {t}." for t in c.finding_templates] for c in spec.classes}}}}
    outs += [
        _jsonl(wd.p("corpus", "reports.jsonl"), reports),
        _jsonl(wd.p("corpus", "slides.jsonl"), slides),
        _jsonl(wd.p("corpus", "truth.jsonl"), truth),
    ]
    write_json_atomic(wd.p("corpus", "prompts.json"), prompts)
    spec_rec = asdict(spec)
    write_json_atomic(wd.p("corpus", "spec.json"), spec_rec)
    outs += [wd.p("corpus", "prompts.json"), wd.p("corpus", "spec.json")]
    return Outcome(outs, seeds={"synth": spec.seed}, extra={"n_cases": len(cases), "n_slides": len(slides)})


def cmd_parse(args, cfg, wd: Workdir) -> Outcome:
    from .report_corpus import parse_report, read_reports

    src = wd.need("corpus", "reports.jsonl")
    recs = []
    for doc in read_reports(src):
        for part in parse_report(doc):
            recs.append({"case_id": part.case_id, "part_index": part.part_index, "label": part.label,
                         "finding": part.finding, "text": part.text,
                         "redactions": [asdict(r) for r in part.redactions]})
    out = _jsonl(wd.p("corpus", "parts.jsonl"), recs)
    return Outcome([out], [src], versions={"redaction_rules": _rules_digest()}, extra={"n_parts": len(recs)})


def _rules_digest() -> str:
    data = resources.files("wsialign.data")
    blob = data.joinpath("redaction_rules.txt").read_bytes() + data.joinpath("part_indicators.txt").read_bytes()
    return hashlib.sha256(blob).hexdigest()[:16]


def _read_parts(path: Path):
    from .report_corpus import PartRecord, Redaction, read_jsonl

    return [PartRecord(r["case_id"], r["part_index"], r["label"], r["finding"],
                       tuple(Redaction(**x) for x in r["redactions"])) for r in read_jsonl(path)]


def cmd_split(args, cfg, wd: Workdir) -> Outcome:
    from .report_corpus import assign_splits, build_pair_sets, read_slides, split_cases

    parts_p, slides_p = wd.need("corpus", "parts.jsonl"), wd.need("corpus", "slides.jsonl")
    clean, noisy = build_pair_sets(_read_parts(parts_p), read_slides(slides_p))
    seed = int(cfg["split"]["seed"])
    assignment = split_cases(clean, seed, tuple(cfg["split"]["fractions"]))
    clean, noisy = assign_splits(clean, noisy, assignment)
    out = _jsonl(wd.p("corpus", "pairs.jsonl"), [ex.to_record() for ex in clean + noisy])
    counts = {s: sum(1 for ex in clean if ex.split == s) for s in ("train", "validation", "test")}
    return Outcome([out], [parts_p, slides_p], seeds={"split": seed},
                   extra={"clean": counts, "noisy_train": len(noisy)})


def _pairs(wd: Workdir):
    from .report_corpus import read_pairs

    return read_pairs(wd.need("corpus", "pairs.jsonl"))


def _slides_by_id(wd: Workdir):
    from .report_corpus import read_slides

    return {s.slide_id: s for s in read_slides(wd.need("corpus", "slides.jsonl"))}


def cmd_tile(args, cfg, wd: Workdir) -> Outcome:
    from .slide_synth import read_png
    from .tiler import tile_slide, write_manifest

    params = _mask_params(cfg)
    t = cfg["tiler"]
    slides = _slides_by_id(wd)
    ids = sorted({ex.slide_id for ex in _pairs(wd)})
    sets, inputs = [], []
    for sid in ids:
        img_path = wd.need(slides[sid].image_uri)
        inputs.append(img_path)
        ps = tile_slide(sid, read_png(img_path), params, float(t["min_tissue_fraction"]),
                        int(t["budget"]), int(t["seed"]))
        sets.append(ps)
    out = wd.p("tiles", "patches.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    write_manifest(tmp, sets, params, float(t["min_tissue_fraction"]))
    os.replace(tmp, out)
    return Outcome([out], inputs, seeds={"tiler": int(t["seed"])}, versions={"mask_params": asdict(params)},
                   extra={"n_slides": len(sets), "n_patches": sum(len(s.coords) for s in sets),
                          "empty_slides": [s.slide_id for s in sets if not s.coords]})


def cmd_embed(args, cfg, wd: Workdir) -> Outcome:
    from .patch_embedder import ENCODER_SEED, embed_patches, store_bytes
    from .slide_synth import read_png
    from .tiler import extract_pixels, read_manifest

    man = wd.need("tiles", "patches.bin")
    _, sets = read_manifest(man)
    slides = _slides_by_id(wd)
    outs = []
    wd.p("embeddings").mkdir(parents=True, exist_ok=True)
    for ps in sets:
        img = read_png(wd.need(slides[ps.slide_id].image_uri))
        # a slide with no tissue window still gets its top-left patch so it stays queryable
        coords = ps.coords or [(0, 0)]
        emb = embed_patches(extract_pixels(img, coords), coords, ps.slide_id)
        path = wd.embedding(ps.slide_id)
        _write_bytes_atomic(path, store_bytes(emb))
        outs.append(path)
    return Outcome(outs, [man], seeds={"encoder": ENCODER_SEED}, extra={"n_slides": len(outs)})


def _write_bytes_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _load_split(wd: Workdir, split: str, source: str = "clean"):
    """(slide_ids, texts, inputs, embedding paths) for one split of the pair manifest."""
    from .patch_embedder import read_embeddings, wsi_input

    rows = [ex for ex in _pairs(wd) if ex.source == source and ex.split == split]
    if not rows:
        raise DataError(f"no {source} pairs in split {split!r}")
    paths = [wd.need("embeddings", f"{ex.slide_id}.wsie") for ex in rows]
    inputs = [wsi_input(read_embeddings(p)) for p in paths]
    return [ex.slide_id for ex in rows], [ex.text for ex in rows], inputs, paths


def _truth(wd: Workdir) -> dict[str, dict]:
    from .report_corpus import read_jsonl

    return {r["slide_id"]: r for r in read_jsonl(wd.need("corpus", "truth.jsonl"))}


def _oracle(train_texts):
    from .retrieval_eval import MatchOracle

    return MatchOracle().fit(train_texts)


def _deterministic(seed: int) -> None:
    import torch

    torch.set_num_threads(1)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def cmd_train_stage1(args, cfg, wd: Workdir) -> Outcome:
    from . import qformer as qf
    from .retrieval_eval import ORACLE_VERSION

    s = stage1_settings(cfg, args.variant or cfg["stage1"]["variant"])
    variant = s["variant"]
    _deterministic(int(s["seed"]))
    _, train_texts, train_inputs, train_paths = _load_split(wd, "train", s["train_source"])
    _, val_texts, val_inputs, val_paths = _load_split(wd, "validation")
    tok = qf.WordTokenizer.build(train_texts)
    oracle = _oracle(train_texts)
    mcfg, _ = qf.variant_config(
        variant, n_queries=int(s["n_queries"]), query_dim=int(s["query_dim"]),
        intermediate_dim=int(s["intermediate_dim"]), itc_proj_dim=int(s["itc_proj_dim"]),
        n_layers=int(s["n_layers"]), n_heads=int(s["n_heads"]), max_text_len=int(s["max_text_len"]),
        init_temperature=float(s["init_temperature"]), vocab_size=len(tok))
    weights = qf.LossWeights(*map(float, s["loss_weights"]))
    tcfg = qf.TrainConfig(lr=float(s["lr"]), weight_decay=float(s["weight_decay"]),
                          adam_betas=tuple(map(float, s["adam_betas"])), warmup_steps=int(s["warmup_steps"]),
                          max_steps=int(s["max_steps"]), batch_size=int(s["batch_size"]), seed=int(s["seed"]),
                          eval_every=int(s["eval_every"]), patience=int(s["patience"]))
    train = qf.PairDataset(train_inputs, train_texts, tok, oracle, mcfg.max_text_len)
    val = qf.PairDataset(val_inputs, val_texts, tok, oracle, mcfg.max_text_len)
    log_path = wd.p("logs", f"stage1-{variant}.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    res = qf.train_stage1(train, mcfg, weights, tcfg, val=val, oracle=oracle, log_path=log_path)
    ckpt = wd.p("models", f"stage1-{variant}.ckpt")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    qf.save_qformer(ckpt, res.model, tok, {"variant": variant, "best_step": res.best_step})
    report = qf.retrieval_report(res.model, tok, val_inputs, val_texts, oracle)
    summary = {"variant": variant, "best_step": res.best_step, "best_metric": res.best_metric,
               "steps_run": len(res.log), "evals": res.evals, "validation_retrieval": report.row(),
               "train_config": asdict(tcfg), "loss_weights": asdict(weights)}
    out = wd.p("results", f"train-stage1-{variant}.json")
    write_json_atomic(out, summary)
    return Outcome([ckpt, log_path, out], train_paths + val_paths, seeds={"train": tcfg.seed},
                   versions={"tokenizer_vocab": tok.digest(), "oracle": ORACLE_VERSION},
                   extra={"train_seconds": res.seconds})


def cmd_train_stage2(args, cfg, wd: Workdir) -> Outcome:
    from . import langgraft as lg
    from . import qformer as qf

    d, s2 = cfg["decoder"], cfg["stage2"]
    _deterministic(int(s2["seed"]))
    src = wd.need("models", "stage1-G.ckpt")
    model, qtok, _ = qf.load_qformer(src)
    if model.cfg.variant != "G":
        raise ConfigError("train-stage2 needs a G-variant stage-1 checkpoint")
    train_ids, train_texts, train_inputs, train_paths = _load_split(wd, "train")
    _, val_texts, val_inputs, val_paths = _load_split(wd, "validation")
    truth = _truth(wd)
    uniq = sorted({(t, truth[sid]["severity"]) for sid, t in zip(train_ids, train_texts)})
    knowledge = lg.knowledge_lines([u[0] for u in uniq], [u[1] for u in uniq])
    probe_tok = lg.CharTokenizer.build(list(train_texts) + knowledge + [lg.PRIORITY_TEMPLATE, " 0123456789"])
    dcfg = lg.DecoderConfig(vocab_size=len(probe_tok), dim=int(d["dim"]), n_layers=int(d["n_layers"]),
                            n_heads=int(d["n_heads"]), context=int(d["context"]), n_prefix=model.cfg.n_queries)
    pre = lg.pretrain_decoder(train_texts, knowledge, val_texts=sorted(set(val_texts)), cfg=dcfg,
                              steps=int(d["steps"]), batch_size=int(d["batch_size"]), lr=float(d["lr"]),
                              seed=int(d["seed"]), eval_every=int(d["eval_every"]), patience=int(d["patience"]),
                              tokenizer=probe_tok)
    dec_path = wd.p("models", "decoder.ckpt")
    dec_path.parent.mkdir(parents=True, exist_ok=True)
    lg.save_decoder(dec_path, pre)
    scfg = lg.Stage2Config(lr=float(s2["lr"]), adam_betas=tuple(map(float, s2["adam_betas"])),
                           warmup_steps=int(s2["warmup_steps"]), weight_decay=float(s2["weight_decay"]),
                           max_steps=int(s2["max_steps"]), batch_size=int(s2["batch_size"]),
                           grad_clip_norm=float(s2["grad_clip_norm"]), eval_every=int(s2["eval_every"]),
                           patience=int(s2["patience"]), seed=int(s2["seed"]), decoding=s2["decoding"])
    log_path = wd.p("logs", "stage2.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    res = lg.train_stage2(model, pre.decoder, pre.tokenizer, train_inputs, train_texts, scfg,
                          val_inputs, val_texts, log_path=log_path)
    ckpt = wd.p("models", "stage2.ckpt")
    lg.save_stage2(ckpt, res.model, pre.tokenizer, qtok, {"best_step": res.best_step})
    summary = {"decoder_checksum_before": pre.checksum, "decoder_checksum_after": res.decoder_checksum,
               "decoder_pretrain_steps": pre.steps, "decoder_val_loss": pre.val_loss,
               "best_step": res.best_step, "best_val_loss": -res.best_metric, "steps_run": len(res.log),
               "stage2_config": asdict(scfg),
               "optimizer": "AdamW (decoupled weight decay)"}
    out = wd.p("results", "train-stage2.json")
    write_json_atomic(out, summary)
    return Outcome([dec_path, ckpt, log_path, out], [src] + train_paths + val_paths,
                   seeds={"decoder": int(d["seed"]), "stage2": scfg.seed},
                   versions={"decoder_checksum": pre.checksum, "tokenizer_vocab": qtok.digest()},
                   extra={"train_seconds": res.seconds})


def cmd_retrieve(args, cfg, wd: Workdir) -> Outcome:
    from . import qformer as qf
    from .retrieval_eval import build_index, dedupe_texts, evaluate, match_sets, query

    ckpt = wd.need("models", f"stage1-{args.variant}.ckpt")
    model, tok, _ = qf.load_qformer(ckpt)
    _, train_texts, _, _ = _load_split(wd, "train", cfg["stage1"]["train_source"])
    oracle = _oracle(train_texts)
    ids, texts, inputs, paths = _load_split(wd, args.split)
    ks = tuple(sorted({1, 5, args.k}))
    img = qf.embed_images(model, inputs)
    exclude = None
    if args.direction == "image2text":
        corpus, gt = dedupe_texts(texts)
        index = build_index(list(zip(corpus, qf.embed_texts(model, tok, corpus))), modality="text")
        rel = match_sets(texts, corpus, oracle, gt)
        queries, qids = list(img), ids
    elif args.direction == "text2image":
        qtexts, _ = dedupe_texts(texts)
        index = build_index(list(zip(ids, img)), modality="image")
        rel = np.array([[t == u or oracle.matches(t, u) for u in texts] for t in qtexts])
        queries, qids = list(qf.embed_texts(model, tok, qtexts)), qtexts
    elif args.direction == "image2image":
        index = build_index(list(zip(ids, img)), modality="image")
        rel = np.array([[t == u or oracle.matches(t, u) for u in texts] for t in texts])
        queries, qids, exclude = list(img), ids, list(range(len(ids)))
    else:
        raise ConfigError(f"unknown direction {args.direction!r}")
    ks = tuple(k for k in ks if k <= len(index)) or (1,)
    report = evaluate(index, queries, rel, exclude=exclude, ks=ks)
    report.dataset, report.direction = args.split, args.direction
    hits = []
    for i, (qid, q) in enumerate(zip(qids, queries)):
        top = query(index, q, min(len(index), args.k + (1 if exclude else 0)))
        if exclude:
            top = [(h, s) for h, s in top if h != ids[i]][: args.k]
        hits.append({"query": qid, "results": [[h, round(s, 6)] for h, s in top]})
    out = wd.p("results", f"retrieve-{args.direction}-{args.split}-{args.variant}.json")
    write_json_atomic(out, {"metrics": report.row(), "ks": list(ks), "hits": hits})
    return Outcome([out], [ckpt] + paths, extra={"metrics": report.row()})


def cmd_classify(args, cfg, wd: Workdir) -> Outcome:
    from . import qformer as qf
    from .task_eval import auc_macro, balanced_accuracy, bootstrap_ci, classify, load_prompt_tasks, predict

    ckpt = wd.need("models", f"stage1-{args.variant}.ckpt")
    model, tok, _ = qf.load_qformer(ckpt)
    prompts = Path(args.prompts) if args.prompts else wd.need("corpus", "prompts.json")
    tasks = load_prompt_tasks(prompts)
    if args.task not in tasks:
        raise ConfigError(f"task {args.task!r} not in {prompts}")
    classes = tasks[args.task]
    ids, _, inputs, paths = _load_split(wd, args.split)
    truth = _truth(wd)
    col = {c.class_id: i for i, c in enumerate(classes)}
    labels = np.array([col[str(truth[sid]["class_id"])] for sid in ids])
    img = qf.embed_images(model, inputs)
    scores = classify(img, classes, lambda t: qf.embed_texts(model, tok, t))
    preds = predict(scores)
    e = cfg["eval"]
    n_rep, seed = int(e["bootstrap_replicates"]), int(e["bootstrap_seed"])
    auc = bootstrap_ci(auc_macro, (scores, labels), n_rep, seed)
    bacc = bootstrap_ci(balanced_accuracy, (preds, labels), n_rep, seed)
    result = {"task": args.task, "split": args.split, "n": len(ids),
              "auc": asdict(auc), "balanced_accuracy": asdict(bacc),
              "predictions": [{"slide_id": s, "label": classes[l].class_id, "pred": classes[p].class_id}
                              for s, l, p in zip(ids, labels, preds)]}
    out = wd.p("results", f"classify-{args.task}-{args.split}.json")
    write_json_atomic(out, result)
    return Outcome([out], [ckpt, prompts] + paths, seeds={"bootstrap": seed},
                   extra={"auc": str(auc), "balanced_accuracy": str(bacc)})


def cmd_generate(args, cfg, wd: Workdir) -> Outcome:
    from . import langgraft as lg

    ckpt = wd.need("models", "stage2.ckpt")
    model, ctok, _, _ = lg.load_stage2(ckpt)
    ids, texts, inputs, paths = _load_split(wd, args.split)
    max_len = args.max_len or int(cfg["stage2"]["max_text_len"])
    gen = lg.generate(model, ctok, inputs, max_len=max_len, prompt=args.prompt)
    out = _jsonl(wd.p("results", f"generations-{args.split}.jsonl"),
                 [{"slide_id": s, "generated": g, "reference": t} for s, g, t in zip(ids, gen, texts)])
    return Outcome([out], [ckpt] + paths)


def cmd_prioritize(args, cfg, wd: Workdir) -> Outcome:
    import warnings

    from . import langgraft as lg

    ckpt = wd.need("models", "stage2.ckpt")
    model, ctok, _, _ = lg.load_stage2(ckpt)
    template = lg.PRIORITY_TEMPLATE
    if args.template_file:
        template = Path(args.template_file).read_text("utf-8").strip()
    elif args.template:
        template = args.template
    ids, _, inputs, paths = _load_split(wd, args.split)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ranked = lg.prioritize(model, ctok, ids, inputs, template,
                               max_text_len=int(cfg["stage2"]["max_text_len"]))
    out = _jsonl(wd.p("results", f"priorities-{args.split}.jsonl"), [r.to_record() for r in ranked])
    truth = _truth(wd)
    sev = [truth[r.slide_id]["severity"] for r in ranked]
    summary = {"split": args.split, "n": len(ranked), "flagged": sum(r.flagged for r in ranked),
               "pairwise_order_accuracy": lg.pairwise_order_accuracy(sev),
               "severity_order": sev}
    out2 = wd.p("results", f"prioritize-{args.split}.json")
    write_json_atomic(out2, summary)
    return Outcome([out, out2], [ckpt] + paths, extra={"pairwise_order_accuracy": summary["pairwise_order_accuracy"]})


def cmd_eval_text(args, cfg, wd: Workdir) -> Outcome:
    from .report_corpus import read_jsonl
    from .task_eval import bootstrap_ci, meteor_simplified, rouge_l

    src = wd.need("results", f"generations-{args.split}.jsonl")
    rows = read_jsonl(src)
    if not rows:
        raise DataError(f"{src} is empty")
    truth = _truth(wd)
    rl = np.array([rouge_l(r["generated"], r["reference"]) for r in rows])
    met = np.array([meteor_simplified(r["generated"], r["reference"]) for r in rows])
    kw = np.array([float(truth[r["slide_id"]]["keyword"] in r["generated"]) for r in rows])
    e = cfg["eval"]
    n_rep, seed = int(e["bootstrap_replicates"]), int(e["bootstrap_seed"])
    result = {
        "split": args.split, "n": len(rows),
        "rouge_l": {"precision": float(rl[:, 0].mean()), "recall": float(rl[:, 1].mean()),
                    "f1": asdict(bootstrap_ci(np.mean, rl[:, 2], n_rep, seed))},
        "meteor": asdict(bootstrap_ci(np.mean, met, n_rep, seed)),
        "keyword_rate": asdict(bootstrap_ci(np.mean, kw, n_rep, seed)),
        "exact_match": float(np.mean([r["generated"] == r["reference"] for r in rows])),
    }
    out = wd.p("results", f"eval-text-{args.split}.json")
    write_json_atomic(out, result)
    return Outcome([out], [src], seeds={"bootstrap": seed})


def cmd_report(args, cfg, wd: Workdir) -> Outcome:
    runs = {}
    for path in sorted(wd.p("manifests").glob("*.json")) if wd.p("manifests").exists() else []:
        if path.stem == "report":
            continue
        man = json.loads(path.read_text("utf-8"))
        runs[path.stem] = {"command": man["command"], "config": man["config"], "config_hash": man["config_hash"],
                           "seeds": man["seeds"], "versions": man["versions"],
                           "stale_outputs": verify_manifest(path, wd.root)}
    results = {}
    for path in sorted(wd.p("results").glob("*.json")) if wd.p("results").exists() else []:
        results[path.stem] = json.loads(path.read_text("utf-8"))
    retrieval = [r["metrics"] for k, r in results.items() if k.startswith("retrieve-")]
    classification = [{"task": r["task"], "split": r["split"], "n": r["n"],
                       "AUC": _ci_str(r["auc"]), "balanced_accuracy": _ci_str(r["balanced_accuracy"])}
                      for k, r in results.items() if k.startswith("classify-")]
    generation = [{"split": r["split"], "n": r["n"], "ROUGE-L": _ci_str(r["rouge_l"]["f1"]),
                   "METEOR": _ci_str(r["meteor"]), "keyword_rate": _ci_str(r["keyword_rate"])}
                  for k, r in results.items() if k.startswith("eval-text-")]
    priority = [{"split": r["split"], "n": r["n"], "pairwise_order_accuracy": r["pairwise_order_accuracy"],
                 "flagged": r["flagged"]} for k, r in results.items() if k.startswith("prioritize-")]
    summary = {"runs": runs, "retrieval": retrieval, "classification": classification,
               "generation": generation, "prioritization": priority}
    out_json = wd.p("report.json")
    write_json_atomic(out_json, summary)
    md = ["# Run summary", ""]
    md += _table("Retrieval", retrieval)
    md += _table("Zero-shot classification", classification)
    md += _table("Text generation", generation)
    md += _table("Prioritization", priority)
    md += _table("Runs", [{"run": k, "config_hash": v["config_hash"][:12], "seeds": json.dumps(v["seeds"]),
                           "stale_outputs": len(v["stale_outputs"])} for k, v in runs.items()])
    out_md = wd.p("report.md")
    _write_text_atomic(out_md, "\n".join(md) + "\n")
    return Outcome([out_json, out_md])


def _ci_str(ci: dict) -> str:
    return f"{ci['point']:.3f} [{ci['lower']:.3f} - {ci['upper']:.3f}]"


def _table(title: str, rows: list[dict]) -> list[str]:
    lines = [f"## {title}", ""]
    if not rows:
        return lines + ["(none)", ""]
    cols = list(rows[0])
    lines.append("| " + " | ".join(cols) + " |")
    lines.append("|" + "---|" * len(cols))
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c)) for c in cols) + " |")
    return lines + [""]


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------- main


COMMANDS: dict[str, Callable] = {
    "synth": cmd_synth,
    "parse": cmd_parse,
    "split": cmd_split,
    "tile": cmd_tile,
    "embed": cmd_embed,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "retrieve": cmd_retrieve,
    "classify": cmd_classify,
    "generate": cmd_generate,
    "prioritize": cmd_prioritize,
    "eval-text": cmd_eval_text,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="run", help="directory holding all pipeline files")
    common.add_argument("--config", default="desk", help=f"preset name ({', '.join(PRESETS)}) or YAML path")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    parser = argparse.ArgumentParser(prog="wsialign", description="Slide-text alignment pipeline on synthetic slides.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic reports and slide images")
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--cases", type=int)

    sub.add_parser("parse", parents=[common], help="parse reports into part records")
    p = sub.add_parser("split", parents=[common], help="build clean/noisy pairs and case-level splits")
    p.add_argument("--seed", type=int)
    sub.add_parser("tile", parents=[common], help="tissue masks and patch grids")
    sub.add_parser("embed", parents=[common], help="patch embeddings")

    p = sub.add_parser("train-stage1", parents=[common], help="train the Q-Former (R or G variant)")
    p.add_argument("--variant", choices=("R", "G"))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train-stage2", parents=[common], help="pretrain and freeze the decoder, then graft")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("retrieve", parents=[common], help="cross-modal retrieval metrics")
    p.add_argument("--direction", choices=("image2text", "text2image", "image2image"), default="image2text")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split", default="validation")
    p.add_argument("--variant", choices=("R", "G"), default="R")

    p = sub.add_parser("classify", parents=[common], help="prompt-ensemble zero-shot classification")
    p.add_argument("--task", default="synthetic")
    p.add_argument("--prompts", help="prompt ensemble JSON (default: the corpus prompts)")
    p.add_argument("--split", default="validation")
    p.add_argument("--variant", choices=("R", "G"), default="R")

    p = sub.add_parser("generate", parents=[common], help="greedy text generation per slide")
    p.add_argument("--split", default="validation")
    p.add_argument("--max-len", type=int)
    p.add_argument("--prompt")

    p = sub.add_parser("prioritize", parents=[common], help="severity scores and sorted slide list")
    p.add_argument("--split", default="validation")
    p.add_argument("--template")
    p.add_argument("--template-file")

    p = sub.add_parser("eval-text", parents=[common], help="ROUGE-L, METEOR and keyword rate of generations")
    p.add_argument("--split", default="validation")

    sub.add_parser("report", parents=[common], help="aggregate metrics and run manifests")
    return parser


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    flag_map = {
        "synth": {"seed": "synth.seed", "classes": "synth.classes", "cases": "synth.cases"},
        "split": {"seed": "split.seed"},
        "train-stage1": {"max_steps": "stage1.max_steps", "seed": "stage1.seed"},
        "train-stage2": {"max_steps": "stage2.max_steps", "seed": "stage2.seed"},
    }.get(args.command, {})
    for assignment in args.set:
        apply_override(cfg, assignment)
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            apply_override(cfg, f"{key}={value}")
    if args.command == "train-stage1" and args.max_steps is not None:
        # an explicit flag beats per-variant preset values too
        for v in cfg["stage1"].get("variants", {}).values():
            v.pop("max_steps", None)
    return cfg


def run(args) -> RunManifest:
    cfg = resolve_config(args)
    wd = Workdir(args.workdir)
    wd.root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    outcome = COMMANDS[args.command](args, cfg, wd)
    elapsed = time.perf_counter() - t0
    import torch

    versions = {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__,
                "mask_params": cfg["tiler"]}
    versions.update(outcome.versions)
    name = args.command
    if args.command in ("train-stage1", "retrieve", "classify") and getattr(args, "variant", None):
        name += f"-{args.variant}"
    if getattr(args, "direction", None):
        name += f"-{args.direction}"
    if getattr(args, "split", None) and args.command != "split":
        name += f"-{args.split}"
    man = RunManifest(
        command=args.command,
        config=cfg,
        config_hash=config_hash(cfg),
        seeds=outcome.seeds,
        versions=versions,
        inputs={wd.rel(p): sha256_file(p) for p in outcome.inputs},
        outputs={wd.rel(p): sha256_file(p) for p in outcome.outputs},
        timings={"started": started, "seconds": round(elapsed, 3)},
        extra=outcome.extra,
    )
    write_json_atomic(wd.p("manifests", f"{name}.json"), asdict(man))
    return man


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        man = run(args)
    except WsiAlignError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code,
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, KeyError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": 3, "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 3
    print(json.dumps({"command": man.command, "outputs": len(man.outputs), "seconds": man.timings["seconds"],
                      **({"summary": man.extra} if man.extra else {})}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
