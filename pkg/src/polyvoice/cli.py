"""``polyvoice`` command line: prepare, augment, train, synthesize, evaluate.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .align import AlignmentError
from .augment import AugmentError, augment_dataset, default_specs
from .config import ConfigError, ToolkitConfig, load_config, save_config
from .dataset import (
    ManifestError,
    cache_features,
    load_features,
    parse_manifest,
    validate_dataset,
)
from .evaluation import (
    EvaluationError,
    evaluate_transfer,
    parse_synth_manifest,
    providers_from_config,
    reference_embeddings,
)
from .features import FeatureError, PitchTrack, speaker_f0_stats
from .model import (
    AccentModel,
    CheckpointError,
    FlowError,
    ModelError,
    NonFiniteLossError,
    Normalizer,
    items_from_entries,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .text import PhonemeInventory, UnknownSymbolError, build_inventory, tokenize_ipa
from .toy import write_toy_corpus

log = logging.getLogger("polyvoice")

INVENTORY_FILE = "inventory.txt"
STATS_FILE = "speaker_stats.json"
SUMMARY_FILE = "prepare_summary.json"

VALIDATION_ERRORS = (
    ConfigError,
    ManifestError,
    ModelError,
    CheckpointError,
    UnknownSymbolError,
    EvaluationError,
    AugmentError,
    FileNotFoundError,
)
RUNTIME_ERRORS = (NonFiniteLossError, FlowError, AlignmentError, FeatureError, ArithmeticError, OSError)


class CommandError(Exception):
    """Validation failure detected by a command itself."""


def _config(args) -> ToolkitConfig:
    config = load_config(getattr(args, "config", None))
    overrides = {}
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    training = {}
    if getattr(args, "seed", None) is not None:
        training["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        training["steps"] = args.steps
    if training:
        overrides["training"] = dataclasses.replace(config.training, **training)
    if overrides:
        config = dataclasses.replace(config, **overrides)
        config.validate()
    return config


def _inventory(cache_dir: Path, manifest) -> PhonemeInventory:
    path = cache_dir / INVENTORY_FILE
    if path.is_file():
        inventory = PhonemeInventory.load(path)
        # a later (e.g. augmented) manifest may only reuse known symbols
        for record in manifest.records:
            try:
                tokenize_ipa(record.ipa_text, inventory)
            except UnknownSymbolError as exc:
                raise CommandError(f"{record.audio_path}: {exc} (not in cached {path})") from None
        return inventory
    inventory = build_inventory([manifest])
    cache_dir.mkdir(parents=True, exist_ok=True)
    inventory.save(path)
    return inventory


def _require_valid(manifest) -> None:
    report = validate_dataset(manifest)
    for accent in report.low_resource_accents:
        log.warning("accent '%s' has a single speaker", accent)
    if not report.ok:
        raise CommandError(report.summary())


def _cached_items(manifest, config: ToolkitConfig, cache_dir: Path):
    inventory = _inventory(cache_dir, manifest)
    summary = cache_features(manifest, config.features, cache_dir, inventory)
    if summary.errors:
        path, reason = summary.errors[0]
        raise CommandError(f"feature extraction failed for {len(summary.errors)} file(s); first: {path}: {reason}")
    entries = [load_features(k, cache_dir) for k in summary.keys]
    items = items_from_entries(entries, [r.speaker_id for r in manifest.records], [r.accent_id for r in manifest.records])
    return inventory, summary, items


def _speaker_stats(items, std_floor: float):
    return speaker_f0_stats([(it.speaker_id, PitchTrack(it.f0_hz, it.voiced)) for it in items], std_floor)


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    config = _config(args)
    manifest = parse_manifest(args.manifest)
    _require_valid(manifest)
    cache_dir = Path(args.cache_dir)
    inventory, summary, items = _cached_items(manifest, config, cache_dir)
    stats = _speaker_stats(items, config.features.f0_std_floor)
    stats_json = {manifest.speakers[s]: dataclasses.asdict(v) for s, v in stats.items()}
    (cache_dir / STATS_FILE).write_text(json.dumps(stats_json, indent=1, sort_keys=True), encoding="utf-8")
    report = {
        "manifest": str(Path(args.manifest).resolve()),
        "records": len(manifest.records),
        "speakers": manifest.n_speakers,
        "accents": manifest.n_accents,
        "languages": manifest.n_languages,
        "inventory_size": len(inventory),
        "config_hash": summary.config_hash,
        "new_entries": summary.written,
        "skipped_entries": summary.skipped,
    }
    (cache_dir / SUMMARY_FILE).write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    print(f"{summary.written} new entries, {summary.skipped} already cached; {len(inventory)} symbols, {manifest.n_speakers} speakers")
    return 0


def cmd_augment(args) -> int:
    manifest = parse_manifest(args.manifest)
    _require_valid(manifest)
    seed = 0 if args.seed is None else args.seed
    result = augment_dataset(manifest, default_specs(seed), args.out, workers=args.workers)
    for path, reason in result.failures:
        log.error("augmentation failed: %s: %s", path, reason)
    if result.failures:
        return 2
    print(f"{len(result.manifest.records)} records, {result.manifest.n_speakers} speakers -> {Path(args.out) / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    manifest = parse_manifest(args.manifest)
    _require_valid(manifest)
    cache_dir = Path(args.cache_dir)
    inventory, summary, items = _cached_items(manifest, config, cache_dir)
    if summary.written:
        log.info("cached %d new entries", summary.written)
    stats = _speaker_stats(items, config.features.f0_std_floor)
    model = AccentModel.create(config, inventory, manifest.speakers, manifest.accents, Normalizer.fit(items), stats)
    checkpoint = Path(args.checkpoint)

    def periodic(m, step):
        save_checkpoint(m, checkpoint.with_name(f"{checkpoint.stem}.step{step}{checkpoint.suffix}"))

    result = train(model, items, on_checkpoint=periodic)
    save_checkpoint(model, checkpoint)
    trace_path = Path(args.out) if args.out else checkpoint.with_suffix(".trace.json")
    trace = {
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "final_epoch_abs_r_norm": result.final_epoch_r_norm,
        "steps": result.trace,
    }
    trace_path.write_text(json.dumps(trace, indent=1, sort_keys=True), encoding="utf-8")
    print(f"trained {len(result.trace)} steps: loss {result.initial_loss:.4f} -> {result.final_loss:.4f}; checkpoint {checkpoint}")
    return 0


def cmd_synthesize(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.mode and args.mode != model.mode:
        raise CommandError(f"checkpoint was trained in {model.mode.upper()} mode, not {args.mode.upper()}")
    speaker = model.speaker_id(args.speaker)
    accent = model.accent_id(args.accent)
    tokens = tokenize_ipa(args.text, model.inventory)
    stats = None
    if model.mode == "rm":
        stats = model.speaker_stats.get(speaker)
        if stats is None:
            raise CommandError(f"checkpoint has no F0 statistics for speaker '{args.speaker}'")
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    out = model.synthesize(tokens, accent, speaker, sigma=args.sigma, target_stats=stats, rng=rng)
    doc = {
        "text": args.text,
        "speaker": args.speaker,
        "accent": args.accent,
        "mode": model.mode,
        "sigma": args.sigma,
        "hop_length": out.mel.hop_length,
        "sample_rate": out.mel.sample_rate,
        "durations": out.durations.durations.tolist(),
        "f0_hz": None if out.pitch is None else out.pitch.f0_hz.tolist(),
        "voiced": None if out.pitch is None else out.pitch.voiced_mask.astype(int).tolist(),
        "energy": None if out.energy is None else out.energy.tolist(),
        "mel": out.mel.values.tolist(),
    }
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    print(f"{out.mel.n_frames} frames -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    config = _config(args)
    items = parse_synth_manifest(args.manifest)
    if not items:
        raise CommandError("synthesis manifest has no items")
    spec = {}
    if args.providers:
        spec = yaml.safe_load(Path(args.providers).read_text(encoding="utf-8")) or {}
    embedder, transcriber = providers_from_config(spec, config.features)
    real = parse_manifest(args.references)
    by_speaker: dict[str, list[str]] = {}
    for r in real.records:
        by_speaker.setdefault(real.speakers[r.speaker_id], []).append(r.audio_path)
    wanted = {it.source_speaker for it in items}
    refs = reference_embeddings({s: p for s, p in by_speaker.items() if s in wanted}, embedder)
    report = evaluate_transfer(items, embedder, transcriber, refs)
    if report.cosine.n == 0:
        raise CommandError(f"no item could be evaluated ({len(report.skipped)} skipped)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path = out.with_suffix(".json")
    text_path = out.with_suffix(".txt")
    json_path.write_text(report.to_json(), encoding="utf-8")
    text_path.write_text(report.to_table(), encoding="utf-8")
    sys.stdout.write(report.to_table())
    return 0


def cmd_toy_corpus(args) -> int:
    manifest = write_toy_corpus(args.out, n_utterances=args.n, seed=0 if args.seed is None else args.seed)
    print(manifest)
    return 0


def cmd_config(args) -> int:
    config = _config(args)
    if args.out:
        save_config(config, args.out)
    else:
        sys.stdout.write(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyvoice", description="Accent/speaker disentangled multilingual TTS toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
        if seed:
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("prepare", help="validate a manifest and cache features"), seed=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.set_defaults(func=cmd_prepare)

    p = common(sub.add_parser("augment", help="write six transformed copies with relabeled speakers"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    p = common(sub.add_parser("train", help="train and write a checkpoint"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("rt", "rm"))
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="loss trace path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("synthesize", help="synthesize a mel for any speaker/accent pair"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True, help="IPA text")
    p.add_argument("--speaker", required=True)
    p.add_argument("--accent", required=True)
    p.add_argument("--mode", choices=("rt", "rm"))
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = common(sub.add_parser("evaluate", help="score synthesized items"), seed=False)
    p.add_argument("--manifest", required=True, help="synthesis manifest: path|source_speaker|target_accent|reference_text")
    p.add_argument("--references", required=True, help="dataset manifest with the real utterances")
    p.add_argument("--providers", help="YAML provider config")
    p.add_argument("--out", required=True, help="report path; .json and .txt are written")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("toy-corpus", help="generate the synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_toy_corpus)

    p = common(sub.add_parser("config", help="print or write the effective config"), seed=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    limit = threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()
    try:
        with limit:
            return args.func(args)
    except (CommandError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
