from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from polyvoice.config import ToolkitConfig  # noqa: E402
from polyvoice.dataset import cache_features, load_features, parse_manifest  # noqa: E402
from polyvoice.features import PitchTrack, speaker_f0_stats  # noqa: E402
from polyvoice.model import items_from_entries  # noqa: E402
from polyvoice.text import build_inventory  # noqa: E402
from polyvoice.toy import write_toy_corpus  # noqa: E402


@pytest.fixture(scope="session")
def toy_manifest_path(tmp_path_factory) -> Path:
    return write_toy_corpus(tmp_path_factory.mktemp("toy"), n_utterances=32, seed=0)


@pytest.fixture(scope="session")
def toy_data(toy_manifest_path, tmp_path_factory):
    """(manifest, inventory, training items, speaker stats) for the toy corpus."""
    manifest = parse_manifest(toy_manifest_path)
    inventory = build_inventory([manifest])
    config = ToolkitConfig()
    cache = tmp_path_factory.mktemp("cache")
    summary = cache_features(manifest, config.features, cache, inventory)
    assert not summary.errors
    entries = [load_features(k, cache) for k in summary.keys]
    items = items_from_entries(entries, [r.speaker_id for r in manifest.records], [r.accent_id for r in manifest.records])
    stats = speaker_f0_stats([(it.speaker_id, PitchTrack(it.f0_hz, it.voiced)) for it in items])
    return manifest, inventory, items, stats


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
