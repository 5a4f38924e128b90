"""Intra-database, cross-PA and cross-database evaluation runs.

A protocol is one training manifest plus any number of test manifests.
Each test manifest yields one report row; when its attacks can be split
into known and unknown species, one extra row per subset is added (the
bona fide samples are shared by both subsets).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Manifest
from .errors import ConfigError
from .evaluation import (
    DEFAULT_FDR,
    DEFAULT_THRESHOLD,
    MetricsReport,
    ScoreSet,
    compute_report,
    round2,
    write_histogram,
    write_report,
    write_scores,
)
from .training import Checkpoint, TrainConfig, manifest_fingerprint, predict, train

log = logging.getLogger(__name__)


@dataclass
class ProtocolSpec:
    train_manifest: Manifest
    test_manifests: list[Manifest]
    variant: str = "apbs"
    seed: int = 0
    train_config: TrainConfig | None = None
    checkpoint: Checkpoint | None = None
    threshold: float = DEFAULT_THRESHOLD
    fdr: float = DEFAULT_FDR
    bins: int = 20
    names: list[str] = field(default_factory=list)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "set"


def known_unknown_tags(test: Manifest, train_attack_types: set[str]) -> list[str]:
    """Per-sample tag: explicit manifest value, else derived from the training attack types."""
    tags = []
    for e in test.entries:
        if e.label == 0:
            tags.append("")
        elif e.known_unknown:
            tags.append(e.known_unknown)
        else:
            tags.append("known" if e.attack_type in train_attack_types else "unknown")
    return tags


def split_known_unknown(ss: ScoreSet) -> dict[str, ScoreSet]:
    """Subsets 'known'/'unknown' (each with all bona fides) when both kinds occur."""
    tags = np.array([m.get("known_unknown", "") for m in ss.metadata])
    att = ss.labels == 1
    kinds = [k for k in ("known", "unknown") if np.any(att & (tags == k))]
    if len(kinds) < 2:
        return {}
    return {k: ss.select((ss.labels == 0) | (tags == k)) for k in kinds}


def evaluate_scores(ss: ScoreSet, name: str, out_dir=None, threshold=DEFAULT_THRESHOLD, fdr=DEFAULT_FDR, bins=20) -> list[MetricsReport]:
    rows = [compute_report(ss, name, threshold, fdr)]
    subsets = split_known_unknown(ss) if ss.metadata else {}
    for kind, sub in subsets.items():
        rows.append(compute_report(sub, f"{name} [{kind[0].upper()}]", threshold, fdr))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_scores(ss, out_dir / f"scores_{_slug(name)}.csv")
        write_histogram(ss, out_dir / f"hist_{_slug(name)}.csv", bins)
        for kind, sub in subsets.items():
            write_histogram(sub, out_dir / f"hist_{_slug(name)}_{kind}.csv", bins)
    return rows


def run_protocol(spec: ProtocolSpec, out_dir=None) -> list[MetricsReport]:
    """Train (unless a checkpoint is supplied) and evaluate every test manifest."""
    if not spec.test_manifests:
        raise ConfigError("protocol needs at least one test manifest")
    fp = manifest_fingerprint(spec.train_manifest)
    ckpt = spec.checkpoint
    if ckpt is not None:
        if ckpt.config.variant != spec.variant:
            raise ConfigError(f"checkpoint variant {ckpt.config.variant!r} != requested {spec.variant!r}")
        if ckpt.manifest_fingerprint and ckpt.manifest_fingerprint != fp:
            raise ConfigError(
                f"checkpoint was trained on a different manifest than {spec.train_manifest.name!r} "
                f"(fingerprint {ckpt.manifest_fingerprint} != {fp})"
            )
    else:
        cfg = spec.train_config or TrainConfig(variant=spec.variant, seed=spec.seed)
        cfg = replace(cfg, variant=spec.variant, seed=spec.seed)
        ckpt = train(cfg, spec.train_manifest)

    train_types = {e.attack_type for e in spec.train_manifest.entries if e.label == 1}
    names = spec.names or [m.name for m in spec.test_manifests]
    if len(names) != len(spec.test_manifests):
        raise ConfigError("one name per test manifest required")
    model = ckpt.build_model()
    rows: list[MetricsReport] = []
    for name, test in zip(names, spec.test_manifests):
        ss = predict(model, test)
        tags = known_unknown_tags(test, train_types)
        by_path = {e.image_path: t for e, t in zip(test.entries, tags)}
        for m in ss.metadata:
            m["known_unknown"] = by_path[m["sample_path"]]
        rows.extend(evaluate_scores(ss, name, out_dir, spec.threshold, spec.fdr, spec.bins))
    if out_dir is not None:
        write_report(rows, out_dir)
    return rows


def cross_database_grid(cells: dict[tuple[str, str], MetricsReport], out_dir=None) -> dict:
    """Arrange (trained, tested) reports into an EER/HTER grid; optionally write it."""
    grid = {}
    for (tr, te), rep in cells.items():
        grid.setdefault(tr, {})[te] = {"eer": rep.eer, "hter": rep.hter}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "cross_db.json").write_text(json.dumps(grid, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out_dir / "cross_db.txt").write_text(format_grid(grid), encoding="utf-8")
    return grid


def format_grid(grid: dict) -> str:
    lines = []
    header = f"{'Trained':<20} {'Tested':<20} {'EER':>8} {'HTER':>8}"
    lines += [header, "-" * len(header)]
    for tr in grid:
        for te, v in grid[tr].items():
            lines.append(f"{tr:<20} {te:<20} {round2(v['eer']):>8} {round2(v['hter']):>8}")
    return "\n".join(lines) + "\n"
