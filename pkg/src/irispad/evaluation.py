"""PAD metrics (ISO/IEC 30107-3 style), separability, and report output.

Convention everywhere: a higher ``pa_score`` means "more likely an attack",
and a sample is classified as an attack when ``score >= threshold``.
All rates are percentages.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .errors import ConfigError

DEFAULT_THRESHOLD = 0.5
DEFAULT_FDR = 0.002
SCORE_COLUMNS = ("sample_path", "pa_score", "label", "database", "sensor", "attack_type", "known_unknown")


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    metadata: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise ConfigError(f"{len(self.scores)} scores but {len(self.labels)} labels")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ConfigError("labels must be 0 (bona fide) or 1 (attack)")
        if self.metadata and len(self.metadata) != len(self.scores):
            raise ConfigError("metadata length differs from score count")

    def __len__(self):
        return len(self.scores)

    @property
    def attack(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def bona_fide(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    def select(self, mask) -> "ScoreSet":
        mask = np.asarray(mask, dtype=bool)
        meta = [m for m, keep in zip(self.metadata, mask) if keep] if self.metadata else []
        return ScoreSet(self.scores[mask], self.labels[mask], meta)

    def require_both(self) -> None:
        if len(self.scores) == 0:
            raise ConfigError("empty score set")
        for label, name in ((1, "attack"), (0, "bona fide")):
            if not np.any(self.labels == label):
                raise ConfigError(f"score set has no {name} samples")


# --- threshold counts ---------------------------------------------------------


def error_counts(ss: ScoreSet, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """Misclassified attack and bona fide counts at each threshold.

    Attacks with score < t are errors; bona fides with score >= t are errors.
    """
    t = np.asarray(thresholds, dtype=np.float64)
    att = np.sort(ss.attack)
    bf = np.sort(ss.bona_fide)
    n_att_err = np.searchsorted(att, t, side="left")
    n_bf_err = len(bf) - np.searchsorted(bf, t, side="left")
    return n_att_err, n_bf_err


def _rates(ss: ScoreSet, thresholds):
    a, b = error_counts(ss, thresholds)
    return 100.0 * a / len(ss.attack), 100.0 * b / len(ss.bona_fide)


def candidate_thresholds(ss: ScoreSet) -> np.ndarray:
    """Sorted unique scores plus 0, 1 and one value above every score."""
    top = np.nextafter(max(1.0, float(ss.scores.max())), np.inf)
    return np.unique(np.concatenate([ss.scores, [0.0, 1.0, top]]))


def apcer_bpcer(ss: ScoreSet, threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    ss.require_both()
    a, b = _rates(ss, [threshold])
    return float(a[0]), float(b[0])


def hter(ss: ScoreSet, threshold: float = DEFAULT_THRESHOLD) -> float:
    a, b = apcer_bpcer(ss, threshold)
    return (a + b) / 2.0


def hter_from_rates(apcer: float, bpcer: float) -> float:
    return (apcer + bpcer) / 2.0


def eer(ss: ScoreSet) -> tuple[float, float]:
    """Discrete EER: threshold minimizing |APCER - BPCER| (lowest on ties).

    Returns (mean of the two rates there, threshold). No interpolation.
    """
    ss.require_both()
    t = candidate_thresholds(ss)
    a, b = _rates(ss, t)
    i = int(np.argmin(np.abs(a - b)))
    return float((a[i] + b[i]) / 2.0), float(t[i])


def tdr_at_fdr(ss: ScoreSet, fdr_target: float = DEFAULT_FDR) -> tuple[float, float]:
    """TDR (100 - APCER) at the lowest threshold whose BPCER <= target.

    ``fdr_target`` is a fraction (0.002 = 0.2%).
    """
    if not 0.0 <= fdr_target <= 1.0:
        raise ConfigError(f"fdr_target must be a fraction in [0, 1], got {fdr_target}")
    ss.require_both()
    t = candidate_thresholds(ss)
    a, b = error_counts(ss, t)
    n_bf = len(ss.bona_fide)
    # compare counts, not rates, to keep the cut exact
    ok = np.flatnonzero(b <= fdr_target * n_bf + 1e-9)
    i = int(ok[0])
    return float(100.0 - 100.0 * a[i] / len(ss.attack)), float(t[i])


def ccr(ss: ScoreSet, threshold: float = DEFAULT_THRESHOLD) -> float:
    if len(ss) == 0:
        raise ConfigError("empty score set")
    pred = (ss.scores >= threshold).astype(np.int64)
    return float(100.0 * np.count_nonzero(pred == ss.labels) / len(ss))


def fisher_ratio(ss: ScoreSet) -> float:
    """(mean_att - mean_bf)^2 / (var_att + var_bf), population variances."""
    att, bf = ss.attack, ss.bona_fide
    if len(att) < 2 or len(bf) < 2:
        raise ConfigError("fisher_ratio needs at least two samples per class")
    num = (att.mean() - bf.mean()) ** 2
    den = att.var() + bf.var()
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return float(num / den)


# --- reports --------------------------------------------------------------------


@dataclass
class MetricsReport:
    name: str
    apcer: float
    bpcer: float
    hter: float
    eer: float
    eer_threshold: float
    tdr_at_fdr: float
    tdr_threshold: float
    ccr: float
    fisher_ratio: float | None
    threshold: float
    fdr_operating_point: float
    n_attack: int
    n_bona_fide: int
    n_attack_errors: int
    n_bona_fide_errors: int

    def to_json(self) -> dict:
        d = asdict(self)
        if d["fisher_ratio"] is not None and math.isinf(d["fisher_ratio"]):
            d["fisher_ratio"] = "inf"
        return d


def compute_report(ss: ScoreSet, name: str = "", threshold: float = DEFAULT_THRESHOLD, fdr: float = DEFAULT_FDR) -> MetricsReport:
    ss.require_both()
    a_err, b_err = (int(c[0]) for c in error_counts(ss, [threshold]))
    apcer, bpcer = apcer_bpcer(ss, threshold)
    e, et = eer(ss)
    tdr, tt = tdr_at_fdr(ss, fdr)
    try:
        fr = fisher_ratio(ss)
    except ConfigError:
        fr = None
    return MetricsReport(
        name=name,
        apcer=apcer,
        bpcer=bpcer,
        hter=hter_from_rates(apcer, bpcer),
        eer=e,
        eer_threshold=et,
        tdr_at_fdr=tdr,
        tdr_threshold=tt,
        ccr=ccr(ss, threshold),
        fisher_ratio=fr,
        threshold=threshold,
        fdr_operating_point=fdr,
        n_attack=len(ss.attack),
        n_bona_fide=len(ss.bona_fide),
        n_attack_errors=a_err,
        n_bona_fide_errors=b_err,
    )


_TABLE_COLUMNS = (
    ("APCER", "apcer"),
    ("BPCER", "bpcer"),
    ("HTER", "hter"),
    ("EER", "eer"),
    ("TDR@FDR", "tdr_at_fdr"),
    ("CCR", "ccr"),
    ("FDR(Fisher)", "fisher_ratio"),
)


def round2(v: float) -> str:
    """Two decimals, half-up, after trimming binary noise (6.494999... -> 6.50)."""
    return str(Decimal(f"{v:.10f}").quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return round2(v)


def format_table(reports: list[MetricsReport]) -> str:
    """Plain-text table, two decimals, rates in percent."""
    if not reports:
        return ""
    first = reports[0]
    header = ["Test set"] + [c for c, _ in _TABLE_COLUMNS]
    rows = [[r.name] + [_fmt(getattr(r, key)) for _, key in _TABLE_COLUMNS] for r in reports]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    out = [
        f"threshold = {first.threshold:g}   TDR at FDR = {100 * first.fdr_operating_point:g}%",
        line(header),
        line(["-" * w for w in widths]),
    ]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def write_report(reports: list[MetricsReport], out_dir, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{stem}.txt"
    js = out_dir / f"{stem}.json"
    txt.write_text(format_table(reports), encoding="utf-8")
    js.write_text(json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return txt, js


def write_scores(ss: ScoreSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for i, (s, y) in enumerate(zip(ss.scores, ss.labels)):
            m = ss.metadata[i] if ss.metadata else {}
            w.writerow(
                [m.get("sample_path", ""), repr(float(s)), int(y)]
                + [m.get(k, "") for k in ("database", "sensor", "attack_type", "known_unknown")]
            )
    return path


def read_scores(path) -> ScoreSet:
    scores, labels, meta = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            scores.append(float(row["pa_score"]))
            labels.append(int(row["label"]))
            meta.append({k: row.get(k, "") or "" for k in SCORE_COLUMNS if k not in ("pa_score", "label")})
    return ScoreSet(np.array(scores), np.array(labels), meta)


def score_histogram(ss: ScoreSet, bins: int = 20) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class counts over ``bins`` equal-width bins on [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2
    bf, _ = np.histogram(np.clip(ss.bona_fide, 0, 1), bins=edges)
    at, _ = np.histogram(np.clip(ss.attack, 0, 1), bins=edges)
    return centers, bf, at


def write_histogram(ss: ScoreSet, path, bins: int = 20) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    centers, bf, at = score_histogram(ss, bins)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_center", "bona_fide_count", "attack_count"))
        for c, b, a in zip(centers, bf, at):
            w.writerow((f"{c:.4f}", int(b), int(a)))
    return path
