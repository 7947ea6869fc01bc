"""Score checkpoints under each criterion, pick winners, write reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .baselines import (
    DIRECTIONS,
    MAXIMIZE,
    CriterionScore,
    DevConfig,
    class_entropy,
    dev_risk,
    fit_domain_discriminator,
    iwv_risk,
    source_risk,
    source_val_subset,
    zero_one_losses,
)
from .feature_store import Checkpoint, LabelVector, Manifest, ProbMatrix, SegmentationDump
from .snd import SndConfig, prepare_features, prepare_features_logits, snd, snd_segmentation

CRITERIA = tuple(DIRECTIONS)
NEEDS_SOURCE_VAL = frozenset({"source_risk", "iwv", "dev"})
# the discriminator and the logit ablation need one feature row per target sample
PER_SAMPLE_ONLY = frozenset({"iwv", "dev", "snd_no_softmax"})

__all__ = [
    "CRITERIA",
    "CriterionScore",
    "ScoreRow",
    "SelectionReport",
    "emit_report",
    "pick_winner",
    "report_from_dict",
    "report_to_dict",
    "score_checkpoint",
    "score_manifest",
    "select_source_domain",
    "source_domain_scores",
]


class CriterionUnavailable(ValueError):
    """A requested criterion needs dumps a checkpoint does not provide."""


@dataclass(frozen=True)
class ScoreRow:
    run_id: str
    iteration: int
    criterion: str
    value: float

    @property
    def direction(self) -> str:
        return DIRECTIONS[self.criterion]

    @property
    def key(self) -> tuple[str, int]:
        return (self.run_id, self.iteration)


@dataclass(frozen=True)
class SelectionReport:
    scores: tuple = ()
    winners: dict = field(default_factory=dict)
    oracle: Optional[dict] = None

    def by_checkpoint(self) -> dict:
        out: dict = {}
        for r in self.scores:
            out.setdefault(r.key, []).append(CriterionScore(r.criterion, r.value))
        return out

    def curves(self) -> dict:
        """``{run_id: {criterion: [(iteration, value), ...]}}`` sorted by iteration."""
        out: dict = {}
        for r in self.scores:
            out.setdefault(r.run_id, {}).setdefault(r.criterion, []).append((r.iteration, r.value))
        for per_run in out.values():
            for series in per_run.values():
                series.sort()
        return out

    @property
    def oracle_winner(self) -> Optional[tuple[str, int]]:
        if self.oracle is None:
            return None
        w = self.oracle["winner"]
        return (w["run_id"], w["iteration"])


def pick_winner(entries: Iterable[tuple[str, int, float]], direction: str) -> tuple[str, int]:
    """Extremum of ``(run_id, iteration, value)`` entries in ``direction``.

    Ties go to the earlier iteration, then the lexicographically first run_id.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("no scores to pick from")
    sign = -1.0 if direction == MAXIMIZE else 1.0
    run_id, iteration, _ = min(entries, key=lambda e: (sign * e[2], e[1], e[0]))
    return run_id, iteration


def _check_available(ckpt: Checkpoint, criterion: str) -> None:
    rec = ckpt.record
    where = f"checkpoint (run_id={rec.run_id!r}, iteration={rec.iteration})"
    if criterion in PER_SAMPLE_ONLY and isinstance(ckpt.target_probs, SegmentationDump):
        raise CriterionUnavailable(f"criterion {criterion!r} is not defined for segmentation dumps ({where})")
    if criterion in NEEDS_SOURCE_VAL and ckpt.source_val_probs is None:
        raise CriterionUnavailable(
            f"criterion {criterion!r} needs source validation dumps, missing for {where}"
        )
    if criterion == "snd_no_softmax" and ckpt.target_logits is None:
        raise CriterionUnavailable(f"criterion 'snd_no_softmax' needs target_logits, missing for {where}")


def score_checkpoint(
    ckpt: Checkpoint,
    criteria: Iterable[str],
    snd_config: SndConfig = SndConfig(),
    dev_config: DevConfig = DevConfig(),
) -> list[CriterionScore]:
    criteria = [c for c in CRITERIA if c in set(criteria)]
    for c in criteria:
        _check_available(ckpt, c)
    out = []
    target_feats = None
    weights = None
    losses = None
    if ckpt.source_val_labels is not None:
        keep = source_val_subset(ckpt.source_val_labels, dev_config.val_per_class, dev_config.rng_seed)
        sv_probs = ProbMatrix(ckpt.source_val_probs.rows[keep])
        sv_labels = LabelVector(ckpt.source_val_labels.labels[keep])
    for c in criteria:
        if c == "snd" and isinstance(ckpt.target_probs, SegmentationDump):
            out.append(CriterionScore(c, snd_segmentation(ckpt.target_probs, snd_config).value))
        elif c == "snd":
            target_feats = target_feats or prepare_features(ckpt.target_probs)
            out.append(CriterionScore(c, snd(target_feats, snd_config).value))
        elif c == "snd_no_softmax":
            out.append(CriterionScore(c, snd(prepare_features_logits(ckpt.target_logits), snd_config).value))
        elif c == "c_ent":
            out.append(class_entropy(ckpt.target_probs))
        elif c == "source_risk":
            out.append(source_risk(sv_probs, sv_labels))
        else:
            if weights is None:
                target_feats = target_feats or prepare_features(ckpt.target_probs)
                weights = fit_domain_discriminator(prepare_features(sv_probs), target_feats, dev_config)
                losses = zero_one_losses(sv_probs, sv_labels)
            out.append(iwv_risk(losses, weights) if c == "iwv" else dev_risk(losses, weights))
    return out


def score_manifest(
    manifest: Manifest,
    criteria: Iterable[str],
    snd_config: SndConfig = SndConfig(),
    dev_config: DevConfig = DevConfig(),
    oracle_labels: Optional[LabelVector] = None,
) -> SelectionReport:
    """Score every checkpoint under every criterion and pick per-criterion winners.

    ``oracle_labels`` (target ground truth) only feed the ``oracle`` section of
    the report; they never influence a winner.
    """
    criteria = set(criteria)
    unknown = criteria - set(CRITERIA)
    if unknown:
        raise ValueError(f"unknown criteria {sorted(unknown)}; valid: {list(CRITERIA)}")
    # fail before any expensive scoring
    for ckpt in manifest.checkpoints:
        for c in criteria:
            _check_available(ckpt, c)

    rows = []
    for ckpt in manifest.checkpoints:
        for s in score_checkpoint(ckpt, criteria, snd_config, dev_config):
            rows.append(ScoreRow(ckpt.record.run_id, ckpt.record.iteration, s.criterion, float(s.value)))

    winners = {}
    for c in CRITERIA:
        if c in criteria:
            entries = ((r.run_id, r.iteration, r.value) for r in rows if r.criterion == c)
            run_id, it = pick_winner(entries, DIRECTIONS[c])
            winners[c] = {"run_id": run_id, "iteration": it}

    oracle = None
    if oracle_labels is not None and manifest.task == "segmentation":
        raise ValueError("oracle labels are only supported for classification manifests")
    if oracle_labels is not None:
        acc = [
            (c.record.run_id, c.record.iteration, oracle_accuracy(c.target_probs, oracle_labels))
            for c in manifest.checkpoints
        ]
        run_id, it = pick_winner(acc, MAXIMIZE)
        oracle = {
            "accuracy": [{"run_id": r, "iteration": i, "value": v} for r, i, v in acc],
            "winner": {"run_id": run_id, "iteration": it},
        }
    return SelectionReport(scores=tuple(rows), winners=winners, oracle=oracle)


def source_domain_scores(
    candidates: Mapping[str, ProbMatrix], config: SndConfig = SndConfig()
) -> dict[str, float]:
    if len(candidates) < 2:
        raise ValueError(f"need at least 2 candidate sources, got {len(candidates)}")
    shapes = {name: p.rows.shape for name, p in candidates.items()}
    if len(set(shapes.values())) != 1:
        raise ValueError(f"candidate prediction shapes differ: {shapes}")
    return {name: snd(prepare_features(p), config).value for name, p in sorted(candidates.items())}


def select_source_domain(candidates: Mapping[str, ProbMatrix], config: SndConfig = SndConfig()) -> str:
    """Name of the source whose model gives the densest target neighbourhoods.

    Ties go to the lexicographically first name.
    """
    scores = source_domain_scores(candidates, config)
    return min(scores, key=lambda name: (-scores[name], name))


def report_to_dict(report: SelectionReport) -> dict:
    return {
        "scores": [
            {
                "run_id": r.run_id,
                "iteration": r.iteration,
                "criterion": r.criterion,
                "value": r.value,
                "direction": r.direction,
            }
            for r in report.scores
        ],
        "winners": {c: dict(w) for c, w in report.winners.items()},
        "oracle": report.oracle,
    }


def report_from_dict(doc: dict) -> SelectionReport:
    rows = tuple(
        ScoreRow(str(s["run_id"]), int(s["iteration"]), s["criterion"], float(s["value"]))
        for s in doc["scores"]
    )
    return SelectionReport(scores=rows, winners=dict(doc["winners"]), oracle=doc.get("oracle"))


def emit_report(report: SelectionReport, json_path, csv_path) -> None:
    """JSON with full scores and winners; long-format CSV for plotting."""
    Path(json_path).write_text(json.dumps(report_to_dict(report), indent=2) + "\n")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_id", "iteration", "criterion", "value", "direction"])
        for r in report.scores:
            writer.writerow([r.run_id, r.iteration, r.criterion, repr(r.value), r.direction])


def oracle_accuracy(probs: ProbMatrix, labels: LabelVector) -> float:
    """Target accuracy; evaluation-only, never a selection input."""
    return 1.0 - float(np.mean(zero_one_losses(probs, labels)))
