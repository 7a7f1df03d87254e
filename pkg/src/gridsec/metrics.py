"""Detection metrics from an alert log and ground-truth attack records."""

from __future__ import annotations

import json
from typing import Iterable

from .attacks import GroundTruth
from .ids import Alert

NOT_AVAILABLE = "n/a"


def matches(alert: Alert, gt: GroundTruth, period_ms: int) -> bool:
    """Alert inside [start, end + 2 periods] naming one of the attack's devices."""
    in_window = gt.start_ms <= alert.t_ms <= gt.end_ms + 2 * period_ms
    return in_window and (alert.source_node in gt.devices or alert.subject_device in gt.devices)


def compute_metrics(alerts: Iterable[Alert], truths: Iterable[GroundTruth], period_ms: int) -> dict:
    alerts = list(alerts)
    truths = sorted(truths, key=lambda g: (g.start_ms, g.attack_id))
    tp = fp = 0
    by_attack: dict[str, list[Alert]] = {g.attack_id: [] for g in truths}
    for a in alerts:
        hit = [g for g in truths if matches(a, g, period_ms)]
        if hit:
            tp += 1
            for g in hit:
                by_attack[g.attack_id].append(a)
        else:
            fp += 1
    obligated = [g for g in truths if g.expect_detection]
    detected = [g for g in obligated if by_attack[g.attack_id]]
    attacks = {}
    for g in truths:
        found = by_attack[g.attack_id]
        first_by_rule: dict[str, int] = {}
        for a in found:
            key = f"{a.layer}/{a.rule_id}"
            first_by_rule.setdefault(key, a.t_ms - g.start_ms)
        attacks[g.attack_id] = {
            "kind": g.kind,
            "devices": list(g.devices),
            "startMs": g.start_ms,
            "endMs": g.end_ms,
            "expectDetection": g.expect_detection,
            "detected": bool(found),
            "matchedAlerts": len(found),
            "detectionLatencyMs": (found[0].t_ms - g.start_ms) if found else None,
            "latencyByRuleMs": first_by_rule,
            "note": g.note,
        }
    return {
        "truePositives": tp,
        "falsePositives": fp,
        "falseNegatives": len(obligated) - len(detected),
        "precision": tp / (tp + fp) if alerts else NOT_AVAILABLE,
        "recall": len(detected) / len(obligated) if obligated else NOT_AVAILABLE,
        "attacks": attacks,
    }


def load_alerts(lines: Iterable[str]) -> list[Alert]:
    return [Alert.from_record(json.loads(line)) for line in lines if line.strip()]


def load_ground_truth(lines: Iterable[str]) -> tuple[list[GroundTruth], int]:
    """Ground-truth records and the reporting period from an event log."""
    truths = []
    period = 1000
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["kind"] == "ground-truth":
            truths.append(GroundTruth.from_dict(rec["payload"]))
        elif rec["kind"] == "run-info":
            period = rec["payload"]["reportingPeriodMs"]
    return truths, period
