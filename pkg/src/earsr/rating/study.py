"""Study creation, trial serving, rating submission, and unblinded analysis.

Raters see each trial as an LR reference plus three candidates whose order
is a per-(rater, trial) seeded permutation; method labels live only in the
server-side manifest, never in any rater-facing payload or asset name.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from ..errors import NoData, SetMismatch, UnknownTrial
from ..imaging import Slice, to_uint16
from ..metrics import wilcoxon_rank_sum
from ..networks import derive_seed
from .store import (
    CRITERIA,
    N_CANDIDATES,
    PAYLOAD_VERSION,
    RatingRecord,
    StudyStore,
    content_token,
    now_timestamp,
)


def _png_bytes(data: np.ndarray) -> bytes:
    from PIL import Image

    u16 = to_uint16(np.asarray(data, dtype=np.float64))
    img = Image.fromarray(u16.astype(np.uint16), mode="I;16")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _as_image_bytes(image) -> bytes:
    if isinstance(image, (bytes, bytearray)):
        return bytes(image)
    if isinstance(image, (str, Path)):
        return Path(image).read_bytes()
    data = image.data if isinstance(image, Slice) else np.asarray(image)
    return _png_bytes(data)


def _permutation(seed: int, rater_id: str, trial_index: int) -> list[int]:
    mix = hashlib.sha256(f"{seed}:{rater_id}:{trial_index}".encode()).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(mix[:8], "little")))
    return [int(v) for v in rng.permutation(N_CANDIDATES)]


def create_study(
    root: str | Path,
    study_id: str,
    method_images: dict[str, list],
    lr_images: list,
    raters: list[str],
    seed: int = 0,
) -> StudyStore:
    """Build a study directory from three labeled image sets plus LR references.

    ``method_images`` maps each method label to its candidate list; all
    three lists must align one-to-one with ``lr_images``. Candidate order
    is randomized per (rater, trial) from the seed, and the label-position
    mapping is stored server-side only.
    """
    labels = sorted(method_images)
    if len(labels) != N_CANDIDATES:
        raise SetMismatch(f"need exactly {N_CANDIDATES} labeled sets, got {labels}")
    n_trials = len(lr_images)
    if n_trials == 0:
        raise SetMismatch("need at least one trial")
    for label in labels:
        if len(method_images[label]) != n_trials:
            raise SetMismatch(
                f"set {label!r} has {len(method_images[label])} images, LR references have {n_trials}"
            )
    if not raters:
        raise SetMismatch("need at least one rater")

    assets: dict[str, bytes] = {}

    def register(image) -> str:
        blob = _as_image_bytes(image)
        name = content_token(blob) + ".png"
        assets[name] = blob
        return name

    trials = []
    for idx in range(n_trials):
        by_label = {label: register(method_images[label][idx]) for label in labels}
        trials.append(
            {
                "trial_id": hashlib.sha256(f"{study_id}:{seed}:{idx}".encode()).hexdigest()[:16],
                "index": idx,
                "lr_asset": register(lr_images[idx]),
                "candidates_by_label": by_label,
                "order_by_rater": {
                    rater: _permutation(seed, rater, idx) for rater in raters
                },
            }
        )

    manifest = {
        "v": PAYLOAD_VERSION,
        "study_id": study_id,
        "seed": seed,
        "labels": labels,
        "raters": list(raters),
        "criteria": list(CRITERIA),
        "report_token": hashlib.sha256(f"report:{study_id}:{seed}".encode()).hexdigest()[:32],
        "trials": trials,
    }
    return StudyStore.initialize(root, manifest, assets)


def _ordered_assets(store: StudyStore, trial: dict, rater_id: str) -> list[str]:
    labels = store.manifest["labels"]
    order = trial["order_by_rater"][rater_id]
    return [trial["candidates_by_label"][labels[pos]] for pos in order]


def _complete_for(store: StudyStore, trial: dict, rater_id: str,
                  latest: dict | None = None) -> bool:
    latest = store.latest_records() if latest is None else latest
    for cand in range(N_CANDIDATES):
        for crit in CRITERIA:
            if (rater_id, trial["trial_id"], cand, crit) not in latest:
                return False
    return True


def next_trial(store: StudyStore, rater_id: str) -> dict:
    """Payload for the lowest-index trial this rater has not completed.

    The payload carries asset names and positions only; when everything is
    rated it is the ``done`` sentinel with the completion count.
    """
    store.require_rater(rater_id)
    latest = store.latest_records()
    for trial in store.trials:
        if not _complete_for(store, trial, rater_id, latest):
            return {
                "v": PAYLOAD_VERSION,
                "done": False,
                "trial_id": trial["trial_id"],
                "index": trial["index"],
                "total": len(store.trials),
                "lr_asset": trial["lr_asset"],
                "candidates": _ordered_assets(store, trial, rater_id),
                "criteria": list(CRITERIA),
            }
    return {"v": PAYLOAD_VERSION, "done": True, "total": len(store.trials),
            "completed": len(store.trials)}


def submit_rating(store: StudyStore, record: RatingRecord) -> dict:
    """Validate, durably append, and acknowledge one rating."""
    store.require_rater(record.rater_id)
    trial = store.trial_by_id(record.trial_id)
    if record.rater_id not in trial["order_by_rater"]:
        raise UnknownTrial(f"trial {record.trial_id} not assigned to rater {record.rater_id}")
    store.append(record)
    return {"v": PAYLOAD_VERSION, "status": "ok", "key": list(record.key())}


def _scores_by_method(store: StudyStore) -> dict[str, dict[str, list[int]]]:
    """Unblind: criterion -> method label -> score list."""
    labels = store.manifest["labels"]
    latest = store.latest_records()
    out: dict[str, dict[str, list[int]]] = {crit: {lab: [] for lab in labels} for crit in CRITERIA}
    for rec in latest.values():
        trial = store.trial_by_id(rec.trial_id)
        order = trial["order_by_rater"][rec.rater_id]
        label = labels[order[rec.candidate_index]]
        out[rec.criterion][label].append(rec.score)
    return out


def _distribution(scores: list[int]) -> dict:
    arr = np.asarray(scores, dtype=np.float64)
    return {
        "n": len(scores),
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "q1": float(np.quantile(arr, 0.25)),
        "q3": float(np.quantile(arr, 0.75)),
        "min": int(arr.min()),
        "max": int(arr.max()),
        "counts": {str(v): int((arr == v).sum()) for v in range(1, 7)},
    }


def analyze(store: StudyStore, anonymize: bool = False) -> dict:
    """Unblinded per-method score distributions plus pairwise rank-sum tests."""
    latest = store.latest_records()
    if not latest:
        raise NoData(f"study {store.study_id} has no ratings yet")
    labels = store.manifest["labels"]
    by_method = _scores_by_method(store)

    tests = []
    for crit in CRITERIA:
        for i, a in enumerate(labels):
            for b in labels[i + 1 :]:
                sa, sb = by_method[crit][a], by_method[crit][b]
                if not sa or not sb:
                    continue
                res = wilcoxon_rank_sum(sa, sb)
                tests.append(
                    {
                        "criterion": crit,
                        "methods": [a, b],
                        "statistic": res.statistic,
                        "p_two_sided": res.p_two_sided,
                        "method": res.method,
                        "degenerate": res.degenerate,
                    }
                )

    rows = []
    for rec in sorted(latest.values(), key=lambda r: (r.trial_id, r.rater_id, r.candidate_index, r.criterion)):
        trial = store.trial_by_id(rec.trial_id)
        order = trial["order_by_rater"][rec.rater_id]
        rows.append(
            {
                "rater_id": "anonymous" if anonymize else rec.rater_id,
                "trial_id": rec.trial_id,
                "candidate_index": rec.candidate_index,
                "method": labels[order[rec.candidate_index]],
                "criterion": rec.criterion,
                "score": rec.score,
                "timestamp": rec.timestamp,
            }
        )

    return {
        "v": PAYLOAD_VERSION,
        "study_id": store.study_id,
        "completion_fraction": store.completion_fraction(),
        "expected_records": store.expected_record_count(),
        "received_records": len(latest),
        "distributions": {
            crit: {lab: _distribution(scores) for lab, scores in per.items() if scores}
            for crit, per in by_method.items()
        },
        "wilcoxon": tests,
        "records": rows,
    }


def report_csv(report: dict) -> str:
    """Raw unblinded records as CSV, matching the analysis report."""
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf,
        fieldnames=["rater_id", "trial_id", "candidate_index", "method", "criterion", "score", "timestamp"],
    )
    writer.writeheader()
    for row in report["records"]:
        writer.writerow(row)
    return buf.getvalue()


def write_report(report: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    (out_dir / "records.csv").write_text(report_csv(report))
    return out_dir


def make_rating(rater_id: str, trial_id: str, candidate_index: int, criterion: str,
                score: int) -> RatingRecord:
    return RatingRecord(
        rater_id=rater_id,
        trial_id=trial_id,
        candidate_index=int(candidate_index),
        criterion=criterion,
        score=int(score),
        timestamp=now_timestamp(),
    )
