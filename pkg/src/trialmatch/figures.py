"""Summary figures rendered headlessly to PNG files.

PNG metadata is suppressed so repeated renders of the same summary produce
identical bytes within one environment.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .eligibility import EligibilityStatus  # noqa: E402
from .reports import BatchSummary  # noqa: E402

_SAVE_OPTS = {"dpi": 120, "metadata": {"Software": None}}

STATUS_COLORS = {
    EligibilityStatus.ELIGIBLE_NOW.value: "#2a9d8f",
    EligibilityStatus.COULD_BE_ELIGIBLE_FUTURE.value: "#e9c46a",
    EligibilityStatus.NOT_ELIGIBLE.value: "#e76f51",
    EligibilityStatus.NEED_MORE_INFORMATION.value: "#8d99ae",
}


def save_status_distribution(batch: BatchSummary, path: Path) -> Path:
    """Bar chart of assessment counts per eligibility status."""
    statuses = [status.value for status in EligibilityStatus]
    counts = [batch.counts_by_status.get(s, 0) for s in statuses]
    colors = [STATUS_COLORS[s] for s in statuses]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.bar(range(len(statuses)), counts, color=colors)
    ax.set_xticks(range(len(statuses)))
    ax.set_xticklabels([s.replace(" in Future", "\nin Future") for s in statuses],
                       fontsize=8)
    ax.set_ylabel("Assessments")
    ax.set_title("Eligibility status distribution")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)
    return path


def save_candidates_per_patient(batch: BatchSummary, path: Path) -> Path:
    """Grouped bars: assessed candidates and current matches per patient."""
    patients = [row.patient_id for row in batch.per_patient]
    candidates = [row.candidate_count for row in batch.per_patient]
    matches = [row.match_count for row in batch.per_patient]
    positions = range(len(patients))
    width = 0.4
    fig, ax = plt.subplots(figsize=(max(6, len(patients) * 0.8), 4.5))
    ax.bar([p - width / 2 for p in positions], candidates, width,
           label="Assessed trials", color="#457b9d")
    ax.bar([p + width / 2 for p in positions], matches, width,
           label="Current matches", color="#2a9d8f")
    ax.set_xticks(list(positions))
    ax.set_xticklabels(patients, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("Trials")
    ax.set_title("Candidates and matches per patient")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)
    return path
