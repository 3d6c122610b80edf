"""Synthetic cohorts with a planted proportional-hazards signal.

Each patient gets one fully occupied W x H slide.  Node features are
standard normal plus a patient-level shift ``z * w_star`` along a fixed
unit direction, so the planted log-hazard

    s = mean over nodes of (w_star . x_node)

equals ``z`` up to averaging noise.  Event times are exponential with rate
``baseline_hazard * exp(s)``; a ``censor_rate`` share of patients is then
censored uniformly inside their follow-up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import io_formats
from .errors import ValidationError
from .graph import build_wsi_graph
from .metrics import concordance_index
from .records import FeatureMatrix, Patch, PatientRecord
from .survival import CohortRisks

log = logging.getLogger(__name__)

SIGNAL_STD = 10.0
BASELINE_HAZARD = 1.0 / 24.0  # per month
MIN_PLANTED_C_INDEX = 0.90
# below this cohort size the planted C-index is too noisy to gate on
GATE_MIN_PATIENTS = 100


@dataclass
class SyntheticCohort:
    records: List[PatientRecord]
    patches: List[Patch]
    features: FeatureMatrix
    signal: np.ndarray
    direction: np.ndarray
    planted_c_index: Optional[float]


def simulate(n_patients: int, grid: Tuple[int, int] = (4, 4), dim: int = 16, seed: int = 0,
             censor_rate: float = 0.2, signal_std: float = SIGNAL_STD,
             baseline_hazard: float = BASELINE_HAZARD) -> SyntheticCohort:
    width, height = grid
    if n_patients < 1 or width < 1 or height < 1 or dim < 1:
        raise ValidationError("patients, grid sides and dim must all be positive")
    if not 0.0 <= censor_rate < 1.0:
        raise ValidationError(f"censor_rate must lie in [0, 1), got {censor_rate!r}")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)

    n_nodes = width * height
    cells = [(r, c) for r in range(height) for c in range(width)]
    records, patches, blocks = [], [], []
    signal = np.empty(n_patients)
    times = np.empty(n_patients)
    events = np.ones(n_patients, dtype=np.int64)
    for i in range(n_patients):
        z = rng.normal(0.0, signal_std)
        x = rng.standard_normal((n_nodes, dim)) + z * direction
        s = float(np.mean(x @ direction))
        t = rng.exponential(1.0) / (baseline_hazard * np.exp(s))
        if rng.random() < censor_rate:
            t = rng.uniform(0.0, t)
            events[i] = 0
        signal[i], times[i] = s, t
        pid, wsi = f"P{i:04d}", f"P{i:04d}-S0"
        records.append(PatientRecord(pid, int(events[i]), float(t), (wsi,)))
        patches.extend(Patch(wsi, j, r, c, 1.0) for j, (r, c) in enumerate(cells))
        blocks.append(x)

    planted = None
    if events.any() and n_patients >= 2:
        planted = concordance_index(CohortRisks(signal, times, events)).c_index
        if n_patients >= GATE_MIN_PATIENTS and planted < MIN_PLANTED_C_INDEX:
            raise ValidationError(
                f"planted signal reaches C-index {planted:.3f} < {MIN_PLANTED_C_INDEX}; "
                "increase signal_std")
    values = np.vstack(blocks)
    return SyntheticCohort(records, patches, FeatureMatrix(values, [p.key for p in patches]),
                           signal, direction, planted)


def generate_synthetic(n_patients: int, grid: Tuple[int, int], dim: int, seed: int,
                       censor_rate: float, out_dir, **kwargs) -> SyntheticCohort:
    """Simulate a cohort and write it in the dataset layout.

    Writes labels.csv, manifest.csv, patches.csv, features.gfx (rows in
    patches.csv order) and graphs/<patient_id>/{edges.csv,graph.json}.
    """
    cohort = simulate(n_patients, grid, dim, seed, censor_rate, **kwargs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io_formats.write_labels(cohort.records, out / "labels.csv")
    io_formats.write_manifest(cohort.records, out / "manifest.csv")
    io_formats.write_patches(cohort.patches, out / "patches.csv")
    io_formats.write_features(cohort.features, out / "features.gfx")
    write_graphs(cohort.records, cohort.patches, out / "graphs")
    return cohort


def write_graphs(records, patches, directory):
    from .graph import merge_patient_graph

    by_wsi = {}
    for p in patches:
        by_wsi.setdefault(p.wsi_id, []).append(p)
    for rec in records:
        g = merge_patient_graph([build_wsi_graph(by_wsi[w]) for w in rec.wsi_ids], rec.patient_id)
        io_formats.write_graph(g, Path(directory) / rec.patient_id)
