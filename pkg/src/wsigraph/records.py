"""Plain data records shared across modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PatientRecord:
    """Survival information for one patient.

    ``os_event`` is 1 when death was observed and 0 when the follow-up was
    censored; ``os_time_months`` is the follow-up time since diagnosis.
    """

    patient_id: str
    os_event: int
    os_time_months: float
    wsi_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.patient_id:
            raise ValidationError("patient_id must be nonempty")
        if self.os_event not in (0, 1):
            raise ValidationError(
                f"{self.patient_id}: os_event must be 0 or 1, got {self.os_event!r}")
        t = self.os_time_months
        if not math.isfinite(t) or t < 0:
            raise ValidationError(
                f"{self.patient_id}: os_time_months must be finite and >= 0, got {t!r}")
        object.__setattr__(self, "wsi_ids", tuple(self.wsi_ids))


@dataclass(frozen=True)
class Patch:
    wsi_id: str
    patch_id: int
    grid_row: int
    grid_col: int
    tissue_fraction: float = 1.0

    def __post_init__(self):
        if self.grid_row < 0 or self.grid_col < 0:
            raise ValidationError(f"negative grid cell for patch {self.key}")
        if not 0.0 <= self.tissue_fraction <= 1.0:
            raise ValidationError(f"tissue_fraction out of [0,1] for patch {self.key}")

    @property
    def key(self) -> Tuple[str, int]:
        return (self.wsi_id, self.patch_id)

    @property
    def cell(self) -> Tuple[int, int]:
        return (self.grid_row, self.grid_col)


@dataclass
class FeatureMatrix:
    """Row-major N x D matrix of per-patch features, held as float64.

    ``row_keys`` optionally names the ``(wsi_id, patch_id)`` each row
    belongs to (present when read from a feature CSV).
    """

    values: np.ndarray
    row_keys: Optional[Sequence[Tuple[str, int]]] = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"feature matrix must be 2-D and nonempty, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise ValidationError(f"non-finite feature at row {bad[0]}, column {bad[1]}")
        self.values = values
        if self.row_keys is not None:
            self.row_keys = [(str(w), int(p)) for w, p in self.row_keys]
            if len(self.row_keys) != values.shape[0]:
                raise ValidationError("row_keys length does not match row count")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]
