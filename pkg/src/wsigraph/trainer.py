"""Dataset assembly, Cox training, evaluation and k-fold cross-validation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io_formats
from .errors import AlignmentError, NumericError, TrainingError, UndefinedMetricError, ValidationError
from .gcn import (DEFAULT_HIDDEN, ModelParams, backward_batch, default_dims, forward_batch,
                  glorot, init_params, segment_mean)
from .graph import NormalizedAdjacency, PatientGraph, block_diagonal, normalize_adjacency, \
    patient_graph_from_patches
from .metrics import concordance_index, roc_points
from .records import FeatureMatrix, PatientRecord
from .survival import (DEFAULT_HORIZON_MONTHS, CohortRisks, SurvivalLabel, cox_loss,
                       cox_loss_grad, derive_binary_label)

log = logging.getLogger(__name__)

MODEL_KINDS = ("gcn", "linear")


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    horizon_months: float = DEFAULT_HORIZON_MONTHS
    hidden: int = DEFAULT_HIDDEN
    layer_dims: Optional[List[int]] = None
    model: str = "gcn"

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValidationError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate!r}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if not self.horizon_months > 0:
            raise ValidationError("horizon_months must be positive")
        if self.model not in MODEL_KINDS:
            raise ValidationError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.hidden < 1:
            raise ValidationError("hidden width must be positive")

    def dims_for(self, input_dim: int) -> List[int]:
        if self.layer_dims is not None:
            dims = list(self.layer_dims)
            if dims[0] != input_dim:
                raise ValidationError(f"layer_dims start at {dims[0]} but features have dim {input_dim}")
            return dims
        return default_dims(input_dim, self.hidden)


@dataclass
class PatientSample:
    record: PatientRecord
    graph: PatientGraph
    features: FeatureMatrix
    adjacency: NormalizedAdjacency = field(init=False, repr=False)

    def __post_init__(self):
        if self.features.n_nodes != self.graph.n_nodes:
            raise ValidationError(
                f"{self.record.patient_id}: {self.features.n_nodes} feature rows for "
                f"{self.graph.n_nodes} graph nodes")
        self.adjacency = normalize_adjacency(self.graph)

    @property
    def patient_id(self) -> str:
        return self.record.patient_id


def load_dataset(directory) -> List[PatientSample]:
    """Assemble patients from labels.csv, manifest.csv, patches.csv and features.gfx.

    Feature rows follow patches.csv order (or carry their own keys when a
    feature CSV is used); each patient's node order is their slides in
    manifest order, patches within a slide in patches.csv order.
    """
    d = Path(directory)
    manifest = io_formats.read_manifest(d / "manifest.csv")
    records = io_formats.read_labels(d / "labels.csv", manifest)
    patches = io_formats.read_patches(d / "patches.csv")
    feat_path = d / "features.gfx" if (d / "features.gfx").exists() else d / "features.csv"
    matrix = io_formats.read_features(feat_path)
    index = matrix.row_keys or [p.key for p in patches]
    if len(index) != matrix.n_nodes:
        raise ValidationError(f"{feat_path}: {matrix.n_nodes} rows for {len(index)} patches")

    by_wsi: Dict[str, list] = {}
    for p in patches:
        by_wsi.setdefault(p.wsi_id, []).append(p)
    row_of = {key: i for i, key in enumerate(index)}
    if len(row_of) != len(index):
        raise AlignmentError(f"{feat_path}: a patch is mapped to more than one feature row")

    samples = []
    for rec in records:
        if not rec.wsi_ids:
            raise ValidationError(f"patient {rec.patient_id!r} has no slides in manifest.csv")
        graph = patient_graph_from_patches(rec.patient_id, rec.wsi_ids, by_wsi)
        plist = [p for w in rec.wsi_ids for p in by_wsi[w]]
        missing = [p.key for p in plist if p.key not in row_of]
        if missing:
            raise AlignmentError(f"{rec.patient_id}: no feature row for patch {missing[0]}")
        feats = FeatureMatrix(matrix.values[[row_of[p.key] for p in plist]],
                              [p.key for p in plist])
        samples.append(PatientSample(rec, graph, feats))
    return samples


# -- models --------------------------------------------------------------

@dataclass
class LinearParams:
    """Non-graph baseline: risk = w . mean(raw node features) + b."""

    weight: np.ndarray
    bias: float

    @property
    def layer_dims(self):
        return [len(self.weight)]

    def arrays(self):
        return [self.weight, np.asarray(self.bias)]

    @classmethod
    def from_arrays(cls, layer_dims, arrays):
        return cls(np.array(arrays[0], dtype=np.float64), float(arrays[1]))

    def decay_mask(self):
        return [True, False]


def init_linear(input_dim: int, seed: int) -> LinearParams:
    rng = np.random.default_rng(seed)
    return LinearParams(glorot(rng, input_dim, 1, (input_dim,)), 0.0)


@dataclass
class Batch:
    adjacency: NormalizedAdjacency
    offsets: np.ndarray
    features: np.ndarray
    time: np.ndarray
    event: np.ndarray
    ids: List[str]


def make_batch(samples: Sequence[PatientSample]) -> Batch:
    if not samples:
        raise ValidationError("empty dataset")
    adj, offsets = block_diagonal([s.adjacency for s in samples])
    dims = {s.features.dim for s in samples}
    if len(dims) != 1:
        raise ValidationError(f"patients have differing feature dims {sorted(dims)}")
    return Batch(adj, offsets, np.vstack([s.features.values for s in samples]),
                 np.array([s.record.os_time_months for s in samples]),
                 np.array([s.record.os_event for s in samples]),
                 [s.patient_id for s in samples])


def predict_batch(params, batch: Batch):
    if isinstance(params, LinearParams):
        pooled = segment_mean(batch.features, batch.offsets)
        return pooled @ params.weight + params.bias, pooled
    return forward_batch(batch.adjacency, batch.offsets, batch.features, params)


def _gradients(params, batch: Batch, cache, d_risk) -> List[np.ndarray]:
    if isinstance(params, LinearParams):
        return [cache.T @ d_risk, np.asarray(d_risk.sum())]
    return backward_batch(cache, batch.adjacency, params, d_risk).arrays()


class Adam:
    """Adaptive-moment updates with L2 weight decay folded into the gradient."""

    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0,
                 decay_mask=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay_mask = decay_mask or [True] * len(arrays)
        self.m = [np.zeros_like(a, dtype=np.float64) for a in arrays]
        self.v = [np.zeros_like(a, dtype=np.float64) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(arrays, grads)):
            if self.weight_decay and self.decay_mask[i]:
                g = g + self.weight_decay * p
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def init_model(config: TrainConfig, input_dim: int):
    if config.model == "linear":
        return init_linear(input_dim, config.seed)
    return init_params(config.dims_for(input_dim), config.seed)


def train(dataset: Sequence[PatientSample], config: TrainConfig, params=None):
    """Full-cohort Cox training.

    Each epoch scores every training patient, takes the Cox loss over the
    whole cohort and applies one Adam step.  Returns ``(params, history)``
    where ``history[e]`` is the Cox loss at the start of epoch ``e``.
    """
    if len(dataset) < 2:
        raise TrainingError("training needs at least two patients")
    batch = make_batch(dataset)
    if not np.any(batch.event == 1):
        raise TrainingError("training cohort has no observed events")
    if params is None:
        params = init_model(config, batch.features.shape[1])
    opt = Adam(params.arrays(), config.learning_rate, config.beta1, config.beta2, config.eps,
               config.weight_decay, params.decay_mask())
    history = []
    for epoch in range(config.epochs):
        try:
            risks, cache = predict_batch(params, batch)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch + 1}: {exc}") from None
        cohort = CohortRisks(risks, batch.time, batch.event)
        loss = cox_loss(cohort)
        if not np.isfinite(loss):
            raise NumericError(f"epoch {epoch + 1}: non-finite training loss")
        history.append(loss)
        grads = _gradients(params, batch, cache, cox_loss_grad(cohort))
        params = type(params).from_arrays(params.layer_dims, opt.step(params.arrays(), grads))
        log.debug("epoch %d loss %.6f", epoch + 1, loss)
    return params, history


@dataclass
class Evaluation:
    c_index: float
    auc: Optional[float]
    risks: Dict[str, float]


def score(params, dataset: Sequence[PatientSample]) -> np.ndarray:
    risks, _ = predict_batch(params, make_batch(dataset))
    return risks


def evaluate(params, dataset: Sequence[PatientSample],
             horizon_months: float = DEFAULT_HORIZON_MONTHS) -> Evaluation:
    """C-index over (risk, time, event) and AUC over horizon labels.

    Patients censored before the horizon are left out of the AUC only.
    """
    if not dataset:
        raise ValidationError("cannot evaluate an empty dataset")
    risks = score(params, dataset)
    recs = [s.record for s in dataset]
    ci = concordance_index(CohortRisks(risks, [r.os_time_months for r in recs],
                                       [r.os_event for r in recs])).c_index
    return Evaluation(ci, horizon_auc(risks, recs, horizon_months),
                      {s.patient_id: float(r) for s, r in zip(dataset, risks)})


def horizon_auc(risks, records: Sequence[PatientRecord], horizon_months: float) -> float:
    """AUC of risk for dying within the horizon; raises if undefined."""
    return horizon_roc(risks, records, horizon_months).auc


def horizon_roc(risks, records, horizon_months):
    scores, labels = [], []
    for r, rec in zip(risks, records):
        lab = derive_binary_label(rec, horizon_months)
        if lab is SurvivalLabel.EXCLUDED_CENSORED:
            continue
        scores.append(r)
        labels.append(1 if lab is SurvivalLabel.EVENT_WITHIN_HORIZON else 0)
    return roc_points(scores, labels)


# -- cross-validation ------------------------------------------------------

def kfold_split(patient_ids: Sequence[str], k: int = 5, seed: int = 0):
    """Patient-level folds: shuffle by seed, cut into k near-equal test blocks."""
    ids = list(patient_ids)
    n = len(ids)
    if len(set(ids)) != n:
        raise ValidationError("patient ids must be unique")
    if k < 2 or k > n:
        raise ValidationError(f"k must satisfy 2 <= k <= {n}, got {k}")
    perm = np.random.default_rng(seed).permutation(n)
    blocks = np.array_split(perm, k)
    folds = []
    for b in blocks:
        test = set(b.tolist())
        folds.append(([ids[i] for i in perm if i not in test], [ids[i] for i in b]))
    return folds


@dataclass
class FoldResult:
    fold_index: int
    test_patient_ids: List[str]
    c_index: float
    auc: Optional[float]
    final_train_loss: float


def permute_labels(dataset: Sequence[PatientSample], seed: int) -> List[PatientSample]:
    """Control dataset: shuffle (event, time) pairs across patients."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    out = []
    for s, j in zip(dataset, perm):
        src = dataset[j].record
        rec = PatientRecord(s.record.patient_id, src.os_event, src.os_time_months, s.record.wsi_ids)
        out.append(PatientSample(rec, s.graph, s.features))
    return out


def _run_fold(args) -> FoldResult:
    fold_index, train_set, test_set, config = args
    params, history = train(train_set, config)
    ev = evaluate_fold(params, test_set, config.horizon_months)
    return FoldResult(fold_index, [s.patient_id for s in test_set], ev[0], ev[1], history[-1])


def evaluate_fold(params, test_set, horizon):
    risks = score(params, test_set)
    recs = [s.record for s in test_set]
    ci = concordance_index(CohortRisks(risks, [r.os_time_months for r in recs],
                                       [r.os_event for r in recs])).c_index
    try:
        auc = horizon_auc(risks, recs, horizon)
    except UndefinedMetricError:
        auc = None
    return ci, auc


def cross_validate(dataset: Sequence[PatientSample], config: TrainConfig, k: int = 5,
                   seed: Optional[int] = None, parallel_folds: int = 1) -> Dict:
    """Train and test one model per fold; returns the results.json payload."""
    seed = config.seed if seed is None else seed
    by_id = {s.patient_id: s for s in dataset}
    jobs = []
    for i, (train_ids, test_ids) in enumerate(kfold_split(list(by_id), k, seed)):
        jobs.append((i, [by_id[p] for p in train_ids], [by_id[p] for p in test_ids], config))
    if parallel_folds > 1:
        with ProcessPoolExecutor(parallel_folds) as pool:
            folds = list(pool.map(_run_fold, jobs))
    else:
        folds = [_run_fold(j) for j in jobs]
    folds.sort(key=lambda f: f.fold_index)
    aucs = [f.auc for f in folds if f.auc is not None]
    return {
        "folds": [asdict(f) for f in folds],
        "mean_c_index": float(np.mean([f.c_index for f in folds])),
        "mean_auc": float(np.mean(aucs)) if aucs else None,
        "config": asdict(config),
        "k": k,
        "seed": seed,
    }
