"""Spatial patch graphs.

Every retained patch is a node; two nodes share an edge when their grid
cells touch (Chebyshev distance 1, i.e. the 8-neighbourhood).  A patient's
graph is the disjoint union of the graphs of all of their slides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import sparse

from .errors import ValidationError
from .records import Patch

# Half of the 8-neighbourhood; the other half is covered from the peer's side.
_FORWARD_OFFSETS = ((0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class WsiGraph:
    wsi_id: str
    n_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    node_coords: Tuple[Tuple[int, int], ...]

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class PatientGraph:
    patient_id: str
    n_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    node_offset_by_wsi: Dict[str, int] = field(default_factory=dict)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def validate(self):
        if self.n_nodes < 1:
            raise ValidationError(f"{self.patient_id}: graph has no nodes")
        seen = set()
        for u, v in self.edges:
            if not 0 <= u < v < self.n_nodes:
                raise ValidationError(f"{self.patient_id}: bad edge ({u}, {v})")
            if (u, v) in seen:
                raise ValidationError(f"{self.patient_id}: duplicate edge ({u}, {v})")
            seen.add((u, v))


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetric D^-1/2 (A + I) D^-1/2 in compressed sparse row form.

    Column indices are sorted within each row, so iterating rows in order
    yields the triples sorted by (row, col).
    """

    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.data)

    def triples(self) -> List[Tuple[int, int, float]]:
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        return list(zip(rows.tolist(), self.indices.tolist(), self.data.tolist()))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_nodes, self.n_nodes))
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        dense[rows, self.indices] = self.data
        return dense

    @cached_property
    def _csr(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.data, self.indices, self.indptr),
                                 shape=(self.n_nodes, self.n_nodes))

    def matmul(self, h: np.ndarray) -> np.ndarray:
        """Return ``A_hat @ h``; row i gathers the rows of ``h`` at its neighbours."""
        if h.shape[0] != self.n_nodes:
            raise ValidationError(
                f"adjacency has {self.n_nodes} nodes but operand has {h.shape[0]} rows")
        return np.asarray(self._csr @ h)


def build_wsi_graph(patches: Sequence[Patch]) -> WsiGraph:
    """Connect patches of one slide whose grid cells are 8-neighbours.

    Node ``i`` is ``patches[i]``.  Neighbour lookup goes through a hash of
    occupied cells, so the build is linear in the number of patches.
    """
    if not patches:
        raise ValidationError("cannot build a graph from zero patches")
    wsi_id = patches[0].wsi_id
    index: Dict[Tuple[int, int], int] = {}
    for i, p in enumerate(patches):
        if p.wsi_id != wsi_id:
            raise ValidationError(f"mixed slides in one graph: {wsi_id!r} and {p.wsi_id!r}")
        if p.cell in index:
            raise ValidationError(f"{wsi_id}: duplicate grid cell {p.cell}")
        index[p.cell] = i

    edges = []
    for i, p in enumerate(patches):
        r, c = p.cell
        for dr, dc in _FORWARD_OFFSETS:
            j = index.get((r + dr, c + dc))
            if j is not None:
                edges.append((i, j) if i < j else (j, i))
    edges.sort()
    return WsiGraph(wsi_id, len(patches), tuple(edges), tuple(p.cell for p in patches))


def merge_patient_graph(graphs: Sequence[WsiGraph], patient_id: str) -> PatientGraph:
    if not graphs:
        raise ValidationError(f"{patient_id}: no slide graphs to merge")
    offsets: Dict[str, int] = {}
    edges: List[Tuple[int, int]] = []
    total = 0
    for g in graphs:
        if g.wsi_id in offsets:
            raise ValidationError(f"{patient_id}: slide {g.wsi_id!r} listed twice")
        offsets[g.wsi_id] = total
        edges.extend((u + total, v + total) for u, v in g.edges)
        total += g.n_nodes
    return PatientGraph(patient_id, total, tuple(edges), offsets)


def normalize_adjacency(graph) -> NormalizedAdjacency:
    """Renormalised adjacency with self-loops.

    Entry (u, v) is ``1 / sqrt(deg~(u) * deg~(v))`` for every edge and every
    self-loop, with ``deg~ = degree + 1``.  Each value is computed once and
    written to both (u, v) and (v, u), so the matrix is exactly symmetric.
    """
    n = graph.n_nodes
    if n < 1:
        raise ValidationError("graph has no nodes")
    e = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
    if len(e) and (e.min() < 0 or e.max() >= n or np.any(e[:, 0] == e[:, 1])):
        raise ValidationError("edge endpoint out of range or self-edge")
    deg = np.ones(n)
    np.add.at(deg, e[:, 0], 1.0)
    np.add.at(deg, e[:, 1], 1.0)
    edge_vals = 1.0 / np.sqrt(deg[e[:, 0]] * deg[e[:, 1]])
    rows = np.concatenate([np.arange(n), e[:, 0], e[:, 1]])
    cols = np.concatenate([np.arange(n), e[:, 1], e[:, 0]])
    vals = np.concatenate([1.0 / deg, edge_vals, edge_vals])

    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return NormalizedAdjacency(n, indptr, cols, vals)


def block_diagonal(adjs: Sequence[NormalizedAdjacency]) -> Tuple[NormalizedAdjacency, np.ndarray]:
    """Stack adjacencies into one block-diagonal operator.

    Returns the stacked operator and the node offsets of each block
    (length ``len(adjs) + 1``).
    """
    offsets = np.zeros(len(adjs) + 1, dtype=np.int64)
    np.cumsum([a.n_nodes for a in adjs], out=offsets[1:])
    nnz = np.zeros(len(adjs) + 1, dtype=np.int64)
    np.cumsum([a.nnz for a in adjs], out=nnz[1:])
    indptr = np.concatenate([[0]] + [a.indptr[1:] + nnz[k] for k, a in enumerate(adjs)])
    indices = np.concatenate([a.indices + offsets[k] for k, a in enumerate(adjs)])
    data = np.concatenate([a.data for a in adjs])
    return NormalizedAdjacency(int(offsets[-1]), indptr.astype(np.int64), indices, data), offsets


def patient_graph_from_patches(patient_id: str, wsi_ids: Sequence[str],
                               patches_by_wsi: Dict[str, List[Patch]]) -> PatientGraph:
    graphs = []
    for wsi in wsi_ids:
        if not patches_by_wsi.get(wsi):
            raise ValidationError(f"{patient_id}: slide {wsi!r} has no patches")
        graphs.append(build_wsi_graph(patches_by_wsi[wsi]))
    return merge_patient_graph(graphs, patient_id)
