"""Traffic network representation with per-destination normalized aggregation weights.

Every node carries a self-loop (weight 1 unless the input provides one), so the
delayed neighbor aggregation is total even for isolated nodes.  Aggregation
weights alpha are row-normalized per destination: the incoming weights of each
node, self-loop included, sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

__all__ = ["TrafficGraph", "build_graph", "max_degree"]


@dataclass(frozen=True)
class TrafficGraph:
    """Immutable directed graph over nodes 0..node_count-1.

    Edge arrays are index-aligned: edge e runs srcs[e] -> dsts[e] with raw
    weight weights[e] and normalized aggregation weight alpha[e].
    """

    node_count: int
    srcs: np.ndarray          # (E,) int
    dsts: np.ndarray          # (E,) int
    weights: np.ndarray       # (E,) float, raw nonnegative weights
    alpha: np.ndarray         # (E,) float, per-destination normalized
    in_neighbors: tuple       # per node: tuple of incoming edge indices (self-loop included)
    max_degree: int           # K, max incoming edge count including the self-loop
    self_loop_mask: np.ndarray = field(repr=False, default=None)  # (E,) bool

    @property
    def edge_count(self) -> int:
        return len(self.srcs)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        """Edge list view, (src, dst, weight) per edge."""
        return [
            (int(s), int(d), float(w))
            for s, d, w in zip(self.srcs, self.dsts, self.weights)
        ]

    def edge_index(self, src: int, dst: int) -> int:
        """Index of the (src, dst) edge; raises InputError if absent."""
        key = (int(src), int(dst))
        idx = self._edge_lookup.get(key)
        if idx is None:
            raise InputError(f"no edge {src}->{dst}")
        return idx

    @property
    def _edge_lookup(self) -> dict:
        lookup = self.__dict__.get("_edge_lookup_cache")
        if lookup is None:
            lookup = {
                (int(s), int(d)): e for e, (s, d) in enumerate(zip(self.srcs, self.dsts))
            }
            object.__setattr__(self, "_edge_lookup_cache", lookup)
        return lookup


def build_graph(node_count: int, raw_edges) -> TrafficGraph:
    """Build a TrafficGraph from raw directed edges.

    A self-loop (i, i, 1.0) is added for every node that does not already have
    one.  alpha is each incoming edge weight divided by the total incoming
    weight of its destination, so incoming alphas sum to 1 per node.

    Raises InputError for out-of-range node ids, negative weights, or
    duplicate (src, dst) pairs.
    """
    if node_count < 1:
        raise InputError(f"node_count must be positive, got {node_count}")

    seen = set()
    edges = []
    for src, dst, weight in raw_edges:
        src, dst, weight = int(src), int(dst), float(weight)
        if not (0 <= src < node_count and 0 <= dst < node_count):
            raise InputError(f"edge ({src},{dst}) out of range for {node_count} nodes")
        if weight < 0:
            raise InputError(f"edge ({src},{dst}) has negative weight {weight}")
        if (src, dst) in seen:
            raise InputError(f"duplicate edge ({src},{dst})")
        seen.add((src, dst))
        edges.append((src, dst, weight))
    for i in range(node_count):
        if (i, i) not in seen:
            edges.append((i, i, 1.0))

    srcs = np.array([e[0] for e in edges], dtype=np.int64)
    dsts = np.array([e[1] for e in edges], dtype=np.int64)
    weights = np.array([e[2] for e in edges], dtype=np.float64)

    in_sum = np.zeros(node_count)
    np.add.at(in_sum, dsts, weights)
    # Self-loop weight 1 guarantees in_sum > 0 for every node.
    alpha = weights / in_sum[dsts]

    incoming: list[list[int]] = [[] for _ in range(node_count)]
    for e, dst in enumerate(dsts):
        incoming[dst].append(e)
    in_neighbors = tuple(tuple(lst) for lst in incoming)

    return TrafficGraph(
        node_count=node_count,
        srcs=srcs,
        dsts=dsts,
        weights=weights,
        alpha=alpha,
        in_neighbors=in_neighbors,
        max_degree=max(len(lst) for lst in incoming),
        self_loop_mask=srcs == dsts,
    )


def max_degree(graph: TrafficGraph) -> int:
    """K: maximum over nodes of incoming edge count, self-loop included."""
    return graph.max_degree
