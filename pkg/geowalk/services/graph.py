"""
Graph Service - relational KNN graphs over catalog objects in each geometry
Embeds celestial directions onto a manifold, builds exact k-nearest-neighbor
graphs under its geodesic metric, and reads/writes the versioned graph format
"""

import heapq
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from geowalk.core.config import BRUTE_FORCE_LIMIT
from geowalk.core.errors import (
    ConfigurationError,
    GeoWalkError,
    GraphParseError,
    GraphVersionError,
)
from geowalk.services.catalog import Catalog
from geowalk.services.manifold import (
    ManifoldKind,
    ManifoldSpec,
    Point,
    exp_map,
    get_manifold,
    origin,
    project_to_tangent,
)

logger = logging.getLogger(__name__)

GRAPH_MAGIC = "GEOWALK-GRAPH"
GRAPH_VERSION = "v1"
# Upper bound on floats materialized per brute-force block
BLOCK_BUDGET = 4_000_000
_PAIR = re.compile(r"\((-?\d+),([^()\s]+)\)")


@dataclass(eq=False)
class RelationalGraph:
    """
    Directed KNN lists in CSR layout: node i's neighbors are
    indices[indptr[i]:indptr[i+1]], sorted by (distance, index)
    """

    spec: ManifoldSpec
    n: int
    k: int
    indptr: np.ndarray
    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=np.float64)

    @classmethod
    def from_neighbor_lists(
        cls, spec: ManifoldSpec, neighbors: Sequence[Sequence[Tuple[int, float]]], k: int = None
    ) -> "RelationalGraph":
        degrees = [len(row) for row in neighbors]
        indptr = np.concatenate([[0], np.cumsum(degrees)]).astype(np.int64)
        indices = [j for row in neighbors for j, _ in row]
        distances = [d for row in neighbors for _, d in row]
        return cls(spec, len(neighbors), max(degrees, default=0) if k is None else k, indptr, indices, distances)

    def neighbors(self, i: int) -> List[Tuple[int, float]]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return [(int(j), float(d)) for j, d in zip(self.indices[lo:hi], self.distances[lo:hi])]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edge_index(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """(target rows, source columns) of every directed edge"""
        rows = np.repeat(np.arange(self.n), self.degrees())
        return torch.from_numpy(rows), torch.from_numpy(self.indices.copy())

    @property
    def directed_edge_count(self) -> int:
        return int(len(self.indices))

    def undirected_pair_count(self) -> int:
        rows = np.repeat(np.arange(self.n), self.degrees())
        pairs = np.stack([np.minimum(rows, self.indices), np.maximum(rows, self.indices)], axis=1)
        return int(len(np.unique(pairs, axis=0))) if len(pairs) else 0

    def __eq__(self, other):
        if not isinstance(other, RelationalGraph):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.n == other.n
            and self.k == other.k
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.distances, other.distances)
        )


@dataclass
class GraphBundle:
    """The three relational graphs over one node set"""

    euclidean: RelationalGraph
    hyperbolic: RelationalGraph
    spherical: RelationalGraph

    def __post_init__(self):
        sizes = {g.n for g in (self.euclidean, self.hyperbolic, self.spherical)}
        if len(sizes) != 1:
            raise ConfigurationError(f"graphs in a bundle must share the node count, got {sorted(sizes)}")

    @property
    def n(self) -> int:
        return self.euclidean.n

    def items(self) -> Iterator[Tuple[str, RelationalGraph]]:
        yield ManifoldKind.EUCLIDEAN.value, self.euclidean
        yield ManifoldKind.HYPERBOLIC.value, self.hyperbolic
        yield ManifoldKind.SPHERICAL.value, self.spherical

    def __getitem__(self, kind: str) -> RelationalGraph:
        return getattr(self, ManifoldKind(kind).value)


# COORDINATE EMBEDDING #########################################################


def embed_coordinates(catalog: Catalog, spec: ManifoldSpec, tangent_scale: float = 1.0) -> Point:
    """
    Map each object's celestial direction onto the manifold: the unit 3-vector
    is read as a tangent vector at the origin and pushed through exp there
    """
    directions = torch.from_numpy(catalog.unit_vectors()) * tangent_scale
    if not spec.is_curved:
        return Point(directions, spec)
    o = origin(spec, 3)
    padded = torch.cat([torch.zeros(len(directions), 1, dtype=directions.dtype), directions], dim=1)
    tangent = project_to_tangent(o, padded)
    return exp_map(Point(o.coords.expand_as(padded), spec), tangent.vec)


# EXACT KNN ####################################################################


def _distance_rows(manifold, coords: torch.Tensor, rows: np.ndarray) -> np.ndarray:
    return manifold.dist(coords[rows].unsqueeze(1), coords.unsqueeze(0)).numpy()


def _brute_force_block(manifold, coords: torch.Tensor, rows: np.ndarray, k: int):
    d = _distance_rows(manifold, coords, rows)
    d[np.arange(len(rows)), rows] = np.inf
    # stable sort keeps the lower index first among equal distances
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d, order, axis=1)


class _Node:
    __slots__ = ("vantage", "radius", "inner", "outer", "indices")

    def __init__(self, vantage=None, radius=None, inner=None, outer=None, indices=None):
        self.vantage = vantage
        self.radius = radius
        self.inner = inner
        self.outer = outer
        self.indices = indices


class VantagePointTree:
    """
    Exact metric tree over the geodesic distance. Leaves hold small buckets that
    are scanned in one vectorized call; pruning keeps a slack so floating-point
    rounding in the triangle inequality can never drop a true neighbor.
    """

    def __init__(self, coords: torch.Tensor, spec: ManifoldSpec, leaf_size: int = 32, slack: float = 1e-9):
        self.coords = coords
        self.manifold = get_manifold(spec)
        self.leaf_size = leaf_size
        self.slack = slack
        self.root = self._build(np.arange(len(coords)))

    def _distances(self, i: int, others: np.ndarray) -> np.ndarray:
        return self.manifold.dist(self.coords[i].unsqueeze(0), self.coords[others]).numpy()

    def _build(self, idxs: np.ndarray):
        if idxs.size == 0:
            return None
        if idxs.size <= self.leaf_size:
            return _Node(indices=idxs)
        vantage, rest = idxs[0], idxs[1:]
        d = self._distances(vantage, rest)
        radius = float(np.median(d))
        return _Node(
            vantage=int(vantage),
            radius=radius,
            inner=self._build(rest[d < radius]),
            outer=self._build(rest[d >= radius]),
        )

    def query(self, i: int, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """k nearest nodes to node i (excluding i), ordered by (distance, index)"""
        heap: List[Tuple[float, int]] = []  # (-distance, -index), worst on top
        slack = self.slack

        def _tau():
            return -heap[0][0] if len(heap) == k else np.inf

        def _offer(d: float, j: int):
            if j == i:
                return
            entry = (-d, -j)
            if len(heap) < k:
                heapq.heappush(heap, entry)
            elif (d, j) < (-heap[0][0], -heap[0][1]):
                heapq.heapreplace(heap, entry)

        def _search(node):
            if node is None:
                return
            if node.indices is not None:
                for j, d in zip(node.indices, self._distances(i, node.indices)):
                    _offer(float(d), int(j))
                return

            d_vp = float(self._distances(i, np.array([node.vantage]))[0])
            _offer(d_vp, node.vantage)
            if d_vp < node.radius:
                _search(node.inner)
                if node.radius - d_vp <= _tau() + slack:
                    _search(node.outer)
            else:
                _search(node.outer)
                if d_vp - node.radius <= _tau() + slack:
                    _search(node.inner)

        _search(self.root)
        best = sorted((-d, -j) for d, j in heap)
        return np.array([j for _, j in best], dtype=np.int64), np.array([d for d, _ in best])


def knn_graph(
    points: Union[Point, torch.Tensor],
    spec: ManifoldSpec,
    k: int,
    brute_force_limit: int = BRUTE_FORCE_LIMIT,
    workers: int = 1,
) -> RelationalGraph:
    """
    Exact k-nearest-neighbor lists under spec's geodesic distance
    Ties are broken by the lower node index, so results are platform independent
    """
    coords = points.coords if isinstance(points, Point) else points
    coords = coords.detach().to(torch.float64)
    n = int(coords.shape[0])
    if n < 2:
        raise ConfigurationError(f"knn graph needs at least 2 nodes, got {n}")
    if k < 1 or k >= n:
        raise ConfigurationError(f"k must satisfy 1 <= k < n (k={k}, n={n})")

    manifold = get_manifold(spec)
    neighbor_idx = np.empty((n, k), dtype=np.int64)
    neighbor_dist = np.empty((n, k), dtype=np.float64)

    if n <= brute_force_limit:
        block = max(1, BLOCK_BUDGET // (n * coords.shape[1]))
        blocks = [np.arange(s, min(s + block, n)) for s in range(0, n, block)]

        def _run(rows):
            # each worker writes only its own slice
            order, dist = _brute_force_block(manifold, coords, rows, k)
            neighbor_idx[rows] = order
            neighbor_dist[rows] = dist
    else:
        tree = VantagePointTree(coords, spec)
        blocks = [np.arange(s, min(s + 1024, n)) for s in range(0, n, 1024)]

        def _run(rows):
            for i in rows:
                neighbor_idx[i], neighbor_dist[i] = tree.query(int(i), k)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run, blocks))
    else:
        for rows in blocks:
            _run(rows)

    indptr = np.arange(0, n * k + 1, k, dtype=np.int64)
    return RelationalGraph(spec, n, k, indptr, neighbor_idx.reshape(-1), neighbor_dist.reshape(-1))


def build_bundle(
    catalog: Catalog,
    k: int,
    hyperbolic_curvature: float = -1.0,
    spherical_curvature: float = 1.0,
    brute_force_limit: int = BRUTE_FORCE_LIMIT,
    workers: int = 1,
) -> GraphBundle:
    graphs = {}
    for spec in (
        ManifoldSpec.euclidean(),
        ManifoldSpec.hyperbolic(hyperbolic_curvature),
        ManifoldSpec.spherical(spherical_curvature),
    ):
        points = embed_coordinates(catalog, spec)
        graphs[spec.kind.value] = knn_graph(points, spec, k, brute_force_limit=brute_force_limit, workers=workers)
        logger.info(
            f"{spec.kind.value} graph: n={catalog.n}, k={k}, "
            f"unique pairs={graphs[spec.kind.value].undirected_pair_count()}"
        )
    return GraphBundle(**graphs)


def graph_statistics(bundle: GraphBundle) -> Dict:
    stats = {"n": bundle.n, "k": bundle.euclidean.k, "geometries": {}}
    for kind, graph in bundle.items():
        stats["geometries"][kind] = {
            "curvature": graph.spec.curvature,
            "directed_edges": graph.directed_edge_count,
            "unique_pairs": graph.undirected_pair_count(),
        }
    return stats


# PERSISTENCE ##################################################################


def format_graph(graph: RelationalGraph) -> str:
    lines = [f"{GRAPH_MAGIC} {GRAPH_VERSION} {graph.spec.kind.value} {graph.spec.curvature!r} {graph.n} {graph.k}"]
    for i in range(graph.n):
        pairs = " ".join(f"({j},{d!r})" for j, d in graph.neighbors(i))
        lines.append(f"{i}: {pairs}" if pairs else f"{i}:")
    return "\n".join(lines) + "\n"


def save_graph(graph: RelationalGraph, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_graph(graph))
    return path


def _parse_header(line: str) -> Tuple[ManifoldSpec, int, int]:
    tokens = line.split()
    if not tokens or tokens[0] != GRAPH_MAGIC:
        raise GraphParseError(f"missing '{GRAPH_MAGIC}' header", line=1, offset=0)
    if len(tokens) < 2 or tokens[1] != GRAPH_VERSION:
        found = tokens[1] if len(tokens) > 1 else "<none>"
        raise GraphVersionError(f"unsupported graph file version {found}; expected {GRAPH_VERSION}")
    if len(tokens) != 6:
        raise GraphParseError(f"header needs 6 fields, got {len(tokens)}", line=1)
    try:
        spec = ManifoldSpec(tokens[2], float(tokens[3]))
        n, k = int(tokens[4]), int(tokens[5])
    except (ValueError, GeoWalkError) as e:
        raise GraphParseError(f"invalid header field: {e}", line=1)
    if n < 0 or k < 0:
        raise GraphParseError("node count and k must be non-negative", line=1)
    return spec, n, k


def parse_graph(text: str) -> RelationalGraph:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise GraphParseError("empty graph file", line=1)

    spec, n, k = _parse_header(lines[0])
    if len(lines) - 1 != n:
        raise GraphParseError(f"expected {n} node lines, found {len(lines) - 1}", line=len(lines))

    indptr = [0]
    indices: List[int] = []
    distances: List[float] = []
    for i, line in enumerate(lines[1:]):
        line_no = i + 2
        prefix = f"{i}:"
        if not line.startswith(prefix):
            raise GraphParseError(f"expected line to start with '{prefix}'", line=line_no, offset=0)
        body = line[len(prefix):]
        position = 0
        last = -np.inf
        while position < len(body):
            if body[position] == " ":
                position += 1
                continue
            match = _PAIR.match(body, position)
            if not match:
                raise GraphParseError("malformed (neighbor,distance) pair", line=line_no, offset=len(prefix) + position)
            j = int(match.group(1))
            try:
                d = float(match.group(2))
            except ValueError:
                raise GraphParseError("malformed distance", line=line_no, offset=len(prefix) + position)
            if not 0 <= j < n or j == i:
                raise GraphParseError(f"invalid neighbor index {j}", line=line_no, offset=len(prefix) + position)
            if d < last:
                raise GraphParseError("neighbor distances must be non-decreasing", line=line_no, offset=len(prefix) + position)
            last = d
            indices.append(j)
            distances.append(d)
            position = match.end()
        if len(indices) - indptr[-1] != k:
            raise GraphParseError(f"expected {k} neighbors, found {len(indices) - indptr[-1]}", line=line_no)
        indptr.append(len(indices))

    return RelationalGraph(spec, n, k, np.array(indptr), np.array(indices, dtype=np.int64), np.array(distances))


def load_graph(path: Union[str, Path]) -> RelationalGraph:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_graph(text)


def load_bundle(directory: Union[str, Path], template: str) -> GraphBundle:
    directory = Path(directory)
    graphs = {}
    for kind in ManifoldKind:
        graphs[kind.value] = load_graph(directory / template.format(kind=kind.value))
    return GraphBundle(**graphs)


def save_bundle(bundle: GraphBundle, directory: Union[str, Path], template: str) -> Dict[str, Path]:
    directory = Path(directory)
    return {kind: save_graph(graph, directory / template.format(kind=kind)) for kind, graph in bundle.items()}


def subgraph_permuted(graph: RelationalGraph, permutation: Optional[np.ndarray]) -> RelationalGraph:
    """Relabel nodes: new node p holds old node permutation[p]"""
    if permutation is None:
        return graph
    inverse = np.empty_like(permutation)
    inverse[permutation] = np.arange(len(permutation))
    neighbors = [[(int(inverse[j]), d) for j, d in graph.neighbors(int(old))] for old in permutation]
    return RelationalGraph.from_neighbor_lists(graph.spec, neighbors, k=graph.k)
