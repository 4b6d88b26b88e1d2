"""Prior graphs over electrode channels, scalp regions, and the global node.

A hierarchy has three levels. The channel level connects electrodes
within each region (so its connected components are exactly the
regions), the region level connects region nodes, and the global level
is a single node. Message passing uses a Chebyshev polynomial basis of
the rescaled graph Laplacian; the polynomial degree defaults to the
graph diameter (largest component diameter when disconnected).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ValidationError

DREAMER_CHANNELS = (
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1",
    "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
)

# Region partitions over the 14-channel montage. Within each region the
# channels are chained in listed order; regions themselves form a cycle.
PRESET_REGIONS: dict[str, dict[str, tuple[str, ...]]] = {
    "G0": {
        "FL": ("AF3", "F3", "F7", "FC5"),
        "PL": ("T7", "P7", "O1"),
        "PR": ("O2", "P8", "T8"),
        "FR": ("FC6", "F4", "F8", "AF4"),
    },
    "G1": {
        "FL": ("AF3", "F3", "F7", "FC5"),
        "TL": ("T7",),
        "C": ("P7", "O1", "O2", "P8"),
        "TR": ("T8",),
        "FR": ("FC6", "F4", "F8", "AF4"),
    },
    "G2": {
        "FL": ("AF3", "F3", "F7", "FC5"),
        "P": ("T7", "P7", "O1", "O2", "P8", "T8"),
        "FR": ("FC6", "F4", "F8", "AF4"),
    },
}

PRESET_REGION_EDGES: dict[str, tuple[tuple[str, str], ...]] = {
    "G0": (("FL", "FR"), ("FR", "PR"), ("PR", "PL"), ("PL", "FL")),
    "G1": (("FL", "TL"), ("TL", "C"), ("C", "TR"), ("TR", "FR"), ("FR", "FL")),
    "G2": (("FL", "P"), ("P", "FR"), ("FR", "FL")),
}

GLOBAL_NODE = "global"


@dataclass(frozen=True, eq=False)
class LevelGraph:
    """An undirected graph at one hierarchy level."""

    node_names: tuple[str, ...]
    adjacency: np.ndarray
    cheb_degree: int

    def __post_init__(self) -> None:
        n = len(self.node_names)
        a = self.adjacency
        if a.shape != (n, n):
            raise ValidationError(f"adjacency shape {a.shape} != ({n}, {n})")
        if not np.array_equal(a, a.T):
            raise ValidationError("adjacency must be symmetric")
        if not np.all((a == 0) | (a == 1)):
            raise ValidationError("adjacency entries must be 0 or 1")
        if np.any(np.diag(a) != 0):
            raise ValidationError("adjacency diagonal must be zero")
        if self.cheb_degree < 0:
            raise ParameterError(f"cheb_degree must be >= 0, got {self.cheb_degree}")

    @property
    def num_nodes(self) -> int:
        return len(self.node_names)

    def index(self, name: str) -> int:
        try:
            return self.node_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown node {name!r}") from None


@dataclass(frozen=True, eq=False)
class GraphHierarchy:
    """Channel, region, and global graphs plus the child maps between them."""

    channel: LevelGraph
    region: LevelGraph
    global_level: LevelGraph
    region_children: dict[str, tuple[str, ...]] = field(default_factory=dict)
    global_children: tuple[str, ...] = ()

    @property
    def num_channels(self) -> int:
        return self.channel.num_nodes

    @property
    def num_regions(self) -> int:
        return self.region.num_nodes

    @property
    def feature_width(self) -> int:
        return self.num_channels + self.num_regions + 1

    def region_child_indices(self, region_name: str) -> tuple[int, ...]:
        return tuple(self.channel.index(c) for c in self.region_children[region_name])

    def to_spec(self) -> dict:
        return {
            "channels": list(self.channel.node_names),
            "regions": {name: list(children) for name, children in self.region_children.items()},
            "region_edges": _edges_of(self.region),
            "channel_edges": _edges_of(self.channel),
            "cheb_degrees": {
                "channel": self.channel.cheb_degree,
                "region": self.region.cheb_degree,
                "global": self.global_level.cheb_degree,
            },
        }


def _edges_of(g: LevelGraph) -> list[list[str]]:
    edges = []
    n = g.num_nodes
    for i in range(n):
        for j in range(i + 1, n):
            if g.adjacency[i, j]:
                edges.append([g.node_names[i], g.node_names[j]])
    return edges


def _adjacency_from_edges(names: Sequence[str], edges: Sequence[Sequence[str]]) -> np.ndarray:
    index = {name: i for i, name in enumerate(names)}
    a = np.zeros((len(names), len(names)), dtype=np.float64)
    for edge in edges:
        if len(edge) != 2:
            raise ValidationError(f"edge {edge!r} must have exactly two endpoints")
        u, v = edge
        if u not in index or v not in index:
            raise ValidationError(f"edge ({u!r}, {v!r}) references an unknown node")
        if u == v:
            raise ValidationError(f"self-loop on {u!r} is not allowed")
        a[index[u], index[v]] = 1.0
        a[index[v], index[u]] = 1.0
    return a


def _default_channel_edges(regions: Mapping[str, Sequence[str]]) -> list[list[str]]:
    edges = []
    for children in regions.values():
        for u, v in zip(children, children[1:]):
            edges.append([u, v])
    return edges


def build_hierarchy(
    channels: Sequence[str],
    regions: Mapping[str, Sequence[str]],
    region_edges: Sequence[Sequence[str]],
    channel_edges: Sequence[Sequence[str]] | None = None,
    cheb_degrees: Mapping[str, int] | None = None,
) -> GraphHierarchy:
    """Assemble and validate a hierarchy from named parts.

    ``regions`` must partition ``channels`` exactly; each region's
    channels must form one connected component of the channel graph.
    ``channel_edges`` defaults to a chain through each region's channels
    in listed order. ``cheb_degrees`` may override the per-level default
    (the graph diameter).
    """
    channels = tuple(channels)
    if not channels:
        raise ValidationError("channel list is empty")
    if len(set(channels)) != len(channels):
        raise ValidationError("channel names must be unique")
    if not regions:
        raise ValidationError("region map is empty")

    listed: list[str] = []
    for name, children in regions.items():
        if not children:
            raise ValidationError(f"region {name!r} has no channels")
        listed.extend(children)
    counts = {c: listed.count(c) for c in listed}
    duplicates = sorted(c for c, k in counts.items() if k > 1)
    missing = sorted(set(channels) - set(listed))
    unknown = sorted(set(listed) - set(channels))
    if duplicates or missing or unknown:
        raise ValidationError(
            "regions must partition the channels exactly "
            f"(duplicated: {duplicates}, missing: {missing}, unknown: {unknown})"
        )

    if channel_edges is None:
        channel_edges = _default_channel_edges(regions)
    channel_adj = _adjacency_from_edges(channels, channel_edges)

    region_names = tuple(regions.keys())
    region_adj = _adjacency_from_edges(region_names, region_edges)

    components = connected_components(channel_adj)
    component_sets = {frozenset(channels[i] for i in comp) for comp in components}
    region_sets = {frozenset(children) for children in regions.values()}
    if component_sets != region_sets:
        raise ValidationError(
            "channel graph components must coincide with the region partition; "
            f"got components {sorted(sorted(s) for s in component_sets)}"
        )

    degrees = dict(cheb_degrees or {})
    extra = set(degrees) - {"channel", "region", "global"}
    if extra:
        raise ValidationError(f"unknown cheb_degrees keys {sorted(extra)}")

    channel_graph = LevelGraph(
        channels, channel_adj, degrees.get("channel", graph_diameter(channel_adj))
    )
    region_graph = LevelGraph(
        region_names, region_adj, degrees.get("region", graph_diameter(region_adj))
    )
    global_graph = LevelGraph(
        (GLOBAL_NODE,), np.zeros((1, 1)), degrees.get("global", 0)
    )
    return GraphHierarchy(
        channel=channel_graph,
        region=region_graph,
        global_level=global_graph,
        region_children={name: tuple(children) for name, children in regions.items()},
        global_children=region_names,
    )


def build_prior_graph(
    spec: str | Mapping,
    channels: Sequence[str] | None = None,
    cheb_degrees: Mapping[str, int] | None = None,
) -> GraphHierarchy:
    """Build a hierarchy from a preset name (G0, G1, G2) or a custom spec.

    A custom spec is a mapping with keys ``regions`` (name -> channel
    list), ``region_edges``, and optionally ``channel_edges``; unknown
    keys are rejected. ``channels`` fixes the storage order of the
    channel axis; presets default to the 14-channel montage order, a
    custom spec defaults to its regions' concatenated channel lists.
    """
    if isinstance(spec, str):
        if spec not in PRESET_REGIONS:
            raise ValidationError(f"unknown graph preset {spec!r}; expected one of G0, G1, G2")
        regions = PRESET_REGIONS[spec]
        region_edges = PRESET_REGION_EDGES[spec]
        channel_edges = None
        if channels is None:
            channels = DREAMER_CHANNELS
    else:
        allowed = {"regions", "region_edges", "channel_edges"}
        unknown = set(spec.keys()) - allowed
        if unknown:
            raise ValidationError(f"unknown graph spec keys {sorted(unknown)}")
        if "regions" not in spec or "region_edges" not in spec:
            raise ValidationError("graph spec needs 'regions' and 'region_edges'")
        regions = {name: tuple(children) for name, children in spec["regions"].items()}
        region_edges = spec["region_edges"]
        channel_edges = spec.get("channel_edges")
        if channels is None:
            channels = [c for children in regions.values() for c in children]
    return build_hierarchy(channels, regions, region_edges, channel_edges, cheb_degrees)


# ---------------------------------------------------------------------------
# spectral helpers


def _as_adjacency(g) -> np.ndarray:
    a = g.adjacency if isinstance(g, LevelGraph) else np.asarray(g, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {a.shape}")
    return a


def connected_components(g) -> list[list[int]]:
    """Connected components as sorted index lists, ordered by smallest member."""
    a = _as_adjacency(g)
    n = a.shape[0]
    unvisited = set(range(n))
    components = []
    while unvisited:
        root = min(unvisited)
        seen = {root}
        frontier = [root]
        while frontier:
            node = frontier.pop()
            for neighbor in np.nonzero(a[node])[0]:
                if neighbor not in seen:
                    seen.add(int(neighbor))
                    frontier.append(int(neighbor))
        unvisited -= seen
        components.append(sorted(seen))
    return components


def graph_diameter(g) -> int:
    """Largest BFS eccentricity within any connected component."""
    a = _as_adjacency(g)
    n = a.shape[0]
    if n == 0:
        raise ParameterError("diameter of an empty graph is undefined")
    neighbors = [np.nonzero(a[i])[0] for i in range(n)]
    best = 0
    for start in range(n):
        dist = {start: 0}
        frontier = [start]
        while frontier:
            nxt = []
            for node in frontier:
                for neighbor in neighbors[node]:
                    if neighbor not in dist:
                        dist[int(neighbor)] = dist[node] + 1
                        nxt.append(int(neighbor))
            frontier = nxt
        best = max(best, max(dist.values()))
    return best


def max_eigenvalue(matrix: np.ndarray, tol: float = 1e-10, max_iters: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric matrix by shifted power iteration.

    The shift ``c = max row sum of |matrix|`` makes the iterated matrix
    positive semidefinite so the dominant eigenvalue is the one sought.
    Raises on non-convergence.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"matrix must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=1e-12):
        raise ParameterError("matrix must be symmetric")
    n = m.shape[0]
    c = float(np.abs(m).sum(axis=1).max())
    if c == 0.0:
        return 0.0
    shifted = m + c * np.eye(n)
    rng = np.random.default_rng(8191)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    estimate = np.inf
    for _ in range(max_iters):
        w = shifted @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            v = rng.standard_normal(n)
            v /= np.linalg.norm(v)
            continue
        current = float(v @ w)
        v = w / norm
        if abs(current - estimate) <= tol * max(1.0, abs(current)):
            return current - c
        estimate = current
    raise NumericError(f"power iteration did not converge in {max_iters} iterations")


def normalized_laplacian(g) -> np.ndarray:
    """Rescaled combinatorial Laplacian ``2 L / lambda_max - I``.

    ``L = D - A``. Its spectrum maps into [-1, 1]. An edgeless graph has
    ``lambda_max = 0``; the rescaling is then defined by convention as
    ``-I`` (the zero-Laplacian limit), which keeps the Chebyshev
    recurrence well-defined.
    """
    a = _as_adjacency(g)
    n = a.shape[0]
    if n < 1:
        raise ParameterError("graph must have at least one node")
    lap = np.diag(a.sum(axis=1)) - a
    lam = max_eigenvalue(lap)
    if lam < 1e-12:
        return -np.eye(n)
    return 2.0 * lap / lam - np.eye(n)


def chebyshev_basis(rescaled_laplacian: np.ndarray, degree: int) -> list[np.ndarray]:
    """Matrices ``T_0 .. T_degree`` of the Chebyshev recurrence.

    ``T_0 = I``, ``T_1 = M``, ``T_k = 2 M T_{k-1} - T_{k-2}`` for the
    given rescaled Laplacian ``M``.
    """
    if degree < 0:
        raise ParameterError(f"degree must be >= 0, got {degree}")
    m = np.asarray(rescaled_laplacian, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"matrix must be square, got shape {m.shape}")
    n = m.shape[0]
    basis = [np.eye(n)]
    if degree >= 1:
        basis.append(m.copy())
    for _ in range(2, degree + 1):
        basis.append(2.0 * m @ basis[-1] - basis[-2])
    return basis
