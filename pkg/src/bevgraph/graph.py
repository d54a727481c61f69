"""Euclidean scene graphs over monocular detections.

Each detection becomes a node carrying an initial BEV position estimated
from its coarse depth score and viewing angle. Connectivity links depth
neighbors; each undirected edge carries the union image box of its
endpoints, a feature tuple derived from it, and the midpoint of the
endpoint positions. The conjugate (line-graph) adjacency lets the same
message-passing machinery run over edges.
"""

from dataclasses import dataclass, field

import numpy as np

from .camera import (
    ImageBox,
    coarse_relative_depth,
    initial_bev_position,
    viewing_angle,
)


@dataclass(frozen=True, eq=False)
class FeatureTuple:
    """Per-region image features: box geometry, scanlines, appearance.

    bbox_geom is the box normalized by image size (length 4); scanline
    and appearance lengths are fixed per run by the simulator config.
    """

    bbox_geom: np.ndarray
    scanline: np.ndarray
    appearance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bbox_geom",
                           np.asarray(self.bbox_geom, dtype=np.float64))
        object.__setattr__(self, "scanline",
                           np.asarray(self.scanline, dtype=np.float64))
        object.__setattr__(self, "appearance",
                           np.asarray(self.appearance, dtype=np.float64))
        if self.bbox_geom.shape != (4,):
            raise ValueError(f"bbox_geom must have length 4, "
                             f"got {self.bbox_geom.shape}")
        for name in ("bbox_geom", "scanline", "appearance"):
            arr = getattr(self, name)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be a vector")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains NaN or Inf")


@dataclass(frozen=True, eq=False)
class GraphNode:
    position: np.ndarray        # (x, z) initial BEV estimate
    features: FeatureTuple
    coarse_depth: float         # unscaled nearness score
    alpha0: float               # viewing angle, radians

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64))
        if self.position.shape != (2,):
            raise ValueError("node position must be a 2-vector")


@dataclass(frozen=True, eq=False)
class GraphEdge:
    endpoints: tuple            # (i, j) with i < j
    position: np.ndarray        # midpoint of endpoint positions
    features: FeatureTuple

    def __post_init__(self):
        i, j = self.endpoints
        if not (0 <= i < j):
            raise ValueError(f"edge endpoints must satisfy 0 <= i < j, "
                             f"got ({i}, {j})")
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64))
        if self.position.shape != (2,):
            raise ValueError("edge position must be a 2-vector")


@dataclass(eq=False)
class SceneGraph:
    """An immutable detection graph with its derived matrices.

    adjacency is the symmetric zero-diagonal node adjacency A, incidence
    the node-by-edge matrix C with exactly two ones per column, and
    conj_adjacency the line-graph adjacency C^T C - 2I, whose entry
    (a, b) is 1 exactly when edges a and b share an endpoint.
    """

    nodes: list
    edges: list
    adjacency: np.ndarray
    incidence: np.ndarray
    conj_adjacency: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.incidence = np.asarray(self.incidence, dtype=np.float64)
        self.conj_adjacency = np.asarray(self.conj_adjacency, dtype=np.float64)
        self.validate()

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_edges(self):
        return len(self.edges)

    def edge_endpoint_arrays(self):
        """Endpoint indices as two int64 arrays (first, second), first < second."""
        if not self.edges:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty.copy()
        pairs = np.array([e.endpoints for e in self.edges], dtype=np.int64)
        return np.ascontiguousarray(pairs[:, 0]), np.ascontiguousarray(pairs[:, 1])

    def validate(self):
        n, m = self.num_nodes, self.num_edges
        a, c, ae = self.adjacency, self.incidence, self.conj_adjacency
        if a.shape != (n, n):
            raise ValueError(f"adjacency shape {a.shape} != ({n}, {n})")
        if c.shape != (n, m):
            raise ValueError(f"incidence shape {c.shape} != ({n}, {m})")
        if ae.shape != (m, m):
            raise ValueError(f"conjugate adjacency shape {ae.shape} != ({m}, {m})")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency not symmetric")
        if np.any(np.diag(a) != 0.0):
            raise ValueError("adjacency has nonzero diagonal")
        if m and not np.array_equal(c.sum(axis=0), np.full(m, 2.0)):
            raise ValueError("incidence columns must each hold exactly two ones")
        expected_conj = c.T @ c - 2.0 * np.eye(m)
        if not np.array_equal(ae, expected_conj):
            raise ValueError("conjugate adjacency inconsistent with incidence")
        for e_idx, edge in enumerate(self.edges):
            i, j = edge.endpoints
            if j >= n:
                raise ValueError(f"edge {edge.endpoints} endpoint out of range")
            if a[i, j] != 1.0:
                raise ValueError(f"edge {edge.endpoints} missing from adjacency")
            if c[i, e_idx] != 1.0 or c[j, e_idx] != 1.0:
                raise ValueError(f"edge {edge.endpoints} inconsistent with "
                                 f"incidence column {e_idx}")
        if int(a.sum()) != 2 * m:
            raise ValueError("adjacency edge count disagrees with edge list")

    def to_json_dict(self):
        def features_dict(f):
            return {
                "bbox_geom": f.bbox_geom.tolist(),
                "scanline": f.scanline.tolist(),
                "appearance": f.appearance.tolist(),
            }

        return {
            "nodes": [
                {
                    "position": node.position.tolist(),
                    "coarse_depth": node.coarse_depth,
                    "alpha0": node.alpha0,
                    "features": features_dict(node.features),
                }
                for node in self.nodes
            ],
            "edges": [
                {
                    "endpoints": list(edge.endpoints),
                    "position": edge.position.tolist(),
                    "features": features_dict(edge.features),
                }
                for edge in self.edges
            ],
            "adjacency": self.adjacency.astype(int).tolist(),
            "incidence": self.incidence.astype(int).tolist(),
            "conj_adjacency": self.conj_adjacency.astype(int).tolist(),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_json_dict(cls, doc):
        def features(d):
            return FeatureTuple(d["bbox_geom"], d["scanline"], d["appearance"])

        nodes = [
            GraphNode(d["position"], features(d["features"]),
                      d["coarse_depth"], d["alpha0"])
            for d in doc["nodes"]
        ]
        edges = [
            GraphEdge(tuple(d["endpoints"]), d["position"],
                      features(d["features"]))
            for d in doc["edges"]
        ]
        n, m = len(nodes), len(edges)
        adjacency = np.asarray(doc["adjacency"], dtype=np.float64).reshape(n, n)
        incidence = np.asarray(doc["incidence"], dtype=np.float64).reshape(n, m)
        conj = np.asarray(doc["conj_adjacency"], dtype=np.float64).reshape(m, m)
        return cls(nodes, edges, adjacency, incidence, conj,
                   meta=dict(doc.get("meta", {})))


def knn_by_coarse_depth(depths, k):
    """Undirected union of each node's k nearest neighbors.

    Distance is |depth_i - depth_j| on the scalar scores; ties break
    toward the smaller node index. Because the directed relation is
    symmetrized, node degree can exceed k. k must satisfy 0 <= k < N.

    Returns a sorted list of (i, j) pairs with i < j.
    """
    depths = [float(d) for d in depths]
    n = len(depths)
    if n < 1:
        raise ValueError("need at least one node")
    if k < 0 or k >= n:
        raise ValueError(f"k={k} invalid for {n} nodes; need 0 <= k < {n}")
    edges = set()
    for i in range(n):
        order = sorted((abs(depths[i] - depths[j]), j)
                       for j in range(n) if j != i)
        for _, j in order[:k]:
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)


def knn_by_position(positions, k):
    """Same construction as knn_by_coarse_depth on 2D Euclidean distance."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n < 1:
        raise ValueError("need at least one node")
    if k < 0 or k >= n:
        raise ValueError(f"k={k} invalid for {n} nodes; need 0 <= k < {n}")
    edges = set()
    for i in range(n):
        d = np.hypot(positions[:, 0] - positions[i, 0],
                     positions[:, 1] - positions[i, 1])
        order = sorted((d[j], j) for j in range(n) if j != i)
        for _, j in order[:k]:
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)


def incidence_matrix(edges, num_nodes):
    """Node-by-edge incidence; column order equals edge list order."""
    seen = set()
    c = np.zeros((num_nodes, len(edges)))
    for e_idx, (i, j) in enumerate(edges):
        if not (0 <= i < j < num_nodes):
            raise ValueError(f"edge ({i}, {j}) invalid for {num_nodes} nodes")
        if (i, j) in seen:
            raise ValueError(f"duplicate edge ({i}, {j})")
        seen.add((i, j))
        c[i, e_idx] = 1.0
        c[j, e_idx] = 1.0
    return c


def conjugate_adjacency(incidence):
    """Line-graph adjacency: C^T C - 2I.

    Entry (a, b) is 1 exactly when distinct edges a and b share an
    endpoint; the diagonal is zero.
    """
    c = np.asarray(incidence, dtype=np.float64)
    m = c.shape[1]
    return c.T @ c - 2.0 * np.eye(m)


def edge_union_box(box_i, box_j):
    """Smallest axis-aligned image box containing both endpoint boxes."""
    return box_i.union(box_j)


def normalized_box(box, cam):
    """Box corners scaled into [0, 1]-ish image-relative units."""
    return np.array([
        box.u_min / cam.width,
        box.v_min / cam.height,
        box.u_max / cam.width,
        box.v_max / cam.height,
    ])


def scanline_descriptor(box, image_height, n_bands):
    """Vertical-extent profile of a box over horizontal image bands.

    The image height is split into n_bands equal rows; component b is the
    fraction of band b covered by the box's vertical extent. Coarse, but
    it composes sensibly for union boxes, whose profiles span both
    endpoint objects and the rows between them.
    """
    bands = np.linspace(0.0, image_height, n_bands + 1)
    lo = np.clip(box.v_min, bands[:-1], bands[1:])
    hi = np.clip(box.v_max, bands[:-1], bands[1:])
    return (hi - lo) / (bands[1:] - bands[:-1])


def adjacency_from_edges(edges, num_nodes):
    a = np.zeros((num_nodes, num_nodes))
    for i, j in edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    return a


def build_graph(detections, cam, k, knn_space="depth", bev_x_formula="tan",
                scanline_bands=None):
    """Assemble a SceneGraph from per-detection boxes and features.

    Each detection contributes a node with its coarse depth score,
    viewing angle at the box center column, and an initial BEV position
    from the normalized depth score. Connectivity is the symmetrized
    k-nearest relation in depth (or initial-position space when
    knn_space="position"). Edges carry the union box's geometry and
    scanline profile and the mean of the endpoint appearance vectors.

    The position's depth coordinate is the score divided by the squared
    norm of the reference bottom-center ray, which leaves connectivity
    untouched (ordering is preserved) but keeps positions at unit scale.
    """
    if not detections:
        raise ValueError("need at least one detection")
    if knn_space not in ("depth", "position"):
        raise ValueError(f"unknown knn_space {knn_space!r}")

    c_ref = (cam.u0 - 0.5 * cam.width, cam.v0 - cam.height)
    c_norm2 = c_ref[0] ** 2 + c_ref[1] ** 2
    if scanline_bands is None:
        scanline_bands = detections[0][1].scanline.shape[0]

    nodes = []
    for box, feats in detections:
        z0 = coarse_relative_depth(box.center, cam)
        alpha0 = viewing_angle(box.center[0], cam)
        position = initial_bev_position(z0 / c_norm2, alpha0,
                                        formula=bev_x_formula)
        nodes.append(GraphNode(np.asarray(position), feats, z0, alpha0))

    if knn_space == "depth":
        edge_pairs = knn_by_coarse_depth([n.coarse_depth for n in nodes], k)
    else:
        edge_pairs = knn_by_position([n.position for n in nodes], k)

    edges = []
    for i, j in edge_pairs:
        union = edge_union_box(detections[i][0], detections[j][0])
        feats = FeatureTuple(
            bbox_geom=normalized_box(union, cam),
            scanline=scanline_descriptor(union, cam.height, scanline_bands),
            appearance=0.5 * (nodes[i].features.appearance
                              + nodes[j].features.appearance),
        )
        midpoint = 0.5 * (nodes[i].position + nodes[j].position)
        edges.append(GraphEdge((i, j), midpoint, feats))

    adjacency = adjacency_from_edges(edge_pairs, len(nodes))
    incidence = incidence_matrix(edge_pairs, len(nodes))
    conj = conjugate_adjacency(incidence)
    return SceneGraph(nodes, edges, adjacency, incidence, conj)
