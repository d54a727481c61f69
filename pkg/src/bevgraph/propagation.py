"""Attention-weighted message passing over scene graphs.

Nodes and edges carry one d-dimensional embedding per feature state
(box geometry, scanlines, appearance) plus a positional embedding that
propagates alongside them. Each layer runs a node-level update (every
node aggregates its neighbors and, optionally, its incident edges) and
then an edge-level update on the conjugate graph (every edge aggregates
edges it shares an endpoint with and, optionally, the shared node).
Attention coefficients are computed once per entity pair from the
concatenation of all states and shared across states.

All heavy math goes through the autodiff tape so the whole model is
gradient-checkable end to end.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

FEATURE_STATES = ("bbox_geom", "scanline", "appearance")
ALPHA_LIMIT = math.pi / 2 - 1e-3


@dataclass(frozen=True)
class PropagationConfig:
    """Message-passing shape and ablation switches.

    enable_n2n gates the node-level update, enable_e2n the edge terms
    inside it, enable_e2e the edge-level update, and enable_n2e the node
    terms inside that. Node messages into edges require edge updates to
    exist, and edge terms inside the node update require the node update
    itself.

    use_position=False zeroes the positional embedding everywhere it
    would be read, which reduces every update to its appearance-only
    form. readout_depth_center/scale affinely rescale the depth head
    output (identity by default); training configs can set them to the
    scene's depth statistics so a freshly initialized head starts at a
    plausible range instead of zero.
    """

    num_layers: int = 2
    enable_n2n: bool = True
    enable_e2n: bool = True
    enable_e2e: bool = True
    enable_n2e: bool = True
    use_position: bool = True
    hidden_dim: int = 32
    leaky_slope: float = 0.2
    readout_depth_center: float = 0.0
    readout_depth_scale: float = 1.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.enable_n2e and not self.enable_e2e:
            raise ValueError("enable_n2e requires enable_e2e: node-to-edge "
                             "messages need an edge update to land in")
        if self.enable_e2n and not self.enable_n2n:
            raise ValueError("enable_e2n requires enable_n2n: edge-to-node "
                             "messages are terms of the node update")
        if not (0.0 <= self.leaky_slope < 1.0):
            raise ValueError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")


@dataclass
class EmbeddedGraph:
    """Per-state embeddings for nodes and edges, plus attention records.

    node_states/edge_states map each feature state name to an (N, d) or
    (E, d) tensor; node_pos/edge_pos hold the positional embeddings.
    node_attention/edge_attention record one dense coefficient matrix per
    layer (values only, over neighborhood-plus-self masks).
    """

    graph: object
    node_states: dict
    node_pos: ad.DiffTensor
    edge_states: dict
    edge_pos: ad.DiffTensor
    node_attention: list = field(default_factory=list)
    edge_attention: list = field(default_factory=list)


def conjugate_pairs(graph):
    """Adjacent edge pairs of the conjugate graph and their shared nodes.

    Returns (first, second, shared) int64 arrays over unordered pairs
    (first < second); shared[k] is the node index both edges touch.
    """
    endpoints = [set(e.endpoints) for e in graph.edges]
    first, second, shared = [], [], []
    m = graph.num_edges
    conj = graph.conj_adjacency
    for a in range(m):
        for b in range(a + 1, m):
            if conj[a, b] == 1.0:
                common = endpoints[a] & endpoints[b]
                first.append(a)
                second.append(b)
                shared.append(next(iter(common)))
    return (np.asarray(first, dtype=np.int64),
            np.asarray(second, dtype=np.int64),
            np.asarray(shared, dtype=np.int64))


def attention_score(h_i, h_j, e_ij, proj, vec, slope=0.2):
    """Reference scalar scoring: LeakyReLU(a . [Th_i | Th_j | Te_ij]).

    Plain-numpy mirror of the vectorized tape computation, used as an
    oracle in tests. h_i, h_j, e_ij are length-d vectors, proj is (d, d)
    right-multiplied, vec has length 3d.
    """
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    e_ij = np.asarray(e_ij, dtype=np.float64)
    proj = np.asarray(proj, dtype=np.float64)
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    cat = np.concatenate([h_i @ proj, h_j @ proj, e_ij @ proj])
    s = float(cat @ vec)
    return s if s >= 0.0 else slope * s


def normalize_attention(scores):
    """Softmax over a neighborhood's scores; sums to 1 by construction."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot normalize an empty neighborhood")
    e = np.exp(scores - scores.max())
    return e / e.sum()


def build_parameters(config, scanline_dim, appearance_dim, num_classes,
                     seed=0):
    """Create every trainable matrix for the given configuration.

    Creation order is fixed so a seed fully determines the values.
    Shared input lifts map raw features and 2D positions into R^d for
    nodes and edges alike; each layer owns one parameter group per
    enabled level; the readout heads are two-layer MLPs.
    """
    d = config.hidden_dim
    rng = np.random.default_rng(seed)
    store = ad.ParameterStore()

    store.create("embed.bbox_geom", (4, d), rng)
    store.create("embed.scanline", (scanline_dim, d), rng)
    store.create("embed.appearance", (appearance_dim, d), rng)
    store.create("embed.position", (2, d), rng)
    store.create("embed.position_dec", (d, 2), rng)

    def level_params(prefix):
        for state in FEATURE_STATES:
            store.create(f"{prefix}.theta_{state}", (2 * d, d), rng)
        store.create(f"{prefix}.theta_pos", (d, d), rng)
        store.create(f"{prefix}.attn_mix", (4 * d, d), rng)
        store.create(f"{prefix}.attn_proj", (d, d), rng)
        store.create(f"{prefix}.attn_vec", (3 * d, 1), rng)

    for layer in range(config.num_layers):
        if config.enable_n2n:
            level_params(f"layer{layer}.node")
        if config.enable_e2e:
            level_params(f"layer{layer}.edge")

    def head(prefix, in_dim, out_dim):
        store.create(f"{prefix}.w1", (in_dim, d), rng)
        store.create_zeros(f"{prefix}.b1", (1, d))
        store.create(f"{prefix}.w2", (d, out_dim), rng)
        store.create_zeros(f"{prefix}.b2", (1, out_dim))

    head("head.node_loc", 3 * d + 2, 2)
    head("head.edge_loc", 3 * d + 2, 2)
    raw_dim = 4 + scanline_dim + appearance_dim
    head("head.classify", raw_dim, num_classes)
    head("head.dims", raw_dim, 2)
    head("head.orient", raw_dim, 6)
    return store


def _stack_features(items, attr):
    if not items:
        return np.zeros((0, 0))
    return np.stack([getattr(it.features, attr) for it in items])


def _raw_feature_matrix(items):
    if not items:
        return np.zeros((0, 0))
    return np.stack([
        np.concatenate([it.features.bbox_geom, it.features.scanline,
                        it.features.appearance])
        for it in items
    ])


def embed_inputs(graph, store, config):
    """Lift raw features and positions into R^d without any propagation.

    Each feature state goes through its own shared linear map; positions
    go through the positional encoder, or become zeros when positions
    are disabled. Purely linear: no bias, no nonlinearity.
    """
    d = config.hidden_dim

    def lift(items, positions):
        states = {}
        count = len(items)
        for state in FEATURE_STATES:
            raw = _stack_features(items, state)
            if count == 0:
                states[state] = ad.constant(np.zeros((0, d)))
                continue
            weight = store[f"embed.{state}"]
            if raw.shape[1] != weight.shape[0]:
                raise ValueError(
                    f"{state} feature dim {raw.shape[1]} does not match "
                    f"embedding input dim {weight.shape[0]}")
            states[state] = ad.matmul(ad.constant(raw), weight)
        if count == 0:
            pos = ad.constant(np.zeros((0, d)))
        elif config.use_position:
            pos = ad.matmul(ad.constant(positions), store["embed.position"])
        else:
            pos = ad.constant(np.zeros((count, d)))
        return states, pos

    node_positions = (np.stack([n.position for n in graph.nodes])
                      if graph.nodes else np.zeros((0, 2)))
    edge_positions = (np.stack([e.position for e in graph.edges])
                      if graph.edges else np.zeros((0, 2)))
    node_states, node_pos = lift(graph.nodes, node_positions)
    edge_states, edge_pos = lift(graph.edges, edge_positions)
    return EmbeddedGraph(graph, node_states, node_pos, edge_states, edge_pos)


def _entity_scores(states, pos, mix, proj):
    cat = ad.concat_cols([states[s] for s in FEATURE_STATES] + [pos])
    return ad.matmul(ad.matmul(cat, mix), proj)


def _split_attention_vector(vec, d):
    idx = np.arange(3 * d, dtype=np.int64)
    a_self = ad.gather_rows(vec, idx[:d])
    a_other = ad.gather_rows(vec, idx[d:2 * d])
    a_ctx = ad.gather_rows(vec, idx[2 * d:])
    return a_self, a_other, a_ctx


def _level_update(prefix, store, config, states, pos, mask,
                  ctx_states, ctx_pos, pair_rows, pair_cols, ctx_index,
                  include_context):
    """One attention-weighted update of either level.

    `states`/`pos` describe the entities being updated (count N, mask is
    their N x N neighborhood-plus-self matrix). The context entities
    contribute both to scores and to messages through index arrays:
    entity pair (pair_rows[k], pair_cols[k]) is mediated by context
    entity ctx_index[k]. At node level the context is the incident edge;
    at edge level it is the shared node.
    """
    d = config.hidden_dim
    slope = config.leaky_slope
    n = mask.shape[0]
    mix = store[f"{prefix}.attn_mix"]
    proj = store[f"{prefix}.attn_proj"]
    a_self, a_other, a_ctx = _split_attention_vector(
        store[f"{prefix}.attn_vec"], d)

    h = _entity_scores(states, pos, mix, proj)
    s_self = ad.matmul(h, a_self)
    s_other = ad.matmul(h, a_other)
    score_mat = ad.add_rowcol(s_self, s_other)
    have_pairs = pair_rows.size > 0
    if include_context and have_pairs:
        h_ctx = _entity_scores(ctx_states, ctx_pos, mix, proj)
        s_ctx = ad.matmul(ad.gather_rows(h_ctx, ctx_index), a_ctx)
        score_mat = ad.add(score_mat, ad.scatter_pairs(
            s_ctx, pair_rows, pair_cols, (n, n), symmetric=True))
    alpha = ad.masked_softmax(ad.leaky_relu(score_mat, slope), mask)

    if include_context and have_pairs:
        w_fwd = ad.gather_pairs(alpha, pair_rows, pair_cols)
        w_bwd = ad.gather_pairs(alpha, pair_cols, pair_rows)

    def aggregate(own, ctx, theta):
        t = ad.matmul(own, theta)
        agg = ad.matmul(alpha, t)
        if include_context and have_pairs:
            t_ctx = ad.gather_rows(ad.matmul(ctx, theta), ctx_index)
            agg = ad.add(agg, ad.scatter_rows(
                ad.scale_rows(t_ctx, w_fwd), pair_rows, n))
            agg = ad.add(agg, ad.scatter_rows(
                ad.scale_rows(t_ctx, w_bwd), pair_cols, n))
        return ad.leaky_relu(agg, slope)

    new_states = {}
    for state in FEATURE_STATES:
        theta = store[f"{prefix}.theta_{state}"]
        own = ad.concat_cols([states[state], pos])
        ctx = ad.concat_cols([ctx_states[state], ctx_pos])
        new_states[state] = aggregate(own, ctx, theta)

    if config.use_position:
        new_pos = aggregate(pos, ctx_pos, store[f"{prefix}.theta_pos"])
    else:
        new_pos = ad.constant(np.zeros((n, d)))
    return new_states, new_pos, alpha


def propagate(graph, store, config):
    """Run embedding plus num_layers rounds of message passing.

    Within each layer every node updates synchronously from the
    previous layer's embeddings, then every edge updates from the fresh
    node embeddings. Disabled levels pass their embeddings through
    unchanged. Attention matrices are recorded per layer for
    diagnostics.
    """
    embedded = embed_inputs(graph, store, config)
    n, m = graph.num_nodes, graph.num_edges
    first, second = graph.edge_endpoint_arrays()
    node_mask = graph.adjacency + np.eye(n)
    if config.enable_e2e and m > 0:
        conj_first, conj_second, shared = conjugate_pairs(graph)
        edge_mask = graph.conj_adjacency + np.eye(m)

    node_states, node_pos = embedded.node_states, embedded.node_pos
    edge_states, edge_pos = embedded.edge_states, embedded.edge_pos

    for layer in range(config.num_layers):
        if config.enable_n2n:
            node_states, node_pos, alpha = _level_update(
                f"layer{layer}.node",
                store, config, node_states, node_pos, node_mask,
                edge_states, edge_pos, first, second,
                np.arange(m, dtype=np.int64),
                include_context=config.enable_e2n)
            embedded.node_attention.append(alpha.values)
        if config.enable_e2e and m > 0:
            edge_states, edge_pos, alpha_e = _level_update(
                f"layer{layer}.edge",
                store, config, edge_states, edge_pos, edge_mask,
                node_states, node_pos, conj_first, conj_second, shared,
                include_context=config.enable_n2e)
            embedded.edge_attention.append(alpha_e.values)

    embedded.node_states, embedded.node_pos = node_states, node_pos
    embedded.edge_states, embedded.edge_pos = edge_states, edge_pos
    return embedded


def _mlp(store, prefix, x, slope):
    h = ad.leaky_relu(ad.add_bias(ad.matmul(x, store[f"{prefix}.w1"]),
                                  store[f"{prefix}.b1"]), slope)
    return ad.add_bias(ad.matmul(h, store[f"{prefix}.w2"]),
                       store[f"{prefix}.b2"])


def _decode_positions(embedded, store, which):
    pos = embedded.node_pos if which == "node" else embedded.edge_pos
    return ad.matmul(pos, store["embed.position_dec"])


def _localize(store, prefix, states, decoded, alpha0, config):
    inp = ad.concat_cols([states[s] for s in FEATURE_STATES] + [decoded])
    out = _mlp(store, prefix, inp, config.leaky_slope)
    d_alpha, z_raw = ad.split_cols(out, [1, 1])
    z = ad.add_const(ad.scal(z_raw, config.readout_depth_scale),
                     config.readout_depth_center)
    alpha = ad.add(d_alpha, ad.constant(alpha0.reshape(-1, 1)))
    clamped = int((np.abs(alpha.values) >= ALPHA_LIMIT).sum())
    alpha = ad.clamp(alpha, -ALPHA_LIMIT, ALPHA_LIMIT)
    x = ad.mul(z, ad.div(ad.sin(alpha), ad.cos(alpha)))
    return ad.concat_cols([x, z]), clamped


def readout_localization(embedded, store, config):
    """Decode BEV positions for nodes and edges from final embeddings.

    Per entity a two-layer MLP over all updated states plus the decoded
    positional embedding emits (delta_alpha, depth_raw). The viewing
    angle is the initial estimate plus delta_alpha, clamped just inside
    +-pi/2 (clamp events are counted in the diagnostics); depth is the
    affine-rescaled head output; the lateral coordinate is depth times
    the tangent of the angle.

    Returns (node_xz, edge_xz, diagnostics) with (N, 2) and (E, 2)
    position tensors.
    """
    graph = embedded.graph
    node_alpha0 = np.array([n.alpha0 for n in graph.nodes])
    node_xz, node_clamped = _localize(
        store, "head.node_loc", embedded.node_states,
        _decode_positions(embedded, store, "node"), node_alpha0, config)

    if graph.num_edges:
        edge_pos0 = np.stack([e.position for e in graph.edges])
        edge_alpha0 = np.arctan2(edge_pos0[:, 0], np.maximum(edge_pos0[:, 1],
                                                             1e-4))
        edge_xz, edge_clamped = _localize(
            store, "head.edge_loc", embedded.edge_states,
            _decode_positions(embedded, store, "edge"), edge_alpha0, config)
    else:
        edge_xz = ad.constant(np.zeros((0, 2)))
        edge_clamped = 0

    diagnostics = {"alpha_clamped": node_clamped + edge_clamped}
    return node_xz, edge_xz, diagnostics


def readout_early_heads(graph, store, config):
    """Class logits, dimensions, and orientation encoding per node.

    These heads read the raw input feature tuples, not the propagated
    embeddings: classification, size, and heading are judged from each
    detection's own appearance before any message passing.
    """
    raw = ad.constant(_raw_feature_matrix(graph.nodes))
    class_logits = _mlp(store, "head.classify", raw, config.leaky_slope)
    dims = _mlp(store, "head.dims", raw, config.leaky_slope)
    orientation = _mlp(store, "head.orient", raw, config.leaky_slope)
    return class_logits, dims, orientation
