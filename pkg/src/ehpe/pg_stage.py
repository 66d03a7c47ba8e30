"""Prior-guided stage: joint-feature assembly, structural-prior graph
attention (SPI), feature-enhancement attention (FEM), learnable branch fusion
and the stage-two loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .handsim import BONES, N_JOINTS
from .nn import Params, add_linear, linear
from .tw_stage import LossReport, parse_joint_set

LAMBDA_P = 2e-2
LAMBDA_E = 2e-1
EDGE_MODES = ("dynamic", "fixed")


def kinematic_adjacency(n: int = N_JOINTS, bones=BONES, self_loops: bool = True) -> np.ndarray:
    a = np.zeros((n, n), dtype=bool)
    for i, j in bones:
        a[i, j] = a[j, i] = True
    if self_loops:
        np.fill_diagonal(a, True)
    return a


def k_hop(adjacency: np.ndarray, hops: int) -> np.ndarray:
    """Nodes reachable within ``hops`` steps (self included)."""
    a = adjacency.astype(int) | np.eye(len(adjacency), dtype=int)
    reach = np.eye(len(adjacency), dtype=int)
    for _ in range(hops):
        reach = ((reach @ a) > 0).astype(int)
    return reach.astype(bool)


ADJ = kinematic_adjacency()
TWO_HOP = k_hop(ADJ, 2)
EDGES = kinematic_adjacency(self_loops=False)


@dataclass(frozen=True)
class ModelConfigPG:
    tw_joints: str = "W+T"
    feature_channels: int = 128
    image_size: tuple[int, int] = (64, 64)
    feature_stride: int = 32
    d: int = 8
    hidden: int = 64
    heads: int = 8
    gat_layers: int = 2
    edge_weights: str = "dynamic"
    spi: bool = True
    fem: bool = True
    fem_width: int = 64
    fem_duplicate_tokens: bool = False
    coord_init: str = "mean"
    use_tw_joints: bool = True
    pin_tw_joints: bool = False

    def __post_init__(self):
        if not (self.spi or self.fem):
            raise ValueError("PG stage with both SPI and FEM disabled degenerates to TW-only decoding; "
                             "enable at least one branch")
        if self.edge_weights not in EDGE_MODES:
            raise ValueError(f"edge_weights must be one of {EDGE_MODES}")
        if self.gat_layers < 1:
            raise ValueError("gat_layers must be >= 1")
        if self.hidden % self.heads:
            raise ValueError("hidden width must be divisible by the number of heads")
        if self.coord_init not in ("mean", "zeros"):
            raise ValueError("coord_init must be 'mean' or 'zeros'")
        parse_joint_set(self.tw_joints)

    @property
    def tw_nodes(self) -> tuple[int, ...]:
        return parse_joint_set(self.tw_joints) if self.use_tw_joints else ()

    @property
    def free_nodes(self) -> tuple[int, ...]:
        tw = set(self.tw_nodes)
        return tuple(j for j in range(N_JOINTS) if j not in tw)

    @property
    def node_dim(self) -> int:
        return 3 + self.feature_channels

    @property
    def n_tokens(self) -> int:
        h, w = self.image_size[0] // self.feature_stride, self.image_size[1] // self.feature_stride
        return (2 if self.fem_duplicate_tokens else 1) * h * w + 1

    def neighborhood(self, layer: int) -> np.ndarray:
        """Layer 1 aggregates immediate neighbours, deeper layers two-hop."""
        return ADJ if layer == 1 else TWO_HOP

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfigPG":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


# ------------------------------------------------------------------ coordinate frames

def coord_frame(config: ModelConfigPG) -> tuple[np.ndarray, np.ndarray]:
    """(centre, half-extent) mapping pixel/depth coordinates to about [-1, 1]."""
    h, w = config.image_size
    centre = np.array([w / 2.0, h / 2.0, config.d / 2.0])
    return centre, centre.copy()


def to_feature_cells(xy: Tensor, stride: int) -> Tensor:
    return ad.sub(ad.scale(xy, 1.0 / stride), 0.5 - 0.5 / stride)


# ------------------------------------------------------------------ graph

@dataclass
class JointGraph:
    coords: Tensor        # (B, 21, 3) pixels / depth units
    features: Tensor      # (B, 21, 3 + C) = [normalised x, y, z, F_i]
    sampled: Tensor       # (B, 21, C)
    adjacency: np.ndarray = field(default_factory=lambda: ADJ)

    @property
    def two_hop(self) -> np.ndarray:
        return k_hop(self.adjacency, 2)


def assemble_joint_features(tw_joints, featmap, coord_embed: Tensor | None, config: ModelConfigPG) -> JointGraph:
    """Place TW predictions on their nodes, learned coordinates on the rest,
    and sample each node's feature vector from ``featmap`` at its (x, y)."""
    featmap = ad.as_tensor(featmap)
    b = featmap.shape[0]
    parts = []
    if config.tw_nodes:
        if tw_joints is None:
            raise ValueError("TW-stage joints are required for the configured TW nodes")
        tw_joints = ad.as_tensor(tw_joints)
        if tw_joints.shape[1:] != (len(config.tw_nodes), 3):
            raise ValueError(f"expected TW joints (B, {len(config.tw_nodes)}, 3), got {tw_joints.shape}")
        parts.append(tw_joints)
    if config.free_nodes:
        parts.append(ad.broadcast_to(ad.reshape(coord_embed, (1, len(config.free_nodes), 3)),
                                     (b, len(config.free_nodes), 3)))
    stacked = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    order = list(config.tw_nodes) + list(config.free_nodes)
    inverse = np.argsort(order)
    coords = ad.index(stacked, (slice(None), inverse))

    pts = to_feature_cells(ad.index(coords, (slice(None), slice(None), slice(0, 2))), config.feature_stride)
    sampled = ad.grid_sample_bilinear(featmap, pts)
    centre, half = coord_frame(config)
    norm = ad.div(ad.sub(coords, centre), half)
    return JointGraph(coords, ad.concat([norm, sampled], axis=-1), sampled)


def _mask_add(neighborhood: np.ndarray) -> np.ndarray:
    return np.where(neighborhood, 0.0, -np.inf)


def fixed_edge_weights(neighborhood: np.ndarray) -> np.ndarray:
    """Row-normalised constant adjacency used by the fixed-weight baseline."""
    a = neighborhood.astype(float)
    return a / a.sum(axis=1, keepdims=True)


def gat_layer(h: Tensor, weight: Tensor, att_src: Tensor | None, att_dst: Tensor | None,
              neighborhood: np.ndarray, heads: int, edge_weights: str = "dynamic") -> tuple[Tensor, Tensor]:
    """Multi-head graph attention with per-input edge weights.

    ``h``: (B, N, F_in); ``weight``: (F_in, K*F_h) stacking the K head
    projections; ``att_src``/``att_dst``: (K, F_h), the two halves of the
    attention vector. Returns node outputs (B, N, K*F_h), heads concatenated,
    and the edge weights alpha (B, K, N, N) with rows summing to one over
    each node's neighbourhood.
    """
    neighborhood = np.asarray(neighborhood, dtype=bool)
    if not neighborhood.any(axis=1).all():
        raise ValueError("every node needs at least one neighbour (add self-loops)")
    h = ad.as_tensor(h)
    b, n, _ = h.shape
    fh = weight.shape[1] // heads
    wh = ad.transpose(ad.reshape(ad.matmul(h, weight), (b, n, heads, fh)), (0, 2, 1, 3))  # (B,K,N,Fh)
    if edge_weights == "dynamic":
        src = ad.sum(ad.mul(wh, ad.reshape(att_src, (1, heads, 1, fh))), axis=-1)   # (B,K,N)
        dst = ad.sum(ad.mul(wh, ad.reshape(att_dst, (1, heads, 1, fh))), axis=-1)
        scores = ad.leaky_relu(ad.add(ad.reshape(src, (b, heads, n, 1)), ad.reshape(dst, (b, heads, 1, n))))
        alpha = ad.softmax(ad.add(scores, _mask_add(neighborhood)), axis=-1)
    elif edge_weights == "fixed":
        alpha = Tensor(np.broadcast_to(fixed_edge_weights(neighborhood), (b, heads, n, n)))
    else:
        raise ValueError(f"unknown edge weight mode {edge_weights!r}")
    out = ad.matmul(alpha, wh)  # (B,K,N,Fh)
    return ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, heads * fh)), alpha


def spi_layer(h: Tensor, h0: Tensor, weight: Tensor, att_src, att_dst, skip_weight: Tensor,
              neighborhood: np.ndarray, heads: int, edge_weights: str = "dynamic") -> tuple[Tensor, Tensor]:
    """One SPI layer: graph attention over ``h`` plus a linear skip from the
    layer-0 node features ``h0``, through a leaky ReLU."""
    agg, alpha = gat_layer(h, weight, att_src, att_dst, neighborhood, heads, edge_weights)
    return ad.leaky_relu(ad.add(agg, ad.matmul(ad.as_tensor(h0), skip_weight))), alpha


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    dk = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                      1.0 / np.sqrt(dk))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


def fuse(spi_out: Tensor | None, fem_out: Tensor | None, omega_g: Tensor, omega_e: Tensor) -> Tensor:
    """Weighted branch fusion: omega_g (21x21) mixes SPI outputs across nodes,
    omega_e (21x1) scales each node's FEM output."""
    parts = []
    if spi_out is not None:
        parts.append(ad.matmul(omega_g, spi_out))
    if fem_out is not None:
        parts.append(ad.mul(omega_e, fem_out))
    if not parts:
        raise ValueError("fusion needs at least one branch output")
    return parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])


@dataclass
class PGOutput:
    coords: Tensor                       # (B, 21, 3) fused prediction
    spi_out: Tensor | None
    fem_out: Tensor | None
    alphas: list[Tensor]                 # per GAT layer, (B, K, 21, 21)
    graph: JointGraph
    fem_attention: list[Tensor] = field(default_factory=list)


class PGStage:
    def __init__(self, config: ModelConfigPG | None = None, seed: int = 0, mean_pose: np.ndarray | None = None):
        self.config = config or ModelConfigPG()
        self.params = self._init_params(np.random.default_rng(seed), mean_pose)

    def _init_params(self, rng, mean_pose) -> Params:
        cfg, p = self.config, Params()
        free = list(cfg.free_nodes)
        if free:
            if cfg.coord_init == "mean":
                if mean_pose is None:
                    raise ValueError("coord_init='mean' needs the training-set mean pose")
                init = np.asarray(mean_pose, dtype=float)[free]
            else:
                init = np.zeros((len(free), 3))
            p.add("coords.embed", init)
        f0, hid, k = cfg.node_dim, cfg.hidden, cfg.heads
        if cfg.spi:
            for layer in range(1, cfg.gat_layers + 1):
                f_in = f0 if layer == 1 else hid
                add_linear(p, rng, f"spi.gat{layer}", f_in, hid, bias=False)
                if cfg.edge_weights == "dynamic":
                    p.add(f"spi.gat{layer}.att_src", rng.standard_normal((k, hid // k)) * 0.1)
                    p.add(f"spi.gat{layer}.att_dst", rng.standard_normal((k, hid // k)) * 0.1)
                add_linear(p, rng, f"spi.skip{layer}", f0, hid, bias=False)
            add_linear(p, rng, "spi.head", hid, 3, gain=0.1)
        if cfg.fem:
            dm = cfg.fem_width
            n_img = cfg.n_tokens - 1 if not cfg.fem_duplicate_tokens else (cfg.n_tokens - 1) // 2
            add_linear(p, rng, "fem.token", cfg.feature_channels, dm)
            p.add("fem.pos", rng.standard_normal((n_img, dm)) * 0.02)
            p.add("fem.global", rng.standard_normal((1, dm)) * 0.02)
            for nm in ("q", "k", "v"):
                add_linear(p, rng, f"fem.sa.{nm}", dm, dm, bias=False)
            p.add("fem.query.embed", rng.standard_normal((N_JOINTS, dm)) * 0.02)
            add_linear(p, rng, "fem.query.in", f0, dm)
            for nm in ("q", "k", "v"):
                add_linear(p, rng, f"fem.ca.{nm}", dm, dm, bias=False)
            add_linear(p, rng, "fem.head1", dm, dm)
            add_linear(p, rng, "fem.head2", dm, 3, gain=0.1)
        p.add("fuse.omega_g", np.eye(N_JOINTS))
        p.add("fuse.omega_e", np.ones((N_JOINTS, 1)))
        return p

    def _to_pixels(self, x: Tensor) -> Tensor:
        centre, half = coord_frame(self.config)
        return ad.add(ad.mul(x, half), centre)

    def spi_forward(self, graph: JointGraph) -> tuple[Tensor, list[Tensor]]:
        cfg, p = self.config, self.params
        h0 = graph.features
        h, alphas = h0, []
        for layer in range(1, cfg.gat_layers + 1):
            h, alpha = spi_layer(h, h0, p[f"spi.gat{layer}.weight"], p.get(f"spi.gat{layer}.att_src"),
                                 p.get(f"spi.gat{layer}.att_dst"), p[f"spi.skip{layer}.weight"],
                                 cfg.neighborhood(layer), cfg.heads, cfg.edge_weights)
            alphas.append(alpha)
        return self._to_pixels(linear(p, "spi.head", h)), alphas

    def fem_forward(self, featmap, graph: JointGraph) -> tuple[Tensor, list[Tensor]]:
        cfg, p = self.config, self.params
        featmap = ad.as_tensor(featmap)
        b, c = featmap.shape[:2]
        flat = ad.transpose(ad.reshape(featmap, (b, c, -1)), (0, 2, 1))          # (B, hw, C)
        tok = linear(p, "fem.token", flat)
        pos_tok = ad.add(tok, p["fem.pos"])
        glob = ad.broadcast_to(ad.reshape(p["fem.global"], (1, 1, -1)), (b, 1, cfg.fem_width))
        seq = [tok, pos_tok, glob] if cfg.fem_duplicate_tokens else [pos_tok, glob]
        tokens = ad.concat(seq, axis=1)
        sa, w_sa = attention(linear(p, "fem.sa.q", tokens), linear(p, "fem.sa.k", tokens),
                             linear(p, "fem.sa.v", tokens))
        tokens = ad.add(tokens, sa)
        queries = ad.add(p["fem.query.embed"], linear(p, "fem.query.in", graph.features))
        ca, w_ca = attention(linear(p, "fem.ca.q", queries), linear(p, "fem.ca.k", tokens),
                             linear(p, "fem.ca.v", tokens))
        z = ad.add(queries, ca)
        out = linear(p, "fem.head2", ad.leaky_relu(linear(p, "fem.head1", z)))
        return self._to_pixels(out), [w_sa, w_ca]

    def forward(self, tw_joints, featmap) -> PGOutput:
        cfg, p = self.config, self.params
        graph = assemble_joint_features(tw_joints, featmap, p.get("coords.embed"), cfg)
        spi_out, alphas = self.spi_forward(graph) if cfg.spi else (None, [])
        fem_out, fem_att = self.fem_forward(featmap, graph) if cfg.fem else (None, [])
        coords = fuse(spi_out, fem_out, p["fuse.omega_g"], p["fuse.omega_e"])
        return PGOutput(coords, spi_out, fem_out, alphas, graph, fem_att)

    __call__ = forward

    def predict(self, tw_joints, featmap) -> np.ndarray:
        out = self.forward(tw_joints, featmap).coords.data.copy()
        if self.config.pin_tw_joints and self.config.tw_nodes:
            out[:, list(self.config.tw_nodes)] = np.asarray(tw_joints)
        return out


def loss_pg(pred, target, alphas: list[Tensor], edges: np.ndarray = EDGES,
            lambdas=(LAMBDA_P, LAMBDA_E)) -> LossReport:
    """Stage-two loss; batched inputs average over the batch.

    L_P: mean over nodes of the squared position error.
    L_E: sum over kinematic edges (self-loops exempt), heads and layers of
    (alpha_ij - 1)^2.
    """
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"node count/shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.shape[-2]
    n_batch = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    l_p = ad.scale(ad.square(ad.sub(pred, target)).sum(), 1.0 / (n * n_batch))
    l_e = Tensor(0.0)
    edge_mask = np.asarray(edges, dtype=float)
    for alpha in alphas:
        term = ad.mul(ad.square(ad.sub(alpha, 1.0)), edge_mask).sum()
        l_e = ad.add(l_e, ad.scale(term, 1.0 / n_batch))
    lp, le = lambdas
    total = ad.add(ad.scale(l_p, lp), ad.scale(l_e, le))
    return LossReport(total, {"L_P": l_p, "L_E": l_e})
