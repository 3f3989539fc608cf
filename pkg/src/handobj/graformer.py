"""Graph-transformer vertex regression for hand and object meshes.

Per branch (hand, object), a shared feature vector of length 1715 is built
from three sources: the VoxelNet feature volume compressed by an MLP to
256, the branch's predicted soft occupancy compressed by a small 3D CNN to
128, and the 44^3 depth occupancy max-pooled to 11^3 and flattened to
1331. A learned linear positional embedding of the template vertices is
added so every graph node starts from a distinct vector.

Each GraFormer is five attention blocks (hidden 128, 4 heads) whose final
projection is a graph convolution rather than a feed-forward layer, each
followed by a Chebyshev graph convolution, with pre-norm residual wiring;
an input projection maps features to the hidden width and an output
projection maps hidden states to 3D coordinates in normalized cube space
(cube center at the origin, half side = 1).

The optional refinement stage re-embeds the predicted coordinates of the
combined 3340-node hand+object graph (block-diagonal adjacency) and adds a
learned correction, reusing the branch feature vectors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import tensor as T
from .errors import ContractViolation
from .mesh import GraphAdjacency, adjacency_from_faces, chebyshev_basis
from .nets import (
    FV_CHANNELS,
    FV_RESOLUTION,
    Conv3dLayer,
    LinearLayer,
    ParamBag,
    VoxelNet,
    pool_depth_to_shape_grid,
    voxelnet_input,
)
from .voxel import SHAPE_RESOLUTION

FEATURE_FROM_FV = 256
FEATURE_FROM_SHAPE = 128
FEATURE_FROM_DEPTH = 1331  # 11^3
FULL_FEATURE_LENGTH = FEATURE_FROM_FV + FEATURE_FROM_SHAPE + FEATURE_FROM_DEPTH

HIDDEN_DIM = 128
N_HEADS = 4
N_BLOCKS = 5
CHEB_ORDER = 2


@dataclass
class FeatureConfig:
    """Which modalities feed the per-branch shared feature vector."""

    include_depth: bool = True
    include_voxel_features: bool = True
    include_shape: bool = True
    fv_mlp_hidden: tuple = (64,)
    shape_cnn_channels: tuple = (4, 8)

    @property
    def feature_length(self):
        return (
            FEATURE_FROM_FV * self.include_voxel_features
            + FEATURE_FROM_SHAPE * self.include_shape
            + FEATURE_FROM_DEPTH * self.include_depth
        )


class BranchFeatureExtractor:
    """Builds one branch's shared feature vector from the voxel stage."""

    def __init__(self, rng, name, config=None):
        self.config = config or FeatureConfig()
        if self.config.feature_length == 0:
            raise ContractViolation("at least one feature modality must be enabled")
        if (
            self.config.include_depth
            and self.config.include_voxel_features
            and self.config.include_shape
        ):
            # Feature-length identity of the full configuration.
            assert self.config.feature_length == 1715
        self.bag = bag = ParamBag(f"{name}.")
        fv_flat = FV_CHANNELS * FV_RESOLUTION**3
        if self.config.include_voxel_features:
            dims = [fv_flat, *self.config.fv_mlp_hidden, FEATURE_FROM_FV]
            self.mlp = [
                LinearLayer(bag, f"fv_mlp{i}", dims[i], dims[i + 1], rng=rng)
                for i in range(len(dims) - 1)
            ]
        if self.config.include_shape:
            c0, c1 = self.config.shape_cnn_channels
            self.shape_c0 = Conv3dLayer(bag, "shape_c0", 1, c0, stride=2, rng=rng)
            self.shape_c1 = Conv3dLayer(bag, "shape_c1", c0, c1, stride=2, rng=rng)
            flat = c1 * (SHAPE_RESOLUTION // 4) ** 3
            self.shape_out = LinearLayer(bag, "shape_out", flat, FEATURE_FROM_SHAPE, rng=rng)

    @property
    def feature_length(self):
        return self.config.feature_length

    def __call__(self, f_v, v_shape, pooled_depth_flat):
        parts = []
        if self.config.include_voxel_features:
            x = T.reshape(f_v, (1, -1))
            for i, layer in enumerate(self.mlp):
                x = layer(x)
                if i < len(self.mlp) - 1:
                    x = T.relu(x)
            parts.append(T.reshape(x, (-1,)))
        if self.config.include_shape:
            h = T.relu(self.shape_c0(v_shape))
            h = T.relu(self.shape_c1(h))
            h = self.shape_out(T.reshape(h, (1, -1)))
            parts.append(T.reshape(h, (-1,)))
        if self.config.include_depth:
            d = pooled_depth_flat
            if not isinstance(d, T.DiffArray):
                d = T.constant(np.asarray(d).reshape(-1))
            parts.append(d)
        out = parts[0]
        for p in parts[1:]:
            out = T.concat([out, p], axis=0)
        return out

    def params(self):
        return self.bag.params()


class PositionalEmbedding:
    """Learned linear map from 3D template coordinates to feature vectors."""

    def __init__(self, rng, name, out_dim):
        self.bag = bag = ParamBag(f"{name}.")
        self.w = bag.add("w", rng.normal(0.0, 1.0, size=(3, out_dim)))
        self.b = bag.add("b", np.zeros(out_dim))
        if np.linalg.matrix_rank(self.w.values) < 3:
            raise ContractViolation("positional embedding map is rank-deficient")

    def __call__(self, coords):
        coords = T.as_diff(coords)
        return T.add_rowvec(T.matmul(coords, self.w), self.b)

    def check_injective(self, template_vertices):
        """Distinct template vertices must map to distinct embeddings."""
        with T.no_grad():
            emb = self(np.asarray(template_vertices)).values
        if len(np.unique(emb, axis=0)) != len(emb):
            raise ContractViolation("positional embedding collides on template vertices")

    def params(self):
        return self.bag.params()


class GraFormer:
    """Stack of graph-attention blocks ending in a 3D coordinate head."""

    def __init__(self, rng, name, adjacency, feature_len, hidden=HIDDEN_DIM,
                 heads=N_HEADS, blocks=N_BLOCKS, cheb_order=CHEB_ORDER, use_gcn=True):
        if hidden % heads:
            raise ContractViolation("hidden dimension must divide evenly into heads")
        self.adjacency = adjacency
        self.hidden = hidden
        self.heads = heads
        self.blocks = blocks
        self.cheb_order = cheb_order
        self.use_gcn = use_gcn
        self.capture_attention = False
        self.last_attention = None
        self.bag = bag = ParamBag(f"{name}.")
        self.inp = LinearLayer(bag, "inp", feature_len, hidden, rng=rng)
        self.layers = []
        for i in range(blocks):
            prefix = f"block{i}"
            layer = {
                "ln1_g": bag.add(f"{prefix}.ln1.g", np.ones(hidden)),
                "ln1_b": bag.add(f"{prefix}.ln1.b", np.zeros(hidden)),
                "attn_q": LinearLayer(bag, f"{prefix}.attn.q", hidden, hidden, rng=rng),
                "attn_k": LinearLayer(bag, f"{prefix}.attn.k", hidden, hidden, rng=rng),
                "attn_v": LinearLayer(bag, f"{prefix}.attn.v", hidden, hidden, rng=rng),
                "attn_out": LinearLayer(bag, f"{prefix}.attn.out", hidden, hidden, rng=rng),
                "ln2_g": bag.add(f"{prefix}.ln2.g", np.ones(hidden)),
                "ln2_b": bag.add(f"{prefix}.ln2.b", np.zeros(hidden)),
            }
            if use_gcn:
                for k in range(cheb_order):
                    layer[f"cheb_w{k}"] = bag.add(
                        f"{prefix}.cheb.w{k}",
                        rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, hidden)),
                    )
                layer["cheb_b"] = bag.add(f"{prefix}.cheb.b", np.zeros(hidden))
            self.layers.append(layer)
        self.out = LinearLayer(bag, "out", hidden, 3, rng=rng, scale=np.sqrt(1.0 / hidden))

    def _attention(self, layer, x):
        n = x.values.shape[0]
        dk = self.hidden // self.heads
        heads = self.heads

        def split(t):
            return T.transpose(T.reshape(t, (n, heads, dk)), (1, 0, 2))

        q = split(layer["attn_q"](x))
        k = split(layer["attn_k"](x))
        v = split(layer["attn_v"](x))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
        attn = T.softmax(scores, axis=-1)
        if self.capture_attention:
            self.last_attention = attn.values.copy()
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (n, self.hidden))
        projected = layer["attn_out"](ctx)
        if self.use_gcn:
            # The attention's final projection is a graph convolution.
            projected = T.sparse_matmul(self.adjacency.matrix, projected, self.adjacency.matrix)
        return projected

    def _cheb(self, layer, x):
        basis = chebyshev_basis(self.adjacency, x, self.cheb_order)
        y = T.matmul(basis[0], layer["cheb_w0"])
        for k in range(1, self.cheb_order):
            y = T.add(y, T.matmul(basis[k], layer[f"cheb_w{k}"]))
        return T.relu(T.add_rowvec(y, layer["cheb_b"]))

    def __call__(self, node_features):
        node_features = T.as_diff(node_features)
        if node_features.values.shape[0] != self.adjacency.n:
            raise ContractViolation(
                f"node count {node_features.values.shape[0]} does not match "
                f"graph size {self.adjacency.n}"
            )
        x = self.inp(node_features)
        for layer in self.layers:
            h = T.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            x = T.add(x, self._attention(layer, h))
            if self.use_gcn:
                h2 = T.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
                x = T.add(x, self._cheb(layer, h2))
        return self.out(x)

    def params(self):
        return self.bag.params()


def combined_adjacency(hand_adj, obj_adj):
    """Block-diagonal adjacency over the concatenated hand+object graph."""
    matrix = sp.block_diag([hand_adj.matrix, obj_adj.matrix], format="csr")
    return GraphAdjacency(n=hand_adj.n + obj_adj.n, matrix=matrix,
                          note="block-diagonal hand+object")


class ShapeReconstructor:
    """VoxelNet plus the GraFormer branches, as trained after PoseNet.

    Holds the templates, their graph structure, the feature extractors, the
    shared positional embedding, hand/object GraFormers, and optionally the
    refinement GraFormer over the combined graph. Coordinates are predicted
    in normalized cube space.
    """

    def __init__(self, rng, hand_template, object_template, feature_config=None,
                 voxelnet_widths=(8, 16), use_refinement=False, use_gcn=True):
        self.hand_template = hand_template
        self.object_template = object_template
        self.feature_config = feature_config or FeatureConfig()
        self.use_refinement = use_refinement
        self.use_gcn = use_gcn
        feat_len = self.feature_config.feature_length

        self.hand_adj = adjacency_from_faces(hand_template)
        self.obj_adj = adjacency_from_faces(object_template)
        self.voxelnet = VoxelNet(rng, widths=voxelnet_widths)
        self.hand_features = BranchFeatureExtractor(rng, "feat_hand", self.feature_config)
        self.obj_features = BranchFeatureExtractor(rng, "feat_obj", self.feature_config)
        self.embedding = PositionalEmbedding(rng, "embed", feat_len)
        self.embedding.check_injective(hand_template.vertices)
        self.embedding.check_injective(object_template.vertices)
        self.hand_gf = GraFormer(rng, "gf_hand", self.hand_adj, feat_len, use_gcn=use_gcn)
        self.obj_gf = GraFormer(rng, "gf_obj", self.obj_adj, feat_len, use_gcn=use_gcn)
        if use_refinement:
            self.refine_adj = combined_adjacency(self.hand_adj, self.obj_adj)
            self.refine_embedding = PositionalEmbedding(rng, "refine_embed", feat_len)
            self.refine_gf = GraFormer(rng, "gf_refine", self.refine_adj, feat_len,
                                       use_gcn=use_gcn)

    def parts(self):
        parts = [self.voxelnet, self.hand_features, self.obj_features, self.embedding,
                 self.hand_gf, self.obj_gf]
        if self.use_refinement:
            parts += [self.refine_embedding, self.refine_gf]
        return parts

    def params(self):
        out = {}
        for part in self.parts():
            out.update(part.params())
        return out

    def trainable(self):
        return [p for p in self.params().values() if p.requires_grad]

    def load_values(self, named):
        for part in self.parts():
            part.bag.load_values(named)

    def forward(self, vd88, heatmaps):
        """Run the shape stages for one frame.

        vd88 is the binary 88^3 occupancy; heatmaps are the 29 maps at 44^3
        (ground truth during training, PoseNet output at inference). Returns
        a dict with the soft shape grids, F_V, and vertex predictions.
        """
        vin = voxelnet_input(vd88, heatmaps)
        v_hand, v_obj, f_v = self.voxelnet(vin)
        vd44 = pool_depth_to_shape_grid(vd88)
        pooled = vd44.reshape(11, 4, 11, 4, 11, 4).max(axis=(1, 3, 5)).reshape(-1)

        feat_hand = self.hand_features(f_v, v_hand, pooled)
        feat_obj = self.obj_features(f_v, v_obj, pooled)

        emb_hand = self.embedding(self.hand_template.vertices)
        emb_obj = self.embedding(self.object_template.vertices)
        hand_nodes = T.add_rowvec(emb_hand, feat_hand)
        obj_nodes = T.add_rowvec(emb_obj, feat_obj)
        hand_verts = self.hand_gf(hand_nodes)
        obj_verts = self.obj_gf(obj_nodes)
        out = {
            "v_hand": v_hand,
            "v_obj": v_obj,
            "f_v": f_v,
            "hand_verts": hand_verts,
            "obj_verts": obj_verts,
        }
        if self.use_refinement:
            refined_hand, refined_obj = self.refine(hand_verts, obj_verts, feat_hand, feat_obj)
            out["refined_hand"] = refined_hand
            out["refined_obj"] = refined_obj
        return out

    def refine(self, hand_verts, obj_verts, feat_hand, feat_obj):
        """Residual correction from the combined graph of initial shapes."""
        if not self.use_refinement:
            raise ContractViolation("refinement stage is not enabled")
        n_hand = self.hand_adj.n
        initial = T.concat([hand_verts, obj_verts], axis=0)
        shared = T.concat(
            [T.tile_rows(feat_hand, n_hand), T.tile_rows(feat_obj, self.obj_adj.n)], axis=0
        )
        nodes = T.add(self.refine_embedding(initial), shared)
        delta = self.refine_gf(nodes)
        refined = T.add(initial, delta)
        idx_hand = np.arange(n_hand)
        idx_obj = np.arange(n_hand, n_hand + self.obj_adj.n)
        return T.take_rows(refined, idx_hand), T.take_rows(refined, idx_obj)


def shape_loss(pred_hand, gt_hand, pred_obj, gt_obj):
    """Per-branch mean of squared vertex offsets, hand plus object."""
    gt_hand = np.asarray(gt_hand)
    gt_obj = np.asarray(gt_obj)
    pred_hand = T.as_diff(pred_hand)
    pred_obj = T.as_diff(pred_obj)
    if pred_hand.values.shape != gt_hand.shape or pred_obj.values.shape != gt_obj.shape:
        raise ContractViolation(
            f"shape_loss shapes differ: {pred_hand.shape}/{gt_hand.shape}, "
            f"{pred_obj.shape}/{gt_obj.shape}"
        )
    dh = T.sub(pred_hand, T.constant(gt_hand))
    do = T.sub(pred_obj, T.constant(gt_obj))
    return T.add(
        T.mul(T.sum_all(T.mul(dh, dh)), 1.0 / len(gt_hand)),
        T.mul(T.sum_all(T.mul(do, do)), 1.0 / len(gt_obj)),
    )


@dataclass
class ContactConfig:
    """Fingertip attraction and interpenetration repulsion settings (mm)."""

    fingertip_indices: tuple
    attraction_threshold: float = 20.0
    repulsion_threshold: float = 5.0
    attraction_weight: float = 1.0
    repulsion_weight: float = 1.0

    def __post_init__(self):
        if self.attraction_threshold <= 0 or self.repulsion_threshold <= 0:
            raise ContractViolation("contact thresholds must be positive")


def contact_loss(hand_verts, obj_verts, config):
    """Attraction of fingertips to the object plus a proximity repulsion.

    Both terms operate in millimeters. Attraction is the mean squared
    fingertip-to-nearest-object-vertex distance, zeroed beyond the
    attraction threshold. Repulsion averages (threshold - distance)^2 over
    hand/object vertex pairs closer than the repulsion threshold.
    """
    hand = T.as_diff(hand_verts)
    obj = T.as_diff(obj_verts)
    tips = np.asarray(config.fingertip_indices, dtype=np.intp)
    if tips.size and tips.max() >= hand.values.shape[0]:
        raise ContractViolation("fingertip index out of range")
    terms = []
    if tips.size == 0:
        warnings.warn("contact_loss: empty fingertip list, attraction term is 0")
    else:
        tree = cKDTree(obj.values)
        nn = tree.query(hand.values[tips])[1]
        d = T.sub(T.take_rows(hand, tips), T.take_rows(obj, nn))
        d2 = T.sum_last(T.mul(d, d))
        mask = (d2.values <= config.attraction_threshold**2).astype(np.float64)
        attraction = T.mul(T.sum_all(T.mul(d2, T.constant(mask))), 1.0 / tips.size)
        terms.append(T.mul(attraction, config.attraction_weight))

    pairs_hand = []
    pairs_obj = []
    tree_obj = cKDTree(obj.values)
    close = tree_obj.query_ball_point(hand.values, r=config.repulsion_threshold)
    for hi, lst in enumerate(close):
        for oj in lst:
            pairs_hand.append(hi)
            pairs_obj.append(oj)
    if pairs_hand:
        dh = T.sub(T.take_rows(hand, np.array(pairs_hand)), T.take_rows(obj, np.array(pairs_obj)))
        dist = T.sqrt(T.sum_last(T.mul(dh, dh)), eps=1e-12)
        pen = T.sub(config.repulsion_threshold, dist)
        repulsion = T.mul(T.sum_all(T.mul(pen, pen)), 1.0 / len(pairs_hand))
        terms.append(T.mul(repulsion, config.repulsion_weight))

    if not terms:
        return T.constant(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out
