"""The two volumetric CNN stages and their losses.

PoseNet maps the 88^3 binary depth occupancy to 29 keypoint heatmaps at
44^3 (21 hand joints, 8 object box corners; the object head is its own
1x1x1 convolution). VoxelNet maps the pooled occupancy concatenated with
those heatmaps to soft hand/object surface grids in (0, 1), exposing an
intermediate feature volume for the vertex-regression stage.

Both are small encoder/decoder stacks with residual links and configurable
widths; exact layer counts of the lineage architectures are deliberately
not replicated.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .voxel import DEPTH_RESOLUTION, N_KEYPOINTS, SHAPE_RESOLUTION


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ParamBag:
    """Named parameters for one model; names are stable across runs."""

    def __init__(self, prefix=""):
        self.prefix = prefix
        self._params = {}

    def add(self, name, values):
        key = f"{self.prefix}{name}"
        if key in self._params:
            raise ContractViolation(f"duplicate parameter {key}")
        p = T.leaf(values, requires_grad=True)
        self._params[key] = p
        return p

    def params(self):
        return dict(self._params)

    def trainable(self):
        return [p for p in self._params.values() if p.requires_grad]

    def set_trainable(self, flag):
        for p in self._params.values():
            p.requires_grad = bool(flag)

    def load_values(self, named):
        for key, p in self._params.items():
            if key not in named:
                raise ContractViolation(f"checkpoint is missing parameter {key}")
            arr = np.asarray(named[key], dtype=np.float64)
            if arr.shape != p.values.shape:
                raise ContractViolation(
                    f"checkpoint shape mismatch for {key}: {arr.shape} vs {p.values.shape}"
                )
            p.values[...] = arr
            p.grad = None


class Conv3dLayer:
    def __init__(self, bag, name, c_in, c_out, k=3, stride=1, padding=None, rng=None):
        self.stride = stride
        self.padding = (k // 2) if padding is None else padding
        fan_in = c_in * k**3
        self.w = bag.add(f"{name}.w", he_normal(rng, (c_out, c_in, k, k, k), fan_in))
        self.b = bag.add(f"{name}.b", np.zeros(c_out))

    def __call__(self, x):
        return T.add_channel_bias(T.conv3d(x, self.w, self.stride, self.padding), self.b)


class LinearLayer:
    def __init__(self, bag, name, n_in, n_out, rng=None, scale=None):
        std = np.sqrt(2.0 / n_in) if scale is None else scale
        self.w = bag.add(f"{name}.w", rng.normal(0.0, std, size=(n_in, n_out)))
        self.b = bag.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, x):
        return T.add_rowvec(T.matmul(x, self.w), self.b)


def _check_volume(x, channels, resolution, what):
    shape = x.values.shape if isinstance(x, T.DiffArray) else np.shape(x)
    if shape != (channels, resolution, resolution, resolution):
        raise ContractViolation(
            f"{what}: expected ({channels}, {resolution}^3), got {shape}"
        )


class PoseNet:
    """Encoder/decoder 3D CNN: occupancy (1, 88^3) -> heatmaps (29, 44^3)."""

    def __init__(self, rng, widths=(8, 16, 32)):
        w0, w1, w2 = widths
        self.widths = tuple(widths)
        self.bag = bag = ParamBag("posenet.")
        self.stem = Conv3dLayer(bag, "stem", 1, w0, stride=2, rng=rng)
        self.enc1 = Conv3dLayer(bag, "enc1", w0, w1, stride=2, rng=rng)
        self.enc2 = Conv3dLayer(bag, "enc2", w1, w2, stride=2, rng=rng)
        self.mid = Conv3dLayer(bag, "mid", w2, w2, rng=rng)
        self.dec1 = Conv3dLayer(bag, "dec1", w2, w1, rng=rng)
        self.dec0 = Conv3dLayer(bag, "dec0", w1, w0, rng=rng)
        self.head_hand = Conv3dLayer(bag, "head_hand", w0, 21, k=1, rng=rng)
        # The object corners get a dedicated 1x1x1 back-layer.
        self.head_obj = Conv3dLayer(bag, "head_obj", w0, 8, k=1, rng=rng)

    def __call__(self, vd):
        if isinstance(vd, np.ndarray):
            if vd.shape == (DEPTH_RESOLUTION,) * 3:
                vd = vd[None]
            vd = T.constant(vd)
        _check_volume(vd, 1, DEPTH_RESOLUTION, "PoseNet input")
        x0 = T.relu(self.stem(vd))
        x1 = T.relu(self.enc1(x0))
        x2 = T.relu(self.enc2(x1))
        m = T.add(T.relu(self.mid(x2)), x2)
        d1 = T.add(T.relu(self.dec1(T.upsample3d(m))), x1)
        d0 = T.add(T.relu(self.dec0(T.upsample3d(d1))), x0)
        return T.concat([self.head_hand(d0), self.head_obj(d0)], axis=0)

    def params(self):
        return self.bag.params()


VOXELNET_IN_CHANNELS = 1 + N_KEYPOINTS  # pooled occupancy + heatmaps
FV_CHANNELS = 8
FV_RESOLUTION = SHAPE_RESOLUTION // 2


class VoxelNet:
    """Shape stage: (30, 44^3) -> hand/object soft occupancy + features F_V."""

    def __init__(self, rng, widths=(8, 16)):
        w0, w1 = widths
        self.widths = tuple(widths)
        self.bag = bag = ParamBag("voxelnet.")
        self.reduce = Conv3dLayer(bag, "reduce", VOXELNET_IN_CHANNELS, w0, k=1, rng=rng)
        self.c1 = Conv3dLayer(bag, "c1", w0, w0, rng=rng)
        self.d1 = Conv3dLayer(bag, "d1", w0, w1, stride=2, rng=rng)
        self.d2 = Conv3dLayer(bag, "d2", w1, w1, rng=rng)
        self.fv = Conv3dLayer(bag, "fv", w1, FV_CHANNELS, rng=rng)
        self.u1 = Conv3dLayer(bag, "u1", w1, w0, rng=rng)
        self.head_hand = Conv3dLayer(bag, "head_hand", w0, 1, k=1, rng=rng)
        # Dedicated final convolution for the object shape channel.
        self.head_obj = Conv3dLayer(bag, "head_obj", w0, 1, rng=rng)

    def __call__(self, x):
        if isinstance(x, np.ndarray):
            x = T.constant(x)
        _check_volume(x, VOXELNET_IN_CHANNELS, SHAPE_RESOLUTION, "VoxelNet input")
        r = T.relu(self.reduce(x))
        c1 = T.add(T.relu(self.c1(r)), r)
        d1 = T.relu(self.d1(c1))
        d2 = T.add(T.relu(self.d2(d1)), d1)
        fv = T.relu(self.fv(d2))
        u1 = T.add(T.relu(self.u1(T.upsample3d(d2))), c1)
        v_hand = T.sigmoid(self.head_hand(u1))
        v_obj = T.sigmoid(self.head_obj(u1))
        return v_hand, v_obj, fv

    def params(self):
        return self.bag.params()


def pool_depth_to_shape_grid(vd88):
    """Occupancy view of V_D at 44^3: max over each 2^3 block."""
    r = DEPTH_RESOLUTION // 2
    return np.asarray(vd88).reshape(r, 2, r, 2, r, 2).max(axis=(1, 3, 5))


def mean_pool_depth(vd88):
    """Average-pooled V_D at 44^3, the occupancy channel of VoxelNet input."""
    r = DEPTH_RESOLUTION // 2
    return np.asarray(vd88).reshape(r, 2, r, 2, r, 2).mean(axis=(1, 3, 5))


def voxelnet_input(vd88, heatmaps):
    """Stack pooled occupancy with the 29 heatmap channels: (30, 44^3)."""
    hm = np.asarray(heatmaps)
    if hm.shape != (N_KEYPOINTS,) + (SHAPE_RESOLUTION,) * 3:
        raise ContractViolation(f"expected ({N_KEYPOINTS}, 44^3) heatmaps, got {hm.shape}")
    return np.concatenate([mean_pool_depth(vd88)[None], hm], axis=0)


def pose_loss(pred, gt):
    """Summed squared heatmap error over all keypoints and voxels."""
    gt = np.asarray(gt)
    pred = T.as_diff(pred)
    if pred.values.shape != gt.shape:
        raise ContractViolation(f"pose_loss shapes differ: {pred.shape} vs {gt.shape}")
    d = T.sub(pred, T.constant(gt))
    return T.sum_all(T.mul(d, d))


def voxel_bce(pred, gt, eps=1e-7):
    """Mean binary cross-entropy over one soft-occupancy grid."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = T.as_diff(pred)
    if pred.values.shape != gt.shape:
        raise ContractViolation(f"voxel_bce shapes differ: {pred.shape} vs {gt.shape}")
    p = T.clip(pred, eps, 1.0 - eps)
    ll = T.add(T.mul(T.log(p), T.constant(gt)), T.mul(T.log(T.sub(1.0, p)), T.constant(1.0 - gt)))
    return T.mul(T.sum_all(ll), -1.0 / gt.size)


def voxel_loss(pred_hand, gt_hand, pred_obj, gt_obj):
    """Hand plus object BCE terms."""
    return T.add(voxel_bce(pred_hand, gt_hand), voxel_bce(pred_obj, gt_obj))
