"""Conv backbone and the four aggregation heads (GeM, ConvAP, MixVPR, NetVLAD)."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ARCHITECTURES = ("gem", "convap", "mixvpr", "netvlad")


@dataclass
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    residual_group: str | None = None

    @property
    def pad(self) -> int:
        return self.kernel // 2


@dataclass
class BackboneSpec:
    blocks: list[ConvBlock]
    in_channels: int = 3
    image_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        for prev, blk in zip(self.blocks, self.blocks[1:]):
            g = blk.residual_group
            if g is not None and g == prev.residual_group:
                if blk.out_channels != prev.out_channels or blk.stride != 1:
                    raise ValueError(f"residual group {g!r}: members need equal out_channels and stride 1")
        seen, last = set(), None
        for blk in self.blocks:
            g = blk.residual_group
            if g is not None and g in seen and g != last:
                raise ValueError(f"residual group {g!r} must be contiguous")
            if g is not None:
                seen.add(g)
            last = g

    def has_skip(self, i: int) -> bool:
        g = self.blocks[i].residual_group
        return i > 0 and g is not None and self.blocks[i - 1].residual_group == g

    def output_shape(self) -> tuple[int, int, int]:
        h, w = self.image_size
        for blk in self.blocks:
            h = T.conv_out_size(h, blk.kernel, blk.stride, blk.pad)
            w = T.conv_out_size(w, blk.kernel, blk.stride, blk.pad)
        return self.blocks[-1].out_channels, h, w


def init_backbone(spec: BackboneSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    cin = spec.in_channels
    for i, blk in enumerate(spec.blocks):
        fan_in = cin * blk.kernel * blk.kernel
        w = rng.standard_normal((blk.out_channels, cin, blk.kernel, blk.kernel)) * np.sqrt(2.0 / fan_in)
        if spec.has_skip(i):
            w *= 0.5
        params[f"conv{i}.weight"] = Tensor(w.astype(np.float32), requires_grad=True)
        params[f"conv{i}.bias"] = Tensor(np.zeros(blk.out_channels, np.float32), requires_grad=True)
        cin = blk.out_channels
    return params


def backbone_forward(spec: BackboneSpec, params: dict[str, Tensor], image: Tensor) -> Tensor:
    """Final feature map X^L; ReLU after each block, skip added before the ReLU."""
    unbatched = image.ndim == 3
    x = T.reshape(image, (1,) + image.shape) if unbatched else image
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"backbone expects {spec.in_channels} input channels, got {x.shape[1]}")
    for i, blk in enumerate(spec.blocks):
        y = T.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], blk.stride, blk.pad)
        if spec.has_skip(i):
            y = T.add(y, x)
        x = T.relu(y)
    return T.reshape(x, x.shape[1:]) if unbatched else x


# ---------------------------------------------------------------- heads

def gem_pool(x: Tensor, p, eps: float = 1e-6) -> Tensor:
    """Generalized mean over H, W: (mean(X^p))^(1/p). (c,H,W) -> (c,) or (N,c,H,W) -> (N,c)."""
    if np.any(x.data < 0):
        raise T.DomainError("gem_pool expects non-negative activations")
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=x.dtype))
    xp = T.power(T.clamp_min(x, eps), p)
    m = T.mean(xp, axis=(-2, -1))
    return T.power(m, T.power(p, -1.0))


def conv_ap_pool(x: Tensor, block: int) -> Tensor:
    """Mean over non-overlapping block x block windows, flattened channel-major."""
    unbatched = x.ndim == 3
    if unbatched:
        x = T.reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    if h % block or w % block:
        raise ShapeError(f"conv_ap_pool: block size {block} does not divide {h}x{w}")
    y = T.reshape(x, (n, c, h // block, block, w // block, block))
    y = T.mean(y, axis=(3, 5))
    y = T.reshape(y, (n, -1))
    return T.reshape(y, (-1,)) if unbatched else y


@dataclass
class GeMHead:
    p: Tensor
    kind = "gem"

    def params(self) -> dict[str, Tensor]:
        return {"gem.p": self.p}

    def forward(self, x: Tensor) -> Tensor:
        return gem_pool(x, self.p)

    def descriptor_dim(self, feat_shape) -> int:
        return feat_shape[0]

    def drop_input_channels(self, idx) -> None:
        pass

    def meta(self) -> dict:
        return {}


@dataclass
class ConvAPHead:
    block: int = 2
    kind = "convap"

    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        return conv_ap_pool(x, self.block)

    def descriptor_dim(self, feat_shape) -> int:
        c, h, w = feat_shape
        return c * (h // self.block) * (w // self.block)

    def drop_input_channels(self, idx) -> None:
        pass

    def meta(self) -> dict:
        return {"block": self.block}


@dataclass
class MixVPRHead:
    """Residual token-mixing MLPs over flattened spatial rows, then depth and row projections.

    ``w1``/``w2`` are (hw, hw) per block, ``wd`` is (d_depth, c), ``wr`` is (4, hw).
    """

    w1: list[Tensor]
    w2: list[Tensor]
    wd: Tensor
    wr: Tensor
    dense_depth: int = 0
    kind = "mixvpr"

    def __post_init__(self):
        if not self.dense_depth:
            self.dense_depth = self.wd.shape[0]
        hw = self.wr.shape[1]
        for a, b in zip(self.w1, self.w2):
            if a.shape != (hw, hw) or b.shape != (hw, hw):
                raise ShapeError(f"MixVPR mixer weights must be ({hw},{hw}), got {a.shape}, {b.shape}")

    @property
    def depth(self) -> int:
        return self.wd.shape[0]

    def params(self) -> dict[str, Tensor]:
        out = {}
        for n, (a, b) in enumerate(zip(self.w1, self.w2)):
            out[f"mix{n}.w1"] = a
            out[f"mix{n}.w2"] = b
        out["mix.wd"] = self.wd
        out["mix.wr"] = self.wr
        return out

    def forward(self, x: Tensor) -> Tensor:
        return mixvpr_forward(x, self)

    def descriptor_dim(self, feat_shape) -> int:
        return self.depth * self.wr.shape[0]

    def drop_input_channels(self, idx) -> None:
        if len(idx):
            self.wd = Tensor(np.delete(self.wd.data, idx, axis=1), requires_grad=True)

    def meta(self) -> dict:
        return {"blocks": len(self.w1), "dense_depth": self.dense_depth}


def mixvpr_forward(x: Tensor, head: MixVPRHead) -> Tensor:
    unbatched = x.ndim == 3
    if unbatched:
        x = T.reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    hw = h * w
    if head.wr.shape[1] != hw:
        raise ShapeError(f"mixvpr: feature map has {hw} spatial cells, mixer expects {head.wr.shape[1]}")
    if head.wd.shape[1] != c:
        raise ShapeError(f"mixvpr: feature map has {c} channels, depth projection expects {head.wd.shape[1]}")
    f = T.reshape(x, (n, c, hw))
    for w1, w2 in zip(head.w1, head.w2):
        hidden = T.relu(T.matmul(f, T.transpose2d(w1)))
        f = T.add(T.matmul(hidden, T.transpose2d(w2)), f)
    fd = T.matmul(T.swap_last(f), T.transpose2d(head.wd))  # (n, hw, d)
    y = T.matmul(T.swap_last(fd), T.transpose2d(head.wr))  # (n, d, 4)
    y = T.reshape(y, (n, -1))
    return T.reshape(y, (-1,)) if unbatched else y


@dataclass
class NetVLADHead:
    """Soft-assignment VLAD. ``centers`` (K, D); assignment is a 1x1 conv given as (K, D) + (K,)."""

    centers: Tensor
    assign_w: Tensor
    assign_b: Tensor
    alpha: float = 100.0
    normalize_input: bool = True
    dense_clusters: int = 0
    kind = "netvlad"

    def __post_init__(self):
        if not self.dense_clusters:
            self.dense_clusters = self.clusters
        k, d = self.centers.shape
        if self.assign_w.shape != (k, d) or self.assign_b.shape != (k,):
            raise ShapeError(f"NetVLAD assignment shapes {self.assign_w.shape}/{self.assign_b.shape} do not match centers {(k, d)}")

    @classmethod
    def from_centers(cls, centers: np.ndarray, alpha: float = 100.0, **kw) -> "NetVLADHead":
        w, b = assignment_from_centers(centers, alpha)
        f32 = np.float32
        return cls(Tensor(np.asarray(centers, f32), requires_grad=True), Tensor(w.astype(f32), requires_grad=True),
                   Tensor(b.astype(f32), requires_grad=True), alpha, **kw)

    @property
    def clusters(self) -> int:
        return self.centers.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"vlad.centers": self.centers, "vlad.assign_w": self.assign_w, "vlad.assign_b": self.assign_b}

    def forward(self, x: Tensor) -> Tensor:
        return netvlad_forward(x, self)

    def descriptor_dim(self, feat_shape) -> int:
        return self.clusters * self.centers.shape[1]

    def drop_input_channels(self, idx) -> None:
        if len(idx):
            self.centers = Tensor(np.delete(self.centers.data, idx, axis=1), requires_grad=True)
            self.assign_w = Tensor(np.delete(self.assign_w.data, idx, axis=1), requires_grad=True)

    def meta(self) -> dict:
        return {"alpha": self.alpha, "normalize_input": self.normalize_input, "dense_clusters": self.dense_clusters}


def assignment_from_centers(centers: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(centers, dtype=np.float64)
    return 2.0 * alpha * c, -alpha * np.sum(c * c, axis=1)


def netvlad_residuals(x: Tensor, head: NetVLADHead) -> Tensor:
    """V_z = sum_i a_iz (T_i - C_z), shape (N, K, D), before any normalization."""
    unbatched = x.ndim == 3
    if unbatched:
        x = T.reshape(x, (1,) + x.shape)
    n, d, h, w = x.shape
    k, dc = head.centers.shape
    if dc != d:
        raise ShapeError(f"netvlad: centers have {dc} columns but features have {d} channels")
    t = T.swap_last(T.reshape(x, (n, d, h * w)))  # (n, hw, d)
    if head.normalize_input:
        t = T.normalize(t, axis=2)
    logits = T.matmul(t, T.transpose2d(head.assign_w))
    logits = T.add(logits, T.expand(T.reshape(head.assign_b, (1, 1, k)), (n, h * w, k)))
    a = T.softmax(logits, axis=2)  # (n, hw, k)
    weighted = T.matmul(T.swap_last(a), t)  # (n, k, d)
    mass = T.reshape(T.tsum(a, axis=1), (n, k, 1))
    shifted = T.mul(T.expand(mass, (n, k, d)), T.expand(T.reshape(head.centers, (1, k, d)), (n, k, d)))
    v = T.sub(weighted, shifted)
    return T.reshape(v, (k, d)) if unbatched else v


def netvlad_forward(x: Tensor, head: NetVLADHead) -> Tensor:
    unbatched = x.ndim == 3
    v = netvlad_residuals(x if not unbatched else T.reshape(x, (1,) + x.shape), head)
    n = v.shape[0]
    v = T.normalize(v, axis=2)
    v = T.normalize(T.reshape(v, (n, -1)), axis=1)
    return T.reshape(v, (-1,)) if unbatched else v


def l2_normalize(d) -> Tensor:
    """Unit-norm copy of a descriptor; rejects the zero vector."""
    d = d if isinstance(d, Tensor) else Tensor(d)
    norms = np.linalg.norm(d.data.astype(np.float64), axis=-1)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero descriptor")
    return T.normalize(d, axis=-1)


# ---------------------------------------------------------------- model graph

@dataclass
class VPRModel:
    """Backbone + one aggregation head; descriptors are l2-normalized."""

    arch: str
    spec: BackboneSpec
    backbone: dict[str, Tensor]
    head: object
    dense_widths: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if not self.dense_widths:
            self.dense_widths = [b.out_channels for b in self.spec.blocks]

    def params(self) -> dict[str, Tensor]:
        return {**self.backbone, **self.head.params()}

    def parameters(self) -> list[Tensor]:
        return list(self.params().values())

    def features(self, images: Tensor) -> Tensor:
        return backbone_forward(self.spec, self.backbone, images)

    def forward(self, images: Tensor) -> Tensor:
        unbatched = images.ndim == 3
        x = self.features(T.reshape(images, (1,) + images.shape) if unbatched else images)
        d = self.head.forward(x)
        if self.arch != "netvlad":
            d = T.normalize(d, axis=1)
        return T.reshape(d, (-1,)) if unbatched else d

    __call__ = forward

    def embed(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        out = [self.forward(Tensor(images[i : i + batch])).data for i in range(0, len(images), batch)]
        return np.concatenate(out, axis=0)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.spec.output_shape()

    @property
    def descriptor_dim(self) -> int:
        return self.head.descriptor_dim(self.feature_shape)

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params().values()))

    def clone(self) -> "VPRModel":
        return copy.deepcopy(self)

    def check_contract(self) -> None:
        c, h, w = self.feature_shape
        want = {
            "gem": c,
            "convap": c * (h // getattr(self.head, "block", 1)) * (w // getattr(self.head, "block", 1)),
            "mixvpr": getattr(self.head, "depth", 0) * 4,
            "netvlad": getattr(self.head, "clusters", 0) * c,
        }[self.arch]
        if self.descriptor_dim != want:
            raise ShapeError(f"{self.arch}: descriptor dim {self.descriptor_dim} breaks contract {want}")


def build_model(arch: str, spec: BackboneSpec, seed: int = 0, *, gem_p: float = 3.0, ap_block: int = 2,
                mixer_blocks: int = 1, mix_depth: int | None = None, clusters: int = 8,
                vlad_alpha: float = 100.0) -> VPRModel:
    rng = np.random.default_rng(seed)
    backbone = init_backbone(spec, rng)
    c, h, w = spec.output_shape()
    if arch == "gem":
        head = GeMHead(Tensor(np.asarray(gem_p, np.float32), requires_grad=True))
    elif arch == "convap":
        head = ConvAPHead(ap_block)
    elif arch == "mixvpr":
        hw = h * w
        depth = mix_depth or c
        f32 = np.float32
        w1 = [Tensor((rng.standard_normal((hw, hw)) * 0.02).astype(f32), requires_grad=True) for _ in range(mixer_blocks)]
        w2 = [Tensor((rng.standard_normal((hw, hw)) * 0.02).astype(f32), requires_grad=True) for _ in range(mixer_blocks)]
        wd = Tensor((rng.standard_normal((depth, c)) / np.sqrt(c)).astype(f32), requires_grad=True)
        wr = Tensor((rng.standard_normal((4, hw)) / np.sqrt(hw)).astype(f32), requires_grad=True)
        head = MixVPRHead(w1, w2, wd, wr)
    elif arch == "netvlad":
        centers = rng.standard_normal((clusters, c))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        head = NetVLADHead.from_centers(centers, vlad_alpha)
    else:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return VPRModel(arch, spec, backbone, head)


def init_netvlad_centers(model: VPRModel, images: np.ndarray, seed: int = 0, samples: int = 4096) -> None:
    """Re-seed NetVLAD centers by k-means over sampled (normalized) local features."""
    from .kmeans import kmeans

    head = model.head
    feats = model.features(Tensor(images)).data  # (n, D, h, w)
    t = feats.transpose(0, 2, 3, 1).reshape(-1, feats.shape[1]).astype(np.float64)
    if head.normalize_input:
        t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    rng = np.random.default_rng(seed)
    if len(t) > samples:
        t = t[rng.choice(len(t), samples, replace=False)]
    centers = kmeans(t, head.clusters, seed=seed).centers
    w, b = assignment_from_centers(centers, head.alpha)
    dt = head.centers.dtype
    head.centers = Tensor(centers.astype(dt), requires_grad=True)
    head.assign_w = Tensor(w.astype(dt), requires_grad=True)
    head.assign_b = Tensor(b.astype(dt), requires_grad=True)


def default_backbone(image_size=(32, 32), widths=(16, 32, 32, 64)) -> BackboneSpec:
    """Four 3x3 blocks (stride 2, 2, 1, 1); the middle pair shares a residual group."""
    blocks = [
        ConvBlock(widths[0], 3, 2),
        ConvBlock(widths[1], 3, 2, "res"),
        ConvBlock(widths[2], 3, 1, "res"),
        ConvBlock(widths[3], 3, 1),
    ]
    return BackboneSpec(blocks, 3, tuple(image_size))
