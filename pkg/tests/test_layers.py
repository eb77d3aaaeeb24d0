import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vprprune import tensor as T
from vprprune.layers import (
    BackboneSpec,
    ConvBlock,
    MixVPRHead,
    NetVLADHead,
    assignment_from_centers,
    backbone_forward,
    build_model,
    conv_ap_pool,
    default_backbone,
    gem_pool,
    init_backbone,
    l2_normalize,
    mixvpr_forward,
    netvlad_forward,
    netvlad_residuals,
)
from vprprune.tensor import DomainError, ShapeError, Tensor, finite_diff_check

SMALL = BackboneSpec([ConvBlock(4, 3, 2), ConvBlock(6, 3, 1, "r"), ConvBlock(6, 3, 1, "r")], 2, (8, 8))


# ---------------------------------------------------------------- backbone

def test_identity_block_passes_input_through():
    spec = BackboneSpec([ConvBlock(1, 1, 1)], 1, (3, 3))
    params = {"conv0.weight": Tensor(np.ones((1, 1, 1, 1))), "conv0.bias": Tensor(np.zeros(1))}
    img = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    np.testing.assert_array_equal(backbone_forward(spec, params, Tensor(img)).data, img)


def test_two_blocks_equal_hand_composition(rng):
    spec = BackboneSpec([ConvBlock(3, 3, 2), ConvBlock(5, 1, 1)], 2, (6, 6))
    params = init_backbone(spec, rng)
    x = Tensor(rng.standard_normal((2, 6, 6)))
    h = T.relu(T.conv2d(x, params["conv0.weight"], params["conv0.bias"], 2, 1))
    want = T.relu(T.conv2d(h, params["conv1.weight"], params["conv1.bias"], 1, 0))
    assert backbone_forward(spec, params, x).data.tobytes() == want.data.tobytes()


def test_residual_block_with_zero_weights_is_relu_of_input(rng):
    spec = BackboneSpec([ConvBlock(3, 1, 1, "g"), ConvBlock(3, 3, 1, "g")], 3, (4, 4))
    params = init_backbone(spec, rng)
    params["conv1.weight"] = Tensor(np.zeros((3, 3, 3, 3)))
    x = Tensor(rng.standard_normal((3, 4, 4)))
    first = T.relu(T.conv2d(x, params["conv0.weight"], params["conv0.bias"]))
    np.testing.assert_allclose(backbone_forward(spec, params, x).data, T.relu(first).data)


def test_residual_group_rejects_width_or_stride_change():
    with pytest.raises(ValueError):
        BackboneSpec([ConvBlock(4, 3, 1, "g"), ConvBlock(8, 3, 1, "g")])
    with pytest.raises(ValueError):
        BackboneSpec([ConvBlock(4, 3, 1, "g"), ConvBlock(4, 3, 2, "g")])
    with pytest.raises(ValueError, match="contiguous"):
        BackboneSpec([ConvBlock(4, 3, 1, "g"), ConvBlock(4, 3, 1, "h"), ConvBlock(4, 3, 1, "g")])


def test_backbone_rejects_wrong_channel_count(rng):
    params = init_backbone(SMALL, rng)
    with pytest.raises(ShapeError):
        backbone_forward(SMALL, params, Tensor(np.zeros((3, 8, 8))))


def test_default_backbone_output_shape():
    assert default_backbone().output_shape() == (64, 8, 8)


# ---------------------------------------------------------------- GeM

@pytest.mark.parametrize("p", [1.0, 2.0, 3.0, 5.0])
def test_gem_constant_map_returns_constant(p):
    x = Tensor(np.full((3, 4, 4), 0.7))
    np.testing.assert_allclose(gem_pool(x, p).data, 0.7, rtol=1e-5)


def test_gem_p1_is_average_pooling(rng):
    x = rng.uniform(0.1, 2.0, (3, 4, 5))
    np.testing.assert_allclose(gem_pool(Tensor(x), 1.0).data, x.mean(axis=(1, 2)), rtol=1e-5)


def test_gem_hand_value():
    x = Tensor(np.array([0.0, 0.0, 0.0, 8.0]).reshape(1, 2, 2))
    assert float(gem_pool(x, 3.0).data[0]) == pytest.approx(128 ** (1 / 3), abs=1e-4)
    assert 128 ** (1 / 3) == pytest.approx(5.0397, abs=1e-4)


def test_gem_rejects_negative_activation():
    with pytest.raises(DomainError):
        gem_pool(Tensor(-np.ones((1, 2, 2))), 3.0)


def test_gem_gradient_in_input_and_p(rng):
    x0 = rng.uniform(0.2, 1.5, (2, 3, 3))
    c = Tensor(rng.standard_normal(2))
    p = Tensor(np.float64(2.5))
    assert finite_diff_check(lambda x: T.tsum(T.mul(gem_pool(x, p), c)), x0) <= 1e-4
    assert finite_diff_check(lambda q: T.tsum(T.mul(gem_pool(Tensor(x0), T.reshape(q, ())), c)), np.array([2.5])) <= 1e-4


# ---------------------------------------------------------------- ConvAP

def test_conv_ap_hand_value():
    np.testing.assert_allclose(conv_ap_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2).data, [2.5])


def test_conv_ap_constant_and_identity(rng):
    np.testing.assert_allclose(conv_ap_pool(Tensor(np.full((2, 4, 4), 3.0)), 2).data, 3.0)
    x = rng.standard_normal((3, 4, 4))
    np.testing.assert_allclose(conv_ap_pool(Tensor(x), 1).data, x.reshape(-1), rtol=1e-6)


def test_conv_ap_block_means_against_loop(rng):
    x = rng.standard_normal((3, 6, 4))
    want = [x[c, i : i + 2, j : j + 2].mean() for c in range(3) for i in range(0, 6, 2) for j in range(0, 4, 2)]
    np.testing.assert_allclose(conv_ap_pool(Tensor(x), 2).data, want, rtol=1e-5)


def test_conv_ap_rejects_non_divisible_block():
    with pytest.raises(ShapeError):
        conv_ap_pool(Tensor(np.zeros((1, 5, 4))), 2)


# ---------------------------------------------------------------- MixVPR

def mixvpr_reference(x, w1s, w2s, wd, wr):
    """Straight-line float64 token-mixing reference on one feature map."""
    c, h, w = x.shape
    f = x.reshape(c, h * w).astype(np.float64)
    for w1, w2 in zip(w1s, w2s):
        f = np.maximum(f @ w1.T, 0.0) @ w2.T + f
    fd = f.T @ wd.T  # hw x d
    y = fd.T @ wr.T  # d x 4
    return y.reshape(-1)


def _mix_head(rng, c=3, hw=4, depth=None, blocks=1):
    w1 = [Tensor(rng.standard_normal((hw, hw))) for _ in range(blocks)]
    w2 = [Tensor(rng.standard_normal((hw, hw))) for _ in range(blocks)]
    wd = Tensor(rng.standard_normal((depth or c, c)))
    wr = Tensor(rng.standard_normal((4, hw)))
    return MixVPRHead(w1, w2, wd, wr)


def test_mixvpr_matches_reference(rng):
    head = _mix_head(rng)
    x = rng.standard_normal((3, 2, 2))
    want = mixvpr_reference(x, [w.data for w in head.w1], [w.data for w in head.w2], head.wd.data, head.wr.data)
    np.testing.assert_allclose(mixvpr_forward(Tensor(x), head).data, want, atol=1e-6)


def test_mixvpr_zero_mixers_are_identity(rng):
    hw = 4
    zero = MixVPRHead([Tensor(np.zeros((hw, hw)))], [Tensor(np.zeros((hw, hw)))],
                      Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal((4, hw))))
    none = MixVPRHead([], [], zero.wd, zero.wr)
    x = Tensor(rng.standard_normal((3, 2, 2)))
    np.testing.assert_allclose(mixvpr_forward(x, zero).data, mixvpr_forward(x, none).data, rtol=1e-6)


def test_mixvpr_one_hot_projections_reorder_entries(rng):
    hw = 4
    head = MixVPRHead([], [], Tensor(np.eye(3)), Tensor(np.eye(4)))
    x = rng.standard_normal((3, 2, 2))
    y = mixvpr_forward(Tensor(x), head).data
    np.testing.assert_allclose(np.sort(y), np.sort(x.reshape(-1)), rtol=1e-6)
    np.testing.assert_allclose(y, x.reshape(3, hw).reshape(-1), rtol=1e-6)


def test_mixvpr_descriptor_is_depth_times_four(rng):
    head = _mix_head(rng, c=3, hw=4, depth=5)
    assert mixvpr_forward(Tensor(rng.standard_normal((3, 2, 2))), head).shape == (20,)


def test_mixvpr_rejects_spatial_mismatch(rng):
    with pytest.raises(ShapeError, match="spatial"):
        mixvpr_forward(Tensor(np.zeros((3, 3, 3))), _mix_head(rng))


# ---------------------------------------------------------------- NetVLAD

def netvlad_reference(x, centers, w, b, normalize_input=True):
    d = x.shape[0]
    t = x.reshape(d, -1).T.astype(np.float64)
    if normalize_input:
        t = t / np.linalg.norm(t, axis=1, keepdims=True)
    logits = t @ w.T + b
    a = np.exp(logits - logits.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    v = np.stack([(a[:, z : z + 1] * (t - centers[z])).sum(axis=0) for z in range(len(centers))])
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    v = v.reshape(-1)
    return v / np.linalg.norm(v)


def test_netvlad_matches_reference(rng):
    centers = rng.standard_normal((3, 4))
    head = NetVLADHead.from_centers(centers, alpha=2.0)
    x = rng.standard_normal((4, 3, 3))
    want = netvlad_reference(x, centers, *assignment_from_centers(centers, 2.0))
    np.testing.assert_allclose(netvlad_forward(Tensor(x), head).data, want, atol=1e-6)


def test_netvlad_single_cluster_sums_residuals(rng):
    c = rng.standard_normal((1, 4))
    head = NetVLADHead.from_centers(c, normalize_input=False)
    x = rng.standard_normal((4, 2, 3))
    t = x.reshape(4, -1).T
    np.testing.assert_allclose(netvlad_residuals(Tensor(x), head).data[0], (t - c[0]).sum(axis=0), rtol=1e-5)


def test_netvlad_zero_residuals():
    c = np.array([[0.6, 0.8], [0.6, 0.8]])
    head = NetVLADHead.from_centers(c)
    x = np.broadcast_to(c[0][:, None, None], (2, 2, 2)).copy()
    np.testing.assert_allclose(netvlad_residuals(Tensor(x), head).data, 0.0, atol=1e-6)


def test_netvlad_descriptor_8192():
    rng = np.random.default_rng(0)
    head = NetVLADHead.from_centers(rng.standard_normal((64, 128)))
    assert head.descriptor_dim((128, 2, 2)) == 8192
    assert netvlad_forward(Tensor(rng.standard_normal((128, 2, 2))), head).shape == (8192,)


def test_netvlad_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        netvlad_forward(Tensor(np.ones((5, 2, 2))), NetVLADHead.from_centers(rng.standard_normal((2, 4))))


@given(seed=st.integers(0, 2**16), k=st.integers(2, 5))
@settings(max_examples=20)
def test_netvlad_cluster_permutation_equivariance(seed, k):
    rng = np.random.default_rng(seed)
    d = 3
    centers = rng.standard_normal((k, d))
    head = NetVLADHead.from_centers(centers, alpha=3.0)
    perm = rng.permutation(k)
    permuted = NetVLADHead(Tensor(head.centers.data[perm]), Tensor(head.assign_w.data[perm]),
                           Tensor(head.assign_b.data[perm]), head.alpha)
    x = Tensor(rng.standard_normal((d, 2, 2)))
    base = netvlad_forward(x, head).data.reshape(k, d)
    np.testing.assert_allclose(netvlad_forward(x, permuted).data.reshape(k, d), base[perm], atol=1e-6)


# ---------------------------------------------------------------- normalization

def test_l2_normalize_cases():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-7)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(l2_normalize(u).data, u)
    with pytest.raises(ValueError):
        l2_normalize(np.zeros(3))


@given(v=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_l2_normalize_unit_norm(v):
    assert abs(np.linalg.norm(l2_normalize(np.array(v, dtype=np.float64)).data) - 1.0) <= 1e-6


# ---------------------------------------------------------------- whole models

@pytest.mark.parametrize("arch", ["gem", "convap", "mixvpr", "netvlad"])
def test_descriptor_contracts(arch):
    model = build_model(arch, SMALL, seed=0, clusters=3)
    model.check_contract()
    c, h, w = model.feature_shape
    want = {"gem": c, "convap": c * (h // 2) * (w // 2), "mixvpr": c * 4, "netvlad": 3 * c}[arch]
    d = model.forward(Tensor(np.random.default_rng(0).uniform(size=(2, 2, 8, 8)))).data
    assert d.shape == (2, want) == (2, model.descriptor_dim)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-5)


@pytest.mark.parametrize("arch", ["gem", "convap", "mixvpr", "netvlad"])
def test_end_to_end_gradient(arch):
    spec = BackboneSpec([ConvBlock(3, 3, 2), ConvBlock(3, 3, 1, "r"), ConvBlock(3, 3, 1, "r")], 2, (4, 4))
    model = build_model(arch, spec, seed=1, clusters=2, vlad_alpha=2.0)
    for name, p in model.params().items():
        p.data = p.data.astype(np.float64)
    rng = np.random.default_rng(2)
    img = Tensor(rng.uniform(0.1, 1.0, (2, 4, 4)))
    c = Tensor(rng.standard_normal(model.descriptor_dim))
    name = "conv0.weight"

    def f(w):
        saved = model.backbone[name]
        model.backbone[name] = w
        try:
            return T.tsum(T.mul(model.forward(img), c))
        finally:
            model.backbone[name] = saved

    assert finite_diff_check(f, model.backbone[name].data) <= 1e-4


def test_head_parameter_gradients(rng):
    x = Tensor(rng.uniform(0.1, 1.0, (2, 3, 2, 2)))
    mix = _mix_head(rng, c=3, hw=4)
    c = Tensor(rng.standard_normal((2, 12)))
    for attr in ("wd", "wr"):
        def f(p, attr=attr):
            h = MixVPRHead(mix.w1, mix.w2, p if attr == "wd" else mix.wd, p if attr == "wr" else mix.wr)
            return T.tsum(T.mul(mixvpr_forward(x, h), c))
        assert finite_diff_check(f, getattr(mix, attr).data.astype(np.float64)) <= 1e-4
    f1 = lambda p: T.tsum(T.mul(mixvpr_forward(x, MixVPRHead([p], mix.w2, mix.wd, mix.wr)), c))
    assert finite_diff_check(f1, mix.w1[0].data.astype(np.float64)) <= 1e-4

    vlad = NetVLADHead.from_centers(rng.standard_normal((2, 3)), alpha=1.5)
    cv = Tensor(rng.standard_normal((2, 6)))
    fc = lambda p: T.tsum(T.mul(netvlad_forward(x, NetVLADHead(p, vlad.assign_w, vlad.assign_b, 1.5)), cv))
    assert finite_diff_check(fc, vlad.centers.data) <= 1e-4
    fw = lambda p: T.tsum(T.mul(netvlad_forward(x, NetVLADHead(vlad.centers, p, vlad.assign_b, 1.5)), cv))
    assert finite_diff_check(fw, vlad.assign_w.data) <= 1e-4
