import numpy as np
import pytest
import torch

from gaitstr.encoders import (
    HorizontalPyramidPool,
    SilhouetteEncoder,
    SpatialGraphConv,
    STGCNEncoder,
    build_adjacency,
    pool_strips,
)
from gaitstr.errors import GeometryError, InvalidInputError
from gaitstr.skeleton import COCO17, SYNTH13, SkeletonTopology

from gradient_cases import CASES


def test_adjacency_two_joint_chain():
    topo = SkeletonTopology("pair", 2, ((0, 1),), 0)
    np.testing.assert_allclose(build_adjacency(topo, "joint"), np.full((2, 2), 0.5))
    np.testing.assert_allclose(build_adjacency(topo, "bone"), [[1.0]])


@pytest.mark.parametrize("topo", [SYNTH13, COCO17])
def test_bone_adjacency_pattern_matches_shared_endpoints(topo):
    a = build_adjacency(topo, "bone")
    assert np.allclose(a, a.T)
    for i, ei in enumerate(topo.edges):
        for j, ej in enumerate(topo.edges):
            connected = i == j or bool(set(ei) & set(ej))
            assert (a[i, j] != 0) == connected


def test_joint_adjacency_pattern():
    a = build_adjacency(SYNTH13, "joint")
    expected = np.eye(13, dtype=bool)
    for p, c in SYNTH13.edges:
        expected[p, c] = expected[c, p] = True
    assert np.array_equal(a != 0, expected)
    with pytest.raises(InvalidInputError):
        build_adjacency(SYNTH13, "hyper")


def test_identity_adjacency_is_per_node_linear():
    conv = SpatialGraphConv(3, 4, np.eye(5)).double()
    x = torch.randn(2, 3, 6, 5, dtype=torch.float64)
    expected = torch.einsum("oc,bctk->botk", conv.linear.weight[:, :, 0, 0], x) + conv.bias.view(1, -1, 1, 1)
    assert torch.equal(conv(x), expected) or torch.allclose(conv(x), expected, atol=1e-15, rtol=0)


def test_stgcn_shapes_and_pooling():
    enc = STGCNEncoder(build_adjacency(SYNTH13), 2, (8, 8, 16, 16), 12)
    per_node, pooled = enc(torch.randn(3, 7, 13, 2))
    assert per_node.shape == (3, 7, 13, 12)
    assert pooled.shape == (3, 12)
    torch.testing.assert_close(pooled, per_node.mean(dim=(1, 2)))
    with pytest.raises(InvalidInputError):
        enc(torch.randn(3, 7, 12, 2))


def test_stgcn_zero_parameters_zero_input():
    enc = STGCNEncoder(build_adjacency(SYNTH13), 2, (4, 4, 8, 8), 8)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    per_node, pooled = enc(torch.zeros(2, 5, 13, 2))
    assert not per_node.any() and not pooled.any()


def test_default_channel_schedule():
    enc = STGCNEncoder(build_adjacency(SYNTH13))
    widths = [b.gcn.linear.out_channels for b in enc.blocks]
    assert widths == [64, 64, 128, 128, 64]
    assert [b.tcn.kernel_size[0] for b in enc.blocks] == [9] * 5
    assert [b.residual for b in enc.blocks] == [False, True, False, True, False]


def test_pyramid_pool_levels():
    fm = torch.randn(2, 3, 16, 11)
    assert pool_strips(fm, 1).shape == (2, 1, 3)
    expected = fm.amax(dim=(2, 3)) + fm.mean(dim=(2, 3))
    torch.testing.assert_close(pool_strips(fm, 1)[:, 0], expected)
    assert HorizontalPyramidPool(3, 5, scale=5, height=16)(fm).shape == (2, 16, 5)
    assert HorizontalPyramidPool(3, 5, scale=1, height=16)(fm).shape == (2, 1, 5)


def test_constant_map_gives_equal_rows():
    rows = pool_strips(torch.full((1, 4, 16, 11), 0.7), 16)
    assert torch.all(rows == rows[:, :1])


def test_pyramid_geometry_error():
    with pytest.raises(GeometryError):
        HorizontalPyramidPool(3, 5, scale=5, height=12)
    with pytest.raises(GeometryError):
        pool_strips(torch.zeros(1, 1, 12, 4), 16)


def test_silhouette_encoder_shape_and_invariances():
    torch.manual_seed(0)
    enc = SilhouetteEncoder((4, 6, 8), 10).double()
    sils = (torch.rand(2, 5, 64, 44, dtype=torch.float64) > 0.6).double()
    out = enc(sils)
    assert out.shape == (2, 16, 10)
    assert torch.equal(enc(sils[:, [3, 0, 4, 1, 2]]), out)
    assert torch.equal(enc(sils.repeat_interleave(2, dim=1)), out)
    assert enc(sils[:, :1]).shape == (2, 16, 10)
    with pytest.raises(InvalidInputError):
        enc(torch.zeros(1, 3, 64, 40))


def test_encoder_streams_do_not_share_parameters():
    from gaitstr.refinement import GaitSTR, ModelConfig

    model = GaitSTR(ModelConfig(embed_dim=8, sil_channels=(2, 2, 4), stgcn_hidden=(4, 4, 8, 8),
                                decoder_channels=(8, 4, 4), cma_hidden=4, variant="concat"), 3)
    ids_j = {id(p) for p in model.joint_encoder.parameters()}
    ids_b = {id(p) for p in model.bone_encoder.parameters()}
    assert not ids_j & ids_b
    sils, joints = torch.rand(2, 4, 64, 44), torch.randn(2, 4, 13, 2)
    before = model(sils, joints).f_b.clone()
    with torch.no_grad():
        for p in model.joint_encoder.parameters():
            p.add_(1.0)
    assert torch.equal(model(sils, joints).f_b, before)


@pytest.mark.parametrize("name", ["graph_conv", "stgcn_block", "stgcn_encoder", "pyramid_pool",
                                  "silhouette_encoder"])
def test_encoder_gradients(name):
    assert CASES[name]() < 1e-4
