import numpy as np
import pytest
import torch

from neurogir import tensor_core as tc
from neurogir.gir import GirBlock, GirConfig, aggregate, gir_forward, gir_param_count


def _numpy_gir(x, blk: GirBlock):
    """Straight numpy transcription of the block for one item in eval mode."""
    p = {k: v.detach().double().numpy() for k, v in blk.state_dict().items()}
    c = x.shape[0]
    pts = x.reshape(c, -1).T                                   # (S, C)
    m = (pts @ p["attention_weight"].T + p["attention_bias"]).T  # (N, S)
    f = m @ (pts @ p["reduce_weight"].T + p["reduce_bias"])    # (N, G)
    n = f.shape[0]
    f_agg = np.zeros_like(f)
    for i in range(n):
        acc = f[i].copy()
        for j in range(n):
            acc += p["adjacency"][j, i] * f[j]
        f_agg[i] = np.maximum(acc, 0)
    f_out = f_agg @ p["node_transform"]
    y = (m.T @ f_out) @ p["expand_weight"].T + p["expand_bias"]  # (S, C)
    y = (y - p["bn_running_mean"]) / np.sqrt(p["bn_running_var"] + blk.eps) * p["bn_weight"] + p["bn_bias"]
    return x + y.T.reshape(x.shape)


def test_default_extents_and_param_count():
    cfg = GirConfig.from_channels(128)
    assert (cfg.n_nodes, cfg.c_gcn, cfg.c_gcn_out) == (32, 64, 64)
    assert gir_param_count(cfg) == 26_080
    assert sum(p.numel() for p in GirBlock(cfg).parameters()) == 26_080


@pytest.mark.parametrize("c", [0, 6, 130])
def test_channels_must_divide_by_four(c):
    with pytest.raises(ValueError):
        GirConfig.from_channels(c)


def test_matches_numpy_transcription(rng):
    blk = GirBlock(8).double().eval()
    with torch.no_grad():
        blk.bn_running_mean.copy_(torch.from_numpy(rng.standard_normal(8)))
        blk.bn_running_var.copy_(torch.from_numpy(rng.uniform(0.5, 2.0, 8)))
        blk.bn_weight.copy_(torch.from_numpy(rng.standard_normal(8)))
    x = rng.standard_normal((2, 8, 2, 3, 4))
    out = blk(torch.from_numpy(x)).detach().numpy()
    for i in range(2):
        np.testing.assert_allclose(out[i], _numpy_gir(x[i], blk), rtol=1e-10, atol=1e-10)


def test_zero_branch_is_identity(rng):
    blk = GirBlock(8).double()
    with torch.no_grad():
        blk.bn_weight.zero_()
        blk.bn_bias.zero_()
    x = torch.from_numpy(rng.standard_normal((2, 8, 2, 2, 2)))
    assert torch.equal(gir_forward(x, blk, training=True), x)
    assert torch.equal(gir_forward(x, blk, training=False), x)


def test_zero_adjacency_reduces_to_relu(rng):
    f = torch.from_numpy(rng.standard_normal((4, 3)))
    assert torch.equal(aggregate(f, torch.zeros(4, 4, dtype=torch.float64)), torch.relu(f))


def test_adjacency_direction():
    # A[j, i] is the influence of j on i: only node 0 influences node 1
    a = torch.zeros(2, 2, dtype=torch.float64)
    a[0, 1] = 1.0
    f = torch.tensor([[2.0], [3.0]], dtype=torch.float64)
    assert aggregate(f, a).tolist() == [[2.0], [5.0]]


def test_output_shape_and_channel_error():
    blk = GirBlock(16)
    assert blk(torch.randn(2, 16, 3, 4, 5)).shape == (2, 16, 3, 4, 5)
    with pytest.raises(tc.ShapeError, match="channel"):
        blk(torch.randn(1, 12, 2, 2, 2))
    with pytest.raises(tc.ShapeError):
        blk(torch.randn(16, 2, 2, 2))


def test_equivariant_to_spatial_permutation(rng):
    blk = GirBlock(8).double().train()
    x = torch.from_numpy(rng.standard_normal((1, 8, 2, 3, 4)))
    perm = torch.from_numpy(rng.permutation(24))
    flat = x.reshape(1, 8, -1)
    out = blk(x).reshape(1, 8, -1)
    out_perm = blk(flat[:, :, perm].reshape(x.shape)).reshape(1, 8, -1)
    torch.testing.assert_close(out_perm, out[:, :, perm], rtol=1e-10, atol=1e-10)


def test_invariant_to_node_relabelling(rng):
    blk = GirBlock(8).double().eval()
    x = torch.from_numpy(rng.standard_normal((1, 8, 2, 2, 3)))
    ref = blk(x)
    perm = torch.from_numpy(rng.permutation(blk.cfg.n_nodes))
    with torch.no_grad():
        blk.attention_weight.copy_(blk.attention_weight[perm])
        blk.attention_bias.copy_(blk.attention_bias[perm])
        blk.adjacency.copy_(blk.adjacency[perm][:, perm])
    torch.testing.assert_close(blk(x), ref, rtol=1e-10, atol=1e-10)


def test_adjacency_init_range():
    blk = GirBlock(128)
    assert blk.adjacency.abs().max() <= 1.0 / 32
