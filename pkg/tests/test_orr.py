import numpy as np
import pytest
import torch

from helpers import gradient_errors
from thorn.orr import (
    GraphBlock,
    RelationReasoning,
    attention_adjacency,
    block_forward,
    export_adjacency,
    graph_convolve,
    read_adjacency_csv,
    stack_forward,
    temporal_conv,
)
from oracles import naive_attention, naive_graph_conv

D = torch.float64


def make_block(c=3, d2=4, d_e=2, heads=3, k=3, seed=0, **kw):
    torch.manual_seed(seed)
    block = GraphBlock(c, d2, d_e, heads, k, **kw).double()
    with torch.no_grad():
        block.base.normal_()
    return block


def test_zero_attention_weights_give_uniform_rows():
    block = make_block(c=4)
    with torch.no_grad():
        block.w1.zero_()
        block.w2.zero_()
    nodes = torch.randn(5, 4, 4, dtype=D)
    adj = attention_adjacency(nodes, block, 1)
    assert torch.allclose(adj, block.base[1] + 0.25, atol=0, rtol=0)


def test_single_class_attention_is_one():
    block = make_block(c=1)
    adj = attention_adjacency(torch.randn(3, 1, 4, dtype=D), block, 0)
    assert torch.equal(adj, block.base[0] + 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_attention_matches_loop_oracle(seed):
    block = make_block(c=3, d2=4, d_e=2, seed=seed)
    nodes = torch.randn(2, 3, 4, dtype=D)
    for h in range(block.heads):
        got = attention_adjacency(nodes, block, h).detach().numpy()
        want = naive_attention(
            nodes.numpy(), block.base[h].detach().numpy(), block.w1[h].detach().numpy(), block.w2[h].detach().numpy()
        )
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


@pytest.mark.parametrize("scale,normalize", [(False, False), (True, False), (False, True)])
def test_attention_variants_match_oracle(scale, normalize):
    block = make_block(attention_scale=scale, attention_norm=normalize)
    nodes = torch.randn(2, 3, 4, dtype=D) * 0.3
    got = attention_adjacency(nodes, block, 0).detach().numpy()
    want = naive_attention(nodes.numpy(), block.base[0].detach().numpy(),
                           block.w1[0].detach().numpy(), block.w2[0].detach().numpy(), scale, normalize)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_normalized_attention_ignores_node_scale():
    block = make_block()
    nodes = torch.rand(4, 3, 4, dtype=D)
    a = attention_adjacency(nodes, block, 0)
    b = attention_adjacency(nodes * 50, block, 0)
    # equal up to the layer-norm epsilon
    assert torch.allclose(a, b, atol=1e-3)


@pytest.mark.parametrize("seed", range(100))
def test_attention_rows_are_a_distribution(seed):
    gen = torch.Generator().manual_seed(seed)
    c = int(torch.randint(1, 8, (1,), generator=gen))
    block = make_block(c=c, d2=6, d_e=3, seed=seed)
    nodes = torch.randn(int(torch.randint(1, 6, (1,), generator=gen)), c, 6, generator=gen, dtype=D) * 3
    for h in range(block.heads):
        att = attention_adjacency(nodes, block, h) - block.base[h]
        assert (att >= -1e-12).all()
        assert torch.allclose(att.sum(-1), torch.ones(c, dtype=D), atol=1e-6)


def test_identity_graph_convolution_is_exact():
    block = make_block(c=3, d2=4)
    with torch.no_grad():
        block.w3[0] = torch.eye(4, dtype=D)
    nodes = torch.randn(5, 3, 4, dtype=D)
    assert torch.equal(graph_convolve(nodes, torch.eye(3, dtype=D), block, 0), nodes)


def test_zero_adjacency_row_silences_node():
    block = make_block()
    adj = torch.randn(3, 3, dtype=D)
    adj[1] = 0
    out = graph_convolve(torch.randn(4, 3, 4, dtype=D), adj, block, 2)
    assert torch.equal(out[:, 1], torch.zeros(4, 4, dtype=D))


@pytest.mark.parametrize("seed", range(20))
def test_graph_convolution_matches_loop_oracle(seed):
    block = make_block(seed=seed)
    nodes, adj = torch.randn(2, 3, 4, dtype=D), torch.randn(3, 3, dtype=D)
    got = graph_convolve(nodes, adj, block, 1).detach().numpy()
    want = naive_graph_conv(nodes.numpy(), adj.numpy(), block.w3[1].detach().numpy())
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_adjacency_shared_across_frames():
    block = make_block()
    nodes = torch.randn(6, 3, 4, dtype=D)
    perm = torch.randperm(6)
    a = attention_adjacency(nodes, block, 0)
    b = attention_adjacency(nodes[perm], block, 0)
    assert torch.allclose(a, b, atol=1e-14)
    out = graph_convolve(nodes, a, block, 0)
    assert torch.allclose(graph_convolve(nodes[perm], a, block, 0), out[perm], atol=1e-14)


def test_zero_block_is_identity():
    block = make_block(c=10, d2=16, d_e=4, k=9).zero_()
    nodes = torch.randn(16, 10, 16, dtype=D)
    out, adj = block_forward(nodes, block)
    assert torch.equal(out, nodes)
    assert torch.allclose(adj, torch.full((3, 10, 10), 0.1, dtype=D))


def test_single_frame_with_wide_kernel():
    block = make_block(k=9)
    nodes = torch.randn(1, 3, 4, dtype=D)
    out, _ = block_forward(nodes, block)
    assert out.shape == (1, 3, 4)
    # only the centre tap touches a single frame
    heads = sum(graph_convolve(nodes, attention_adjacency(nodes, block, h), block, h) for h in range(3))
    expected = torch.einsum("tcd,od->tco", heads, block.tcn.weight[:, :, 4]) + block.tcn.bias + nodes
    assert torch.allclose(out, expected, atol=1e-12)


def test_temporal_conv_matches_per_class_conv1d():
    conv = torch.nn.Conv1d(4, 4, 3, padding=1).double()
    x = torch.randn(2, 5, 3, 4, dtype=D)
    got = temporal_conv(x, conv)
    for b in range(2):
        for c in range(3):
            want = conv(x[b, :, c, :].T.unsqueeze(0))[0].T
            assert torch.allclose(got[b, :, c], want, atol=1e-12)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        GraphBlock(3, 4, 2, 3, kernel_size=8)


def test_empty_stack_rejected():
    with pytest.raises(ValueError):
        stack_forward(torch.randn(2, 3, 4), [])


def test_paper_scale_stack_shapes():
    orr = RelationReasoning(10, d2=128, n_blocks=5, heads=3)
    with torch.no_grad():
        out, adj = orr(torch.randn(16, 10, 128))
    assert out.shape == (16, 10, 128)
    assert adj.shape == (5, 3, 10, 10)
    assert orr.blocks[0].d_e == 32


def test_batched_stack_shapes():
    orr = RelationReasoning(4, d2=8, n_blocks=2, heads=3)
    with torch.no_grad():
        out, adj = orr(torch.randn(5, 6, 4, 8))
    assert out.shape == (5, 6, 4, 8)
    assert adj.shape == (5, 2, 3, 4, 4)


@pytest.mark.parametrize("n_blocks", [1, 5])
def test_zero_stack_is_identity(n_blocks):
    orr = RelationReasoning(4, d2=8, n_blocks=n_blocks).double()
    for b in orr.blocks:
        b.zero_()
    nodes = torch.randn(7, 4, 8, dtype=D)
    out, _ = orr(nodes)
    assert torch.equal(out, nodes)


def test_stack_equals_manual_composition():
    blocks = [make_block(seed=1), make_block(seed=2)]
    nodes = torch.randn(4, 3, 4, dtype=D)
    out, adj = stack_forward(nodes, blocks)
    mid, a0 = block_forward(nodes, blocks[0])
    end, a1 = block_forward(mid, blocks[1])
    assert torch.equal(out, end)
    assert torch.equal(adj, torch.stack([a0, a1]))


def test_joint_class_permutation_equivariance():
    blocks = [make_block(c=5, d2=4, seed=s) for s in (3, 4)]
    nodes = torch.randn(4, 5, 4, dtype=D)
    perm = torch.tensor([2, 4, 0, 1, 3])
    out, adj = stack_forward(nodes, blocks)
    permuted = [make_block(c=5, d2=4, seed=s) for s in (3, 4)]
    with torch.no_grad():
        for p in permuted:
            p.base.copy_(p.base[:, perm][:, :, perm])
    out_p, adj_p = stack_forward(nodes[:, perm], permuted)
    assert torch.allclose(out_p, out[:, perm], atol=1e-12)
    assert torch.allclose(adj_p, adj[:, :, perm][:, :, :, perm], atol=1e-12)


def test_shared_base_flag():
    block = GraphBlock(3, 4, 2, heads=3, kernel_size=3, share_base=True)
    assert block.base.shape == (1, 3, 3)
    assert block.base_adjacency(2) is not None
    assert torch.allclose(block.base, torch.full((1, 3, 3), 1 / 3))


def test_stack_gradients_match_finite_differences():
    torch.manual_seed(0)
    orr = RelationReasoning(3, d2=4, n_blocks=2, heads=3, d_e=2, kernel_size=3).double()
    with torch.no_grad():
        for b in orr.blocks:
            b.base.normal_()
    nodes = torch.randn(3, 3, 4, dtype=D)
    target = torch.randn(3, 3, 4, dtype=D)

    def loss():
        out, adj = orr(nodes)
        return ((out - target) ** 2).sum() + adj[-1].sum(0).pow(2).sum()

    errs = gradient_errors(loss, list(orr.named_parameters()), samples=20)
    assert max(errs.values()) < 1e-4, errs


def test_export_adjacency_round_trip(tmp_path):
    adj = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    names = ["hand", "cup", "knife", "pan"]
    paths = export_adjacency(adj, tmp_path, names)
    assert len(paths) == 6
    header, grid = read_adjacency_csv(tmp_path / "adjacency_block1_head2.csv")
    assert header == names
    np.testing.assert_array_equal(grid, adj[1, 2])
