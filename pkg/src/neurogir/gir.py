"""Global information reasoning over a feature grid.

The grid (S points, C_in channels) is pooled onto N graph nodes through
learned attention maps, the nodes exchange information over a dense
trainable adjacency, and the result is scattered back to the grid and added
to the local features.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import tensor_core as tc


@dataclass(frozen=True)
class GirConfig:
    c_in: int
    n_nodes: int
    c_gcn: int
    c_gcn_out: int

    @classmethod
    def from_channels(cls, c_in: int) -> "GirConfig":
        """Default ratios: N = C_in/4, C_gcn = C'_gcn = C_in/2."""
        if c_in < 4 or c_in % 4:
            raise ValueError(f"GIR input channels must be a positive multiple of 4, got {c_in}")
        return cls(c_in, c_in // 4, c_in // 2, c_in // 2)

    def __post_init__(self):
        if min(self.c_in, self.n_nodes, self.c_gcn, self.c_gcn_out) < 1:
            raise ValueError(f"all GIR extents must be >= 1: {self}")


def gir_param_count(cfg: GirConfig) -> int:
    c, n, g, go = cfg.c_in, cfg.n_nodes, cfg.c_gcn, cfg.c_gcn_out
    attention = c * n + n
    reduce = c * g + g
    adjacency = n * n
    transform_w = g * go
    expand = go * c + c
    bn = 2 * c
    return attention + reduce + adjacency + transform_w + expand + bn


# ------------------------------------------------------------ graph operators


def compute_attention(x, weight, bias=None):
    """Attention maps M (N, S) from point features x (S, C_in)."""
    return tc.unit_conv(x, weight, bias).t()


def project_nodes(m, x, weight, bias=None):
    """Initial node states F = M g(x), shape (N, C_gcn)."""
    if m.shape[1] != x.shape[0]:
        raise tc.ShapeError(f"project_nodes: attention covers {m.shape[1]} points, features have {x.shape[0]}")
    return tc.matmul(m, tc.unit_conv(x, weight, bias))


def aggregate(f, adjacency):
    """relu(f_i + sum_j A[j, i] f_j) for every node i.

    ``adjacency[j, i]`` is the influence of node j on node i.
    """
    if adjacency.dim() != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise tc.ShapeError(f"aggregate: adjacency must be square, got {tuple(adjacency.shape)}")
    if adjacency.shape[0] != f.shape[0]:
        raise tc.ShapeError(f"aggregate: {adjacency.shape[0]}-node adjacency vs {f.shape[0]} node states")
    return tc.relu(f + tc.matmul(adjacency.t(), f))


def transform(f_agg, w):
    return tc.matmul(f_agg, w)


def scatter_back(m, f_out, weight, bias=None):
    """h(M^T F_out) before normalization, shape (S, C_in)."""
    if m.shape[0] != f_out.shape[0]:
        raise tc.ShapeError(f"reproject: attention has {m.shape[0]} nodes, node features {f_out.shape[0]}")
    return tc.unit_conv(tc.matmul(m.t(), f_out), weight, bias)


# ----------------------------------------------------------------- the block


class GirBlock(nn.Module):
    def __init__(self, cfg: GirConfig | int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if isinstance(cfg, int):
            cfg = GirConfig.from_channels(cfg)
        self.cfg = cfg
        self.eps, self.momentum = eps, momentum
        c, n, g, go = cfg.c_in, cfg.n_nodes, cfg.c_gcn, cfg.c_gcn_out
        self.attention_weight = nn.Parameter(torch.empty(n, c))
        self.attention_bias = nn.Parameter(torch.zeros(n))
        self.reduce_weight = nn.Parameter(torch.empty(g, c))
        self.reduce_bias = nn.Parameter(torch.zeros(g))
        self.adjacency = nn.Parameter(torch.empty(n, n))
        self.node_transform = nn.Parameter(torch.empty(g, go))
        self.expand_weight = nn.Parameter(torch.empty(c, go))
        self.expand_bias = nn.Parameter(torch.zeros(c))
        self.bn_weight = nn.Parameter(torch.ones(c))
        self.bn_bias = nn.Parameter(torch.zeros(c))
        self.register_buffer("bn_running_mean", torch.zeros(c))
        self.register_buffer("bn_running_var", torch.ones(c))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        cfg = self.cfg
        tc.kaiming_uniform_(self.attention_weight, cfg.c_in)
        tc.kaiming_uniform_(self.reduce_weight, cfg.c_in)
        tc.kaiming_uniform_(self.node_transform, cfg.c_gcn)
        tc.kaiming_uniform_(self.expand_weight, cfg.c_gcn_out)
        with torch.no_grad():
            bound = 1.0 / cfg.n_nodes
            self.adjacency.uniform_(-bound, bound)

    def _batchnorm(self, x):
        return tc.batchnorm3d(
            x,
            self.bn_weight,
            self.bn_bias,
            self.eps,
            self.training,
            self.bn_running_mean,
            self.bn_running_var,
            self.momentum,
        )

    def reasoning(self, x):
        """Graph branch for one item, x (S, C_in) -> pre-normalization (S, C_in)."""
        m = compute_attention(x, self.attention_weight, self.attention_bias)
        f = project_nodes(m, x, self.reduce_weight, self.reduce_bias)
        f_agg = aggregate(f, self.adjacency)
        f_out = transform(f_agg, self.node_transform)
        return scatter_back(m, f_out, self.expand_weight, self.expand_bias)

    def reproject(self, m, f_out):
        """Map node features back to the point view and normalize, (S, C_in)."""
        return self._batchnorm(scatter_back(m, f_out, self.expand_weight, self.expand_bias))

    def forward(self, x):
        if x.dim() != 5:
            raise tc.ShapeError(f"GIR block expects (B, C, D, H, W), got {tuple(x.shape)}")
        b, c = x.shape[:2]
        if c != self.cfg.c_in:
            raise tc.ShapeError(f"GIR block: channel axis has {c} channels, block configured for {self.cfg.c_in}")
        spatial = x.shape[2:]
        branches = []
        for i in range(b):
            points = x[i].reshape(c, -1).t()
            branches.append(self.reasoning(points).t().reshape(c, *spatial))
        # statistics pool across the batch, as in an ordinary BN layer
        return x + self._batchnorm(torch.stack(branches))


def gir_forward(x, block: GirBlock, training: bool = True):
    block.train(training)
    return block(x)
