"""nn.Module wrappers around the functional ops."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import functional as fn


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.empty(d_out)) if bias else None
        bound = 1.0 / math.sqrt(d_in)
        nn.init.uniform_(self.weight, -bound, bound)
        if self.bias is not None:
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return fn.linear_forward(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return fn.layer_norm_forward(x, self.weight, self.bias)


class MLP(nn.Module):
    def __init__(self, *sizes: int):
        super().__init__()
        self.layers = nn.ModuleList(Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        return fn.mlp_forward(x, [(l.weight, l.bias) for l in self.layers])


class AttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        if dim % heads:
            raise ValueError(f"channel dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self.ln2 = LayerNorm(dim)
        self.ffn1 = Linear(dim, ffn_mult * dim)
        self.ffn2 = Linear(ffn_mult * dim, dim)

    def weights(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def forward(self, x, pe=None, allowed=None):
        return fn.self_attention_forward(x, pe, self.weights(), self.heads, allowed)


class FFNLayer(nn.Module):
    """Token-wise residual MLP; stands in for attention in the MLP-backbone ablation."""

    def __init__(self, dim: int, ffn_mult: int = 2):
        super().__init__()
        self.ln = LayerNorm(dim)
        self.ffn = MLP(dim, ffn_mult * dim, dim)

    def forward(self, x, pe=None, allowed=None):
        return x + self.ffn(self.ln(x))


class Block(nn.Module):
    """1-2 self-attention layers fed with a projected positional encoding."""

    def __init__(self, dim, heads, layers=1, ffn_mult=2, pe_dim=None, backbone="attention"):
        super().__init__()
        self.backbone = backbone
        if backbone == "attention":
            self.pe_proj = Linear(pe_dim, dim) if pe_dim else None
            self.layers = nn.ModuleList(AttentionLayer(dim, heads, ffn_mult) for _ in range(layers))
        elif backbone == "mlp":
            self.pe_proj = None
            self.layers = nn.ModuleList(FFNLayer(dim, ffn_mult) for _ in range(layers))
        else:
            raise ValueError(f"unknown backbone {backbone!r}")

    def forward(self, x, pe=None, allowed=None):
        p = self.pe_proj(pe) if (self.pe_proj is not None and pe is not None) else None
        for i, layer in enumerate(self.layers):
            x = layer(x, p if i == 0 else None, allowed)
        return x


class DGCNN(nn.Module):
    """Three edge-conv layers over dynamic feature-space KNN graphs."""

    def __init__(self, width: int, out_dim: int, k: int = 16, in_dim: int = 3, n_layers: int = 3):
        super().__init__()
        self.k = k
        self.n_layers = n_layers
        dims = [in_dim] + [width] * n_layers
        for i in range(n_layers):
            setattr(self, f"edge{i}", Linear(2 * dims[i], dims[i + 1]))
        self.out = Linear(2 * width * n_layers, out_dim)

    def forward(self, pos):
        return fn.dgcnn_positional_encoding(pos, dict(self.named_parameters()), self.k, self.n_layers)
