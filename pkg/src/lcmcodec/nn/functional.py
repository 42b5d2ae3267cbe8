"""Functional forms of every layer used by the codec networks.

All ops take torch tensors with up to three dims (window, token, channel) and
are differentiable through torch autograd.  Reductions run in a fixed order on
CPU, so identical inputs give bit-identical outputs within one build.
"""

from __future__ import annotations

from typing import Mapping

import torch
import torch.nn.functional as F

LN_EPS = 1e-5


def _check_last(x: torch.Tensor, n: int, what: str):
    if x.shape[-1] != n:
        raise ValueError(f"shape mismatch in {what}: expected last dim {n}, got {tuple(x.shape)}")


def linear_forward(x, W, b=None):
    _check_last(x, W.shape[1], "linear")
    return F.linear(x, W, b)


def layer_norm_forward(x, gamma, beta, eps: float = LN_EPS):
    _check_last(x, gamma.shape[0], "layer_norm")
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def gelu(x):
    return F.gelu(x)


def mlp_forward(x, layers, act=gelu):
    """``layers`` is a sequence of (W, b); the activation sits between layers."""
    for i, (W, b) in enumerate(layers):
        x = linear_forward(x, W, b)
        if i < len(layers) - 1:
            x = act(x)
    return x


def _heads(x, heads):
    B, n, C = x.shape
    return x.view(B, n, heads, C // heads).transpose(1, 2)


def _check_mask(allowed, B, n):
    if allowed.dtype != torch.bool:
        allowed = allowed.bool()
    if allowed.dim() == 2:
        allowed = allowed.unsqueeze(0)
    if allowed.shape[-2:] != (n, n):
        raise ValueError(f"visibility shape {tuple(allowed.shape)} does not match {n} tokens")
    if not bool(allowed.any(-1).all()):
        raise ValueError("attention query with empty allowed key set")
    return allowed.expand(B, n, n)


def multi_head_attention(x, w: Mapping[str, torch.Tensor], heads: int, allowed=None):
    """Softmax attention among the tokens of each window (no causal mask)."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    B, n, C = x.shape
    if C % heads:
        raise ValueError(f"channel dim {C} not divisible by {heads} heads")
    qkv = linear_forward(x, w["qkv.weight"], w["qkv.bias"])
    q, k, v = (_heads(t, heads) for t in qkv.split(C, dim=-1))
    mask = None
    if allowed is not None:
        mask = _check_mask(allowed, B, n).unsqueeze(1)
    out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    out = out.transpose(1, 2).reshape(B, n, C)
    out = linear_forward(out, w["proj.weight"], w["proj.bias"])
    return out.squeeze(0) if squeeze else out


def attention_probs(x, w: Mapping[str, torch.Tensor], heads: int, allowed=None):
    """Explicit (B, heads, n, n) softmax weights for the MHA input ``x``."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    B, n, C = x.shape
    qkv = linear_forward(x, w["qkv.weight"], w["qkv.bias"])
    q, k, _ = (_heads(t, heads) for t in qkv.split(C, dim=-1))
    logits = q @ k.transpose(-1, -2) / (C // heads) ** 0.5
    if allowed is not None:
        logits = logits.masked_fill(~_check_mask(allowed, B, n).unsqueeze(1), float("-inf"))
    p = torch.softmax(logits, dim=-1)
    return p.squeeze(0) if squeeze else p


def self_attention_forward(tokens, pe, w: Mapping[str, torch.Tensor], heads: int, allowed=None):
    """One pre-norm attention layer: h = x + pe; h += MHA(LN(h)); h += FFN(LN(h))."""
    if pe is not None:
        if pe.shape != tokens.shape:
            raise ValueError(f"positional encoding shape {tuple(pe.shape)} != tokens {tuple(tokens.shape)}")
        tokens = tokens + pe
    h = layer_norm_forward(tokens, w["ln1.weight"], w["ln1.bias"])
    x = tokens + multi_head_attention(h, w, heads, allowed)
    h = layer_norm_forward(x, w["ln2.weight"], w["ln2.bias"])
    ffn = [(w["ffn1.weight"], w["ffn1.bias"]), (w["ffn2.weight"], w["ffn2.bias"])]
    return x + mlp_forward(h, ffn)


def masked_attention_forward(tokens, pe, w, heads: int, allowed):
    return self_attention_forward(tokens, pe, w, heads, allowed=allowed)


def pairwise_sq_dist(f: torch.Tensor) -> torch.Tensor:
    sq = (f * f).sum(-1)
    d = sq.unsqueeze(-1) + sq.unsqueeze(-2) - 2.0 * (f @ f.transpose(-1, -2))
    return d.clamp_min(0.0)


@torch.no_grad()
def knn_feature_space(features: torch.Tensor, k: int) -> torch.Tensor:
    """Indices (B, n, K') of the K' = min(k, n-1) nearest other tokens.

    Ordered by (distance, index); a single-token window gets a self-edge.
    """
    squeeze = features.dim() == 2
    f = features.unsqueeze(0) if squeeze else features
    B, n, _ = f.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n == 1:
        idx = torch.zeros(B, 1, 1, dtype=torch.long)
        return idx.squeeze(0) if squeeze else idx
    kk = min(k, n - 1)
    d = pairwise_sq_dist(f)
    d.diagonal(dim1=-2, dim2=-1).fill_(float("inf"))
    if kk == n - 1:
        idx = torch.sort(d, dim=-1, stable=True).indices[..., :kk]
    else:
        vals, cand = torch.topk(d, kk + 1, dim=-1, largest=False, sorted=True)
        # order the chosen set by (distance, index)
        cand_k, vals_k = cand[..., :kk], vals[..., :kk]
        by_idx = torch.sort(cand_k, dim=-1).indices
        cand_k, vals_k = cand_k.gather(-1, by_idx), vals_k.gather(-1, by_idx)
        idx = cand_k.gather(-1, torch.sort(vals_k, dim=-1, stable=True).indices)
        ambiguous = vals[..., kk - 1] == vals[..., kk]
        if bool(ambiguous.any()):
            rows = ambiguous.nonzero(as_tuple=True)
            idx[rows] = torch.sort(d[rows], dim=-1, stable=True).indices[..., :kk]
    return idx.squeeze(0) if squeeze else idx


def gather_neighbors(f: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """(B, n, C) features and (B, n, K) indices -> (B, n, K, C)."""
    B, n, C = f.shape
    K = idx.shape[-1]
    flat = idx.reshape(B, n * K, 1).expand(B, n * K, C)
    return f.gather(1, flat).view(B, n, K, C)


def edge_conv_forward(f, idx, W, b, act=gelu):
    """f_i' = max_j act(W [f_i, f_i - f_j] + b) over the neighbors j of i."""
    nb = gather_neighbors(f, idx)
    center = f.unsqueeze(2).expand_as(nb)
    e = torch.cat([center, center - nb], dim=-1)
    return act(linear_forward(e, W, b)).max(dim=2).values


def dgcnn_positional_encoding(pos, w: Mapping[str, torch.Tensor], k: int, n_layers: int = 3):
    """Positional encoding of quantized positions (normalized to [0, 1)).

    Each edge-conv layer rebuilds the KNN graph in its own input feature space;
    per-point features of all layers are concatenated with their window-wide
    max pool and projected.
    """
    squeeze = pos.dim() == 2
    f = pos.unsqueeze(0) if squeeze else pos
    feats = []
    for i in range(n_layers):
        idx = knn_feature_space(f, k)
        f = edge_conv_forward(f, idx, w[f"edge{i}.weight"], w[f"edge{i}.bias"])
        feats.append(f)
    local = torch.cat(feats, dim=-1)
    glob = local.max(dim=1, keepdim=True).values.expand_as(local)
    out = linear_forward(torch.cat([local, glob], dim=-1), w["out.weight"], w["out.bias"])
    return out.squeeze(0) if squeeze else out
