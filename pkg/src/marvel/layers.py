"""Pre-norm transformer building blocks shared by the vision encoder and the language model."""

from __future__ import annotations

import numpy as np

from marvel.autodiff import Tensor, gelu, layer_norm, matmul, softmax


def norm(x: Tensor, p, prefix: str) -> Tensor:
    return layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def attention(
    xq: Tensor,
    xkv: Tensor,
    p,
    prefix: str,
    n_heads: int,
    key_mask: np.ndarray | None = None,
    keep_weights: list | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention without biases.

    ``key_mask`` is a bool array [batch, n_keys]; False keys get zero weight.
    If ``keep_weights`` is a list, the attention probabilities [batch, heads, n_q, n_k]
    are appended to it.
    """
    b, nq, d = xq.shape
    dh = d // n_heads
    q = _split_heads(matmul(xq, p[f"{prefix}.wq"]), n_heads)
    k = _split_heads(matmul(xkv, p[f"{prefix}.wk"]), n_heads)
    v = _split_heads(matmul(xkv, p[f"{prefix}.wv"]), n_heads)
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    w = softmax(scores, axis=-1, mask=mask)
    if keep_weights is not None:
        keep_weights.append(w.data)
    out = matmul(w, v).transpose(0, 2, 1, 3).reshape(b, nq, d)
    return matmul(out, p[f"{prefix}.wo"])


def ffn(x: Tensor, p, prefix: str) -> Tensor:
    h = gelu(matmul(x, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
    return matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]


def encoder_block(x: Tensor, p, prefix: str, n_heads: int, key_mask=None) -> Tensor:
    h = norm(x, p, f"{prefix}.ln1")
    x = x + attention(h, h, p, f"{prefix}.attn", n_heads, key_mask)
    return x + ffn(norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.ffn")


def decoder_block(y: Tensor, memory: Tensor, p, prefix: str, n_heads: int, memory_mask=None,
                  keep_cross: list | None = None) -> Tensor:
    h = norm(y, p, f"{prefix}.ln1")
    y = y + attention(h, h, p, f"{prefix}.self", n_heads)
    y = y + attention(norm(y, p, f"{prefix}.ln2"), memory, p, f"{prefix}.cross", n_heads,
                      memory_mask, keep_cross)
    return y + ffn(norm(y, p, f"{prefix}.ln3"), p, f"{prefix}.ffn")
