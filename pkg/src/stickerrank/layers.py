"""Parameter-backed layers: linears, GRU cells, conv stack, attention block.

Layers come in pairs: ``init_*`` allocates named parameters in a ParamSet,
and the forward function references them by the same name prefix.
"""

from __future__ import annotations

import functools

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def init_linear(params, rng, name, d_in, d_out):
    params.add_gaussian(rng, f"{name}/w", (d_in, d_out))
    params.add_gaussian(rng, f"{name}/b", (d_out,))


def linear(params, name, x):
    w = params[f"{name}/w"]
    b = params[f"{name}/b"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear '{name}': input dim {x.shape[-1]} != expected {w.shape[0]}")
    return ad.matmul(x, w) + b


def init_gru(params, rng, name, d_in, d_h):
    for gate in ("r", "z", "n"):
        params.add_gaussian(rng, f"{name}/w_{gate}", (d_in, d_h))
        params.add_gaussian(rng, f"{name}/u_{gate}", (d_h, d_h))
        params.add_gaussian(rng, f"{name}/b_{gate}", (d_h,))


def gru_cell(params, name, x, h_prev):
    """One gated-recurrent-unit step.

    r = sig(W_r x + U_r h + b_r), z = sig(W_z x + U_z h + b_z),
    n = tanh(W_n x + U_n (r*h) + b_n), h' = (1-z)*h + z*n.
    """
    if x.shape[-1] != params[f"{name}/w_r"].shape[0]:
        raise ShapeError(f"gru '{name}': input dim {x.shape[-1]} != {params[f'{name}/w_r'].shape[0]}")
    if h_prev.shape[-1] != params[f"{name}/u_r"].shape[0]:
        raise ShapeError(f"gru '{name}': state dim {h_prev.shape[-1]} != {params[f'{name}/u_r'].shape[0]}")
    r = ad.sigmoid(ad.matmul(x, params[f"{name}/w_r"]) + ad.matmul(h_prev, params[f"{name}/u_r"]) + params[f"{name}/b_r"])
    z = ad.sigmoid(ad.matmul(x, params[f"{name}/w_z"]) + ad.matmul(h_prev, params[f"{name}/u_z"]) + params[f"{name}/b_z"])
    n = ad.tanh(ad.matmul(x, params[f"{name}/w_n"]) + ad.matmul(ad.mul(r, h_prev), params[f"{name}/u_n"]) + params[f"{name}/b_n"])
    one = ad.constant(np.ones_like(z.data))
    return ad.mul(one - z, h_prev) + ad.mul(z, n)


def gru_param_names(name):
    return [f"{name}/{kind}_{gate}" for gate in ("r", "z", "n") for kind in ("w", "u", "b")]


def init_layer_norm(params, rng, name, d):
    params.add(f"{name}/gain", np.ones(d))
    params.add(f"{name}/bias", np.zeros(d))


def layer_norm(params, name, x, eps=1e-5):
    """Normalize the trailing dimension, then scale and shift."""
    mu = ad.tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.tmean(ad.mul(xc, xc), axis=-1, keepdims=True)
    inv = ad.pow_const(var + ad.constant(np.asarray(eps, dtype=x.dtype)), -0.5)
    return ad.mul(ad.mul(xc, inv), params[f"{name}/gain"]) + params[f"{name}/bias"]


def dropout(x, rate, rng, train):
    """Inverted dropout; identity when eval mode or rate == 0."""
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return ad.mul(x, ad.constant(keep))


@functools.lru_cache(maxsize=32)
def _sinusoid_table(length, dim, dtype_name):
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    table = table.astype(np.dtype(dtype_name))
    table.setflags(write=False)  # cached and shared
    return table


def positional_encoding(length, dim, dtype=np.float64):
    """Fixed sinusoidal position table, (length, dim)."""
    return _sinusoid_table(length, dim, np.dtype(dtype).name)


# -- attention block --------------------------------------------------------


def init_attention_block(params, rng, name, d):
    for proj in ("q", "k", "v"):
        init_linear(params, rng, f"{name}/{proj}", d, d)
    init_linear(params, rng, f"{name}/ffn1", d, d)
    init_linear(params, rng, f"{name}/ffn2", d, d)
    init_layer_norm(params, rng, f"{name}/norm", d)


def attention_block(params, name, x, mask, *, n_head, drop_rate=0.0, rng=None, train=False, trace=None):
    """Self-attention + residual dropout + FFN + layer norm over (T, d) rows.

    ``mask`` marks real positions; masked keys receive zero attention and
    masked output rows are zeroed. Attention uses plain dot products
    (no scaling) over ``n_head`` heads of width d/n_head each.
    """
    T, d = x.shape
    if d % n_head:
        raise ConfigError(f"attention '{name}': d={d} not divisible by n_head={n_head}")
    dh = d // n_head
    mask = np.asarray(mask, dtype=bool)
    key_mask = np.broadcast_to(mask[None, :], (T, T))

    q = linear(params, f"{name}/q", x)
    k = linear(params, f"{name}/k", x)
    v = linear(params, f"{name}/v", x)
    head_outs = []
    for h in range(n_head):
        sl = slice(h * dh, (h + 1) * dh)
        scores = ad.matmul(q[:, sl], k[:, sl].T)  # (T, T)
        alpha = ad.masked_softmax(scores, key_mask, axis=-1)
        if trace is not None:
            trace.add_attention(alpha.data, mask)
        head_outs.append(ad.matmul(alpha, v[:, sl]))
    beta = head_outs[0] if n_head == 1 else ad.concat(head_outs, axis=1)

    pre = dropout(x + beta, drop_rate, rng, train)
    ffn = linear(params, f"{name}/ffn2", ad.relu(linear(params, f"{name}/ffn1", pre)))
    out = layer_norm(params, f"{name}/norm", ffn + pre)
    return ad.mul(out, ad.constant(mask[:, None].astype(x.data.dtype)))


# -- convolutional sticker stack ---------------------------------------------


def conv_stack_names(name, n_stages=3):
    names = []
    for s in range(n_stages):
        names += [f"{name}/conv{s}/k", f"{name}/conv{s}/b"]
    names += [f"{name}/flat/w", f"{name}/flat/b"]
    return names


def init_conv_stack(params, rng, name, image_size, in_channels, conv_channels, d, p):
    """Three stride-2 conv stages followed by average pooling down to (p, p, d).

    Kernels get a Kaiming init (this stack replaces a pre-trained image
    encoder); conv biases start slightly positive so no ReLU unit sits
    exactly on its kink at init.
    """
    from .params import he_gaussian

    final = image_size // 8
    if image_size % 8 or final < p or final % p:
        raise ConfigError(f"conv stack: image size {image_size} incompatible with p={p}")
    chans = [in_channels, conv_channels[0], conv_channels[1], d]
    for s in range(3):
        params.add(f"{name}/conv{s}/k", he_gaussian(rng, (3, 3, chans[s], chans[s + 1]), 9 * chans[s], params.dtype))
        params.add(f"{name}/conv{s}/b", np.full(chans[s + 1], 0.01))
    params.add(f"{name}/flat/w", he_gaussian(rng, (d, d), d, params.dtype))
    params.add(f"{name}/flat/b", np.zeros(d))


def conv_stack(params, name, image, image_size, p):
    """Encode an (H, W, C) image into a spatial map (p, p, d) and a flat vector (d,)."""
    if not isinstance(image, Tensor):
        image = ad.constant(image)
    if image.shape[0] != image_size or image.shape[1] != image_size:
        raise ShapeError(f"conv stack '{name}': image is {image.shape[0]}x{image.shape[1]}, expected {image_size}x{image_size}")
    h = image
    for s in range(3):
        h = ad.relu(ad.conv2d(h, params[f"{name}/conv{s}/k"], params[f"{name}/conv{s}/b"], stride=2, pad=1))
    factor = h.shape[0] // p
    if factor > 1:
        h = ad.avg_pool2d(h, factor)
    d = h.shape[2]
    pooled = ad.tmean(h.reshape(p * p, d), axis=0)  # global average over units
    flat = linear(params, f"{name}/flat", pooled)
    return h, flat
