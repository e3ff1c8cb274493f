"""Forward/backward kernels for the fixed layer set.

Tensors are float64 numpy arrays in (batch, channels, height, width) order;
dense-style tensors are (batch, features). Every ``*_forward`` returns
``(output, cache)`` and the matching ``*_backward`` consumes that cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng

TRAIN = "train"
INFER = "infer"

# im2col chunks are capped at this many float64 entries (~32 MB).
_COL_BUDGET = 250_000


class ShapeError(ValueError):
    pass


@dataclass
class LayerCache:
    op: str
    data: dict = field(default_factory=dict)
    consumed: bool = False

    def take(self, op: str) -> dict:
        if self.op != op:
            raise ShapeError(f"{op} backward given a cache from {self.op}")
        if self.consumed:
            raise ValueError(f"{op} cache already consumed by a backward call")
        self.consumed = True
        return self.data


def _as_tensor(x, ndim=None, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if ndim is not None and x.ndim not in np.atleast_1d(ndim):
        raise ShapeError(f"{name} must have {ndim} dims, got shape {x.shape}")
    return x


def _check_upstream(upstream, shape, op):
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tuple(shape):
        raise ShapeError(f"{op}: upstream shape {upstream.shape} != forward output shape {tuple(shape)}")
    return upstream


def _check_mode(mode):
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


# ---------------------------------------------------------------- convolution


def _windows(xp, k, ho, wo):
    # im2col rows of an NHWC array, columns ordered (ki, kj, channel)
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(n * ho * wo, k * k * c)


def _chunks(n, per_item):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _correlate_nhwc(xp, wmat, k, ho, wo):
    """Valid stride-1 correlation of NHWC ``xp`` with a (k*k*C, O) matrix."""
    n, c = xp.shape[0], xp.shape[3]
    out = np.empty((n, ho, wo, wmat.shape[1]))
    if k == 1:
        out[:] = (xp.reshape(-1, c) @ wmat).reshape(out.shape)
        return out
    for sl in _chunks(n, ho * wo * c * k * k):
        out[sl] = (_windows(xp[sl], k, ho, wo) @ wmat).reshape(-1, ho, wo, wmat.shape[1])
    return out


def conv2d_forward(x, kernels, bias, padding="valid"):
    """Stride-1 cross-correlation. ``padding`` is 'valid' or 'same' (odd k)."""
    x = _as_tensor(x, 4)
    kernels = _as_tensor(kernels, 4, "kernels")
    bias = _as_tensor(bias, 1, "bias")
    out_ch, in_ch, k, k2 = kernels.shape
    n, c, h, w = x.shape
    if k != k2:
        raise ShapeError(f"kernels must be square, got {k}x{k2}")
    if c != in_ch:
        raise ShapeError(f"input has {c} channels but kernels expect {in_ch}")
    if bias.shape != (out_ch,):
        raise ShapeError(f"bias shape {bias.shape} != ({out_ch},)")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel, got {k}")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    # (O, C, k, k) -> (k*k*C, O) to match the im2col column order
    wmat = kernels.transpose(2, 3, 1, 0).reshape(-1, out_ch)
    out = _correlate_nhwc(xp, wmat, k, ho, wo)
    out += bias
    cache = LayerCache("conv2d", {"xp": xp, "kernels": kernels, "pad": pad, "in_shape": x.shape,
                                  "out_shape": (n, out_ch, ho, wo)})
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def conv2d_backward(cache: LayerCache, upstream, input_grad=True):
    """Gradients ``(grad_input, grad_kernels, grad_bias)``.

    ``input_grad=False`` skips the input gradient (returned as ``None``), which
    a network's first layer never needs.
    """
    d = cache.take("conv2d")
    up = _check_upstream(upstream, d["out_shape"], "conv2d")
    xp, kernels, pad = d["xp"], d["kernels"], d["pad"]
    n, c, h, w = d["in_shape"]
    out_ch, _, k, _ = kernels.shape
    _, _, ho, wo = up.shape
    up_nhwc = up.transpose(0, 2, 3, 1)

    grad_bias = up.sum(axis=(0, 2, 3))
    if k == 1:
        grad_w = up_nhwc.reshape(-1, out_ch).T @ xp.reshape(-1, c)
    else:
        grad_w = np.zeros((out_ch, k * k * c))
        up_rows = np.ascontiguousarray(up_nhwc).reshape(n, ho * wo, out_ch)
        for sl in _chunks(n, ho * wo * c * k * k):
            grad_w += up_rows[sl].reshape(-1, out_ch).T @ _windows(xp[sl], k, ho, wo)
    grad_w = grad_w.reshape(out_ch, k, k, c).transpose(0, 3, 1, 2)

    grad_x = None
    if input_grad:
        # full correlation of the upstream with the flipped kernels
        q = k - 1
        upp = np.zeros((n, ho + 2 * q, wo + 2 * q, out_ch))
        upp[:, q:q + ho, q:q + wo, :] = up_nhwc
        wflip = kernels[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, c)
        dxp = _correlate_nhwc(upp, wflip, k, ho + q, wo + q)
        grad_x = np.ascontiguousarray(dxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))
    return grad_x, np.ascontiguousarray(grad_w), grad_bias


# -------------------------------------------------------------------- pooling


def maxpool2x2_forward(x):
    """2x2 max pool, stride 2, floor mode (odd trailing row/col dropped)."""
    x = _as_tensor(x, 4)
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool needs spatial dims >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = (x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4))
    # argmax returns the first maximum in row-major window order
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, LayerCache("maxpool2x2", {"arg": arg, "in_shape": x.shape})


def maxpool2x2_backward(cache: LayerCache, upstream):
    d = cache.take("maxpool2x2")
    arg = d["arg"]
    n, c, h, w = d["in_shape"]
    up = _check_upstream(upstream, arg.shape, "maxpool2x2")
    ho, wo = arg.shape[2:]
    win = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(win, arg[..., None], up[..., None], axis=-1)
    grad = np.zeros((n, c, h, w))
    grad[:, :, :2 * ho, :2 * wo] = (win.reshape(n, c, ho, wo, 2, 2)
                                    .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo))
    return grad


def global_avgpool_forward(x):
    x = _as_tensor(x, 4)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global average pool needs spatial dims >= 1, got {x.shape}")
    return x.mean(axis=(2, 3)), LayerCache("global_avgpool", {"in_shape": x.shape})


def global_avgpool_backward(cache: LayerCache, upstream):
    d = cache.take("global_avgpool")
    n, c, h, w = d["in_shape"]
    up = _check_upstream(upstream, (n, c), "global_avgpool")
    return np.broadcast_to(up[:, :, None, None] / (h * w), (n, c, h, w)).copy()


# ---------------------------------------------------------------------- dense


def dense_forward(x, weights, bias):
    """Affine map; inputs with more than two dims are flattened per sample."""
    x = _as_tensor(x)
    weights = _as_tensor(weights, 2, "weights")
    bias = _as_tensor(bias, 1, "bias")
    if x.ndim < 2:
        raise ShapeError(f"dense input needs a batch dim, got shape {x.shape}")
    flat = x.reshape(x.shape[0], -1)
    out_dim, in_dim = weights.shape
    if flat.shape[1] != in_dim:
        raise ShapeError(f"dense input width {flat.shape[1]} != weight in-dimension {in_dim}")
    if bias.shape != (out_dim,):
        raise ShapeError(f"bias shape {bias.shape} != ({out_dim},)")
    out = flat @ weights.T + bias
    return out, LayerCache("dense", {"x": flat, "weights": weights, "in_shape": x.shape})


def dense_backward(cache: LayerCache, upstream):
    d = cache.take("dense")
    flat, weights = d["x"], d["weights"]
    up = _check_upstream(upstream, (flat.shape[0], weights.shape[0]), "dense")
    grad_x = (up @ weights).reshape(d["in_shape"])
    return grad_x, up.T @ flat, up.sum(axis=0)


# ----------------------------------------------------------------- activations


def relu(x):
    x = _as_tensor(x)
    mask = x > 0
    return np.where(mask, x, 0.0), LayerCache("relu", {"mask": mask})


def relu_backward(cache: LayerCache, upstream):
    mask = cache.take("relu")["mask"]
    up = _check_upstream(upstream, mask.shape, "relu")
    # gradient at exactly 0 is defined as 0
    return np.where(mask, up, 0.0)


def softmax(logits):
    logits = _as_tensor(logits, 2, "logits")
    if logits.shape[1] < 1:
        raise ShapeError("softmax needs at least one class")
    with np.errstate(over="ignore"):  # -inf after the shift is a clean zero below
        z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------- batch normalization


def _channel_sum(x):
    """Per-channel sum over every axis but 1; reduces the contiguous axes first."""
    if x.ndim == 4:
        return x.sum(axis=(2, 3)).sum(axis=0)
    return x.sum(axis=0)


def _channel_dot(a, b):
    """Per-channel sum of ``a * b`` without materializing the product."""
    if a.ndim == 4:
        n, c = a.shape[:2]
        return np.einsum("ncs,ncs->c", a.reshape(n, c, -1), b.reshape(n, c, -1))
    return np.einsum("nc,nc->c", a, b)


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batchnorm input must be 2-D or 4-D, got shape {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode=TRAIN,
                      momentum=0.9, epsilon=1e-5):
    """Per-channel batch normalization.

    Returns ``(output, cache, (running_mean, running_var))``. In train mode the
    running statistics are the updated copies
    ``momentum * running + (1 - momentum) * batch_stat`` where the batch
    variance is the biased one used for normalization; infer mode returns the
    inputs unchanged. Input arrays are never mutated.
    """
    _check_mode(mode)
    x = _as_tensor(x)
    axes, bshape = _bn_axes(x)
    ch = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if np.shape(arr) != (ch,):
            raise ShapeError(f"{name} shape {np.shape(arr)} != ({ch},)")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    running_mean = np.asarray(running_mean, dtype=np.float64)
    running_var = np.asarray(running_var, dtype=np.float64)

    if mode == TRAIN:
        count = x.size // ch
        if count < 2:
            raise ShapeError("train-mode batchnorm needs >= 2 values per channel "
                             f"(batch x spatial), got {count}")
        mean = _channel_sum(x) / count
        centred = x - mean.reshape(bshape)
        var = _channel_dot(centred, centred) / count
        new_stats = (momentum * running_mean + (1 - momentum) * mean,
                     momentum * running_var + (1 - momentum) * var)
    else:
        mean, var = running_mean, running_var
        centred = x - mean.reshape(bshape)
        new_stats = (running_mean.copy(), running_var.copy())

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = centred
    xhat *= inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat
    out += beta.reshape(bshape)
    cache = LayerCache("batchnorm", {"xhat": xhat, "inv_std": inv_std, "gamma": gamma,
                                     "mode": mode, "axes": axes, "bshape": bshape})
    return out, cache, new_stats


def batchnorm_backward(cache: LayerCache, upstream):
    d = cache.take("batchnorm")
    xhat, inv_std, gamma = d["xhat"], d["inv_std"], d["gamma"]
    axes, bshape = d["axes"], d["bshape"]
    up = _check_upstream(upstream, xhat.shape, "batchnorm")
    grad_beta = _channel_sum(up)
    grad_gamma = _channel_dot(up, xhat)
    scale = (gamma * inv_std).reshape(bshape)
    if d["mode"] == INFER:
        return up * scale, grad_gamma, grad_beta
    m = xhat.size // xhat.shape[1]
    grad_x = xhat * (-grad_gamma / m).reshape(bshape)
    grad_x += up
    grad_x -= (grad_beta / m).reshape(bshape)
    grad_x *= scale
    return grad_x, grad_gamma, grad_beta


# -------------------------------------------------------------------- dropout


def dropout_forward(x, p, mode=TRAIN, rng: Rng | None = None):
    """Inverted dropout: survivors scaled by 1/(1-p), identity at inference."""
    _check_mode(mode)
    if not 0 <= p < 1:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if mode == INFER or p == 0:
        return x.copy(), LayerCache("dropout", {"scale": None, "shape": x.shape})
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * scale, LayerCache("dropout", {"scale": scale, "shape": x.shape})


def dropout_backward(cache: LayerCache, upstream):
    d = cache.take("dropout")
    up = _check_upstream(upstream, d["shape"], "dropout")
    return up.copy() if d["scale"] is None else up * d["scale"]
