"""Network specifications, builders and graph execution.

A network is an ordered chain of :class:`LayerSpec`; a ``concat`` layer holds
parallel branches (each itself a chain) whose outputs are stacked along the
channel axis, which is all the Fire module needs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .layers import INFER, TRAIN, ShapeError
from .rng import Rng

KINDS = ("conv", "maxpool", "dense", "relu", "softmax", "batchnorm", "dropout",
         "global_avgpool", "concat")

# BN defaults; common library values, logged as a choice.
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    n: int = 0            # conv filters / dense units
    k: int = 0            # conv kernel size
    padding: str = "valid"
    p: float = 0.0        # dropout probability
    branches: tuple = ()  # concat only: tuple of LayerSpec chains

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense") and self.n < 1:
            raise ValueError(f"{self.name}: {self.kind} needs a positive width, got {self.n}")
        if self.kind == "conv" and self.k < 1:
            raise ValueError(f"{self.name}: kernel size must be >= 1")
        if self.kind == "dropout" and not 0 <= self.p < 1:
            raise ValueError(f"{self.name}: drop probability must be in [0, 1)")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        if self.kind == "conv":
            d.update(n=self.n, k=self.k, padding=self.padding)
        elif self.kind == "dense":
            d["n"] = self.n
        elif self.kind == "dropout":
            d["p"] = self.p
        elif self.kind == "concat":
            d["branches"] = [[l.to_dict() for l in b] for b in self.branches]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if "branches" in d:
            d["branches"] = tuple(tuple(cls.from_dict(x) for x in b) for b in d["branches"])
        return cls(**d)


def _walk(chain):
    for layer in chain:
        yield layer
        for branch in layer.branches:
            yield from _walk(branch)


def _propagate(chain, shape, shapes):
    """Propagate a (C, H, W) or (F,) shape through a chain, recording outputs."""
    for layer in chain:
        kind = layer.kind
        if kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"{layer.name}: conv needs a feature map, got {shape}")
            c, h, w = shape
            if layer.padding == "same":
                if layer.k % 2 == 0:
                    raise ShapeError(f"{layer.name}: 'same' padding needs an odd kernel")
                shape = (layer.n, h, w)
            else:
                ho, wo = h - layer.k + 1, w - layer.k + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"{layer.name}: {layer.k}x{layer.k} kernel does not fit a {h}x{w} input")
                shape = (layer.n, ho, wo)
        elif kind == "maxpool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ShapeError(f"{layer.name}: 2x2 pool needs spatial dims >= 2, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "dense":
            shape = (layer.n,)
        elif kind == "global_avgpool":
            if len(shape) != 3:
                raise ShapeError(f"{layer.name}: global average pool needs a feature map")
            shape = (shape[0],)
        elif kind == "softmax":
            if len(shape) != 1:
                raise ShapeError(f"{layer.name}: softmax needs a flat input, got {shape}")
        elif kind == "concat":
            outs = [_propagate(b, shape, shapes) for b in layer.branches]
            if any(len(o) != 3 or o[1:] != outs[0][1:] for o in outs):
                raise ShapeError(f"{layer.name}: branch outputs disagree: {outs}")
            shape = (sum(o[0] for o in outs),) + outs[0][1:]
        shapes[layer.name] = shape
    return shape


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    input_size: int
    class_count: int
    feature_tap: str | None = None
    in_channels: int = 1

    def __post_init__(self):
        names = [l.name for l in _walk(self.layers)]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.name}: duplicate layer names")
        if self.feature_tap is not None and self.feature_tap not in names:
            raise ValueError(f"{self.name}: feature tap {self.feature_tap!r} names no layer")
        out = self.output_shapes()[self.layers[-1].name]
        if out != (self.class_count,):
            raise ShapeError(f"{self.name}: network output {out} != ({self.class_count},)")

    def output_shapes(self) -> dict:
        shapes = {}
        _propagate(self.layers, (self.in_channels, self.input_size, self.input_size), shapes)
        return shapes

    def input_shapes(self) -> dict:
        """Input shape seen by every parametric layer (conv, dense, batchnorm)."""
        result = {}

        def run(chain, shape):
            for layer in chain:
                result[layer.name] = shape
                if layer.kind == "concat":
                    outs = [run(b, shape) for b in layer.branches]
                    shape = (sum(o[0] for o in outs),) + outs[0][1:]
                else:
                    shape = _propagate((layer,), shape, {})
            return shape

        run(self.layers, (self.in_channels, self.input_size, self.input_size))
        return result

    def to_text(self) -> str:
        """Canonical text form (sorted-key JSON, no whitespace)."""
        d = {"name": self.name, "input_size": self.input_size, "class_count": self.class_count,
             "feature_tap": self.feature_tap, "in_channels": self.in_channels,
             "layers": [l.to_dict() for l in self.layers]}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        d["layers"] = tuple(LayerSpec.from_dict(x) for x in d["layers"])
        return cls(**d)

    def with_input_size(self, s: int) -> "NetworkSpec":
        return replace(self, input_size=s)


# ------------------------------------------------------------------- builders


def conv(name, n, k, padding="valid"):
    return LayerSpec("conv", name, n=n, k=k, padding=padding)


def build_fire_module(s11, e11, e33, prefix="fire"):
    """Squeeze 1x1 -> ReLU -> [1x1 expand | 3x3 expand] (each ReLU) -> concat -> BN."""
    for v in (s11, e11, e33):
        if v < 1:
            raise ValueError(f"Fire filter counts must be >= 1, got {(s11, e11, e33)}")
    return (
        conv(f"{prefix}_squeeze", s11, 1, "same"),
        LayerSpec("relu", f"{prefix}_squeeze_relu"),
        LayerSpec("concat", f"{prefix}_concat", branches=(
            (conv(f"{prefix}_e11", e11, 1, "same"), LayerSpec("relu", f"{prefix}_e11_relu")),
            (conv(f"{prefix}_e33", e33, 3, "same"), LayerSpec("relu", f"{prefix}_e33_relu")),
        )),
        LayerSpec("batchnorm", f"{prefix}_bn"),
    )


def build_tiny_module(f, prefix="tiny"):
    if f < 1:
        raise ValueError(f"Tiny filter count must be >= 1, got {f}")
    return (
        conv(f"{prefix}_conv3", f, 3, "same"),
        LayerSpec("relu", f"{prefix}_conv3_relu"),
        conv(f"{prefix}_conv1", f, 1, "same"),
        LayerSpec("relu", f"{prefix}_conv1_relu"),
        LayerSpec("batchnorm", f"{prefix}_bn"),
        LayerSpec("maxpool", f"{prefix}_pool"),
    )


def build_small_fire(s, e, prefix="smallfire"):
    return (build_fire_module(s, e, e, f"{prefix}_fire1")
            + build_fire_module(s, e, e, f"{prefix}_fire2")
            + (LayerSpec("batchnorm", f"{prefix}_bn"), LayerSpec("maxpool", f"{prefix}_pool")))


def build_classic_cnn(s=96, m=64, c=11, regularizer="bn", p=0.5) -> NetworkSpec:
    """LeNet-style network; the FC(m) activation is the transfer-feature tap.

    BN sits between each conv/FC(m) and its ReLU; dropout only follows the
    FC(m) ReLU. All convolutions are 'valid'.
    """
    if regularizer not in ("bn", "dropout", "none"):
        raise ValueError(f"regularizer must be bn, dropout or none, got {regularizer!r}")
    bn = regularizer == "bn"
    chain = [conv("conv1", 32, 5)]
    chain += [LayerSpec("batchnorm", "conv1_bn")] if bn else []
    chain += [LayerSpec("relu", "conv1_relu"), LayerSpec("maxpool", "pool1"), conv("conv2", 32, 5)]
    chain += [LayerSpec("batchnorm", "conv2_bn")] if bn else []
    chain += [LayerSpec("relu", "conv2_relu"), LayerSpec("maxpool", "pool2"),
              LayerSpec("dense", "fc1", n=m)]
    chain += [LayerSpec("batchnorm", "fc1_bn")] if bn else []
    chain += [LayerSpec("relu", "fc1_relu")]
    chain += [LayerSpec("dropout", "fc1_dropout", p=p)] if regularizer == "dropout" else []
    chain += [LayerSpec("dense", "fc2", n=c), LayerSpec("softmax", "softmax")]
    return NetworkSpec("classic_cnn", tuple(chain), s, c, feature_tap="fc1_relu")


def build_tinynet(c=11, s=96) -> NetworkSpec:
    chain = ()
    for i in range(1, 5):
        chain += build_tiny_module(8, f"tiny{i}")
    chain += (conv("classifier", c, 1, "same"), LayerSpec("global_avgpool", "avgpool"),
              LayerSpec("softmax", "softmax"))
    return NetworkSpec("tinynet", chain, s, c)


def build_firenet(c=11, s=96) -> NetworkSpec:
    chain = (conv("conv1", 8, 5, "same"), LayerSpec("relu", "conv1_relu"))
    chain += build_small_fire(4, 4, "smallfire1") + build_small_fire(4, 4, "smallfire2")
    chain += (conv("classifier", c, 5, "same"), LayerSpec("global_avgpool", "avgpool"),
              LayerSpec("softmax", "softmax"))
    return NetworkSpec("firenet", chain, s, c)


def build(arch: str, s: int, c: int, regularizer="bn", m=64, p=0.5) -> NetworkSpec:
    """Builder dispatch by tag: classic, tiny or fire."""
    if arch == "classic":
        return build_classic_cnn(s, m, c, regularizer, p)
    if regularizer != "bn":
        raise ValueError(f"{arch} is built with batch normalization only")
    if arch == "tiny":
        return build_tinynet(c, s)
    if arch == "fire":
        return build_firenet(c, s)
    raise ValueError(f"unknown architecture {arch!r} (expected classic, tiny or fire)")


# ------------------------------------------------------------------ parameters


def param_shapes(spec: NetworkSpec) -> list:
    """``(layer, tensor key, shape)`` in declaration order, trainable only."""
    in_shapes = spec.input_shapes()
    out = []
    for layer in _walk(spec.layers):
        shape = in_shapes[layer.name]
        if layer.kind == "conv":
            out += [(layer.name, "W", (layer.n, shape[0], layer.k, layer.k)), (layer.name, "b", (layer.n,))]
        elif layer.kind == "dense":
            out += [(layer.name, "W", (layer.n, int(np.prod(shape)))), (layer.name, "b", (layer.n,))]
        elif layer.kind == "batchnorm":
            out += [(layer.name, "gamma", (shape[0],)), (layer.name, "beta", (shape[0],))]
    return out


def buffer_shapes(spec: NetworkSpec) -> list:
    in_shapes = spec.input_shapes()
    out = []
    for layer in _walk(spec.layers):
        if layer.kind == "batchnorm":
            ch = in_shapes[layer.name][0]
            out += [(layer.name, "mean", (ch,)), (layer.name, "var", (ch,))]
    return out


def count_params(spec: NetworkSpec) -> tuple:
    """(trainable count, BN running-statistic buffer count)."""
    trainable = sum(int(np.prod(s)) for _, _, s in param_shapes(spec))
    buffers = sum(int(np.prod(s)) for _, _, s in buffer_shapes(spec))
    return trainable, buffers


@dataclass
class TrainedModel:
    spec: NetworkSpec
    params: dict                       # layer name -> {key: array}
    stats: dict                        # BN layer name -> {"mean": .., "var": ..}
    meta: dict = field(default_factory=dict)

    def copy(self) -> "TrainedModel":
        return TrainedModel(self.spec,
                            {k: {kk: vv.copy() for kk, vv in v.items()} for k, v in self.params.items()},
                            {k: {kk: vv.copy() for kk, vv in v.items()} for k, v in self.stats.items()},
                            dict(self.meta))

    def flat_params(self) -> list:
        return [self.params[name][key] for name, key, _ in param_shapes(self.spec)]

    def validate(self):
        for name, key, shape in param_shapes(self.spec):
            arr = self.params[name][key]
            if arr.shape != shape:
                raise ShapeError(f"{name}.{key}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}.{key}: non-finite values")


def init_params(spec: NetworkSpec, rng: Rng) -> TrainedModel:
    """He-uniform fan-in weights, zero biases, BN gamma=1/beta=0, stats 0/1."""
    params, stats = {}, {}
    for name, key, shape in param_shapes(spec):
        slot = params.setdefault(name, {})
        if key == "W":
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            slot[key] = rng.uniform(-bound, bound, shape)
        elif key == "gamma":
            slot[key] = np.ones(shape)
        else:
            slot[key] = np.zeros(shape)
    for name, key, shape in buffer_shapes(spec):
        stats.setdefault(name, {})[key] = np.zeros(shape) if key == "mean" else np.ones(shape)
    return TrainedModel(spec, params, stats, {"init_seed_state": rng.state})


# ------------------------------------------------------------------- execution


@dataclass
class ForwardResult:
    probabilities: np.ndarray
    logits: np.ndarray
    caches: list
    features: np.ndarray | None
    new_stats: dict


def _run_chain(chain, x, model, mode, rng, tap, found, new_stats, caches):
    for layer in chain:
        kind, name = layer.kind, layer.name
        cache = None
        if kind == "conv":
            prm = model.params[name]
            x, cache = L.conv2d_forward(x, prm["W"], prm["b"], layer.padding)
        elif kind == "dense":
            prm = model.params[name]
            x, cache = L.dense_forward(x, prm["W"], prm["b"])
        elif kind == "relu":
            x, cache = L.relu(x)
        elif kind == "maxpool":
            x, cache = L.maxpool2x2_forward(x)
        elif kind == "global_avgpool":
            x, cache = L.global_avgpool_forward(x)
        elif kind == "batchnorm":
            prm, st = model.params[name], model.stats[name]
            x, cache, (mean, var) = L.batchnorm_forward(
                x, prm["gamma"], prm["beta"], st["mean"], st["var"], mode, BN_MOMENTUM, BN_EPSILON)
            new_stats[name] = {"mean": mean, "var": var}
        elif kind == "dropout":
            x, cache = L.dropout_forward(x, layer.p, mode, rng)
        elif kind == "softmax":
            found["logits"] = x
            x = L.softmax(x)
        elif kind == "concat":
            outs, sub = [], []
            for branch in layer.branches:
                bc = []
                outs.append(_run_chain(branch, x, model, mode, rng, tap, found, new_stats, bc))
                sub.append((bc, outs[-1].shape[1]))
            x = np.concatenate(outs, axis=1)
            cache = sub
        caches.append(cache)
        if name == tap:
            found["features"] = x
    return x


def forward(model: TrainedModel, batch, mode=INFER, rng: Rng | None = None) -> ForwardResult:
    """Run the network on ``batch`` of shape (n, s, s) or (n, 1, s, s)."""
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    spec = model.spec
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    expected = (spec.in_channels, spec.input_size, spec.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"{spec.name} expects batches of shape (n, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}), got {x.shape}")
    found, new_stats, caches = {}, {}, []
    probs = _run_chain(spec.layers, x, model, mode, rng, spec.feature_tap, found, new_stats, caches)
    return ForwardResult(probs, found.get("logits"), caches, found.get("features"), new_stats)


def _back_chain(chain, caches, grad, grads, need_input=True):
    last = len(chain) - 1
    for pos, (layer, cache) in enumerate(zip(reversed(chain), reversed(caches))):
        kind, name = layer.kind, layer.name
        if kind == "softmax":
            continue  # callers pass the gradient w.r.t. the logits
        if kind == "conv":
            grad, gw, gb = L.conv2d_backward(cache, grad, input_grad=need_input or pos != last)
            grads[name] = {"W": gw, "b": gb}
        elif kind == "dense":
            grad, gw, gb = L.dense_backward(cache, grad)
            grads[name] = {"W": gw, "b": gb}
        elif kind == "relu":
            grad = L.relu_backward(cache, grad)
        elif kind == "maxpool":
            grad = L.maxpool2x2_backward(cache, grad)
        elif kind == "global_avgpool":
            grad = L.global_avgpool_backward(cache, grad)
        elif kind == "batchnorm":
            grad, gg, gb = L.batchnorm_backward(cache, grad)
            grads[name] = {"gamma": gg, "beta": gb}
        elif kind == "dropout":
            grad = L.dropout_backward(cache, grad)
        elif kind == "concat":
            total, start = None, 0
            for branch, (bc, width) in zip(layer.branches, cache):
                g = _back_chain(branch, bc, grad[:, start:start + width], grads)
                start += width
                total = g if total is None else total + g
            grad = total
    return grad


def backward(model: TrainedModel, result: ForwardResult, grad_logits, input_grad=True) -> tuple:
    """Gradients of a loss given its gradient w.r.t. the pre-softmax logits.

    Returns ``(param_grads, grad_input)`` with ``param_grads`` keyed like
    ``model.params``; ``grad_input`` is ``None`` when ``input_grad`` is false
    and the first layer is a convolution.
    """
    grads = {}
    grad_input = _back_chain(model.spec.layers, result.caches, grad_logits, grads, input_grad)
    return grads, grad_input


def extract_features(model: TrainedModel, images, batch_size=256) -> np.ndarray:
    """Inference-mode activations at the spec's feature tap."""
    if model.spec.feature_tap is None:
        raise ValueError(f"{model.spec.name} has no feature tap")
    images = np.asarray(images, dtype=np.float64)
    parts = [forward(model, images[i:i + batch_size], INFER).features
             for i in range(0, len(images), batch_size)]
    width = model.spec.output_shapes()[model.spec.feature_tap]
    return np.concatenate(parts) if parts else np.empty((0,) + width)


def predict_proba(model: TrainedModel, images, batch_size=256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    parts = [forward(model, images[i:i + batch_size], INFER).probabilities
             for i in range(0, len(images), batch_size)]
    return np.concatenate(parts) if parts else np.empty((0, model.spec.class_count))
