"""Small reverse-mode differentiation engine for convolutional networks.

Tensors are float64 numpy arrays in NHWC layout.  A :class:`Network` is a
list of nodes, each applying a stateless layer to the outputs of earlier
nodes; parameters live in a separate :class:`ParameterSet`, so evaluating a
network never mutates its weights.
"""

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1
INPUT = "input"


class ShapeError(ValueError):
    """Incompatible tensor shapes; the message names the offending layer."""


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    grad_clip: float = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


class ParameterSet:
    """Named float64 tensors with a per-tensor frozen flag."""

    def __init__(self, tensors, frozen=()):
        self.tensors = dict(tensors)
        self.frozen = frozenset(frozen)
        unknown = self.frozen - set(self.tensors)
        if unknown:
            raise KeyError(f"frozen names not in parameter set: {sorted(unknown)}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def trainable(self):
        return [n for n in self.tensors if n not in self.frozen]

    def with_frozen(self, frozen):
        return ParameterSet(self.tensors, frozen)

    def copy(self):
        return ParameterSet({k: v.copy() for k, v in self.tensors.items()}, self.frozen)

    def equals(self, other):
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n], other[n]) for n in self.tensors)

    def num_values(self):
        return int(sum(v.size for v in self.tensors.values()))


# -- layers --------------------------------------------------------------------


class Layer:
    """Stateless layer; ``forward`` returns (output, cache)."""

    name = ""

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def forward(self, params, *xs):
        raise NotImplementedError

    def backward(self, params, cache, dy, need_dx, need_params):
        """Return (list of input gradients or None, dict of parameter grads)."""
        raise NotImplementedError

    def _check_rank(self, x, rank=4):
        if x.ndim != rank:
            raise ShapeError(f"layer {self.name!r}: expected rank {rank} input, got shape {x.shape}")


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Conv2d(Layer):
    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1, padding=1):
        self.name = name
        self.cin, self.cout = in_channels, out_channels
        self.k, self.stride, self.pad = kernel, stride, padding

    def param_shapes(self):
        return {f"{self.name}.w": (self.cout, self.cin, self.k, self.k), f"{self.name}.b": (self.cout,)}

    def init_params(self, rng):
        k2 = self.k * self.k
        w = _glorot(rng, (self.cout, self.cin, self.k, self.k), self.cin * k2, self.cout * k2)
        return {f"{self.name}.w": w, f"{self.name}.b": np.zeros(self.cout)}

    def forward(self, params, x):
        self._check_rank(x)
        if x.shape[3] != self.cin:
            raise ShapeError(f"layer {self.name!r}: expected {self.cin} channels, got {x.shape[3]}")
        p, k, s = self.pad, self.k, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        if xp.shape[1] < k or xp.shape[2] < k:
            raise ShapeError(f"layer {self.name!r}: input {x.shape} smaller than kernel {k}")
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        n, ho, wo = win.shape[:3]
        cols = win.reshape(n * ho * wo, self.cin * k * k)
        wmat = params[f"{self.name}.w"].reshape(self.cout, -1)
        y = cols @ wmat.T + params[f"{self.name}.b"]
        return y.reshape(n, ho, wo, self.cout), (cols, xp.shape, x.shape, ho, wo)

    def backward(self, params, cache, dy, need_dx, need_params):
        cols, xp_shape, x_shape, ho, wo = cache
        d2 = dy.reshape(-1, self.cout)
        grads = {}
        if need_params:
            grads[f"{self.name}.w"] = (d2.T @ cols).reshape(self.cout, self.cin, self.k, self.k)
            grads[f"{self.name}.b"] = d2.sum(axis=0)
        if not need_dx:
            return [None], grads
        k, s, p = self.k, self.stride, self.pad
        dcols = (d2 @ params[f"{self.name}.w"].reshape(self.cout, -1)).reshape(
            x_shape[0], ho, wo, self.cin, k, k)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[..., i, j]
        dx = dxp[:, p:p + x_shape[1], p:p + x_shape[2], :] if p else dxp
        return [dx], grads


class MaxPool2d(Layer):
    """Non-overlapping max pooling (kernel = stride), floor mode."""

    def __init__(self, name, size=2):
        self.name, self.size = name, size

    def forward(self, params, x):
        self._check_rank(x)
        n, h, w, c = x.shape
        s = self.size
        ho, wo = h // s, w // s
        if ho == 0 or wo == 0:
            raise ShapeError(f"layer {self.name!r}: input {x.shape} smaller than pool size {s}")
        win = x[:, :ho * s, :wo * s].reshape(n, ho, s, wo, s, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, ho, wo, c, s * s)
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape)

    def backward(self, params, cache, dy, need_dx, need_params):
        if not need_dx:
            return [None], {}
        arg, shape = cache
        n, h, w, c = shape
        s = self.size
        ho, wo = dy.shape[1:3]
        dwin = np.zeros((n, ho, wo, c, s * s))
        np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, ho, wo, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * s, wo * s, c)
        dx = np.zeros(shape)
        dx[:, :ho * s, :wo * s] = dwin
        return [dx], {}


class ReLU(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dy, need_dx, need_params):
        return [dy * cache if need_dx else None], {}


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Sigmoid(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, params, x):
        y = sigmoid(x)
        return y, y

    def backward(self, params, cache, dy, need_dx, need_params):
        return [dy * cache * (1.0 - cache) if need_dx else None], {}


class Linear(Layer):
    """Fully connected layer; inputs of rank > 2 are flattened per example."""

    def __init__(self, name, in_features, out_features):
        self.name = name
        self.fin, self.fout = in_features, out_features

    def param_shapes(self):
        return {f"{self.name}.w": (self.fout, self.fin), f"{self.name}.b": (self.fout,)}

    def init_params(self, rng):
        return {f"{self.name}.w": _glorot(rng, (self.fout, self.fin), self.fin, self.fout),
                f"{self.name}.b": np.zeros(self.fout)}

    def forward(self, params, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.fin:
            raise ShapeError(f"layer {self.name!r}: expected {self.fin} features, got {flat.shape[1]}")
        return flat @ params[f"{self.name}.w"].T + params[f"{self.name}.b"], (flat, x.shape)

    def backward(self, params, cache, dy, need_dx, need_params):
        flat, shape = cache
        grads = {}
        if need_params:
            grads[f"{self.name}.w"] = dy.T @ flat
            grads[f"{self.name}.b"] = dy.sum(axis=0)
        dx = (dy @ params[f"{self.name}.w"]).reshape(shape) if need_dx else None
        return [dx], grads


class Concat(Layer):
    """Channel (last-axis) concatenation of several inputs."""

    def __init__(self, name):
        self.name = name

    def forward(self, params, *xs):
        lead = xs[0].shape[:-1]
        for x in xs[1:]:
            if x.shape[:-1] != lead:
                raise ShapeError(f"layer {self.name!r}: cannot concatenate {[x.shape for x in xs]}")
        return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]

    def backward(self, params, cache, dy, need_dx, need_params):
        splits = np.cumsum(cache)[:-1]
        return list(np.split(dy, splits, axis=-1)), {}


def _interp_matrix(n_in, n_out):
    """Bilinear interpolation weights (align-corners off) as an (n_out, n_in) matrix."""
    m = np.zeros((n_out, n_in))
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


class Upsample(Layer):
    """Bilinear upsampling by an integer factor."""

    def __init__(self, name, factor=2):
        self.name, self.factor = name, factor

    def forward(self, params, x):
        self._check_rank(x)
        n, h, w, c = x.shape
        ah = _interp_matrix(h, h * self.factor)
        aw = _interp_matrix(w, w * self.factor)
        y = np.einsum("ih,nhwc,jw->nijc", ah, x, aw, optimize=True)
        return y, (ah, aw)

    def backward(self, params, cache, dy, need_dx, need_params):
        if not need_dx:
            return [None], {}
        ah, aw = cache
        return [np.einsum("ih,nijc,jw->nhwc", ah, dy, aw, optimize=True)], {}


# -- networks --------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    name: str
    layer: Layer
    inputs: tuple = (INPUT,)


class Network:
    """A directed acyclic graph of layers evaluated in listed order."""

    def __init__(self, nodes, outputs):
        self.nodes = list(nodes)
        self.outputs = list(outputs)
        seen = {INPUT}
        for node in self.nodes:
            for src in node.inputs:
                if src not in seen:
                    raise ValueError(f"node {node.name!r} reads {src!r} before it is defined")
            seen.add(node.name)
        missing = set(self.outputs) - seen
        if missing:
            raise ValueError(f"unknown outputs {sorted(missing)}")

    @classmethod
    def sequential(cls, layers):
        nodes, prev = [], INPUT
        for layer in layers:
            nodes.append(Node(layer.name, layer, (prev,)))
            prev = layer.name
        return cls(nodes, [prev])

    def param_shapes(self):
        shapes = {}
        for node in self.nodes:
            shapes.update(node.layer.param_shapes())
        return shapes

    def init_params(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        tensors = {}
        for node in self.nodes:
            tensors.update(node.layer.init_params(rng))
        return ParameterSet(tensors)

    def layer_param_names(self):
        return {n.name: list(n.layer.param_shapes()) for n in self.nodes}

    def forward(self, params, x, record=False):
        values = {INPUT: np.asarray(x, dtype=np.float64)}
        caches = {}
        for node in self.nodes:
            try:
                out, cache = node.layer.forward(params, *(values[s] for s in node.inputs))
            except ShapeError:
                raise
            except ValueError as exc:  # numpy broadcasting and reshape failures
                raise ShapeError(f"layer {node.name!r}: {exc}") from exc
            values[node.name] = out
            if record:
                caches[node.name] = cache
        outputs = {name: values[name] for name in self.outputs}
        if record:
            return outputs, (values, caches)
        return outputs

    def _requires_grad(self, params, input_grad):
        req = {INPUT: input_grad}
        for node in self.nodes:
            own = any(p not in params.frozen for p in node.layer.param_shapes())
            req[node.name] = own or any(req[s] for s in node.inputs)
        return req

    def backward(self, params, tape, grad_outputs, input_grad=False):
        """Backpropagate ``grad_outputs``; returns grads for unfrozen params (and input)."""
        values, caches = tape
        req = self._requires_grad(params, input_grad)
        grads_v = {k: np.asarray(v, dtype=np.float64) for k, v in grad_outputs.items()}
        pgrads = {}
        for node in reversed(self.nodes):
            dy = grads_v.pop(node.name, None)
            if dy is None or not req[node.name]:
                continue
            own = [p for p in node.layer.param_shapes() if p not in params.frozen]
            need_dx = any(req[s] for s in node.inputs)
            dxs, g = node.layer.backward(params, caches[node.name], dy, need_dx, bool(own))
            for pname in own:
                pgrads[pname] = g[pname]
            if not need_dx:
                continue
            for src, dx in zip(node.inputs, dxs):
                if dx is None or not req[src]:
                    continue
                grads_v[src] = grads_v[src] + dx if src in grads_v else dx
        if input_grad:
            pgrads[INPUT] = grads_v.get(INPUT, np.zeros_like(values[INPUT]))
        return pgrads


# -- losses ----------------------------------------------------------------------


def logistic_loss(logits, targets, weights=None):
    """Weighted mean binary cross-entropy on logits; returns (loss, dloss/dlogits)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), z.shape)
    w = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("logistic loss needs positive total weight")
    per = np.logaddexp(0.0, z) - t * z
    loss = float((w * per).sum() / total)
    return loss, w * (sigmoid(z) - t) / total


def smooth_l1(pred, target, weights=None, normalizer=None):
    """Summed smooth-L1 (beta 1) divided by ``normalizer``; returns (loss, grad)."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    w = np.ones_like(d) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), d.shape)
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    norm = 1.0 if normalizer is None else float(normalizer)
    if norm <= 0:
        raise ValueError("normalizer must be positive")
    grad = np.where(ad < 1.0, d, np.sign(d)) * w / norm
    return float((w * per).sum() / norm), grad


def forward_backward(net, params, x, loss_fn, input_grad=False):
    """Run forward, apply ``loss_fn(outputs) -> (loss, grad_outputs)`` and backprop."""
    outputs, tape = net.forward(params, x, record=True)
    loss, grad_outputs = loss_fn(outputs)
    if not isinstance(grad_outputs, dict):
        if len(net.outputs) != 1:
            raise ValueError("loss_fn must return a dict of output gradients for multi-output networks")
        grad_outputs = {net.outputs[0]: grad_outputs}
    return loss, net.backward(params, tape, grad_outputs, input_grad=input_grad)


# -- optimisation ----------------------------------------------------------------


def sgd_step(params, grads, config, velocity=None):
    """One momentum-SGD step. Returns (new ParameterSet, new velocity).

    Frozen tensors are passed through untouched; every trainable tensor must
    have a gradient.
    """
    velocity = {} if velocity is None else velocity
    trainable = params.trainable()
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    scale = 1.0
    if config.grad_clip:
        norm = np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in trainable))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
    new_tensors = dict(params.tensors)
    new_velocity = dict(velocity)
    for name in trainable:
        g = grads[name] * scale
        v = config.momentum * velocity[name] + g if name in velocity else g
        new_velocity[name] = v
        new_tensors[name] = params[name] - config.learning_rate * v
    return ParameterSet(new_tensors, params.frozen), new_velocity


# -- checkpoints -----------------------------------------------------------------


def checkpoint_bytes(params, extra=None):
    """Serialize: one JSON header line, then little-endian float64 payload."""
    names = params.names()
    offsets, pos = [], 0
    for n in names:
        offsets.append(pos)
        pos += params[n].size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "names": names,
        "shapes": [list(params[n].shape) for n in names],
        "frozen": [n in params.frozen for n in names],
        "offsets": offsets,
        "total_bytes": pos,
        "extra": extra or {},
    }
    chunks = [json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"]
    chunks += [np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names]
    return b"".join(chunks)


def save_checkpoint(path, params, extra=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    payload = data[nl + 1:]
    if len(payload) != header["total_bytes"]:
        raise ValueError(f"checkpoint payload is {len(payload)} bytes, header says {header['total_bytes']}")
    tensors, frozen = {}, []
    for name, shape, off, fz in zip(header["names"], header["shapes"], header["offsets"], header["frozen"]):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload[off:off + 8 * count], dtype="<f8").astype(np.float64)
        tensors[name] = arr.reshape(shape)
        if fz:
            frozen.append(name)
    return ParameterSet(tensors, frozen), header["extra"]

