"""Small feed-forward nets with hand-written backprop and Adam.

Nets are treated as values: ``adam_step`` returns a new ``Net`` and leaves
the old one untouched, so a snapshot can be shared with rollout code while
the trainer moves on.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, UsageError

ACTIVATIONS = ("tanh", "relu", "identity")
HEADS = ("linear", "softmax")


@dataclass
class Net:
    layer_dims: list[int]
    params: list[np.ndarray]  # [W0, b0, W1, b1, ...]; W has shape (fan_in, fan_out)
    activation: str = "tanh"
    output_head: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise UsageError(f"unknown output head {self.output_head!r}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def copy(self):
        return Net(list(self.layer_dims), [p.copy() for p in self.params], self.activation, self.output_head)

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params])


def init_net(layer_dims, activation="tanh", output_head="linear", seed=0, zero=False):
    """Uniform fan-in initialisation, bound 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        if zero:
            params += [np.zeros((fan_in, fan_out)), np.zeros(fan_out)]
        else:
            params += [rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)]
    return Net(list(layer_dims), params, activation, output_head)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.in_dim:
        raise UsageError(f"input dim {x2.shape[-1]} does not match net input {net.in_dim}")
    return x2, single


def forward_cache(net, x):
    """Forward pass on a batch; returns (pre-head output, cache)."""
    x2, _ = _as_batch(net, x)
    acts = [x2]
    pre = []
    a = x2
    for layer in range(net.n_layers):
        W, b = net.params[2 * layer], net.params[2 * layer + 1]
        z = a @ W + b
        pre.append(z)
        a = z if layer == net.n_layers - 1 else _act(net.activation, z)
        acts.append(a)
    return a, (acts, pre)


def forward(net, x):
    x2, single = _as_batch(net, x)
    out, _ = forward_cache(net, x2)
    if net.output_head == "softmax":
        out = softmax(out)
    return out[0] if single else out


def logits(net, x):
    """Pre-head output (equals ``forward`` for linear heads)."""
    x2, single = _as_batch(net, x)
    out, _ = forward_cache(net, x2)
    return out[0] if single else out


def backward_cache(net, cache, grad_pre):
    """Backprop a gradient w.r.t. the pre-head output through the net."""
    if not np.all(np.isfinite(grad_pre)):
        raise NumericError("non-finite upstream gradient")
    acts, pre = cache
    grads = [None] * len(net.params)
    delta = grad_pre
    for layer in range(net.n_layers - 1, -1, -1):
        grads[2 * layer] = acts[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ net.params[2 * layer].T) * _act_grad(net.activation, pre[layer - 1], acts[layer])
    return grads


def backward(net, x, upstream_grad):
    """Parameter gradients of <upstream_grad, forward(net, x)>.

    ``upstream_grad`` is taken w.r.t. the net's final output, i.e. after the
    softmax for softmax heads.
    """
    x2, single = _as_batch(net, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    g = g[None, :] if single else g
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite upstream gradient")
    out, cache = forward_cache(net, x2)
    if net.output_head == "softmax":
        p = softmax(out)
        g = p * (g - (p * g).sum(axis=1, keepdims=True))
    return backward_cache(net, cache, g)


def zeros_like_params(net):
    return [np.zeros_like(p) for p in net.params]


def add_grads(a, b, scale=1.0):
    return [x + scale * y for x, y in zip(a, b)]


@dataclass
class OptState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8

    def copy(self):
        return OptState([x.copy() for x in self.m], [x.copy() for x in self.v], self.step,
                        self.learning_rate, tuple(self.betas), self.epsilon)


def adam_init(net, learning_rate=1e-3, betas=(0.9, 0.999), epsilon=1e-8):
    return OptState(zeros_like_params(net), zeros_like_params(net), 0, learning_rate, tuple(betas), epsilon)


def adam_step(net, grads, opt):
    """One bias-corrected Adam update. Returns ``(new_net, new_opt)``."""
    if len(grads) != len(net.params) or any(g.shape != p.shape for g, p in zip(grads, net.params)):
        raise UsageError("gradient shapes do not match parameters")
    b1, b2 = opt.betas
    t = opt.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(net.params, grads, opt.m, opt.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - opt.learning_rate * mhat / (np.sqrt(vhat) + opt.epsilon)
        new_params.append(p)
        new_m.append(m)
        new_v.append(v)
    if not all(np.all(np.isfinite(p)) for p in new_params):
        raise NumericError("Adam update produced non-finite parameters")
    new_net = Net(list(net.layer_dims), new_params, net.activation, net.output_head)
    return new_net, OptState(new_m, new_v, t, opt.learning_rate, tuple(opt.betas), opt.epsilon)


def relative_error(analytic, numeric, floor=1e-8):
    """Max elementwise relative error; NaN entries of ``numeric`` (unchecked coordinates) are skipped.

    ``floor`` bounds the denominator from below so that coordinates whose true
    gradient is zero are judged against finite-difference roundoff, not against 0.
    """
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n))))


def numeric_grads(net, scalar_fn, eps=1e-5, mask=None):
    """Central finite differences of ``scalar_fn(net)`` w.r.t. the parameters.

    ``mask`` (one boolean array per parameter) limits the check to selected
    coordinates; the others come back as NaN.
    """
    out = []
    for k, p in enumerate(net.params):
        g = np.zeros_like(p) if mask is None else np.full(p.shape, np.nan)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            if mask is not None and not mask[k][idx]:
                continue
            orig = p[idx]
            p[idx] = orig + eps
            f_plus = scalar_fn(net)
            p[idx] = orig - eps
            f_minus = scalar_fn(net)
            p[idx] = orig
            g[idx] = (f_plus - f_minus) / (2 * eps)
        out.append(g)
    return out


def gradient_check(net, loss_fn, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(output)`` returns ``(loss, dloss/doutput)`` where ``output`` is
    ``forward(net, x)``.
    """
    x2, _ = _as_batch(net, x)
    _, g_out = loss_fn(forward(net, x2))
    analytic = backward(net, x2, g_out)
    numeric = numeric_grads(net, lambda n: loss_fn(forward(n, x2))[0], eps)
    return relative_error(analytic, numeric)


# -- checkpoints ------------------------------------------------------------

def net_manifest(net):
    return {
        "layer_dims": list(map(int, net.layer_dims)),
        "activation": net.activation,
        "output_head": net.output_head,
        "shapes": [list(p.shape) for p in net.params],
        "dtype": "float64",
    }


def save_nets(path, nets: dict):
    """Write named nets to one ``.npz``; the shape manifest rides along as JSON."""
    arrays = {}
    manifest = {}
    for name, net in nets.items():
        manifest[name] = net_manifest(net)
        for k, p in enumerate(net.params):
            arrays[f"{name}/{k}"] = p
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    # np.savez stamps entries with the wall clock; fixed stamps keep checkpoints byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def load_nets(path):
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        nets = {}
        for name, meta in manifest.items():
            params = [np.array(data[f"{name}/{k}"]) for k in range(len(meta["shapes"]))]
            for p, shape in zip(params, meta["shapes"]):
                if list(p.shape) != shape:
                    raise UsageError(f"checkpoint shape mismatch for {name}")
            nets[name] = Net(meta["layer_dims"], params, meta["activation"], meta["output_head"])
    return nets
