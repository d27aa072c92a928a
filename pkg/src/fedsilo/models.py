"""Desk-scale model zoo with analytic gradients.

Three model kinds share one functional interface: parameters live in a
flat :class:`ParameterVector`, `forward` produces logits, and
`loss_and_grad` returns the batch loss together with the gradient as a
flat array in layout order. The two-conv-layer CNN is written with
direct convolution loops over kernel offsets; correctness over speed.

Everything is float64 and deterministic for a fixed init seed, which is
what lets two identical federated runs produce bit-identical models.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidConfig
from .params import ModelLayout, ParameterVector

MODEL_KINDS = ("logistic_regression", "mlp", "cnn2")
LOSSES = ("cross_entropy", "mse")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description; fully determines layout and init."""

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden_sizes: tuple[int, ...] = (64,)
    channels: tuple[int, int] = (8, 16)
    kernel_size: int = 3
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        errors = {}
        if self.kind not in MODEL_KINDS:
            errors["kind"] = f"must be one of {MODEL_KINDS}, got {self.kind!r}"
        if self.num_classes < 2:
            errors["num_classes"] = "need at least 2 classes"
        if any(d < 1 for d in self.input_shape) or not self.input_shape:
            errors["input_shape"] = f"bad shape {self.input_shape}"
        if self.kind == "mlp" and (not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes)):
            errors["hidden_sizes"] = "mlp needs at least one positive hidden size"
        if self.kind == "cnn2":
            if len(self.channels) != 2 or any(c < 1 for c in self.channels):
                errors["channels"] = "cnn2 takes exactly two positive channel counts"
            if len(self.input_shape) != 2:
                errors["input_shape"] = "cnn2 expects a 2-d (height, width) input shape"
            elif self.kernel_size < 1:
                errors["kernel_size"] = "kernel size must be positive"
            else:
                try:
                    _cnn_dims(self)
                except ValueError as exc:
                    errors["input_shape"] = str(exc)
        if errors:
            raise InvalidConfig(errors)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden_sizes": list(self.hidden_sizes),
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        if not isinstance(d, dict) or "kind" not in d:
            raise InvalidConfig({"model_spec": "expected an object with a 'kind' field"})
        return cls(
            kind=d["kind"],
            input_shape=tuple(d.get("input_shape", ())),
            num_classes=int(d.get("num_classes", 0)),
            hidden_sizes=tuple(d.get("hidden_sizes", (64,))),
            channels=tuple(d.get("channels", (8, 16))),
            kernel_size=int(d.get("kernel_size", 3)),
            init_seed=int(d.get("init_seed", 0)),
        )


def _cnn_dims(spec: ModelSpec):
    """Spatial dims through conv/pool stages; raises if anything collapses."""
    h, w = spec.input_shape
    k = spec.kernel_size
    stages = []
    for stage in (1, 2):
        h, w = h - k + 1, w - k + 1
        if h < 1 or w < 1:
            raise ValueError(f"input too small for conv stage {stage} with kernel {k}")
        h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(f"input too small for pool stage {stage}")
        stages.append((h, w))
    return stages


def model_layout(spec: ModelSpec) -> ModelLayout:
    """Deterministic named-tensor layout for a model spec."""
    k = spec.num_classes
    if spec.kind == "logistic_regression":
        return ModelLayout((("w", (spec.input_dim, k)), ("b", (k,))))
    if spec.kind == "mlp":
        entries = []
        sizes = (spec.input_dim,) + spec.hidden_sizes + (k,)
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:]), start=1):
            entries.append((f"w{i}", (fan_in, fan_out)))
            entries.append((f"b{i}", (fan_out,)))
        return ModelLayout(tuple(entries))
    # cnn2
    c1, c2 = spec.channels
    kk = spec.kernel_size
    (_, _), (h2, w2) = _cnn_dims(spec)
    flat = c2 * h2 * w2
    hidden = spec.hidden_sizes[0] if spec.hidden_sizes else 64
    return ModelLayout(
        (
            ("conv1_w", (c1, 1, kk, kk)),
            ("conv1_b", (c1,)),
            ("conv2_w", (c2, c1, kk, kk)),
            ("conv2_b", (c2,)),
            ("dense1_w", (flat, hidden)),
            ("dense1_b", (hidden,)),
            ("out_w", (hidden, k)),
            ("out_b", (k,)),
        )
    )


def init_params(spec: ModelSpec) -> ParameterVector:
    """He-style random init, drawn in layout order from the init seed."""
    rng = np.random.default_rng(spec.init_seed)
    layout = model_layout(spec)
    tensors = {}
    for name, shape in layout.entries:
        if name.endswith("_b") or name.startswith("b"):
            tensors[name] = np.zeros(shape)
        else:
            if len(shape) == 4:  # conv kernel: fan_in = in_ch * k * k
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return ParameterVector.from_tensors(layout, tensors)


# --- shared pieces -----------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_dlogits(logits: np.ndarray, y: np.ndarray, loss: str, num_classes: int):
    """Batch loss plus gradient with respect to the logits."""
    n = logits.shape[0]
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), y] = 1.0
    if loss == "cross_entropy":
        p = _softmax(logits)
        value = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
        dlogits = (p - onehot) / n
    elif loss == "mse":
        diff = logits - onehot
        value = np.mean(diff * diff)
        dlogits = 2.0 * diff / (n * num_classes)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return float(value), dlogits


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid convolution, stride 1. x: (n,ci,h,w), w: (co,ci,k,k)."""
    n, ci, h, ww = x.shape
    co, _, k, _ = w.shape
    ho, wo = h - k + 1, ww - k + 1
    out = np.zeros((n, co, ho, wo))
    for di in range(k):
        for dj in range(k):
            window = x[:, :, di : di + ho, dj : dj + wo]
            out += np.einsum("ncij,oc->noij", window, w[:, :, di, dj])
    return out + b[None, :, None, None]


def _conv2d_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    """Gradients of a valid convolution for input, kernel, and bias."""
    n, ci, h, ww = x.shape
    co, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for di in range(k):
        for dj in range(k):
            window = x[:, :, di : di + ho, dj : dj + wo]
            dw[:, :, di, dj] = np.einsum("noij,ncij->oc", dout, window)
            dx[:, :, di : di + ho, dj : dj + wo] += np.einsum(
                "noij,oc->ncij", dout, w[:, :, di, dj]
            )
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def _avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling, stride 2; trailing odd row/col is dropped."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    t = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
    return t.mean(axis=(3, 5))


def _avgpool2_backward(x_shape, dout: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros((n, c, h, w))
    spread = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0
    dx[:, :, : 2 * ho, : 2 * wo] = spread
    return dx


# --- forward passes ----------------------------------------------------------

def _forward_logistic(t: dict, x: np.ndarray):
    logits = x @ t["w"] + t["b"]
    return logits, (x,)


def _forward_mlp(t: dict, x: np.ndarray, n_layers: int):
    acts = [x]
    pre = []
    h = x
    for i in range(1, n_layers + 1):
        z = h @ t[f"w{i}"] + t[f"b{i}"]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_layers else z
        acts.append(h)
    return acts[-1], (acts, pre)


def _forward_cnn2(t: dict, x: np.ndarray):
    n = x.shape[0]
    z1 = _conv2d(x, t["conv1_w"], t["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    p1 = _avgpool2(a1)
    z2 = _conv2d(p1, t["conv2_w"], t["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    p2 = _avgpool2(a2)
    flat = p2.reshape(n, -1)
    zd = flat @ t["dense1_w"] + t["dense1_b"]
    ad = np.maximum(zd, 0.0)
    logits = ad @ t["out_w"] + t["out_b"]
    cache = (x, z1, a1, p1, z2, a2, p2, flat, zd, ad)
    return logits, cache


def _as_images(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    h, w = spec.input_shape
    return x.reshape(x.shape[0], 1, h, w)


def forward(spec: ModelSpec, params: ParameterVector, x: np.ndarray) -> np.ndarray:
    """Logits for a batch of flat feature rows (n, input_dim)."""
    t = params.tensors()
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "logistic_regression":
        return _forward_logistic(t, x.reshape(x.shape[0], -1))[0]
    if spec.kind == "mlp":
        return _forward_mlp(t, x.reshape(x.shape[0], -1), len(spec.hidden_sizes) + 1)[0]
    return _forward_cnn2(t, _as_images(spec, x))[0]


def predict(spec: ModelSpec, params: ParameterVector, x: np.ndarray) -> np.ndarray:
    return forward(spec, params, x).argmax(axis=1)


def loss_and_grad(
    spec: ModelSpec,
    params: ParameterVector,
    x: np.ndarray,
    y: np.ndarray,
    loss: str = "cross_entropy",
) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch loss, flat parameter gradient (layout order), and logits."""
    t = params.tensors()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    grads: dict[str, np.ndarray] = {}

    if spec.kind == "logistic_regression":
        xf = x.reshape(x.shape[0], -1)
        logits, _ = _forward_logistic(t, xf)
        value, dlogits = _loss_and_dlogits(logits, y, loss, spec.num_classes)
        grads["w"] = xf.T @ dlogits
        grads["b"] = dlogits.sum(axis=0)

    elif spec.kind == "mlp":
        n_layers = len(spec.hidden_sizes) + 1
        xf = x.reshape(x.shape[0], -1)
        logits, (acts, pre) = _forward_mlp(t, xf, n_layers)
        value, dlogits = _loss_and_dlogits(logits, y, loss, spec.num_classes)
        dh = dlogits
        for i in range(n_layers, 0, -1):
            grads[f"w{i}"] = acts[i - 1].T @ dh
            grads[f"b{i}"] = dh.sum(axis=0)
            if i > 1:
                dh = (dh @ t[f"w{i}"].T) * (pre[i - 2] > 0)

    else:  # cnn2
        xi = _as_images(spec, x)
        logits, cache = _forward_cnn2(t, xi)
        value, dlogits = _loss_and_dlogits(logits, y, loss, spec.num_classes)
        x0, z1, a1, p1, z2, a2, p2, flat, zd, ad = cache
        grads["out_w"] = ad.T @ dlogits
        grads["out_b"] = dlogits.sum(axis=0)
        dad = dlogits @ t["out_w"].T
        dzd = dad * (zd > 0)
        grads["dense1_w"] = flat.T @ dzd
        grads["dense1_b"] = dzd.sum(axis=0)
        dflat = dzd @ t["dense1_w"].T
        dp2 = dflat.reshape(p2.shape)
        da2 = _avgpool2_backward(a2.shape, dp2)
        dz2 = da2 * (z2 > 0)
        dp1, grads["conv2_w"], grads["conv2_b"] = _conv2d_backward(p1, t["conv2_w"], dz2)
        da1 = _avgpool2_backward(a1.shape, dp1)
        dz1 = da1 * (z1 > 0)
        _, grads["conv1_w"], grads["conv1_b"] = _conv2d_backward(x0, t["conv1_w"], dz1)

    layout = params.layout
    flat_grad = np.empty(layout.total_len)
    for (name, _), sl in zip(layout.entries, layout.slices().values()):
        flat_grad[sl] = grads[name].reshape(-1)
    return value, flat_grad, logits


def batch_loss(
    spec: ModelSpec,
    params: ParameterVector,
    x: np.ndarray,
    y: np.ndarray,
    loss: str = "cross_entropy",
) -> float:
    """Loss only, via the same forward path (used by the finite-diff oracle)."""
    logits = forward(spec, params, x)
    value, _ = _loss_and_dlogits(logits, np.asarray(y, dtype=np.int64), loss, spec.num_classes)
    return value
