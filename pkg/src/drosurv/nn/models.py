"""Linear scores and ReLU multilayer perceptrons stored in one flat parameter vector."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

KINDS = ("linear", "mlp-scalar", "mlp-simplex")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden: tuple = ()
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.kind == "linear" and (self.hidden or self.output_dim != 1):
            raise ValueError("linear model has no hidden layers and a single output")
        if self.kind == "mlp-scalar" and self.output_dim != 1:
            raise ValueError("mlp-scalar has output_dim 1")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")

    @classmethod
    def linear(cls, d):
        return cls("linear", d)

    @classmethod
    def mlp_scalar(cls, d, hidden=(24,)):
        return cls("mlp-scalar", d, tuple(hidden), 1)

    @classmethod
    def mlp_simplex(cls, d, m, hidden=(32,)):
        return cls("mlp-simplex", d, tuple(hidden), m)

    @property
    def scalar(self) -> bool:
        return self.kind != "mlp-simplex"

    def layout(self):
        """List of ``(name, slice, shape)`` for every tensor inside the flat vector."""
        if self.kind == "linear":
            return [("w0", slice(0, self.input_dim), (self.input_dim,))]
        out, start = [], 0
        widths = (self.input_dim, *self.hidden, self.output_dim)
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            out.append((f"w{k}", slice(start, start + a * b), (a, b)))
            start += a * b
            out.append((f"b{k}", slice(start, start + b), (b,)))
            start += b
        return out

    @property
    def n_params(self) -> int:
        return self.layout()[-1][1].stop

    def to_dict(self):
        return {"kind": self.kind, "input_dim": self.input_dim, "hidden": list(self.hidden),
                "output_dim": self.output_dim, "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d["input_dim"]), tuple(d.get("hidden", ())),
                   int(d.get("output_dim", 1)), d.get("activation", "relu"))


@dataclass
class ModelParams:
    """Flat parameter vector plus, for the exact DRO Cox model, log baseline hazards ``psi``."""

    spec: ModelSpec
    theta: np.ndarray
    psi: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {self.theta.shape}")
        if self.psi is not None:
            self.psi = np.asarray(self.psi, dtype=float)

    def save(self, path):
        payload = {"spec": self.spec.to_dict(), "theta": self.theta.tolist(),
                   "psi": None if self.psi is None else self.psi.tolist(), "meta": self.meta}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        psi = payload.get("psi")
        return cls(ModelSpec.from_dict(payload["spec"]), np.array(payload["theta"]),
                   None if psi is None else np.array(psi), payload.get("meta", {}))


def init_params(spec: ModelSpec, seed: int = 0) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.n_params)
    for name, sl, shape in spec.layout():
        if name.startswith("b"):
            continue
        fan_in = shape[0]
        fan_out = shape[1] if len(shape) > 1 else 1
        a = np.sqrt(6.0 / (fan_in + fan_out))
        theta[sl] = rng.uniform(-a, a, size=sl.stop - sl.start)
    return theta


def forward(spec: ModelSpec, theta, X):
    """Batch forward pass.

    ``theta`` may be a numpy array or a :class:`Var`; ``X`` is ``(n, d)``.
    Returns scores of shape ``(n,)`` for scalar kinds and head logits ``(n, out)``
    for the simplex kind.
    """
    theta = ad.as_var(theta)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs with {spec.input_dim} columns, got shape {X.shape}")
    layers = spec.layout()
    if spec.kind == "linear":
        return ad.as_var(X) @ theta[layers[0][1]]
    h = ad.as_var(X)
    n_layers = len(layers) // 2
    for k in range(n_layers):
        _, wsl, wshape = layers[2 * k]
        _, bsl, _ = layers[2 * k + 1]
        h = h @ theta[wsl].reshape(*wshape) + theta[bsl]
        if k < n_layers - 1:
            h = ad.relu(h)
    if spec.kind == "mlp-scalar":
        return h.reshape(-1)
    return h


def predict_simplex(spec: ModelSpec, theta, X):
    return ad.softmax(forward(spec, theta, X), axis=1)


def preactivations(spec: ModelSpec, theta, X):
    """Hidden pre-activation values; used to stay away from relu kinks in gradient checks."""
    theta = np.asarray(theta, dtype=float)
    layers = spec.layout()
    out = []
    h = np.asarray(X, dtype=float)
    for k in range(len(layers) // 2 - 1):
        _, wsl, wshape = layers[2 * k]
        _, bsl, _ = layers[2 * k + 1]
        z = h @ theta[wsl].reshape(wshape) + theta[bsl]
        out.append(z)
        h = np.maximum(z, 0)
    return out


def forward_scalar(x, spec: ModelSpec, params) -> float:
    if not spec.scalar:
        raise ValueError("forward_scalar needs a scalar-output model")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(forward(spec, np.asarray(params, dtype=float), x).value[0])


def forward_simplex(x, spec: ModelSpec, params) -> np.ndarray:
    if spec.scalar:
        raise ValueError("forward_simplex needs an mlp-simplex model")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return predict_simplex(spec, np.asarray(params, dtype=float), x).value[0]
