"""Minimal differentiable core: dense nets with manual backprop, Adam, and a
finite-difference gradient checker.

All math here is float64 so that gradient-check tolerances are meaningful.
Parameters are exposed as flat lists of arrays ([W0, b0, W1, b1, ...]) shared
between a net, its optimizer state, and the checkpoint writer.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteLossError, ValidationError


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_mask(z: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is defined as 0.
    return z > 0.0


class MlpTape:
    """Activation record of one forward pass; consumed by ``Mlp.backward``."""

    __slots__ = ("layer_sizes", "inputs", "preacts", "squeeze")

    def __init__(self, layer_sizes, inputs, preacts, squeeze):
        self.layer_sizes = layer_sizes
        self.inputs = inputs
        self.preacts = preacts
        self.squeeze = squeeze


class Mlp:
    """Fully connected net: relu on hidden layers, identity on the output layer.

    ``layer_sizes`` of length L+1 gives L affine layers; a two-entry list is a
    single linear map with no nonlinearity.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValidationError("need one bias per weight matrix")
        sizes = [weights[0].shape[0]]
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValidationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if w.shape[0] != sizes[-1]:
                raise ValidationError(f"layer {i}: input dim {w.shape[0]} != previous output {sizes[-1]}")
            sizes.append(w.shape[1])
        self.weights = weights
        self.biases = biases
        self.layer_sizes = tuple(sizes)

    @classmethod
    def create(cls, layer_sizes, rng: np.random.Generator) -> "Mlp":
        """Seeded init: weights uniform in +-sqrt(6/(fan_in+fan_out)), biases 0."""
        if len(layer_sizes) < 2:
            raise ValidationError("need at least input and output sizes")
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, arrays) -> None:
        own = self.params()
        if len(arrays) != len(own):
            raise ValidationError("parameter list length mismatch")
        for dst, src in zip(own, arrays):
            if dst.shape != np.shape(src):
                raise ValidationError("parameter shape mismatch")
            np.copyto(dst, src)

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.ndim != 2 or a.shape[1] != self.in_dim:
            raise ValidationError(f"input dim {a.shape} incompatible with net input {self.in_dim}")
        inputs, preacts = [a], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            preacts.append(z)
            a = relu(z) if i < last else z
            inputs.append(a)
        tape = MlpTape(self.layer_sizes, inputs[:-1], preacts, squeeze)
        y = a[0] if squeeze else a
        return y, tape

    def backward(self, tape: MlpTape, dy: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Exact reverse-mode gradients of <dy, y> w.r.t. parameters and input.

        Returns (grads aligned with ``params()``, gradient w.r.t. the input).
        """
        if tape.layer_sizes != self.layer_sizes:
            raise ValidationError("tape does not match this net")
        dy = np.asarray(dy, dtype=np.float64)
        dz = dy[None, :] if tape.squeeze else np.array(dy, copy=True)
        if dz.ndim != 2 or dz.shape != tape.preacts[-1].shape:
            raise ValidationError("output gradient shape does not match the taped forward pass")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = tape.inputs[i]
            grads[2 * i] = a_in.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            dx = dz @ self.weights[i].T
            if i > 0:
                dz = dx * relu_mask(tape.preacts[i - 1])
        return grads, (dx[0] if tape.squeeze else dx)


class AdamState:
    """Adam optimizer state for one parameter group (list of arrays)."""

    def __init__(self, params, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads) -> None:
        """One bias-corrected Adam update, in place on ``params``."""
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValidationError("optimizer state does not match parameter group")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: AdamState, params, grads) -> None:
    state.step(params, grads)


def finite_diff_check(loss_fn, params, step: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    ``loss_fn(params) -> (value, grads)`` must be deterministic; ``params`` is
    a list of arrays that is perturbed in place and restored.  The relative
    error per coordinate is |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    value, grads = loss_fn(params)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss is non-finite at the evaluation point: {value!r}")
    worst = 0.0
    for arr, grad in zip(params, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up, _ = loss_fn(params)
            flat[idx] = orig - step
            down, _ = loss_fn(params)
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteLossError(f"loss non-finite during perturbation: {up!r}, {down!r}")
            numeric = (up - down) / (2.0 * step)
            analytic = gflat[idx]
            err = abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst
