"""
Neural Networks - small numpy feed-forward networks with analytic gradients and Adam
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ('tanh', 'relu')
OUTPUT_ACTIVATIONS = ('linear', 'tanh')

# Final layer weights start in a narrow band so early outputs sit near zero
FINAL_LAYER_INIT = 3e-3


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: Tuple[int, ...]                    # input, hidden..., output
    hidden_activation: str = 'tanh'
    output_activation: str = 'linear'
    output_scale: Optional[Tuple[float, ...]] = None  # multiplies the squashed output

    def __post_init__(self):
        if len(self.layer_sizes) < 2 or any(size < 1 for size in self.layer_sizes):
            raise ValueError(f"layer_sizes needs an input and an output size, got {self.layer_sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")
        if self.output_scale is not None and len(self.output_scale) != self.output_dim:
            raise ValueError("output_scale must have one entry per output")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def scale(self) -> np.ndarray:
        if self.output_scale is None:
            return np.ones(self.output_dim)
        return np.asarray(self.output_scale, dtype=float)


# Parameters are a flat list [W0, b0, W1, b1, ...], W_i with shape (fan_in, fan_out)
Params = List[np.ndarray]


def init_params(spec: MlpSpec, rng: np.random.Generator) -> Params:
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        bound = FINAL_LAYER_INIT if i == spec.n_layers - 1 else 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(rng.uniform(-bound, bound, size=fan_out))
    return params


def _hidden(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if spec.hidden_activation == 'tanh':
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _hidden_grad(spec: MlpSpec, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if spec.hidden_activation == 'tanh':
        return 1.0 - a ** 2
    return (z > 0.0).astype(float)


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations recorded by a forward pass"""
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray


def mlp_forward(spec: MlpSpec, params: Params, inputs: np.ndarray,
                return_cache: bool = False):
    """Batched forward evaluation; a 1-D input is treated as a batch of one"""
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"Expected input dimension {spec.input_dim}, got {x.shape[1]}")
    if len(params) != 2 * spec.n_layers:
        raise ValueError(f"Expected {2 * spec.n_layers} parameter arrays, got {len(params)}")

    layer_inputs, pre_activations = [], []
    for i in range(spec.n_layers):
        weight, bias = params[2 * i], params[2 * i + 1]
        layer_inputs.append(x)
        z = x @ weight + bias
        pre_activations.append(z)
        if i < spec.n_layers - 1:
            x = _hidden(spec, z)
        elif spec.output_activation == 'tanh':
            x = spec.scale() * np.tanh(z)
        else:
            x = spec.scale() * z

    output = x[0] if single else x
    if return_cache:
        return output, ForwardCache(layer_inputs, pre_activations, x)
    return output


def mlp_gradients(spec: MlpSpec, params: Params, cache: ForwardCache,
                  output_grad: np.ndarray) -> Tuple[Params, np.ndarray]:
    """Reverse accumulation of dLoss/dOutput into parameter and input gradients.

    Gradients are summed over the batch; the caller folds any 1/batch factor
    into output_grad.
    """
    grad = np.atleast_2d(np.asarray(output_grad, dtype=float))
    if grad.shape != cache.output.shape:
        raise ValueError(f"output_grad shape {grad.shape} does not match output {cache.output.shape}")

    last_z = cache.pre_activations[-1]
    grad = grad * spec.scale()
    if spec.output_activation == 'tanh':
        grad = grad * (1.0 - np.tanh(last_z) ** 2)

    param_grads: Params = [None] * len(params)
    for i in range(spec.n_layers - 1, -1, -1):
        layer_input = cache.inputs[i]
        param_grads[2 * i] = layer_input.T @ grad
        param_grads[2 * i + 1] = grad.sum(axis=0)
        grad = grad @ params[2 * i].T
        if i > 0:
            grad = grad * _hidden_grad(spec, cache.pre_activations[i - 1], layer_input)

    return param_grads, grad


class Mlp:
    """Parameters plus the last forward cache"""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator = None, params: Params = None):
        self.spec = spec
        if params is None:
            rng = rng or np.random.Generator(np.random.PCG64(0))
            params = init_params(spec, rng)
        self.params = [np.array(p, dtype=float) for p in params]
        self._cache: Optional[ForwardCache] = None

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return mlp_forward(self.spec, self.params, inputs)

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        output, self._cache = mlp_forward(self.spec, self.params, inputs, return_cache=True)
        return output

    def backward(self, output_grad: np.ndarray) -> Tuple[Params, np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward()")
        return mlp_gradients(self.spec, self.params, self._cache, output_grad)

    def copy(self) -> 'Mlp':
        return Mlp(self.spec, params=[p.copy() for p in self.params])

    def soft_update(self, source: 'Mlp', tau: float):
        """theta <- tau * theta_source + (1 - tau) * theta"""
        for target, value in zip(self.params, source.params):
            target *= 1.0 - tau
            target += tau * value

    def state_dict(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.{i}": p for i, p in enumerate(self.params)}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str):
        loaded = []
        for i, current in enumerate(self.params):
            value = np.asarray(state[f"{prefix}.{i}"], dtype=float)
            if value.shape != current.shape:
                raise ValueError(f"{prefix}.{i} has shape {value.shape}, expected {current.shape}")
            loaded.append(value.copy())
        self.params = loaded


class AdamOptimizer:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Params, grads: Params):
        """In-place update of params"""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
