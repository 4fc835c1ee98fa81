"""First-order optimizers for named parameter collections.

Parameters and gradients travel as dicts mapping tensor name to ndarray, so
the same update code serves the MIL network and plain test vectors. The four
algorithms here are the hyperparameter search's choices; ``SearchSpace``
carries the sampling bounds so they live in config rather than code.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .validation import as_rng

__all__ = [
    "ALGORITHMS",
    "Hyperparams",
    "SearchSpace",
    "OptState",
    "init_opt_state",
    "step",
    "decay_lr",
    "ema_update",
    "evaluation_tensors",
]

ALGORITHMS = ("sgd", "adam", "rmsprop", "adagrad")


@dataclass
class Hyperparams:
    """One training configuration. Fields unused by ``algorithm`` are inert."""

    algorithm: str = "adam"
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    rms_decay: float = 0.9
    epsilon: float = 1e-8
    ema_enabled: bool = False
    ema_momentum: float = 0.99

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"beta2 must lie in [0, 1), got {self.beta2}")
        if not 0.0 < self.rms_decay < 1.0:
            raise ValueError(f"rms_decay must lie in (0, 1), got {self.rms_decay}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must lie in [0, 1], got {self.ema_momentum}")
        self.ema_enabled = bool(self.ema_enabled)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "Hyperparams":
        return cls(**payload)


@dataclass
class SearchSpace:
    """Hyperparameter sampling bounds. Learning rate is drawn log-uniformly,
    every other continuous field uniformly; categorical fields uniformly."""

    lr_bounds: tuple = (1e-5, 1e-2)
    lr_decay_bounds: tuple = (0.9, 1.0)
    momentum_bounds: tuple = (0.0, 0.99)
    beta1_bounds: tuple = (0.85, 0.99)
    beta2_bounds: tuple = (0.99, 0.9999)
    ema_momentum_bounds: tuple = (0.9, 0.999)
    algorithms: tuple = ALGORITHMS
    ema_choices: tuple = (False, True)

    # Continuous Hyperparams fields this space constrains, in sampling order.
    CONTINUOUS = (
        ("learning_rate", "lr_bounds"),
        ("lr_decay", "lr_decay_bounds"),
        ("momentum", "momentum_bounds"),
        ("beta1", "beta1_bounds"),
        ("beta2", "beta2_bounds"),
        ("ema_momentum", "ema_momentum_bounds"),
    )

    def __post_init__(self) -> None:
        for _, bounds_name in self.CONTINUOUS:
            lo, hi = getattr(self, bounds_name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"{bounds_name} must be a finite (lo, hi) pair, got {(lo, hi)}")
        if self.lr_bounds[0] <= 0:
            raise ValueError("lr_bounds must be positive for log-uniform sampling")
        if not self.algorithms:
            raise ValueError("search space offers no algorithms")
        if any(a not in ALGORITHMS for a in self.algorithms):
            raise ValueError(f"unknown algorithm in search space: {self.algorithms}")
        if not self.ema_choices:
            raise ValueError("search space offers no EMA choices")

    def bounds_for(self, field_name: str) -> tuple:
        for name, bounds_name in self.CONTINUOUS:
            if name == field_name:
                return getattr(self, bounds_name)
        raise KeyError(f"{field_name} is not a continuous search field")

    def clamp(self, field_name: str, value: float) -> float:
        lo, hi = self.bounds_for(field_name)
        return min(max(value, lo), hi)

    def sample(self, rng) -> Hyperparams:
        """Draw one configuration. Draw order is fixed for reproducibility:
        algorithm, then the continuous fields in CONTINUOUS order, then EMA."""
        rng = as_rng(rng)
        algorithm = self.algorithms[rng.integers(len(self.algorithms))]
        values = {}
        for name, bounds_name in self.CONTINUOUS:
            lo, hi = getattr(self, bounds_name)
            if name == "learning_rate":
                values[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            else:
                values[name] = float(rng.uniform(lo, hi))
        ema = self.ema_choices[rng.integers(len(self.ema_choices))]
        return Hyperparams(algorithm=algorithm, ema_enabled=bool(ema), **values)


@dataclass
class OptState:
    """Mutable optimizer state for one parameter collection.

    slot1 holds the momentum buffer (SGD), first moment (Adam), or squared
    accumulator (RMSprop, Adagrad); slot2 is Adam's second moment. shadow is
    the EMA of the parameters when EMA is enabled, else None.
    """

    lr: float
    step_count: int = 0
    slot1: dict = field(default_factory=dict)
    slot2: dict = field(default_factory=dict)
    shadow: dict = None

    def copy(self) -> "OptState":
        return OptState(
            lr=self.lr,
            step_count=self.step_count,
            slot1={k: v.copy() for k, v in self.slot1.items()},
            slot2={k: v.copy() for k, v in self.slot2.items()},
            shadow=None if self.shadow is None else {k: v.copy() for k, v in self.shadow.items()},
        )


def init_opt_state(params: dict, hyperparams: Hyperparams) -> OptState:
    state = OptState(lr=hyperparams.learning_rate)
    state.slot1 = {k: np.zeros_like(v) for k, v in params.items()}
    state.slot2 = {k: np.zeros_like(v) for k, v in params.items()}
    if hyperparams.ema_enabled:
        state.shadow = {k: v.copy() for k, v in params.items()}
    return state


def step(state: OptState, params: dict, grads: dict, hyperparams: Hyperparams):
    """Apply one update in place and return (params, state).

    Update rules:
      sgd:     v <- momentum*v + g;            theta <- theta - lr*v
      adam:    bias-corrected m, v;            theta <- theta - lr*m_hat/(sqrt(v_hat)+eps)
      rmsprop: acc <- rho*acc + (1-rho)*g^2;   theta <- theta - lr*g/(sqrt(acc)+eps)
      adagrad: acc <- acc + g^2;               theta <- theta - lr*g/(sqrt(acc)+eps)
    """
    if set(params) != set(grads):
        raise ValueError("params and grads name different tensors")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for tensor {name!r}")
    state.step_count += 1
    lr = state.lr
    eps = hyperparams.epsilon
    algo = hyperparams.algorithm
    if algo == "sgd":
        m = hyperparams.momentum
        for name, theta in params.items():
            v = state.slot1[name]
            v *= m
            v += grads[name]
            theta -= lr * v
    elif algo == "adam":
        b1, b2 = hyperparams.beta1, hyperparams.beta2
        t = state.step_count
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, theta in params.items():
            g = grads[name]
            m = state.slot1[name]
            v = state.slot2[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    elif algo == "rmsprop":
        rho = hyperparams.rms_decay
        for name, theta in params.items():
            g = grads[name]
            acc = state.slot1[name]
            acc *= rho
            acc += (1.0 - rho) * g * g
            theta -= lr * g / (np.sqrt(acc) + eps)
    elif algo == "adagrad":
        for name, theta in params.items():
            g = grads[name]
            acc = state.slot1[name]
            acc += g * g
            theta -= lr * g / (np.sqrt(acc) + eps)
    else:  # unreachable: Hyperparams validates algorithm
        raise ValueError(f"unknown algorithm {algo!r}")
    return params, state


def decay_lr(state: OptState, hyperparams: Hyperparams) -> OptState:
    """Multiplicative per-epoch decay of the working learning rate."""
    state.lr *= hyperparams.lr_decay
    return state


def ema_update(state: OptState, params: dict, hyperparams: Hyperparams) -> OptState:
    """shadow <- m*shadow + (1-m)*params, elementwise.

    Larger momentum weighs prior iterations more. The shadow never feeds
    back into training; it is read only at evaluation time.
    """
    if not hyperparams.ema_enabled:
        raise ValueError("EMA update requested but ema_enabled is false")
    if state.shadow is None:
        # EMA switched on after init (hyperparameter perturbation): start
        # the average at the current parameters.
        state.shadow = {k: v.copy() for k, v in params.items()}
        return state
    m = hyperparams.ema_momentum
    for name, theta in params.items():
        s = state.shadow[name]
        s *= m
        s += (1.0 - m) * theta
    return state


def evaluation_tensors(state: OptState, params: dict, hyperparams: Hyperparams) -> dict:
    """Tensors to evaluate with: the EMA shadow when enabled, else params."""
    if hyperparams.ema_enabled and state.shadow is not None:
        return state.shadow
    return params
