"""Unrolled reconstruction networks with stochastic data-consistency layers.

The network alternates, for Q steps with shared weights,

    x^{q+1} = x^q - gamma * (ghat(x^q) + tau * D(x^q)),   D(x) = x - R(x),

where ghat is either the minibatch data-consistency gradient (fresh index
draws every step) or the full-batch gradient, R is a small artifact-removal
CNN with parameters theta, and tau is a learnable scalar. The full-batch
variant of the same recursion is the batch network; stochastic and
full-batch modes share one code path so mode equivalence is bitwise.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, _conv2d_forward
from .operators import (full_gradient, gram_apply, minibatch_gradient,
                        sample_indices)

__all__ = [
    "PriorNet", "UnfoldConfig", "UnfoldOutput",
    "r_theta_apply", "d_theta", "sgdnet_step", "sgdnet_forward",
    "ured_forward", "build_unfolded_tape",
]

# Fixed layer structure: two hidden PReLU conv layers, 16 channels each.
LAYER_SPEC = "conv3x3(1->16);prelu;conv3x3(16->16);prelu;conv3x3(16->1)"

BLOCK_SHAPES = (
    ("w1", (16, 1, 3, 3)),
    ("b1", (16,)),
    ("a1", ()),
    ("w2", (16, 16, 3, 3)),
    ("b2", (16,)),
    ("a2", ()),
    ("w3", (1, 16, 3, 3)),
    ("b3", (1,)),
)

N_THETA = sum(int(np.prod(s, dtype=np.int64)) for _, s in BLOCK_SHAPES)


class PriorNet:
    """Artifact-removal network R with flat parameters theta, plus the
    learnable balance scalar tau. Weights are shared across all unfolded
    steps; there is exactly one theta regardless of Q."""

    def __init__(self, theta=None, tau=2.0):
        if theta is None:
            theta = np.zeros(N_THETA)
        theta = np.asarray(theta, dtype=np.float64).ravel()
        if theta.size != N_THETA:
            raise ValueError(
                f"theta has {theta.size} values, layer spec needs {N_THETA}")
        self._theta = theta.copy()
        self.tau = float(tau)

    # ---- construction ------------------------------------------------------

    @classmethod
    def init_random(cls, seed=None, tau=2.0, weight_scale=1.0):
        """He-style seeded init: kernel std sqrt(2/fan_in), biases 0,
        PReLU slopes 0.25."""
        rng = np.random.default_rng(seed)
        blocks = {}
        for name, shape in BLOCK_SHAPES:
            if name.startswith("w"):
                fan_in = int(np.prod(shape[1:], dtype=np.int64))
                blocks[name] = weight_scale * \
                    np.sqrt(2.0 / fan_in) * rng.standard_normal(shape)
            elif name.startswith("a"):
                blocks[name] = np.array(0.25)
            else:
                blocks[name] = np.zeros(shape)
        net = cls(tau=tau)
        net.set_blocks(blocks)
        return net

    @classmethod
    def zeros(cls, tau=2.0):
        """All-zero theta: R(x) = 0, so D(x) = x."""
        return cls(theta=np.zeros(N_THETA), tau=tau)

    @classmethod
    def identity_r(cls, tau=2.0):
        """Parameters making R(x) = x exactly: unit center taps routed
        through channel 0, unit PReLU slopes. Then D(x) = 0 bitwise."""
        blocks = {name: np.zeros(shape) for name, shape in BLOCK_SHAPES}
        blocks["w1"][0, 0, 1, 1] = 1.0
        blocks["a1"] = np.array(1.0)
        blocks["w2"][0, 0, 1, 1] = 1.0
        blocks["a2"] = np.array(1.0)
        blocks["w3"][0, 0, 1, 1] = 1.0
        net = cls(tau=tau)
        net.set_blocks(blocks)
        return net

    # ---- flat <-> block views ----------------------------------------------

    @property
    def theta(self):
        return self._theta.copy()

    def set_theta(self, flat):
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != N_THETA:
            raise ValueError(
                f"theta has {flat.size} values, layer spec needs {N_THETA}")
        self._theta = flat.copy()

    def blocks(self):
        out = {}
        pos = 0
        for name, shape in BLOCK_SHAPES:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = self._theta[pos:pos + size].reshape(shape).copy()
            pos += size
        return out

    def set_blocks(self, blocks):
        parts = []
        for name, shape in BLOCK_SHAPES:
            b = np.asarray(blocks[name], dtype=np.float64)
            if b.shape != shape:
                raise ValueError(f"block {name}: shape {b.shape} != {shape}")
            parts.append(b.ravel())
        self._theta = np.concatenate(parts) if parts else np.zeros(0)

    @staticmethod
    def pack_blocks(blocks):
        """Flatten a name->array dict (theta blocks only) into one vector."""
        return np.concatenate([np.asarray(blocks[name]).ravel()
                               for name, _ in BLOCK_SHAPES])

    @property
    def n_params(self):
        return N_THETA

    @staticmethod
    def layer_spec_hash():
        return hashlib.sha256(LAYER_SPEC.encode()).hexdigest()

    def copy(self):
        return PriorNet(theta=self._theta, tau=self.tau)

    # ---- tape plumbing -------------------------------------------------------

    def leaves_on(self, tape):
        """Register every parameter block plus tau as leaves of a tape."""
        leaves = {name: tape.leaf(arr, name=name)
                  for name, arr in self.blocks().items()}
        leaves["tau"] = tape.leaf(np.array(self.tau), name="tau")
        return leaves


def _r_theta_nodes(tape, x_node, leaves):
    h = tape.prelu(tape.conv2d(x_node, leaves["w1"], leaves["b1"]),
                   leaves["a1"])
    h = tape.prelu(tape.conv2d(h, leaves["w2"], leaves["b2"]), leaves["a2"])
    return tape.conv2d(h, leaves["w3"], leaves["b3"])


def _prelu_np(x, a):
    return np.maximum(x, 0.0) + a * np.minimum(x, 0.0)


def r_theta_apply(net, x):
    """Plain numpy evaluation of R(x) (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D image")
    b = net.blocks()
    h = _prelu_np(_conv2d_forward(x[None], b["w1"], b["b1"])[0], float(b["a1"]))
    h = _prelu_np(_conv2d_forward(h, b["w2"], b["b2"])[0], float(b["a2"]))
    return _conv2d_forward(h, b["w3"], b["b3"])[0][0]


def d_theta(net, x):
    """Learned operator D(x) = x - R(x)."""
    return np.asarray(x, dtype=np.float64) - r_theta_apply(net, x)


@dataclass
class UnfoldConfig:
    """Knobs of the unrolled recursion. mode "stochastic" draws B fresh
    component indices per step; "full-batch" uses every component."""

    q_steps: int
    gamma: float
    minibatch: int = 1
    mode: str = "stochastic"
    seed: int | None = None
    record_iterates: bool = False

    def __post_init__(self):
        if self.q_steps < 0:
            raise ValueError("q_steps must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.mode not in ("stochastic", "full-batch"):
            raise ValueError(f"unknown mode: {self.mode}")
        if self.mode == "stochastic" and self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")


@dataclass
class UnfoldOutput:
    """Result of one unrolled forward pass. tape/leaves/x_node allow a
    reverse pass; index_draws has one entry per step (None in full-batch
    mode, where every component is used)."""

    final: np.ndarray
    iterates: list | None
    index_draws: list
    tape: Tape
    leaves: dict
    x_node: object


def _dc_gradient_node(tape, x_node, y, model, indices):
    """Data-consistency gradient as a tape node. The map is affine in x;
    its linear part is the (symmetric) averaged Gram operator, which the
    reverse pass applies with the same frozen indices."""
    if indices is None:
        fwd = lambda v: full_gradient(v, y, model)
        vjp = lambda g: gram_apply(g, model, None)
    else:
        fwd = lambda v: minibatch_gradient(v, y, model, indices)
        vjp = lambda g: gram_apply(g, model, indices)
    return tape.affine_map(x_node, fwd, vjp, name="dc_grad")


def _step_nodes(tape, x_node, y, model, leaves, gamma, indices):
    g_node = _dc_gradient_node(tape, x_node, y, model, indices)
    r_node = _r_theta_nodes(tape, x_node, leaves)
    d_node = tape.sub(x_node, r_node, name="d_theta")
    direction = tape.add(g_node, tape.smul(leaves["tau"], d_node),
                         name="direction")
    return tape.sub(x_node, tape.scale(direction, gamma), name="x_next")


def sgdnet_step(x, y, model, net, gamma, indices):
    """One recursion step as plain arrays (no tape):
    x - gamma * (minibatch_gradient(x) + tau * D(x))."""
    x = np.asarray(x, dtype=np.float64)
    ghat = minibatch_gradient(x, y, model, indices)
    return x - gamma * (ghat + net.tau * d_theta(net, x))


def build_unfolded_tape(x0, y, model, net, config, index_draws):
    """Chain Q steps on one tape with the given per-step index draws
    (list of arrays, or None entries for full-batch steps)."""
    tape = Tape()
    leaves = net.leaves_on(tape)
    x_node = tape.constant(np.asarray(x0, dtype=np.float64), name="x0")
    iterates = [x_node.value.copy()] if config.record_iterates else None
    for q in range(config.q_steps):
        x_node = _step_nodes(tape, x_node, y, model, leaves, config.gamma,
                             index_draws[q])
        if config.record_iterates:
            iterates.append(x_node.value.copy())
    return UnfoldOutput(final=x_node.value.copy(), iterates=iterates,
                        index_draws=list(index_draws), tape=tape,
                        leaves=leaves, x_node=x_node)


def sgdnet_forward(x0, y, model, net, config, rng=None):
    """Q chained steps on one tape. Stochastic mode draws B fresh indices
    per step from rng (seeded from config.seed when rng is None)."""
    if config.mode == "full-batch":
        draws = [None] * config.q_steps
    else:
        if not 1 <= config.minibatch <= model.n_components:
            raise ValueError(
                f"minibatch {config.minibatch} outside [1, {model.n_components}]")
        if rng is None:
            rng = np.random.default_rng(config.seed)
        draws = [sample_indices(config.minibatch, model.n_components, rng)
                 for _ in range(config.q_steps)]
    return build_unfolded_tape(x0, y, model, net, config, draws)


def ured_forward(x0, y, model, net, config):
    """Batch variant: the same recursion with the full gradient every step.
    Deterministic; shares the exact full-batch code path of sgdnet_forward."""
    draws = [None] * config.q_steps
    return build_unfolded_tape(x0, y, model, net, config, draws)
