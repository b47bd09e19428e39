"""Classical reference reconstructions.

TV: anisotropic total variation solved by accelerated proximal gradient
(FISTA), with the prox computed by a fixed-count dual projected-gradient
inner loop. RED: gradient-style fixed-point iteration driven by a learned
denoiser x - R(x), reusing the same prior network trained for AWGN removal.
Step sizes come from a power-iteration estimate of the data-term Lipschitz
constant instead of per-problem grid search.
"""

from dataclasses import dataclass

import numpy as np

from .operators import (discrete_gradient, discrete_gradient_adjoint,
                        full_gradient, gram_apply)
from .training import pretrain_artifact_removal, Dataset
from .unfolding import PriorNet, r_theta_apply

__all__ = [
    "TVConfig", "REDConfig", "TVResult", "REDResult",
    "tv_prox", "tv_apgm", "red_fixed_point", "train_denoiser",
    "power_iteration_lipschitz", "denoiser_apply",
]


@dataclass
class TVConfig:
    tau_tv: float
    outer_iters: int = 240
    inner_iters: int = 20
    step: float | None = None  # default 1 / (power-iteration Lipschitz)

    def __post_init__(self):
        if self.tau_tv < 0:
            raise ValueError("tau_tv must be >= 0")
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive when given")


@dataclass
class REDConfig:
    tau_red: float
    gamma: float | None = None  # default 1 / (L + tau_red)
    iterations: int = 240
    denoiser: PriorNet | None = None

    def __post_init__(self):
        if self.tau_red < 0:
            raise ValueError("tau_red must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass
class TVResult:
    image: np.ndarray
    objective_trace: list
    lipschitz: float


@dataclass
class REDResult:
    image: np.ndarray
    residual_trace: list
    final_residual: float


def tv_prox(z, mu_tau, inner_iters=20):
    """Approximate prox of mu_tau * ||Dx||_1 at z via dual projected
    gradient: u <- clip(u + (1/8) D(z - D^T u)) with the standard 1/8 step
    (the squared norm of the 2-D difference operator is at most 8).
    Deterministic; fixed iteration count."""
    z = np.asarray(z, dtype=np.float64)
    if mu_tau == 0.0:
        return z.copy()
    if mu_tau < 0:
        raise ValueError("mu_tau must be >= 0")
    u = np.zeros((2,) + z.shape, dtype=np.float64)
    for _ in range(int(inner_iters)):
        grad = discrete_gradient(z - discrete_gradient_adjoint(u))
        u = np.clip(u + 0.125 * grad, -mu_tau, mu_tau)
    return z - discrete_gradient_adjoint(u)


def power_iteration_lipschitz(model, iters=50, seed=0):
    """Largest eigenvalue of the averaged Gram operator (1/I) sum A_i^H A_i,
    estimated by seeded power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(model.image_shape)
    v /= np.linalg.norm(v.ravel())
    lam = 0.0
    for _ in range(int(iters)):
        w = gram_apply(v, model)
        lam = float(np.linalg.norm(w.ravel()))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def _data_objective(x, y, model):
    blocks = y.blocks if hasattr(y, "blocks") else y
    total = 0.0
    for c, b in zip(model.components, blocks):
        r = c.apply(x) - b
        total += 0.5 * float(np.sum(r * r))
    return total / model.n_components


def tv_apgm(y, model, cfg):
    """FISTA on (1/I) sum 0.5||A_i x - y_i||^2 + tau_tv ||Dx||_1, starting
    from zero. Records the objective value at every outer iterate."""
    lam = power_iteration_lipschitz(model)
    step = cfg.step if cfg.step is not None else 1.0 / max(lam, 1e-12)
    x = np.zeros(model.image_shape, dtype=np.float64)
    z = x.copy()
    t = 1.0
    trace = []

    def objective(v):
        return _data_objective(v, y, model) + \
            cfg.tau_tv * float(np.sum(np.abs(discrete_gradient(v))))

    trace.append(objective(x))
    for _ in range(int(cfg.outer_iters)):
        x_new = tv_prox(z - step * full_gradient(z, y, model),
                        step * cfg.tau_tv, cfg.inner_iters)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x = x_new
        t = t_new
        trace.append(objective(x))
    return TVResult(image=x, objective_trace=trace, lipschitz=lam)


def denoiser_apply(net, x):
    """Denoiser realized by the prior network: input minus its predicted
    artifacts, x - R(x)."""
    return np.asarray(x, dtype=np.float64) - r_theta_apply(net, x)


def red_fixed_point(y, model, cfg, x0=None):
    """Gradient-style fixed-point iteration
    x <- x - gamma * (grad g(x) + tau * (x - denoiser(x))).
    Since the denoiser is x - R(x), the regularizer term is tau * R(x).
    Reports the residual norm ||grad g + tau (x - denoiser(x))|| per step."""
    if cfg.denoiser is None:
        raise ValueError("red_fixed_point needs a denoiser network")
    net = cfg.denoiser
    if x0 is None:
        from .operators import bp_init
        x = bp_init(y, model)
    else:
        x = np.asarray(x0, dtype=np.float64).copy()
    lam = power_iteration_lipschitz(model)
    gamma = cfg.gamma if cfg.gamma is not None \
        else 1.0 / max(lam + cfg.tau_red, 1e-12)
    trace = []
    for _ in range(int(cfg.iterations)):
        residual_field = full_gradient(x, y, model) + \
            cfg.tau_red * r_theta_apply(net, x)
        trace.append(float(np.linalg.norm(residual_field.ravel())))
        x = x - gamma * residual_field
    final = full_gradient(x, y, model) + cfg.tau_red * r_theta_apply(net, x)
    trace.append(float(np.linalg.norm(final.ravel())))
    return REDResult(image=x, residual_trace=trace, final_residual=trace[-1])


def train_denoiser(clean_images, sigma, net, train_cfg, noise_seed=0):
    """Supervised AWGN removal: pairs (x + e, x) with e ~ N(0, sigma^2).
    R learns to predict the noise; the denoiser is input - R(input)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    noisy = []
    for j, x in enumerate(clean_images):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(noise_seed), 7, j]))
        noisy.append(np.asarray(x, dtype=np.float64) +
                     sigma * rng.standard_normal(np.asarray(x).shape))
    ds = Dataset(list(clean_images), [None] * len(noisy), noisy)
    return pretrain_artifact_removal(ds, net, train_cfg)
