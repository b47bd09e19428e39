"""Component-wise linear measurement operators with exact adjoints.

A forward model is an ordered list of I component operators A_i, each
mapping an image to one measurement block y_i. Three kinds are supported:

- "radon-view": one parallel-beam projection at a fixed angle, realized as
  a dense matrix built by pixel-driven splatting with bilinear detector
  interpolation. The adjoint is the literal matrix transpose.
- "conv-filter": circular convolution with a real band-limited kernel,
  applied in the frequency domain. The adjoint conjugates the response.
- "explicit-matrix": arbitrary dense matrix, mostly for oracles and tests.

Gradients of the data-fidelity term g(x) = (1/I) sum_i 0.5*||A_i x - y_i||^2
come in a full-batch form and a minibatch form that averages B sampled
component terms. Accumulation order is ascending over the given index list,
so enumerating every component once in ascending order reproduces the
full-batch gradient bit-for-bit.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ComponentOperator", "ForwardModel", "MeasurementSet",
    "apply", "adjoint", "full_gradient", "minibatch_gradient", "gram_apply",
    "sample_indices", "make_radon_model", "make_conv_model",
    "model_from_config", "fbp_init", "bp_init", "add_awgn_to_input_snr",
    "discrete_gradient", "discrete_gradient_adjoint",
]


class ComponentOperator:
    """One linear measurement component A_i with an exact adjoint."""

    def __init__(self, kind, image_shape, *, matrix=None, khat=None,
                 params=None):
        if kind not in ("radon-view", "conv-filter", "explicit-matrix"):
            raise ValueError(f"unknown component kind: {kind}")
        self.kind = kind
        self.image_shape = tuple(image_shape)
        self.params = dict(params or {})
        n = int(np.prod(self.image_shape))
        if kind == "conv-filter":
            if khat is None or khat.shape != self.image_shape:
                raise ValueError("conv-filter needs a frequency response "
                                 "matching the image shape")
            self._khat = np.asarray(khat, dtype=np.complex128)
            self._khat_conj = np.conj(self._khat)
            self._mat = None
            self.out_shape = self.image_shape
        else:
            if matrix is None or matrix.ndim != 2 or matrix.shape[1] != n:
                raise ValueError("matrix kinds need a (m, n) dense matrix")
            self._mat = np.asarray(matrix, dtype=np.float64)
            self._khat = None
            self.out_shape = (self._mat.shape[0],)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.image_shape:
            raise ValueError(
                f"component expects image shape {self.image_shape}, got {x.shape}")
        if self.kind == "conv-filter":
            return np.real(np.fft.ifft2(np.fft.fft2(x) * self._khat))
        return self._mat @ x.ravel()

    def adjoint(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != self.out_shape:
            raise ValueError(
                f"component adjoint expects shape {self.out_shape}, got {u.shape}")
        if self.kind == "conv-filter":
            return np.real(np.fft.ifft2(np.fft.fft2(u) * self._khat_conj))
        return (self._mat.T @ u).reshape(self.image_shape)


@dataclass
class ForwardModel:
    """Ordered collection of I component operators sharing one image shape."""

    components: list
    image_shape: tuple

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValueError("a forward model needs at least one component")
        self.image_shape = tuple(self.image_shape)
        for c in self.components:
            if c.image_shape != self.image_shape:
                raise ValueError("all components must share the image shape")

    @property
    def n_components(self):
        return len(self.components)


@dataclass
class MeasurementSet:
    """Measurement blocks y_i aligned with model components, plus noise
    metadata. snr_db is None for noiseless data, +inf for an explicit
    no-noise request, otherwise the realized input SNR in dB."""

    blocks: list
    snr_db: float | None = None
    seed: int | None = None

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=np.float64) for b in self.blocks]

    def norm(self):
        return float(np.sqrt(sum(float(np.sum(b * b)) for b in self.blocks)))


def _blocks_of(y):
    return y.blocks if isinstance(y, MeasurementSet) else list(y)


def apply(model, x):
    """All component measurements of x as a noiseless MeasurementSet."""
    return MeasurementSet([c.apply(x) for c in model.components])


def adjoint(model, y):
    """A^H y = sum_i A_i^H y_i."""
    blocks = _blocks_of(y)
    if len(blocks) != model.n_components:
        raise ValueError(
            f"expected {model.n_components} blocks, got {len(blocks)}")
    out = np.zeros(model.image_shape, dtype=np.float64)
    for c, b in zip(model.components, blocks):
        out += c.adjoint(b)
    return out


def full_gradient(x, y, model):
    """(1/I) sum_i A_i^H (A_i x - y_i), accumulated in ascending i order."""
    if model.n_components < 1:
        raise ValueError("empty model")
    blocks = _blocks_of(y)
    acc = np.zeros(model.image_shape, dtype=np.float64)
    for c, b in zip(model.components, blocks):
        acc += c.adjoint(c.apply(x) - b)
    return acc / model.n_components


def minibatch_gradient(x, y, model, indices):
    """(1/B) sum_b A_{i_b}^H (A_{i_b} x - y_{i_b}) over the given index
    multiset, accumulated in the given order. Indices are 0-based and may
    repeat."""
    blocks = _blocks_of(y)
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size < 1:
        raise ValueError("minibatch needs at least one index")
    if np.any(idx < 0) or np.any(idx >= model.n_components):
        raise IndexError(
            f"component index out of range [0, {model.n_components})")
    acc = np.zeros(model.image_shape, dtype=np.float64)
    for i in idx:
        c = model.components[i]
        acc += c.adjoint(c.apply(x) - blocks[i])
    return acc / idx.size


def gram_apply(v, model, indices=None):
    """(1/B) sum_b A_{i_b}^H A_{i_b} v, the homogeneous (linear) part of the
    minibatch gradient. With indices=None, averages over all I components.
    This is the transpose of the gradient's linear part (it is symmetric),
    used by the reverse pass through data-consistency layers."""
    if indices is None:
        idx = np.arange(model.n_components)
    else:
        idx = np.asarray(indices, dtype=np.int64).ravel()
    acc = np.zeros(model.image_shape, dtype=np.float64)
    for i in idx:
        c = model.components[i]
        acc += c.adjoint(c.apply(v))
    return acc / idx.size


def sample_indices(B, I, rng):
    """B i.i.d. uniform draws from {0..I-1}, with replacement."""
    if B < 1 or I < 1:
        raise ValueError("B and I must be positive")
    return rng.integers(0, I, size=int(B))


# ---- model constructors -----------------------------------------------------


def _radon_view_matrix(n, angle_deg, detectors):
    """Dense (d, n*n) matrix of one parallel-beam view.

    Each pixel center projects to detector coordinate t = x*cos + y*sin in a
    centered frame and splats its value onto the two nearest detector bins
    with bilinear weights. Detector spacing is one pixel, centered so that
    bin (d-1)/2 sits at t = 0.
    """
    th = np.deg2rad(angle_deg)
    half = (n - 1) / 2.0
    cols = np.arange(n) - half
    rows = half - np.arange(n)
    xg, yg = np.meshgrid(cols, rows)  # xg[r, c] = c-half, yg[r, c] = half-r
    t = (xg * np.cos(th) + yg * np.sin(th)).ravel()
    u = t + (detectors - 1) / 2.0
    i0 = np.floor(u).astype(np.int64)
    w1 = u - i0
    mat = np.zeros((detectors, n * n), dtype=np.float64)
    pix = np.arange(n * n)
    ok = (i0 >= 0) & (i0 < detectors)
    np.add.at(mat, (i0[ok], pix[ok]), 1.0 - w1[ok])
    i1 = i0 + 1
    ok = (i1 >= 0) & (i1 < detectors)
    np.add.at(mat, (i1[ok], pix[ok]), w1[ok])
    return mat


def make_radon_model(size, views, detectors=None, angle_jitter_deg=0.0,
                     seed=None):
    """Parallel-beam model: one component per equispaced angle in [0, 180).

    detectors defaults to 2*size - 1, wide enough that every pixel projects
    inside the detector for all angles. Optional Gaussian angle jitter
    (default off) perturbs each view angle.
    """
    if size < 1 or views < 1:
        raise ValueError("size and views must be positive")
    d = int(detectors) if detectors is not None else 2 * size - 1
    angles = np.arange(views) * (180.0 / views)
    if angle_jitter_deg > 0.0:
        rng = np.random.default_rng(seed)
        angles = angles + rng.normal(0.0, angle_jitter_deg, size=views)
    comps = [
        ComponentOperator(
            "radon-view", (size, size),
            matrix=_radon_view_matrix(size, a, d),
            params={"angle_deg": float(a), "detectors": d})
        for a in angles
    ]
    return ForwardModel(comps, (size, size))


def make_conv_model(size, n_components, seed=None, bandwidth=0.15):
    """IDT-like stand-in: I circular convolutions with random real
    band-limited kernels. Kernels are built in the frequency domain as
    seeded white noise shaped by a radial Gaussian low-pass, normalized to
    unit peak response."""
    if size < 1 or n_components < 1:
        raise ValueError("size and component count must be positive")
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    lowpass = np.exp(-(fx ** 2 + fy ** 2) / (2.0 * bandwidth ** 2))
    comps = []
    for i in range(n_components):
        spatial = rng.standard_normal((size, size))
        khat = np.fft.fft2(spatial) * lowpass
        peak = np.max(np.abs(khat))
        if peak > 0:
            khat = khat / peak
        comps.append(ComponentOperator("conv-filter", (size, size), khat=khat,
                                       params={"index": i}))
    return ForwardModel(comps, (size, size))


def model_from_config(cfg):
    """Build a model from a JSON-style dict: {"kind": "radon"|"conv",
    "size": N, "components": I, optional "detectors", "seed",
    "angle_jitter_deg", "bandwidth"}."""
    kind = cfg.get("kind")
    size = int(cfg["size"])
    n_comp = int(cfg["components"])
    seed = cfg.get("seed")
    if kind == "radon":
        return make_radon_model(size, n_comp,
                                detectors=cfg.get("detectors"),
                                angle_jitter_deg=float(
                                    cfg.get("angle_jitter_deg", 0.0)),
                                seed=seed)
    if kind == "conv":
        return make_conv_model(size, n_comp, seed=seed,
                               bandwidth=float(cfg.get("bandwidth", 0.15)))
    raise ValueError(f"unknown model kind: {kind}")


# ---- initializations and noise ---------------------------------------------


def bp_init(y, model):
    """Plain adjoint initialization A^H y."""
    return adjoint(model, y)


def fbp_init(y, model):
    """Filtered backprojection for radon models: per-view frequency-domain
    Hann-windowed ramp filter, then the adjoint, scaled by pi / views."""
    for c in model.components:
        if c.kind != "radon-view":
            raise ValueError("fbp_init requires a radon model")
    blocks = _blocks_of(y)
    filtered = []
    for b in blocks:
        d = b.shape[0]
        freqs = np.fft.rfftfreq(d)
        nyquist = 0.5
        ramp = np.abs(freqs) * (0.5 + 0.5 * np.cos(np.pi * freqs / nyquist))
        filtered.append(np.fft.irfft(np.fft.rfft(b) * ramp, n=d))
    return adjoint(model, filtered) * (np.pi / model.n_components)


def add_awgn_to_input_snr(y, snr_db, rng):
    """Add white Gaussian noise scaled so the realized input SNR,
    20*log10(||y|| / ||e||), equals snr_db exactly. rng may be a Generator
    or an integer seed (recorded in the result's metadata)."""
    blocks = _blocks_of(y)
    seed = None
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    y_norm = float(np.sqrt(sum(float(np.sum(b * b)) for b in blocks)))
    if not np.isfinite(snr_db):
        return MeasurementSet([b.copy() for b in blocks],
                              snr_db=float("inf"), seed=seed)
    if y_norm == 0.0:
        raise ValueError("cannot set an input SNR on zero measurements")
    noise = [rng.standard_normal(b.shape) for b in blocks]
    e_norm = float(np.sqrt(sum(float(np.sum(e * e)) for e in noise)))
    scale = y_norm / (e_norm * 10.0 ** (snr_db / 20.0))
    noisy = [b + scale * e for b, e in zip(blocks, noise)]
    return MeasurementSet(noisy, snr_db=float(snr_db), seed=seed)


# ---- discrete image gradient -------------------------------------------------


def discrete_gradient(x):
    """Forward differences with replicate boundary, stacked (2, H, W):
    channel 0 horizontal, channel 1 vertical. Boundary rows/cols are 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("discrete_gradient expects a 2-D image")
    out = np.zeros((2,) + x.shape, dtype=np.float64)
    out[0, :, :-1] = x[:, 1:] - x[:, :-1]
    out[1, :-1, :] = x[1:, :] - x[:-1, :]
    return out


def discrete_gradient_adjoint(p):
    """Exact transpose of discrete_gradient (negative divergence)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != 2:
        raise ValueError("expected stacked differences of shape (2, H, W)")
    h, v = p[0], p[1]
    out = np.zeros(p.shape[1:], dtype=np.float64)
    out[:, 1:] += h[:, :-1]
    out[:, :-1] -= h[:, :-1]
    out[1:, :] += v[:-1, :]
    out[:-1, :] -= v[:-1, :]
    return out
