"""Reverse-mode differentiation on an explicit tape.

Minimal engine for backpropagating a scalar loss through unrolled
reconstruction steps. Values are numpy float64 arrays (scalars are
0-d arrays). A Tape records nodes in creation order, which is a valid
topological order, so one reverse sweep yields every leaf gradient.

Only the primitives the package needs are provided: add/sub/scale,
scalar-tensor product, 2-D same-padded convolution, PReLU, a generic
affine map with user-supplied linear VJP, and sum-of-squares.
"""

import numpy as np

__all__ = ["Node", "Tape", "backward", "grad_check"]


def _as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Node:
    """One tape record: a value, its parents, and the reverse-pass closure."""

    __slots__ = ("value", "parents", "vjp", "grad", "is_leaf", "name")

    def __init__(self, value, parents=(), vjp=None, is_leaf=False, name=""):
        self.value = _as_f64(value)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad = None
        self.is_leaf = is_leaf
        self.name = name

    def __repr__(self):
        kind = "leaf" if self.is_leaf else "node"
        return f"<{kind} {self.name or '?'} shape={self.value.shape}>"


def _accum(node, g):
    # Copy on first touch so upstream buffers are never aliased.
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad = node.grad + g


class Tape:
    """Ordered node list; creation order doubles as topological order."""

    def __init__(self):
        self.nodes = []

    def _register(self, node):
        self.nodes.append(node)
        return node

    # ---- leaves ----------------------------------------------------------

    def leaf(self, value, name=""):
        return self._register(Node(value, is_leaf=True, name=name))

    def constant(self, value, name="const"):
        # Constant participates in the graph but accumulates no gradient.
        return self._register(Node(value, is_leaf=False, name=name))

    # ---- elementwise arithmetic -----------------------------------------

    def add(self, a, b, name="add"):
        if a.value.shape != b.value.shape:
            raise ValueError(
                f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
        out = Node(a.value + b.value, (a, b), name=name)

        def vjp(g):
            _accum(a, g)
            _accum(b, g)

        out.vjp = vjp
        return self._register(out)

    def sub(self, a, b, name="sub"):
        if a.value.shape != b.value.shape:
            raise ValueError(
                f"sub: shape mismatch {a.value.shape} vs {b.value.shape}")
        out = Node(a.value - b.value, (a, b), name=name)

        def vjp(g):
            _accum(a, g)
            _accum(b, -g)

        out.vjp = vjp
        return self._register(out)

    def scale(self, a, c, name="scale"):
        """Multiply by a fixed python float (not a learnable quantity)."""
        c = float(c)
        out = Node(c * a.value, (a,), name=name)

        def vjp(g):
            _accum(a, c * g)

        out.vjp = vjp
        return self._register(out)

    def smul(self, s, t, name="smul"):
        """Product of a scalar node and a tensor node."""
        if s.value.ndim != 0:
            raise ValueError("smul: first argument must be a scalar node")
        out = Node(s.value * t.value, (s, t), name=name)

        def vjp(g):
            _accum(s, np.sum(g * t.value))
            _accum(t, s.value * g)

        out.vjp = vjp
        return self._register(out)

    # ---- neural primitives ----------------------------------------------

    def conv2d(self, x, kernels, bias, name="conv2d"):
        """Same-padded 2-D convolution (cross-correlation) with zero borders.

        x: (H, W) or (C, H, W) node. kernels: (C_out, C_in, kh, kw) node with
        odd kh, kw. bias: (C_out,) node. Output is (C_out, H, W), with the
        channel axis squeezed away when C_out == 1 so residual connections
        against 2-D images stay shape-compatible.
        """
        xv = x.value
        squeeze_in = xv.ndim == 2
        x3 = xv[None] if squeeze_in else xv
        if x3.ndim != 3:
            raise ValueError(f"conv2d: input must be 2-D or 3-D, got {xv.ndim}-D")
        w = kernels.value
        if w.ndim != 4:
            raise ValueError("conv2d: kernels must be 4-D (C_out, C_in, kh, kw)")
        c_out, c_in, kh, kw = w.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
        if x3.shape[0] != c_in:
            raise ValueError(
                f"conv2d: input has {x3.shape[0]} channels, kernels expect {c_in}")
        if bias.value.shape != (c_out,):
            raise ValueError(
                f"conv2d: bias shape {bias.value.shape} != ({c_out},)")

        out_val, cols = _conv2d_forward(x3, w, bias.value)
        h, wdt = x3.shape[1], x3.shape[2]
        squeeze_out = c_out == 1
        out = Node(out_val[0] if squeeze_out else out_val,
                   (x, kernels, bias), name=name)

        def vjp(g):
            g3 = g[None] if squeeze_out else g
            gm = g3.reshape(c_out, h * wdt)
            _accum(kernels, (gm @ cols.T).reshape(w.shape))
            _accum(bias, gm.sum(axis=1))
            dcols = w.reshape(c_out, -1).T @ gm
            dx3 = _col2im(dcols, c_in, kh, kw, h, wdt)
            _accum(x, dx3[0] if squeeze_in else dx3)

        out.vjp = vjp
        return self._register(out)

    def prelu(self, x, slope, name="prelu"):
        """Elementwise max(0,x) + a*min(0,x) with a learnable scalar slope."""
        if slope.value.ndim != 0:
            raise ValueError("prelu: slope must be a scalar node")
        xv = x.value
        neg = np.minimum(xv, 0.0)
        out = Node(np.maximum(xv, 0.0) + slope.value * neg, (x, slope), name=name)
        pos_mask = xv > 0

        def vjp(g):
            _accum(x, g * np.where(pos_mask, 1.0, slope.value))
            _accum(slope, np.sum(g * neg))

        out.vjp = vjp
        return self._register(out)

    # ---- structured maps --------------------------------------------------

    def affine_map(self, x, forward_fn, linear_vjp_fn, name="affine"):
        """y = forward_fn(x) where the map is affine in x.

        linear_vjp_fn must apply the transpose of the linear part. Used for
        data-consistency gradients, whose dependence on the image is affine
        with a symmetric linear part.
        """
        out = Node(forward_fn(x.value), (x,), name=name)

        def vjp(g):
            _accum(x, linear_vjp_fn(g))

        out.vjp = vjp
        return self._register(out)

    def sum_squares(self, x, name="sum_squares"):
        v = x.value
        out = Node(np.sum(v * v), (x,), name=name)

        def vjp(g):
            _accum(x, (2.0 * float(g)) * v)

        out.vjp = vjp
        return self._register(out)


def _conv2d_forward(x3, w, b):
    """Returns (out (C_out,H,W), cols (C_in*kh*kw, H*W)). cols is kept for
    the reverse pass; activations are saved rather than recomputed."""
    c_in_x, h, wdt = x3.shape
    c_out, c_in, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((c_in, h + 2 * ph, wdt + 2 * pw), dtype=np.float64)
    xp[:, ph:ph + h, pw:pw + wdt] = x3
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (c_in, kh, kw, h, wdt), (s[0], s[1], s[2], s[1], s[2]))
    cols = win.reshape(c_in * kh * kw, h * wdt)  # copies (strided source)
    out = w.reshape(c_out, -1) @ cols + b[:, None]
    return out.reshape(c_out, h, wdt), cols


def _col2im(dcols, c_in, kh, kw, h, wdt):
    dc = dcols.reshape(c_in, kh, kw, h, wdt)
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((c_in, h + 2 * ph, wdt + 2 * pw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + wdt] += dc[:, i, j]
    return dxp[:, ph:ph + h, pw:pw + wdt]


def backward(tape, loss):
    """One reverse sweep from a scalar loss node.

    Populates .grad on every node reachable from the loss; leaves that the
    loss does not depend on get a zero gradient of matching shape.
    """
    if loss.value.size != 1:
        raise ValueError(
            f"backward: loss node must be scalar, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None:
            continue
        node.vjp(node.grad)
    for node in tape.nodes:
        if node.is_leaf and node.grad is None:
            node.grad = np.zeros_like(node.value)


def grad_check(build, params, step=1e-6, tol=1e-6, coord_sample=None,
               sample_seed=0):
    """Compare reverse-mode gradients against central finite differences.

    build(params) -> (tape, loss_node, leaf_map) must construct a fresh tape
    from the given parameter value dict, with any internal randomness frozen
    so repeated evaluations are deterministic.

    coord_sample (optional int) limits the finite-difference probes to that
    many randomly chosen coordinates per block; the default probes every
    coordinate.

    Returns a report dict: per-block relative error, overall max, pass flag.
    """
    tape, loss, leaves = build(params)
    backward(tape, loss)
    ad = {k: np.array(leaves[k].grad) for k in leaves}

    def eval_loss(p):
        _, loss_node, _ = build(p)
        return float(loss_node.value)

    pick_rng = np.random.default_rng(sample_seed)
    report = {"blocks": {}, "step": step, "tol": tol}
    max_rel = 0.0
    for name in leaves:
        base = np.asarray(params[name], dtype=np.float64)
        size = base.size
        if coord_sample is not None and size > coord_sample:
            coords = np.sort(pick_rng.choice(size, coord_sample,
                                             replace=False))
        else:
            coords = np.arange(size)
        fd_vals = np.zeros(coords.size)
        for pos, i in enumerate(coords):
            pert = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            pert[name].reshape(-1)[i] += step
            f_plus = eval_loss(pert)
            pert[name].reshape(-1)[i] -= 2.0 * step
            f_minus = eval_loss(pert)
            fd_vals[pos] = (f_plus - f_minus) / (2.0 * step)
        ad_vals = ad[name].reshape(-1)[coords] if size else np.zeros(0)
        scale = max(np.max(np.abs(ad_vals)) if ad_vals.size else 0.0,
                    np.max(np.abs(fd_vals)) if fd_vals.size else 0.0, 1e-12)
        rel = float(np.max(np.abs(ad_vals - fd_vals)) / scale) \
            if fd_vals.size else 0.0
        report["blocks"][name] = {"rel_err": rel, "ad": ad_vals, "fd": fd_vals,
                                  "coords": coords}
        max_rel = max(max_rel, rel)
    report["max_rel_err"] = max_rel
    report["pass"] = max_rel <= tol
    return report
