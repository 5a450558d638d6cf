"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Every tensor is a (batch, channel, height, width) array of float32 (or
float64 when a tighter gradient check is wanted). Operations record
themselves onto a :class:`Tape`; :func:`backward` replays the tape in
reverse to produce gradients for every reachable node.

The operator set is deliberately small: exactly what an edge-detection
network and its losses need. Tensors are value objects; do not mutate
``data`` between a forward pass and the matching :func:`backward` call.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "as_tensor",
    "backward",
    "conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "tanh",
    "bilinear_upsample",
    "add",
    "sub",
    "mul",
    "affine",
    "concat_channels",
    "slice_channels",
    "log",
    "power",
    "clamp",
    "smooth_l1",
    "wrap_angle",
    "sum_all",
    "grad_check",
]

TWO_PI = 2.0 * np.pi

# Test hook: when set, conv2d's input gradient is negated so that the
# gradcheck command can prove it detects a broken backward pass.
_CONV_GRAD_SIGN = -1.0 if os.environ.get("OCTK_FLIP_CONV_GRAD") == "1" else 1.0


class ShapeError(ValueError):
    """Raised when an operation rejects the extents of its inputs."""


class Tensor:
    """A rank-4 array, optionally tracked on a :class:`Tape`."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (got rank {arr.ndim})")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return affine(self, 1.0, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, tracked={self.node is not None})"


def as_tensor(data, dtype=np.float32) -> Tensor:
    """Coerce an array-like to an untracked rank-4 tensor."""
    arr = np.asarray(data, dtype=dtype)
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr)


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "branch")

    def __init__(self, op, inputs, backward_fn, branch=None):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        # Branch signature: which piecewise region each element took.
        # Used by grad_check to discard finite-difference samples that
        # straddle a kink (ReLU corner, clamp boundary, angle wrap).
        self.branch = branch


class Tape:
    """Computation record. Nodes are appended in creation order, so the
    list is topologically sorted by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf (parameter or input) and return a tracked view."""
        node = self._record("leaf", (), None)
        return Tensor(t.data, node, self)

    def _record(self, op, inputs, backward_fn, branch=None) -> int:
        self.nodes.append(_Node(op, inputs, backward_fn, branch))
        return len(self.nodes) - 1

    def branch_signature(self) -> list[np.ndarray]:
        return [n.branch for n in self.nodes if n.branch is not None]


def _tracked_tape(tensors) -> "Tape | None":
    tape = None
    for t in tensors:
        if t is None or t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("inputs are tracked on different tapes")
    return tape


def _emit(tape, op, in_tensors, out_data, backward_fn, branch=None) -> Tensor:
    if tape is None:
        return Tensor(out_data)
    ids = tuple(t.node if (t is not None and t.node is not None) else None for t in in_tensors)
    node = tape._record(op, ids, backward_fn, branch)
    return Tensor(out_data, node, tape)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse accumulation from a scalar loss node.

    Returns a map node id -> gradient array. Nodes not reachable from the
    loss are absent.
    """
    if loss.tape is not tape or loss.node is None:
        raise ValueError("loss tensor is not tracked on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:
            continue
        for in_id, in_grad in zip(node.inputs, node.backward_fn(g)):
            if in_id is None or in_grad is None:
                continue
            acc = grads.get(in_id)
            grads[in_id] = in_grad if acc is None else acc + in_grad
    return grads


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(size, k, stride, pad, dilation):
    eff = dilation * (k - 1) + 1
    return (size + 2 * pad - eff) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    # View of the padded input as (N, C, kh, kw, oh, ow) without copying.
    sn, sc, sh, sw = xp.strides
    shape = (xp.shape[0], xp.shape[1], kh, kw, oh, ow)
    strides = (sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    """2-D convolution (cross-correlation) with stride, padding, dilation.

    ``weight`` is (out_c, in_c, kh, kw); ``bias`` is (1, out_c, 1, 1) or None.
    """
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError(f"bad conv hyper-parameters stride={stride} pad={pad} dilation={dilation}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ic}")
    if bias is not None and bias.shape != (1, oc, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, {oc}, 1, 1)")
    oh = _conv_out_extent(h, kh, stride, pad, dilation)
    ow = _conv_out_extent(w, kw, stride, pad, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: output extents {oh}x{ow} are not positive for input {h}x{w}")

    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    col = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    # (oc, c*kh*kw) @ (N, c*kh*kw, oh*ow) -> (N, oc, oh*ow)
    wmat = weight.data.reshape(oc, -1)
    cmat = np.ascontiguousarray(col).reshape(n, c * kh * kw, oh * ow)
    out = np.matmul(wmat, cmat).reshape(n, oc, oh, ow)
    if bias is not None:
        out += bias.data

    tape = _tracked_tape((x, weight, bias))
    if tape is None:
        return Tensor(out)

    def bwd(g):
        gmat = g.reshape(n, oc, oh * ow)
        gx = gw = gb = None
        if weight.node is not None:
            # sum_n grad @ col^T
            gw = np.einsum("nop,nkp->ok", gmat, cmat).reshape(weight.shape)
        if x.node is not None:
            dcol = np.matmul(wmat.T, gmat).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dilation:i * dilation + stride * oh:stride,
                        j * dilation:j * dilation + stride * ow:stride] += dcol[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            gx = _CONV_GRAD_SIGN * gx
        if bias is not None and bias.node is not None:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1)
        return gx, gw, gb

    return _emit(tape, "conv2d", (x, weight, bias), out, bwd)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray, *,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics and updates the running
    stats in place: ``running <- momentum * running + (1 - momentum) * batch``.
    Infer mode normalizes with the running stats.
    """
    n, c, h, w = x.shape
    for name, v in (("scale", scale), ("shift", shift)):
        if v.shape != (1, c, 1, 1):
            raise ShapeError(f"batch_norm: {name} shape {v.shape} != (1, {c}, 1, 1)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm: running stats must have shape ({c},)")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * istd.reshape(1, c, 1, 1)
    out = scale.data * xhat + shift.data

    tape = _tracked_tape((x, scale, shift))
    if tape is None:
        return Tensor(out.astype(x.dtype, copy=False))

    m = n * h * w
    istd4 = istd.reshape(1, c, 1, 1)

    def bwd(g):
        gx = gscale = gshift = None
        if scale.node is not None:
            gscale = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        if shift.node is not None:
            gshift = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        if x.node is not None:
            if training:
                gsum = g.sum(axis=(0, 2, 3), keepdims=True)
                gx_sum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = scale.data * istd4 * (g - gsum / m - xhat * gx_sum / m)
            else:
                gx = g * scale.data * istd4
        return gx, gscale, gshift

    return _emit(tape, "batch_norm", (x, scale, shift), out.astype(x.dtype, copy=False), bwd)


# ---------------------------------------------------------------------------
# activations and elementwise primitives


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0
    out = np.where(mask, x.data, 0)
    tape = _tracked_tape((x,))
    return _emit(tape, "relu", (x,), out, lambda g: (g * mask,), branch=mask)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    tape = _tracked_tape((x,))
    return _emit(tape, "sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    tape = _tracked_tape((x,))
    return _emit(tape, "tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_elementwise(a, b, "add")
    out = a.data + b.data
    tape = _tracked_tape((a, b))

    def bwd(g):
        ga = g if a.node is not None else None
        gb = None
        if b.node is not None:
            gb = g.sum(axis=1, keepdims=True) if bcast == "b" else g
        if bcast == "a" and ga is not None:
            ga = g.sum(axis=1, keepdims=True)
        return ga, gb

    return _emit(tape, "add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_elementwise(a, b, "sub")
    out = a.data - b.data
    tape = _tracked_tape((a, b))

    def bwd(g):
        ga = g if a.node is not None else None
        gb = -g if b.node is not None else None
        if bcast == "a" and ga is not None:
            ga = g.sum(axis=1, keepdims=True)
        if bcast == "b" and gb is not None:
            gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return _emit(tape, "sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one side may have a single channel, in which
    case it is broadcast across the other's channels (attention weighting)."""
    bcast = _check_elementwise(a, b, "mul")
    out = a.data * b.data
    tape = _tracked_tape((a, b))

    def bwd(g):
        ga = gb = None
        if a.node is not None:
            ga = g * b.data
            if bcast == "a":
                ga = ga.sum(axis=1, keepdims=True)
        if b.node is not None:
            gb = g * a.data
            if bcast == "b":
                gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return _emit(tape, "mul", (a, b), out, bwd)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> str | None:
    """Returns which side broadcasts over channels ('a', 'b' or None)."""
    if a.shape == b.shape:
        return None
    an, ac, ah, aw = a.shape
    bn, bc, bh, bw = b.shape
    if (an, ah, aw) == (bn, bh, bw):
        if bc == 1 and ac > 1:
            return "b"
        if ac == 1 and bc > 1:
            return "a"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    out = x.data * scale + shift
    tape = _tracked_tape((x,))
    return _emit(tape, "affine", (x,), out, lambda g: (g * scale,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    tape = _tracked_tape((x,))
    return _emit(tape, "log", (x,), out, lambda g: (g / x.data,))


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** exponent for non-negative x and exponent >= 0."""
    out = np.power(x.data, exponent)
    tape = _tracked_tape((x,))
    if exponent == 0.0:
        return _emit(tape, "power", (x,), out, lambda g: (np.zeros_like(g),))
    return _emit(tape, "power", (x,), out,
                 lambda g: (g * exponent * np.power(x.data, exponent - 1.0),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    tape = _tracked_tape((x,))
    return _emit(tape, "clamp", (x,), out, lambda g: (g * inside,), branch=inside)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise (C1 everywhere)."""
    a = np.abs(x.data)
    quad = a < 1.0
    out = np.where(quad, 0.5 * x.data * x.data, a - 0.5)
    tape = _tracked_tape((x,))
    return _emit(tape, "smooth_l1", (x,), out,
                 lambda g: (g * np.clip(x.data, -1.0, 1.0),))


def wrap_angle(x: Tensor) -> Tensor:
    """Differentiable wrap into (-pi, pi]; the shift is locally constant so
    the derivative is 1 away from the wrap boundary."""
    k = np.ceil((x.data - np.pi) / TWO_PI)
    out = x.data - TWO_PI * k
    np.subtract(out, TWO_PI, out=out, where=out > np.pi)
    np.add(out, TWO_PI, out=out, where=out <= -np.pi)
    shift = np.round((x.data - out) / TWO_PI)  # total wrap count incl. boundary fix-ups
    tape = _tracked_tape((x,))
    return _emit(tape, "wrap_angle", (x,), out, lambda g: (g,), branch=shift)


def sum_all(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.sum(dtype=x.dtype), dtype=x.dtype)
    tape = _tracked_tape((x,))
    return _emit(tape, "sum_all", (x,), out,
                 lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype, copy=False),))


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation matrix (n_out, n_in), rows convex."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        src = i * scale
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear interpolation to (out_h, out_w).

    Internally accumulates in float64 so every output is an exact convex
    combination of inputs (outputs never leave [min(x), max(x)]).
    """
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: {h}x{w} -> {out_h}x{out_w} would downsample")
    rh = _interp_matrix(h, out_h)
    rw = _interp_matrix(w, out_w)
    x64 = x.data.astype(np.float64, copy=False)
    t = np.tensordot(x64, rh, axes=([2], [1]))      # (n, c, w, H)
    out = np.tensordot(t, rw, axes=([2], [1]))      # (n, c, H, W)
    out = out.astype(x.dtype)

    tape = _tracked_tape((x,))

    def bwd(g):
        g64 = g.astype(np.float64, copy=False)
        t2 = np.tensordot(g64, rh, axes=([2], [0]))  # (n, c, W, h)
        gx = np.tensordot(t2, rw, axes=([2], [0]))   # (n, c, h, w)
        return (gx.astype(x.dtype),)

    return _emit(tape, "bilinear_upsample", (x,), out, bwd)


# ---------------------------------------------------------------------------
# channel concatenation / slicing


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels: empty part list")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        pn, _, ph, pw = p.shape
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(
                f"concat_channels: part extents {p.shape} do not match {parts[0].shape} "
                "(no implicit resize)")
    out = np.concatenate([p.data for p in parts], axis=1)
    tape = _tracked_tape(parts)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if p.node is not None else None
            for i, p in enumerate(parts))

    return _emit(tape, "concat_channels", tuple(parts), out, bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    n, c, h, w = x.shape
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {c} channels")
    out = x.data[:, start:stop].copy()
    tape = _tracked_tape((x,))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _emit(tape, "slice_channels", (x,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(build: Callable[[dict[str, Tensor]], Tensor],
               arrays: dict[str, np.ndarray], *,
               eps: float = 1e-3,
               n_coords: int = 50,
               rng: np.random.Generator | None = None,
               grad_floor: float = 1e-4) -> float:
    """Compare analytic gradients against central finite differences.

    ``build`` maps tracked tensors (one per entry of ``arrays``) to a scalar
    loss on a fresh tape. A random sample of coordinates per array is
    perturbed by +-eps. Samples whose two perturbed forwards take different
    piecewise branches (ReLU corners and the like) are skipped, as are
    coordinates where both gradients are below ``grad_floor``. Returns the
    maximum relative error over the checked coordinates; NaN on either side
    makes the check fail with ``inf``.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps {eps} outside [1e-4, 1e-2]")
    rng = rng or np.random.default_rng(0)

    def run(vals):
        tape = Tape()
        tracked = {k: tape.watch(Tensor(v)) for k, v in vals.items()}
        loss = build(tracked)
        return tape, tracked, loss

    tape, tracked, loss = run(arrays)
    grads = backward(tape, loss)
    analytic = {k: grads.get(t.node) for k, t in tracked.items()}

    max_err = 0.0
    for name, base in arrays.items():
        a_grad = analytic[name]
        if a_grad is None:
            continue
        flat = base.reshape(-1)
        n_pick = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=n_pick, replace=False)
        for idx in coords:
            sigs = []
            vals = []
            for sign in (+1.0, -1.0):
                pert = {k: v.copy() for k, v in arrays.items()}
                pert[name].reshape(-1)[idx] += sign * eps
                t2, _, l2 = run(pert)
                sigs.append(t2.branch_signature())
                vals.append(l2.item())
            if any(not np.array_equal(s1, s2) for s1, s2 in zip(*sigs)):
                continue  # finite difference straddles a kink
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            analytic_v = float(a_grad.reshape(-1)[idx])
            if np.isnan(numeric) or np.isnan(analytic_v):
                return float("inf")
            denom = max(abs(numeric), abs(analytic_v))
            if denom <= grad_floor:
                continue
            max_err = max(max_err, abs(numeric - analytic_v) / denom)
    return max_err
