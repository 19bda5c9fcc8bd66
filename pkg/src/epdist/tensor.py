"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Only the operators needed by the 1D ResNet and TCN regressors are provided.
Operations record themselves on the active :class:`Tape` (see ``with Tape()``)
when at least one input requires a gradient; outside a tape everything runs
in inference mode and nothing is recorded.

Training runs in float32.  Gradient checking switches the default dtype to
float64 with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Array with an optional gradient buffer and a link to its tape node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return residual_add(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, grad_output=None, retain_grad: bool = False):
        backward(loss, self, grad_output=grad_output, retain_grad=retain_grad)


def _log_kinks(pattern: np.ndarray):
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(pattern.copy())


@contextlib.contextmanager
def record_kinks():
    """Collect the sign patterns of every piecewise-linear op evaluated inside."""
    prev = getattr(_state, "kinks", None)
    log = _state.kinks = []
    try:
        yield log
    finally:
        _state.kinks = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t is not None and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = len(tape.nodes)
        tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape, grad_output=None, retain_grad: bool = False):
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on.

    Gradients are accumulated additively, both across fan-out inside one
    graph and across repeated calls (call ``zero_grad`` between steps).
    Intermediate results only keep their gradient when ``retain_grad`` is set.
    A non-scalar ``loss`` needs an explicit ``grad_output`` of equal shape.
    """
    if grad_output is None:
        if loss.data.size != 1:
            raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(grad_output, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise InvalidArgument(f"grad_output shape {seed.shape} != loss shape {loss.shape}")
    if loss.node is None or loss.node >= len(tape.nodes) or tape.nodes[loss.node].output is not loss:
        raise InvalidArgument("loss was not recorded on this tape")

    pending = {id(loss): seed}
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        if retain_grad:
            _accumulate_leaf(node.output, g)
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or inp is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate_leaf(inp, ig)
            else:
                key = id(inp)
                prev = pending.get(key)
                # never add in place: branches may share one buffer
                pending[key] = ig if prev is None else prev + ig


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# operators


def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        left, right = int(padding[0]), int(padding[1])
    else:
        left = right = int(padding)
    if left < 0 or right < 0:
        raise InvalidArgument(f"padding must be >= 0, got {padding}")
    return left, right


def _conv1d_unit_stride(x, weight, bias, taps_w, dilation, left, lout):
    # Stride-1 convolution on shifted views of the unpadded input: output
    # position o of tap k reads input o + k*dilation - left, and positions
    # falling in the padding receive no contribution from that tap.  Work
    # proceeds one batch item at a time so the shifted accumulations stay
    # in cache (about 1.5x faster than whole-batch slices).
    xd, w = x.data, weight.data
    B, cin, L = xd.shape
    cout, _, K = w.shape
    ranges = []
    for k in range(K):
        shift = k * dilation - left
        lo, hi = max(0, -shift), min(lout, L - shift)
        ranges.append((k, shift, lo, hi) if hi > lo else None)
    ranges = [r for r in ranges if r is not None]
    # a tap spanning every output (resp. input) position initializes the sum
    fwd_init = next((r for r in ranges if r[2] == 0 and r[3] == lout), None)
    bwd_init = next((r for r in ranges if r[2] + r[1] == 0 and r[3] + r[1] == L), None)

    out = np.empty((B, cout, lout), dtype=xd.dtype) if fwd_init else np.zeros((B, cout, lout), dtype=xd.dtype)
    bcol = None if bias is None else bias.data[:, None]
    for i in range(B):
        o, xi = out[i], xd[i]
        if fwd_init:
            _, shift, _, _ = fwd_init
            np.matmul(taps_w[fwd_init[0]], xi[:, shift:shift + lout], out=o)
        for r in ranges:
            if r is fwd_init:
                continue
            k, shift, lo, hi = r
            o[:, lo:hi] += taps_w[k] @ xi[:, lo + shift:hi + shift]
        if bcol is not None:
            o += bcol

    def back(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if weight.requires_grad:
            gw = np.zeros_like(w)
            for k, shift, lo, hi in ranges:
                gw[:, :, k] = np.matmul(g[:, :, lo:hi], xd[:, :, lo + shift:hi + shift].transpose(0, 2, 1)).sum(axis=0)
        if x.requires_grad:
            wt = {r[0]: np.ascontiguousarray(taps_w[r[0]].T) for r in ranges}
            gx = np.empty((B, cin, L), dtype=g.dtype) if bwd_init else np.zeros((B, cin, L), dtype=g.dtype)
            for i in range(B):
                gxi, gi = gx[i], g[i]
                if bwd_init:
                    k, shift, lo, hi = bwd_init
                    np.matmul(wt[k], gi[:, lo:hi], out=gxi)
                for r in ranges:
                    if r is bwd_init:
                        continue
                    k, shift, lo, hi = r
                    gxi[:, lo + shift:hi + shift] += wt[k] @ gi[:, lo:hi]
        return gx, gw, gb

    return out, back


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding=0) -> Tensor:
    """Cross-correlation of ``x[B, Cin, L]`` with ``weight[Cout, Cin, K]``.

    ``padding`` is either symmetric (int) or ``(left, right)``; causal
    convolutions use ``(dilation * (K - 1), 0)``.
    """
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise InvalidArgument("conv1d expects input [B,Cin,L] and weight [Cout,Cin,K]")
    B, cin, L = x.shape
    cout, wcin, K = weight.shape
    if wcin != cin:
        raise InvalidArgument(f"conv1d channel mismatch: input has {cin}, weight expects {wcin}")
    if K < 1 or stride < 1 or dilation < 1:
        raise InvalidArgument("conv1d needs K >= 1, stride >= 1, dilation >= 1")
    if bias is not None and bias.shape != (cout,):
        raise InvalidArgument(f"conv1d bias shape {bias.shape} != ({cout},)")
    left, right = _pad_pair(padding)
    lp = L + left + right
    lout = (lp - dilation * (K - 1) - 1) // stride + 1
    if lout < 1:
        raise InvalidArgument(f"conv1d output length {lout} < 1")

    xd, w = x.data, weight.data
    # contiguous per-tap weight matrices keep matmul on the BLAS path
    taps_w = [np.ascontiguousarray(w[:, :, k]) for k in range(K)]
    if stride == 1:
        out, back = _conv1d_unit_stride(x, weight, bias, taps_w, dilation, left, lout)
        return _record("conv1d", out, (x, weight, bias), back)

    if left or right:
        xp = np.zeros((B, cin, lp), dtype=xd.dtype)
        xp[:, :, left:left + L] = xd
    else:
        xp = xd
    span = stride * (lout - 1) + 1

    def tap(k):
        start = k * dilation
        return xp[:, :, start:start + span:stride]

    out = np.matmul(taps_w[0], tap(0))
    for k in range(1, K):
        out += np.matmul(taps_w[k], tap(k))
    if bias is not None:
        out += bias.data[None, :, None]

    def back(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if weight.requires_grad:
            gw = np.empty_like(w)
            for k in range(K):
                gw[:, :, k] = np.matmul(g, tap(k).transpose(0, 2, 1)).sum(axis=0)
        if x.requires_grad:
            gxp = np.zeros((B, cin, lp), dtype=g.dtype)
            for k in range(K):
                start = k * dilation
                gxp[:, :, start:start + span:stride] += np.matmul(np.ascontiguousarray(taps_w[k].T), g)
            gx = gxp[:, :, left:left + L] if (left or right) else gxp
        return gx, gw, gb

    return _record("conv1d", out, (x, weight, bias), back)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x[B, N]`` and ``weight[M, N]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise InvalidArgument("dense expects input [B,N] and weight [M,N]")
    if x.shape[1] != weight.shape[1]:
        raise InvalidArgument(f"dense dimension mismatch: {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise InvalidArgument(f"dense bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return _record("dense", out, (x, weight, bias), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_kinks(mask)
    out = np.maximum(x.data, 0)
    return _record("relu", out, (x,), lambda g: (g * mask,))


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"residual_add shape mismatch: {a.shape} vs {b.shape}")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale_shift(x: Tensor, scale: float, shift: float) -> Tensor:
    """``x * scale + shift`` with constant (non-trainable) scale and shift."""
    out = (x.data * scale + shift).astype(x.dtype, copy=False)
    return _record("scale_shift", out, (x,), lambda g: ((g * scale).astype(g.dtype, copy=False),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the temporal axis of ``x[B, C, L]``."""
    if x.data.ndim != 3 or x.shape[2] < 1:
        raise InvalidArgument(f"global_avg_pool expects [B,C,L] with L >= 1, got {x.shape}")
    length = x.shape[2]

    def back(g):
        gx = np.empty(x.shape, dtype=g.dtype)
        gx[...] = (g / length)[:, :, None]
        return (gx,)

    return _record("global_avg_pool", x.data.mean(axis=2), (x,), back)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero is zero."""
    target = _as_tensor(target)
    if pred.data.ndim != 1 or pred.shape != target.shape:
        raise InvalidArgument(f"l1_loss expects equal 1-D shapes, got {pred.shape} and {target.shape}")
    n = pred.shape[0]
    if n == 0:
        raise InvalidArgument("l1_loss on an empty batch")
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    _log_kinks(np.sign(diff))
    out = np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def back(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _record("l1_loss", out, (pred, target), back)


def weight_standardize(w: Tensor, eps: float = 1e-5) -> Tensor:
    """Rescale each output filter of ``w`` to zero mean and variance ``1/fan_in``.

    The extra ``1/sqrt(fan_in)`` keeps unit gain through the convolution, so
    inference-mode statistics stay sane before any training.
    """
    flat = w.data.reshape(w.shape[0], -1)
    n = flat.shape[1]
    mu = flat.mean(axis=1, keepdims=True)
    centered = flat - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    z = centered * inv
    gain = 1.0 / np.sqrt(n)

    def back(g):
        gz = g.reshape(flat.shape) * gain
        gx = inv / n * (n * gz - gz.sum(axis=1, keepdims=True)
                        - z * (gz * z).sum(axis=1, keepdims=True))
        return (gx.reshape(w.shape).astype(w.dtype, copy=False),)

    return _record("weight_standardize", (z * gain).reshape(w.shape).astype(w.dtype, copy=False), (w,), back)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of ``x[B, C, L]`` with a learnable scale/shift.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running statistics are used.
    """
    B, C, L = x.shape
    xd = x.data
    if training:
        n = B * L
        if n < 2:
            raise InvalidArgument("batch_norm in training mode needs more than one value per channel")
        mu = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype)[None, :, None]) * inv[None, :, None]
    out = xhat * scale.data[None, :, None] + shift.data[None, :, None]

    def back(g):
        gscale = (g * xhat).sum(axis=(0, 2)) if scale.requires_grad else None
        gshift = g.sum(axis=(0, 2)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data[None, :, None]
            if training:
                n = B * L
                gx = (inv[None, :, None] / n) * (
                    n * gxhat
                    - gxhat.sum(axis=(0, 2))[None, :, None]
                    - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
                )
            else:
                gx = gxhat * inv[None, :, None]
        return gx, gscale, gshift

    return _record("batch_norm", out, (x, scale, shift), back)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    op: str
    trials: int
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    probes: int = 0
    kink_redraws: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures and self.probes > 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.op}: {self.probes} probes over {self.trials} trials, "
                f"max rel err {self.worst:.3e} (tol {self.tolerance:g}), "
                f"{self.kink_redraws} probes redrawn for kink crossings")


def relative_error(analytic, numeric, floor: float = 1e-8):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero pairs from blowing up."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn: Callable[..., Tensor], make_inputs: Callable[[np.random.Generator], dict],
               trials: int = 10, step: float = 1e-5, tolerance: float = 1e-4,
               max_coords: int | None = None, seed: int = 0, name: str | None = None,
               max_redraws: int = 50, max_tensors: int | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences in float64.

    ``make_inputs(rng)`` returns a mapping of name -> array or Tensor and
    ``fn(**inputs)`` builds the output, which is contracted with a fixed
    random projection so every output coordinate contributes.  Arrays are
    wrapped as tensors requiring gradients; Tensor values are used as given.

    ``max_coords`` caps the coordinates probed per tensor (chosen at random)
    and ``max_tensors`` the tensors probed per trial.
    A probe whose +/- step moves any ReLU or |x| input across zero is
    redrawn, since the central difference is not a valid oracle there.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(name or getattr(fn, "__name__", "op"), trials, tolerance)
    with precision(np.float64):
        for trial in range(trials):
            inputs = {}
            for key, val in make_inputs(rng).items():
                if isinstance(val, Tensor):
                    val.data = np.asarray(val.data, dtype=np.float64)
                    val.grad = None
                    inputs[key] = val
                else:
                    inputs[key] = Tensor(np.asarray(val, dtype=np.float64), requires_grad=True)
            with Tape() as tape, record_kinks() as base_pattern:
                out = fn(**inputs)
            proj = rng.standard_normal(out.shape)
            backward(out, tape, grad_output=proj)

            def objective():
                with record_kinks() as pattern:
                    value = float(np.sum(fn(**inputs).data * proj))
                return value, pattern

            keys = [k for k, t in inputs.items() if t.requires_grad]
            if max_tensors is not None and len(keys) > max_tensors:
                keys = [keys[j] for j in sorted(rng.choice(len(keys), max_tensors, replace=False))]
            for key in keys:
                t = inputs[key]
                analytic = np.zeros_like(t.data) if t.grad is None else t.grad
                flat = t.data.reshape(-1)
                if max_coords is None or flat.size <= max_coords:
                    todo = list(range(flat.size))
                    pool = []
                else:
                    perm = rng.permutation(flat.size)
                    todo, pool = list(perm[:max_coords]), list(perm[max_coords:])
                redraws = 0
                while todo:
                    i = todo.pop()
                    orig = flat[i]
                    flat[i] = orig + step
                    up, pat_up = objective()
                    flat[i] = orig - step
                    down, pat_down = objective()
                    flat[i] = orig
                    if not (_same_pattern(pat_up, base_pattern) and _same_pattern(pat_down, base_pattern)):
                        report.kink_redraws += 1
                        if pool and redraws < max_redraws:
                            redraws += 1
                            todo.append(pool.pop())
                        continue
                    numeric = (up - down) / (2 * step)
                    err = float(relative_error(analytic.reshape(-1)[i], numeric))
                    report.probes += 1
                    report.max_rel_error[key] = max(report.max_rel_error.get(key, 0.0), err)
                    if err > tolerance:
                        report.failures.append((trial, key, int(i), err))
    return report
