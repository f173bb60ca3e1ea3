"""Numerical substrate: checked primitives, finite-difference gradient checks,
initialisers, global-norm clipping and the Adam optimiser.

Reverse-mode differentiation itself is torch's autograd; this module pins the
primitive set the model relies on, adds a non-finite guard to each primitive,
and provides an independent central-difference oracle to verify gradients.
"""
import math

import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.2


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN/Inf."""

    def __init__(self, op, detail=""):
        self.op = op
        super().__init__(f"non-finite value produced by {op}{': ' + detail if detail else ''}")


def check_finite(t, op):
    if not torch.isfinite(t).all():
        raise NonFiniteError(op)
    return t


def masked_softmax(logits, mask, dim=-1):
    """Softmax restricted to ``mask``; masked entries get probability exactly 0."""
    if not mask.any(dim=dim).all():
        raise ValueError("masked softmax over an empty feasible set")
    return torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=dim)


def batch_norm(x, weight, bias, running_mean=None, running_var=None, training=True,
               momentum=0.1, eps=1e-5):
    """Per-channel batch norm over every leading axis of ``x`` (channels last)."""
    flat = x.reshape(-1, x.shape[-1])
    out = F.batch_norm(flat, running_mean, running_var, weight, bias, training, momentum, eps)
    return out.reshape(x.shape)


def _matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _add(a, b):
    torch.broadcast_shapes(a.shape, b.shape)
    return a + b


# name -> callable on tensors; each entry is a differentiable primitive the
# encoder/decoder equations are assembled from
PRIMITIVES = {
    "matmul": _matmul,
    "add": _add,
    "concat": lambda *xs, dim=-1: torch.cat(xs, dim=dim),
    "mean": lambda x, dim=-2: x.mean(dim=dim),
    "softmax": lambda x, dim=-1: torch.softmax(x, dim=dim),
    "leaky_relu": lambda x, slope=LEAKY_SLOPE: F.leaky_relu(x, slope),
    "tanh": torch.tanh,
    "exp": torch.exp,
    "log": torch.log,
    "batch_norm": lambda x, w, b: batch_norm(x, w, b),
    "masked_fill": lambda x, mask, value=0.0: x.masked_fill(mask, value),
    "masked_softmax": masked_softmax,
    "gather": lambda x, idx, dim=-1: x.gather(dim, idx),
}


def forward_primitive(op, *inputs, **kwargs):
    """Apply primitive ``op`` and reject non-finite results."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    try:
        out = fn(*inputs, **kwargs)
    except RuntimeError as exc:
        raise ValueError(f"{op}: {exc}") from exc
    return check_finite(out, op)


def grad_check(f, x, h=1e-5, indices=None):
    """Max relative error between autograd and central differences.

    ``f`` maps a tensor shaped like ``x`` to a scalar. The error per coordinate
    is ``|analytic - numeric| / max(1, |analytic|)``. ``indices`` restricts the
    check to a subset of flattened coordinates.
    """
    x = x.detach().clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    check_finite(y, "grad_check forward")
    analytic = None
    if y.requires_grad:
        (analytic,) = torch.autograd.grad(y, x, allow_unused=True)
    if analytic is None:  # f does not depend on x
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)

    base = x.detach().reshape(-1)
    coords = range(base.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in coords:
            plus = base.clone()
            minus = base.clone()
            plus[i] += h
            minus[i] -= h
            fp = f(plus.reshape(x.shape))
            fm = f(minus.reshape(x.shape))
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                raise NonFiniteError("grad_check", f"f not finite at coordinate {i} +/- h")
            numeric = (fp - fm).item() / (2 * h)
            a = analytic[i].item()
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def _check_shape(shape):
    shape = tuple(shape)
    if len(shape) < 2:
        raise ValueError("initialisers expect at least 2 dimensions")
    if any(s <= 0 for s in shape):
        raise ValueError(f"zero extent in shape {shape}")
    return shape


def init_orthogonal(shape, gain=1.0, generator=None, dtype=torch.float64):
    """Orthogonal matrix (rows or columns orthonormal, whichever fit) times ``gain``."""
    shape = _check_shape(shape)
    t = torch.empty(shape, dtype=dtype)
    return orthogonal_(t, gain, generator)


def orthogonal_(t, gain=1.0, generator=None):
    rows, cols = t.shape[0], math.prod(t.shape[1:])
    flat = torch.randn(rows, cols, generator=generator, dtype=torch.float64)
    if rows < cols:
        flat = flat.T
    q, r = torch.linalg.qr(flat)
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    if rows < cols:
        q = q.T
    with torch.no_grad():
        t.copy_((gain * q).reshape(t.shape))
    return t


def init_xavier(shape, generator=None, dtype=torch.float64):
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    shape = _check_shape(shape)
    return xavier_(torch.empty(shape, dtype=dtype), generator)


def xavier_(t, generator=None):
    fan_out, fan_in = t.shape[0], math.prod(t.shape[1:])
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


def global_norm(tensors):
    tensors = [t for t in tensors if t is not None]
    if not tensors:
        return 0.0
    return math.sqrt(sum(float((t.detach().double() ** 2).sum()) for t in tensors))


def clip_global_norm(grads, max_norm):
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``.

    ``grads`` is an iterable of tensors, a mapping name -> tensor, or an
    iterable of parameters (their ``.grad`` is used). Returns the scale applied.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    if isinstance(grads, dict):
        tensors = list(grads.values())
    else:
        tensors = [g.grad if isinstance(g, torch.nn.Parameter) else g for g in grads]
    tensors = [t for t in tensors if t is not None]
    for t in tensors:
        check_finite(t, "gradient")
    total = global_norm(tensors)
    if total <= max_norm:
        return 1.0
    scale = max_norm / total
    with torch.no_grad():
        for t in tensors:
            t.mul_(scale)
    return scale


class AdamState:
    """Moments for a name -> tensor parameter map."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}
        self.betas = betas
        self.eps = eps
        self.step = 0


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update; returns a new parameter map.

    Reference implementation used to cross-check the torch optimiser the
    trainers run on.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise KeyError("params, grads and optimiser state must share the same keys")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    out = {}
    for k, p in params.items():
        g = check_finite(grads[k], "gradient")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        out[k] = p - lr * (state.m[k] / c1) / ((state.v[k] / c2).sqrt() + state.eps)
    return out


def make_adam(params, lr):
    """Adam with the standard betas (0.9, 0.999) and eps 1e-8."""
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


class _CorruptTanh(torch.autograd.Function):
    """tanh with a deliberately wrong backward rule (negative control for grad checks)."""

    @staticmethod
    def forward(ctx, x):
        y = torch.tanh(x)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved_tensors
        return grad * (1 - y)  # should be 1 - y**2


corrupt_tanh = _CorruptTanh.apply
