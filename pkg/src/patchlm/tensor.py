"""Dense float tensors with reverse-mode autodiff, plus the neural kernels.

A Tensor wraps a numpy array (float32 for training, float64 for verification
runs) and an optional gradient buffer. Operations executed while a Tape is
active record a backward rule; Tape.backward replays the rules in reverse
creation order, which is a valid topological order by construction.

Kernels are written against single-threaded numpy: 2-D matmuls hit BLAS,
attention-style stacked matmuls go through numpy's batched path, everything
else is vectorized elementwise code. No op mutates its inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "set_nan_guard",
    "add",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "swapaxes",
    "narrow",
    "mean_axis",
    "sum_all",
    "silu",
    "rmsnorm",
    "softmax",
    "causal_attention",
    "cross_entropy",
    "cross_entropy_multi",
    "rope_apply",
    "embedding",
    "swiglu_gate",
    "swiglu_ffn",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# When enabled, every op checks its result for NaN/Inf and raises. Off by
# default: the trainer checks the loss each step instead.
_NAN_GUARD = False


def set_nan_guard(enabled: bool) -> None:
    global _NAN_GUARD
    _NAN_GUARD = bool(enabled)


class Tensor:
    """n-dimensional float array with an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops, consumed by one backward pass."""

    __slots__ = ("_ops", "consumed")

    def __init__(self):
        self._ops = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, backward_fn) -> None:
        self._ops.append(backward_fn)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor reachable from loss."""
        if loss.data.size != 1:
            raise RuntimeError("backward requires a scalar loss")
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()
        self.consumed = True
        self._ops.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _out(data) -> Tensor:
    if _NAN_GUARD and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    return Tensor(data)


def _accum(t: Tensor, g, own: bool = False) -> None:
    # own=True means g (buffer or view) belongs to this accumulation alone:
    # it is adopted without copying. Reshaped/transposed views of an upstream
    # grad qualify, since that grad is final by the time its producer runs.
    # Anything shared between two inputs (e.g. add passing one upstream grad
    # to both) must use own=False and is copied on first assign.
    if t.grad is None:
        t.grad = g if own else np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data + b.data)
    t = _tape()
    if t is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))

        t.record(bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data * b.data)
    t = _tape()
    if t is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True
        ad, bd = a.data, b.data

        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bd, a.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(g * ad, b.shape), own=True)

        t.record(bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _out(a.data * c)
    t = _tape()
    if t is not None and a.requires_grad:
        out.requires_grad = True

        def bwd():
            if out.grad is not None:
                _accum(a, out.grad * c, own=True)

        t.record(bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _out(a.data.reshape(shape))
    t = _tape()
    if t is not None and a.requires_grad:
        out.requires_grad = True
        orig = a.shape

        def bwd():
            if out.grad is not None:
                _accum(a, out.grad.reshape(orig), own=True)

        t.record(bwd)
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = _out(a.data.swapaxes(ax1, ax2))
    t = _tape()
    if t is not None and a.requires_grad:
        out.requires_grad = True

        def bwd():
            if out.grad is not None:
                _accum(a, out.grad.swapaxes(ax1, ax2), own=True)

        t.record(bwd)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _out(a.data[idx])
    t = _tape()
    if t is not None and a.requires_grad:
        out.requires_grad = True

        def bwd():
            if out.grad is None:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += out.grad

        t.record(bwd)
    return out


def mean_axis(a: Tensor, axis: int) -> Tensor:
    out = _out(a.data.mean(axis=axis))
    t = _tape()
    if t is not None and a.requires_grad:
        out.requires_grad = True
        n = a.shape[axis]

        def bwd():
            if out.grad is None:
                return
            g = np.expand_dims(out.grad / n, axis)
            _accum(a, np.broadcast_to(g, a.shape))

        t.record(bwd)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _out(a.data.sum())
    t = _tape()
    if t is not None and a.requires_grad:
        out.requires_grad = True

        def bwd():
            if out.grad is not None:
                _accum(a, np.broadcast_to(out.grad, a.shape))

        t.record(bwd)
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _out(a.data * s)
    t = _tape()
    if t is not None and a.requires_grad:
        out.requires_grad = True
        ad = a.data

        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(a, g * (s * (1.0 + ad * (1.0 - s))), own=True)

        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def _mT(x: np.ndarray) -> np.ndarray:
    return x.swapaxes(-1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """A @ B for 2-D operands, or batched with identical leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} vs {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {ad.shape} vs {bd.shape}")
    out = _out(np.matmul(ad, bd))
    t = _tape()
    if t is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def bwd():
            g = out.grad
            if g is None:
                return
            # upstream grads can arrive as strided views; one contiguous copy
            # keeps both GEMMs on the fast BLAS path
            g = np.ascontiguousarray(g)
            if a.requires_grad:
                _accum(a, np.matmul(g, _mT(bd)), own=True)
            if b.requires_grad:
                _accum(b, np.matmul(_mT(ad), g), own=True)

        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# normalization / attention kernels
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight, per last-dim slice."""
    if eps <= 0:
        raise ValueError("rmsnorm eps must be > 0")
    if weight.shape != (x.shape[-1],):
        raise ValueError(f"rmsnorm weight shape {weight.shape} does not match last dim {x.shape[-1]}")
    xd, wd = x.data, weight.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt(np.square(xd).mean(axis=-1, keepdims=True) + eps)
    out = _out(xd * inv * wd)
    t = _tape()
    if t is not None and (x.requires_grad or weight.requires_grad):
        out.requires_grad = True

        def bwd():
            g = out.grad
            if g is None:
                return
            gx = g * xd
            if x.requires_grad:
                # d/dx_j = g_j w_j inv - x_j inv^3 mean_i(g_i x_i w_i)
                coef = (gx * wd).mean(axis=-1, keepdims=True)
                coef *= inv * inv * inv
                dx = g * wd
                dx *= inv
                dx -= xd * coef
                _accum(x, dx, own=True)
            if weight.requires_grad:
                gx *= inv
                _accum(weight, gx.reshape(-1, d).sum(axis=0), own=True)

        t.record(bwd)
    return out


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, with an optional additive mask.

    The mask (e.g. 0 / -inf causal mask) is a constant: no gradient flows
    into it, and fully masked entries come out exactly 0.
    """
    z = a.data + mask if mask is not None else a.data
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    out = _out(p)
    t = _tape()
    if t is not None and a.requires_grad:
        out.requires_grad = True

        def bwd():
            g = out.grad
            if g is None:
                return
            gp = g * p
            _accum(a, gp - p * gp.sum(axis=-1, keepdims=True), own=True)

        t.record(bwd)
    return out


def _check_targets(targets: np.ndarray, vocab: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    return targets


def _ce_core(logits: Tensor, targets2d: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over all (row, k) pairs."""
    ld = logits.data
    n, vocab = ld.shape
    k = targets2d.shape[1]
    m = ld.max(axis=1, keepdims=True)
    ez = np.exp(ld - m)
    se = ez.sum(axis=1, keepdims=True)
    lse = np.log(se) + m  # [n,1]
    rows = np.repeat(np.arange(n), k)
    cols = targets2d.reshape(-1)
    picked = ld[rows, cols].reshape(n, k)
    out = _out((lse - picked).sum() / (n * k))
    t = _tape()
    if t is not None and logits.requires_grad:
        out.requires_grad = True
        p = ez / se

        def bwd():
            g = out.grad
            if g is None:
                return
            gval = float(g)
            dl = p * (gval * k / (n * k))
            np.subtract.at(dl, (rows, cols), gval / (n * k))
            _accum(logits, dl, own=True)

        t.record(bwd)
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits_row)[target], max-stabilized."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, vocab] logits, got {logits.shape}")
    targets = _check_targets(targets, logits.shape[1])
    if targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {logits.shape[0]}")
    return _ce_core(logits, targets.reshape(-1, 1))


def cross_entropy_multi(logits: Tensor, targets) -> Tensor:
    """Shared-prediction loss: each logits row is scored against k targets.

    Returns the mean over all n*k (row, target) cross-entropy terms, i.e.
    the sum of k per-target means divided by k.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy_multi expects [n, vocab] logits, got {logits.shape}")
    targets = _check_targets(targets, logits.shape[1])
    if targets.ndim != 2 or targets.shape[0] != logits.shape[0]:
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {logits.shape[0]}")
    return _ce_core(logits, targets)


# ---------------------------------------------------------------------------
# fused causal attention
# ---------------------------------------------------------------------------

_TRIU_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _triu_inf(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).char)
    m = _TRIU_CACHE.get(key)
    if m is None:
        m = np.triu(np.full((n, n), -np.inf, dtype=dtype), k=1)
        _TRIU_CACHE[key] = m
    return m


def causal_attention(q: Tensor, k: Tensor, v: Tensor, block: int = 64) -> Tensor:
    """Exact causal softmax attention over [B, H, S, dh] inputs.

    Computes softmax(q @ k^T / sqrt(dh), causal) @ v, processing query blocks
    against only their visible key prefix, so the masked upper triangle is
    never materialized. Equivalent to the full masked computation; position i
    attends to positions <= i only.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim != 4:
        raise ValueError(f"expected [B, H, S, dh], got {q.shape}")
    b, h, s, dh = q.shape
    inv_scale = 1.0 / float(np.sqrt(dh))
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    k_t = np.ascontiguousarray(kd.swapaxes(-1, -2))  # [B,H,dh,S]
    ctx = np.empty_like(qd)
    probs: list[np.ndarray] = []  # per block, [B,H,blk,s1]
    bounds: list[tuple[int, int]] = []
    for s0 in range(0, s, block):
        s1 = min(s0 + block, s)
        blk = s1 - s0
        scores = np.matmul(qd[:, :, s0:s1, :], k_t[:, :, :, :s1])
        scores *= inv_scale
        scores[:, :, :, s0:s1] += _triu_inf(blk, scores.dtype)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        np.matmul(scores, vd[:, :, :s1, :], out=ctx[:, :, s0:s1, :])
        probs.append(scores)
        bounds.append((s0, s1))
    out = _out(ctx)
    t = _tape()
    if t is not None and (q.requires_grad or k.requires_grad or v.requires_grad):
        out.requires_grad = True

        def bwd():
            g = out.grad
            if g is None:
                return
            g = np.ascontiguousarray(g)
            v_t = np.ascontiguousarray(vd.swapaxes(-1, -2))
            dq = np.empty_like(qd) if q.requires_grad else None
            dk = np.zeros_like(kd) if k.requires_grad else None
            dv = np.zeros_like(vd) if v.requires_grad else None
            for p, (s0, s1) in zip(probs, bounds):
                g_blk = g[:, :, s0:s1, :]
                if dv is not None:
                    dv[:, :, :s1, :] += np.matmul(p.swapaxes(-1, -2), g_blk)
                ds = np.matmul(g_blk, v_t[:, :, :, :s1])
                ds *= p
                ds -= p * ds.sum(axis=-1, keepdims=True)
                ds *= inv_scale
                if dq is not None:
                    np.matmul(ds, kd[:, :, :s1, :], out=dq[:, :, s0:s1, :])
                if dk is not None:
                    dk[:, :, :s1, :] += np.matmul(ds.swapaxes(-1, -2), qd[:, :, s0:s1, :])
            if dq is not None:
                _accum(q, dq, own=True)
            if dk is not None:
                _accum(k, dk, own=True)
            if dv is not None:
                _accum(v, dv, own=True)

        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------


def _rope_table(positions: np.ndarray, d_head: int, base: float, dtype):
    """Unit rotors e^(i * pos * base^(-2j/d_head)) as a [S, 1, half] complex array."""
    half = d_head // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    ctype = np.complex64 if np.dtype(dtype) == np.float32 else np.complex128
    return (np.cos(angles) + 1j * np.sin(angles)).astype(ctype)[:, None, :]


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive channel pairs of [..., S, heads, d_head] by pos-dependent angles.

    Pair i of a vector at position p is rotated by p * base^(-2i/d_head);
    the pair is treated as one complex number and multiplied by the unit
    rotor, which is exactly the 2-D rotation.
    """
    d_head = x.shape[-1]
    if d_head % 2 != 0:
        raise ValueError(f"rope_apply needs an even head dim, got {d_head}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-3],):
        raise ValueError(f"positions length {positions.shape} does not match sequence dim {x.shape[-3]}")
    rotor = _rope_table(positions, d_head, base, x.dtype)
    xd = np.ascontiguousarray(x.data)
    out_d = (xd.view(rotor.dtype) * rotor).view(xd.dtype)
    out = _out(out_d)
    t = _tape()
    if t is not None and x.requires_grad:
        out.requires_grad = True
        inv_rotor = rotor.conj()

        def bwd():
            g = out.grad
            if g is None:
                return
            g = np.ascontiguousarray(g)
            _accum(x, (g.view(inv_rotor.dtype) * inv_rotor).view(g.dtype), own=True)

        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# embedding lookup
# ---------------------------------------------------------------------------


def embedding(table: Tensor, tokens) -> Tensor:
    """Row lookup into [vocab, d]; gradients scatter-add back into the table."""
    tokens = np.asarray(tokens)
    vocab, d = table.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    out = _out(table.data[tokens])
    t = _tape()
    if t is not None and table.requires_grad:
        out.requires_grad = True
        flat = tokens.reshape(-1)

        def bwd():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, flat, g.reshape(-1, d))

        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# composite kernels
# ---------------------------------------------------------------------------


def swiglu_gate(a: Tensor, b: Tensor) -> Tensor:
    """silu(a) * b, fused."""
    if a.shape != b.shape:
        raise ValueError(f"gate shapes differ: {a.shape} vs {b.shape}")
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _out(a.data * s * b.data)
    t = _tape()
    if t is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True
        ad, bd = a.data, b.data

        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                da = 1.0 - s
                da *= ad
                da += 1.0
                da *= s
                da *= bd
                da *= g
                _accum(a, da, own=True)
            if b.requires_grad:
                db = ad * s
                db *= g
                _accum(b, db, own=True)

        t.record(bwd)
    return out


def swiglu_ffn(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    """(silu(x @ w1) * (x @ w3)) @ w2 over the last dim of x."""
    lead = x.shape[:-1]
    d = x.shape[-1]
    x2 = reshape(x, (-1, d)) if x.ndim != 2 else x
    gated = swiglu_gate(matmul(x2, w1), matmul(x2, w3))
    y = matmul(gated, w2)
    if x.ndim != 2:
        y = reshape(y, lead + (w2.shape[-1],))
    return y
