"""Dense float64 tensors with tape-based reverse-mode differentiation.

Arrays are numpy under the hood; the differentiation tape, backward rules
and the finite-difference checker are implemented here. Everything runs in
float64 so that central-difference gradient checks are sharp. The last axis
is the feature axis for softmax, layer_norm and cross_entropy.

Randomness is counter-based (numpy Philox keyed through SeedSequence) so
that every draw is a pure function of an integer key path.
"""

from __future__ import annotations

import hashlib
import json
import math
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

RNG_ALGORITHM = "philox"

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def make_rng(*key: int | str) -> np.random.Generator:
    """Generator keyed by a path of ints/strings; same key, same stream."""
    entropy = []
    for part in key:
        if isinstance(part, str):
            digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
            entropy.append(int.from_bytes(digest, "little"))
        else:
            entropy.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class Tensor:
    """A dense float64 value with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return mul(self, _as_tensor(1.0 / float(scalar)))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Execution-ordered record of operations; creation order is topological.

    Use as a context manager; ops executed inside the block that touch a
    requires_grad tensor are recorded. Single-writer: tapes do not nest.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None


_ACTIVE_TAPE: Tape | None = None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.nodes.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor on
    the tape. Tensors recorded but not on a path to the loss get zero grads."""
    if loss.values.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.values.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    tracked: dict[int, Tensor] = {}
    for out, inputs, _ in tape.nodes:
        if out.requires_grad:
            tracked[id(out)] = out
        for t in inputs:
            if t.requires_grad:
                tracked[id(t)] = t
    for out, inputs, backward_fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gin in zip(inputs, backward_fn(g)):
            if gin is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gin if acc is None else acc + gin
    for tid, t in tracked.items():
        g = grads.get(tid)
        t.grad = np.zeros_like(t.values) if g is None else np.broadcast_to(g, t.shape).astype(np.float64).copy()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values + b.values)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values * b.values)

    def back(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(out, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2D x 2D, ND x 2D (shared right operand), and
    equal-leading-dim batched ND x ND."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul needs >=2D operands, got {av.shape} and {bv.shape}")
    if bv.ndim == 2:
        if av.shape[-1] != bv.shape[0]:
            raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
        out = Tensor(av @ bv)

        def back(g):
            da = g @ bv.T
            a2 = av.reshape(-1, av.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            return da, a2.T @ g2

        return _record(out, (a, b), back)
    if av.ndim == bv.ndim and av.shape[:-2] == bv.shape[:-2]:
        if av.shape[-1] != bv.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
        out = Tensor(av @ bv)

        def back(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

        return _record(out, (a, b), back)
    raise ValueError(f"unsupported matmul operand shapes: {av.shape} @ {bv.shape}")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.values, axes))
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    order = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, order)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = Tensor(a.values.reshape(tuple(shape)))

    def back(g):
        return (g.reshape(old),)

    return _record(out, (a,), back)


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum())

    def back(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), back)


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.values.mean())

    def back(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record(out, (a,), back)


def _softmax_values(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax along the last axis."""
    w = _softmax_values(x.values)
    out = Tensor(w)

    def back(g):
        return ((g - (g * w).sum(axis=-1, keepdims=True)) * w,)

    return _record(out, (x,), back)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax along the last axis restricted to mask=True positions.

    Masked positions get exactly zero weight. Raises if any slice is fully
    masked."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: some slice has no unmasked position")
    shifted = np.where(mask, x.values, -np.inf)
    m = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - m)
    w = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(w)

    def back(g):
        return ((g - (g * w).sum(axis=-1, keepdims=True)) * w,)

    return _record(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize the last axis (biased variance) then apply an affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = Tensor(xhat * gain.values + bias.values)
    lead = tuple(range(xv.ndim - 1))

    def back(g):
        dxhat = g * gain.values
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), back)


def gelu(x: Tensor, approx: bool = False) -> Tensor:
    """x * Phi(x); exact Gaussian CDF by default, tanh approximation optional."""
    xv = x.values
    if not approx:
        cdf = 0.5 * (1.0 + erf(xv / _SQRT2))
        out = Tensor(xv * cdf)
        deriv = cdf + xv * np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
    else:
        c = math.sqrt(2.0 / math.pi)
        u = c * (xv + 0.044715 * xv**3)
        t = np.tanh(u)
        out = Tensor(0.5 * xv * (1.0 + t))
        deriv = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * xv * xv)

    def back(g):
        return (g * deriv,)

    return _record(out, (x,), back)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a [V, d] table; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size:
        lo, hi = int(ids.min()), int(ids.max())
        if lo < 0 or hi >= v:
            bad = lo if lo < 0 else hi
            raise IndexError(f"embedding id {bad} out of range for table of {v} rows")
    out = Tensor(table.values[ids])

    def back(g):
        dt = np.zeros_like(table.values)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record(out, (table,), back)


def gather_pairs(p: Tensor, bins: np.ndarray, query_axis: str) -> Tensor:
    """Pairwise bias lookup out[..., i, j] from projected bin scores.

    p has shape [..., n, n_bins]; bins has shape [..., n, n] of indices into
    the last axis of p. query_axis selects which token's projection row is
    read: "col" gives out[.., i, j] = p[.., j, bins[.., i, j]] (context token
    j supplies the projection), "row" gives p[.., i, bins[.., i, j]].
    """
    pv = p.values
    n = pv.shape[-2]
    bins = np.broadcast_to(np.asarray(bins, dtype=np.int64), pv.shape[:-1] + (n,))
    if bins.min(initial=0) < 0 or bins.max(initial=0) >= pv.shape[-1]:
        raise IndexError("pair bin index out of range")
    if query_axis == "col":
        t = np.take_along_axis(pv, np.swapaxes(bins, -1, -2), axis=-1)
        out = Tensor(np.swapaxes(t, -1, -2))
    elif query_axis == "row":
        out = Tensor(np.take_along_axis(pv, bins, axis=-1))
    else:
        raise ValueError(f"query_axis must be 'row' or 'col', got {query_axis!r}")

    lead_shape = pv.shape[:-2]
    m = int(np.prod(lead_shape)) if lead_shape else 1
    bins2 = bins.reshape(m, n, n)

    def back(g):
        g2 = g.reshape(m, n, n)
        dp = np.zeros((m,) + pv.shape[-2:], dtype=np.float64)
        marr = np.arange(m)[:, None, None]
        if query_axis == "col":
            jarr = np.arange(n)[None, None, :]
            np.add.at(dp, (marr, jarr, bins2), g2)
        else:
            iarr = np.arange(n)[None, :, None]
            np.add.at(dp, (marr, iarr, bins2), g2)
        return (dp.reshape(pv.shape),)

    return _record(out, (p,), back)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax over positions whose target != ignore_index.

    logits is [n, C]; returns a scalar, 0.0 if every position is ignored.
    """
    lv = logits.values
    if lv.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, C] logits, got shape {lv.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (lv.shape[0],):
        raise ValueError(f"targets shape {targets.shape} does not match logits {lv.shape}")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0)
    tv = targets[valid]
    if tv.min() < 0 or tv.max() >= lv.shape[1]:
        raise ValueError("cross_entropy target out of class range")
    m = lv.max(axis=-1, keepdims=True)
    z = lv - m
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = z[np.arange(lv.shape[0]), np.clip(targets, 0, lv.shape[1] - 1)]
    out = Tensor(-(picked[valid] - lse[valid]).mean())

    def back(g):
        soft = np.exp(z - lse[:, None])
        soft[np.arange(lv.shape[0])[valid], tv] -= 1.0
        soft[~valid] = 0.0
        return (soft * (g / n_valid),)

    return _record(out, (logits,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling Bernoulli dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = Tensor(x.values * keep * scale)

    def back(g):
        return (g * keep * scale,)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e.max_rel_err <= self.tol else "FAIL"
            lines.append(
                f"{status:4s} {e.name:32s} max_rel_err={e.max_rel_err:.3e} "
                f"at {e.worst_index} (analytic={e.analytic:.6e}, numeric={e.numeric:.6e})"
            )
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_entries: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar f() against central differences.

    For tensors larger than max_entries a seeded random subsample of entries
    is perturbed. Relative error uses a unit floor so that near-zero
    gradients are compared absolutely at the same tolerance.
    """
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")
    with Tape() as tape:
        loss = f()
        backward(loss, tape)
    analytic = {}
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name} has no gradient; is it on the tape?")
        analytic[name] = t.grad.copy()

    entries = []
    for name, t in params.items():
        flat = t.values.reshape(-1)
        size = flat.size
        if size <= max_entries:
            idxs = np.arange(size)
        else:
            idxs = np.sort(make_rng(seed, "grad_check", name).choice(size, max_entries, replace=False))
        worst = (0.0, (0,), 0.0, 0.0)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = f().item()
            flat[idx] = orig - eps
            fm = f().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if rel >= worst[0]:
                worst = (rel, np.unravel_index(int(idx), t.shape), a, numeric)
        entries.append(GradCheckEntry(name, worst[0], worst[1], worst[2], worst[3], len(idxs)))
    return GradCheckReport(entries=entries, tol=tol)


# ---------------------------------------------------------------------------
# checkpoint archive: flat name -> raw little-endian float64 + json manifest


def save_checkpoint(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Write a flat zip archive of float64 arrays plus a json manifest.

    Entries: manifest.json, index.json (name -> shape), data/<name> raw
    little-endian float64 bytes. Timestamps are fixed so identical contents
    produce identical bytes.
    """
    index = {name: list(arr.shape) for name, arr in arrays.items()}
    tmp = str(path) + ".tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:

        def put(name: str, data: bytes) -> None:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)

        put("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        put("index.json", json.dumps(index, sort_keys=True).encode())
        for name in sorted(arrays):
            put(f"data/{name}", np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    import os

    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        index = json.loads(zf.read("index.json"))
        arrays = {}
        for name, shape in index.items():
            raw = zf.read(f"data/{name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return arrays, manifest
