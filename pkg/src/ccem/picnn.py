"""Partially input-convex factor energies.

A factor energy f(y; c) is convex in the scope value y for every context c.
The context feeds a small unconstrained net; each scope layer is

    p_l = (y * gy_l) @ Wy_l + ub_l + (z_{l-1} * gz_l) @ softplus(Wzhat_l)
    z_l = act(p_l)

where gy_l, gz_l, ub_l come from the context path, gz_l is nonnegative by
construction (softplus), and the z-to-z weights are nonnegative via softplus
reparameterization. With act convex and nondecreasing (softplus or relu) and a
nonnegative readout on z_L, f is convex in y regardless of the sign of the
y-gates, because the y terms enter each layer affinely.

The gradient in y is written out as its own forward computation (the usual
backward recursion over the layers, expressed with taped ops). Training that
differentiates through solver steps then only ever backprops through this
first-order graph instead of needing second-order autodiff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FORMAT_VERSION = 1
ACTIVATIONS = ("softplus", "relu")


class PicnnParams:
    """Named parameter arrays plus architecture metadata."""

    def __init__(self, meta, arrays):
        self.meta = dict(meta)
        self.arrays = dict(arrays)

    @property
    def layers(self):
        return self.meta["layers"]

    @property
    def width(self):
        return self.meta["width"]

    @property
    def ctx_dim(self):
        return self.meta["ctx_dim"]

    @property
    def scope_dim(self):
        return self.meta["scope_dim"]

    @property
    def activation(self):
        return self.meta["activation"]

    def items(self):
        return sorted(self.arrays.items())

    def copy(self):
        return PicnnParams(self.meta, {k: v.copy() for k, v in self.arrays.items()})

    def tensor_view(self):
        """Tensors sharing this object's arrays, marked as grad leaves."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.arrays.items()}

    def save(self, path):
        meta = dict(self.meta, format_version=FORMAT_VERSION)
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **self.arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            if meta.pop("format_version", None) != FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format in {path}")
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
        return cls(meta, arrays)


def init_params(ctx_dim, scope_dim, layers=3, width=256, seed=0, activation="softplus"):
    """Fresh factor parameters.

    z-to-z weights and the readout scale start with softplus about 1/width,
    so the net opens as an almost-linear map with O(1) energies at any width.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    in_dims = [ctx_dim] + [width] * (layers - 1)
    # nonneg matrices sum width all-positive terms, so their softplus must
    # start near 1/width to keep activations O(1) at any width
    nonneg_loc = -(np.log(width) + 1.0)
    arrays = {}

    def dense(shape):
        return rng.normal(size=shape) / np.sqrt(shape[0])

    for l in range(layers):
        u = in_dims[l]
        arrays[f"Wut{l}"] = dense((u, width))
        arrays[f"but{l}"] = np.zeros(width)
        arrays[f"Wyu{l}"] = dense((u, scope_dim))
        arrays[f"Wu{l}"] = dense((u, width))
        arrays[f"b{l}"] = np.zeros(width)
        arrays[f"Wy{l}"] = dense((scope_dim, width))
        if l >= 1:
            arrays[f"Wzu{l}"] = dense((u, width))
            arrays[f"Wzhat{l}"] = nonneg_loc + 0.1 * rng.normal(size=(width, width))
    arrays["s_hat"] = nonneg_loc + 0.1 * rng.normal(size=width)
    arrays["a_u"] = rng.normal(size=width) / np.sqrt(width)
    arrays["b_f"] = np.zeros(())

    meta = {
        "layers": layers,
        "width": width,
        "ctx_dim": ctx_dim,
        "scope_dim": scope_dim,
        "activation": activation,
    }
    return PicnnParams(meta, arrays)


def _act(name):
    return ad.softplus if name == "softplus" else ad.relu


def _act_prime(name, p):
    # derivative of the activation at the stored pre-activations
    return ad.sigmoid(p) if name == "softplus" else ad.step(p)


@dataclass
class FactorContext:
    """Per-solve cache of everything the context path produces.

    Built once from the K factor contexts of an instance; scope evaluations
    reuse it for every iterate. tiled(B) repeats the per-factor rows B times
    to line up with a flattened (B*K, scope_dim) batch of scope values.
    """

    activation: str
    gy: list
    gz: list
    ub: list
    vz: list
    s: Tensor
    ctx_term: Tensor
    b_f: Tensor
    _tiles: dict = field(default_factory=dict)

    @property
    def num_factors(self):
        return self.ctx_term.shape[0]

    def tiled(self, reps):
        if reps == 1:
            return self
        got = self._tiles.get(reps)
        if got is None:
            got = FactorContext(
                activation=self.activation,
                gy=[ad.tile_rows(t, reps) for t in self.gy],
                gz=[None if t is None else ad.tile_rows(t, reps) for t in self.gz],
                ub=[ad.tile_rows(t, reps) for t in self.ub],
                vz=self.vz,
                s=self.s,
                ctx_term=ad.tile_rows(self.ctx_term, reps),
                b_f=self.b_f,
            )
            self._tiles[reps] = got
        return got


def context_path(tv, c, activation):
    """Run the context net over K context rows.

    tv is a name->Tensor dict (tensor_view of the params or plain arrays),
    c is (K, ctx_dim). Records on the active tape, so a training step can
    backprop into the context-path weights through the cache.
    """
    c = ad.as_tensor(c)
    act = _act(activation)
    layers = 0
    while f"Wut{layers}" in tv:
        layers += 1
    u = c
    gy, gz, ub, vz = [], [], [], []
    for l in range(layers):
        gy.append(ad.matmul(u, tv[f"Wyu{l}"]))
        if l >= 1:
            gz.append(ad.softplus(ad.matmul(u, tv[f"Wzu{l}"])))
            vz.append(ad.softplus(tv[f"Wzhat{l}"]))
        else:
            gz.append(None)
            vz.append(None)
        ub.append(ad.add(ad.matmul(u, tv[f"Wu{l}"]), tv[f"b{l}"]))
        u = act(ad.add(ad.matmul(u, tv[f"Wut{l}"]), tv[f"but{l}"]))
    return FactorContext(
        activation=activation,
        gy=gy,
        gz=gz,
        ub=ub,
        vz=vz,
        s=ad.softplus(tv["s_hat"]),
        ctx_term=ad.matmul(u, tv["a_u"]),
        b_f=tv["b_f"],
    )


def _scope_forward(tv, ctx, y):
    """Shared forward over scope rows; returns (energies, pre-activations)."""
    act = _act(ctx.activation)
    layers = len(ctx.gy)
    z = None
    pre = []
    for l in range(layers):
        t = ad.add(ad.matmul(ad.mul(y, ctx.gy[l]), tv[f"Wy{l}"]), ctx.ub[l])
        if l >= 1:
            t = ad.add(t, ad.matmul(ad.mul(z, ctx.gz[l]), ctx.vz[l]))
        pre.append(t)
        z = act(t)
    f = ad.add(ad.add(ad.matmul(z, ctx.s), ctx.ctx_term), ctx.b_f)
    return f, pre


def factor_values(tv, ctx, y):
    """Energies of scope rows y (R, scope_dim) under tiled context rows."""
    f, _ = _scope_forward(tv, ctx, y)
    return f


def factor_values_and_grad(tv, ctx, y):
    """Energies and their y-gradients, both as taped forward computations.

    The gradient is the layer recursion
        delta_L = s,  dp_l = delta_l * act'(p_l)
        grad += (dp_l @ Wy_l^T) * gy_l
        delta_{l-1} = (dp_l @ Vz_l^T) * gz_l
    written with ordinary ops, so downstream losses can differentiate through
    the gradient itself without second-order machinery.
    """
    f, pre = _scope_forward(tv, ctx, y)
    layers = len(ctx.gy)
    delta = ctx.s
    grad = None
    for l in range(layers - 1, -1, -1):
        dp = ad.mul(delta, _act_prime(ctx.activation, pre[l]))
        contrib = ad.mul(ad.matmul(dp, ad.transpose(tv[f"Wy{l}"])), ctx.gy[l])
        grad = contrib if grad is None else ad.add(grad, contrib)
        if l >= 1:
            delta = ad.mul(ad.matmul(dp, ad.transpose(ctx.vz[l])), ctx.gz[l])
    return f, grad


def factor_energy(params, c, y):
    """Plain-array convenience wrapper: energies of y rows under contexts c.

    c is (K, ctx_dim), y is (K, scope_dim), result is (K,).
    """
    tv = params.tensor_view()
    ctx = context_path(tv, np.asarray(c, dtype=np.float64), params.activation)
    return factor_values(tv, ctx, ad.as_tensor(np.asarray(y, dtype=np.float64))).data


def grad_y_energy(params, c, y):
    """Analytic d f / d y as a plain array, same shapes as factor_energy."""
    tv = params.tensor_view()
    ctx = context_path(tv, np.asarray(c, dtype=np.float64), params.activation)
    _, g = factor_values_and_grad(tv, ctx, ad.as_tensor(np.asarray(y, dtype=np.float64)))
    return g.data


def factor_argmin(params, c, y0, project, steps=30, eta0=0.1, eta_end=0.01):
    """Approximate per-row minimizers of the current factor energies.

    Projected descent on the scope variables, one row per context row, no
    tape. project maps a (K, scope_dim) array back onto the feasible patch
    for each row. Used by the samplers to mine wherever the landscape
    currently dips below the clean labels.
    """
    tv = params.tensor_view()
    ctx = context_path(tv, np.asarray(c, dtype=np.float64), params.activation)
    y = project(np.array(y0, dtype=np.float64))
    for t in range(steps):
        eta = eta0 * (eta_end / eta0) ** (t / max(steps - 1, 1))
        _, g = factor_values_and_grad(tv, ctx, ad.as_tensor(y))
        y = project(y - eta * g.data)
    return y
