"""3D affine operators in Cartesian form.

Every operator acts on a 3-vector as ``x -> linear @ x + translation``.
Five kinds are supported (translation, scaling, rotation, reflection and
shear) plus an identity placeholder used by the search code.

The batched helpers (:func:`linear_part`, :func:`linear_grad`) accept
parameter arrays of shape ``(..., pc)`` and are what the model uses at
training time. The single-operator API (:func:`build_operator`,
:func:`compose`, :func:`apply`, :func:`apply_with_jacobians`) is built on
top of them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EPS_NORM = 1e-8


class OperatorKind(str, enum.Enum):
    TRANSLATION = "T"
    SCALING = "S"
    ROTATION = "R"
    REFLECTION = "F"
    SHEAR = "H"
    IDENTITY = "I"

    @property
    def param_count(self) -> int:
        return PARAM_COUNT[self]

    @classmethod
    def from_symbol(cls, symbol: str) -> "OperatorKind":
        try:
            return cls(symbol.upper())
        except ValueError:
            raise ValueError(f"unknown operator symbol {symbol!r}") from None


PARAM_COUNT = {
    OperatorKind.TRANSLATION: 3,
    OperatorKind.SCALING: 3,
    OperatorKind.ROTATION: 3,
    OperatorKind.REFLECTION: 3,
    OperatorKind.SHEAR: 6,
    OperatorKind.IDENTITY: 0,
}

# Kinds a relation chain may contain; IDENTITY only appears in operator pairs.
CHAIN_KINDS = (
    OperatorKind.TRANSLATION,
    OperatorKind.SCALING,
    OperatorKind.ROTATION,
    OperatorKind.REFLECTION,
    OperatorKind.SHEAR,
)


def parameter_count(kind: OperatorKind) -> int:
    return PARAM_COUNT[OperatorKind(kind)]


class DegenerateReflectionError(ValueError):
    """Raised when a reflection normal is too short to normalize."""


@dataclass(frozen=True)
class OpParams:
    """Raw parameters of one operator.

    Value layout per kind:

    * T: ``(v_x, v_y, v_z)``
    * S: ``(s_x, s_y, s_z)``
    * R: angles ``(alpha, beta, gamma)`` in radians (yaw, pitch, roll)
    * F: raw normal ``(n_x, n_y, n_z)``, normalized when the matrix is built
    * H: ``(Sh^y_x, Sh^z_x, Sh^x_y, Sh^z_y, Sh^x_z, Sh^y_z)``
    """

    kind: OperatorKind
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        kind = OperatorKind(self.kind)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != kind.param_count:
            raise ValueError(
                f"{kind.name} expects {kind.param_count} values, got {values.shape[0]}"
            )
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class AffineOp:
    linear: np.ndarray
    translation: np.ndarray
    kind: OperatorKind | None = None

    def __call__(self, x):
        return apply(self, x)

    @classmethod
    def identity(cls) -> "AffineOp":
        return cls(np.eye(3), np.zeros(3), OperatorKind.IDENTITY)


# ---------------------------------------------------------------------------
# batched linear parts and their parameter derivatives


def _rotation(angles):
    a, b, g = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    out = np.empty(angles.shape[:-1] + (3, 3))
    out[..., 0, 0] = ca * cb
    out[..., 0, 1] = ca * sb * sg - sa * cg
    out[..., 0, 2] = ca * sb * cg + sa * sg
    out[..., 1, 0] = sa * cb
    out[..., 1, 1] = sa * sb * sg + ca * cg
    out[..., 1, 2] = sa * sb * cg - ca * sg
    out[..., 2, 0] = -sb
    out[..., 2, 1] = cb * sg
    out[..., 2, 2] = cb * cg
    return out


def _rotation_grad(angles):
    a, b, g = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    out = np.zeros(angles.shape[:-1] + (3, 3, 3))
    # d/d alpha
    da = out[..., 0, :, :]
    da[..., 0, 0] = -sa * cb
    da[..., 0, 1] = -sa * sb * sg - ca * cg
    da[..., 0, 2] = -sa * sb * cg + ca * sg
    da[..., 1, 0] = ca * cb
    da[..., 1, 1] = ca * sb * sg - sa * cg
    da[..., 1, 2] = ca * sb * cg + sa * sg
    # d/d beta
    db = out[..., 1, :, :]
    db[..., 0, 0] = -ca * sb
    db[..., 0, 1] = ca * cb * sg
    db[..., 0, 2] = ca * cb * cg
    db[..., 1, 0] = -sa * sb
    db[..., 1, 1] = sa * cb * sg
    db[..., 1, 2] = sa * cb * cg
    db[..., 2, 0] = -cb
    db[..., 2, 1] = -sb * sg
    db[..., 2, 2] = -sb * cg
    # d/d gamma
    dg = out[..., 2, :, :]
    dg[..., 0, 1] = ca * sb * cg + sa * sg
    dg[..., 0, 2] = -ca * sb * sg + sa * cg
    dg[..., 1, 1] = sa * sb * cg - ca * sg
    dg[..., 1, 2] = -sa * sb * sg - ca * cg
    dg[..., 2, 1] = cb * cg
    dg[..., 2, 2] = -cb * sg
    return out


def _unit_normal(raw):
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise DegenerateReflectionError(
            f"reflection normal norm must exceed {EPS_NORM:g}"
        )
    return raw / norm, norm


def _reflection(raw):
    n, _ = _unit_normal(raw)
    return np.eye(3) - 2.0 * n[..., :, None] * n[..., None, :]


def _reflection_grad(raw):
    n, norm = _unit_normal(raw)
    # dn_i/du_k = (delta_ik - n_i n_k) / |u|
    proj = (np.eye(3) - n[..., :, None] * n[..., None, :]) / norm[..., None]
    dn = np.swapaxes(proj, -1, -2)  # dn[..., k, i] = dn_i / du_k
    # dF/du_k = -2 (dn_k n^T + n dn_k^T)
    outer = dn[..., :, :, None] * n[..., None, None, :]
    return -2.0 * (outer + np.swapaxes(outer, -1, -2))


# Shear factor layout: (row, col) of each parameter inside its factor.
#   H_yz carries Sh^x_y at (1,0) and Sh^x_z at (2,0)
#   H_xz carries Sh^y_x at (0,1) and Sh^y_z at (2,1)
#   H_xy carries Sh^z_x at (0,2) and Sh^z_y at (1,2)
# Parameter order is (Sh^y_x, Sh^z_x, Sh^x_y, Sh^z_y, Sh^x_z, Sh^y_z).
_SHEAR_SLOTS = {
    # param index -> (factor index, row, col); factors are (H_yz, H_xz, H_xy)
    0: (1, 0, 1),
    1: (2, 0, 2),
    2: (0, 1, 0),
    3: (2, 1, 2),
    4: (0, 2, 0),
    5: (1, 2, 1),
}


def _shear_factors(values):
    factors = np.broadcast_to(np.eye(3), (3,) + values.shape[:-1] + (3, 3)).copy()
    for p, (f, i, j) in _SHEAR_SLOTS.items():
        factors[f][..., i, j] = values[..., p]
    return factors


def _shear(values):
    h_yz, h_xz, h_xy = _shear_factors(values)
    return h_yz @ h_xz @ h_xy


def _shear_grad(values):
    factors = _shear_factors(values)
    out = np.empty(values.shape[:-1] + (6, 3, 3))
    for p, (f, i, j) in _SHEAR_SLOTS.items():
        parts = list(factors)
        unit = np.zeros(values.shape[:-1] + (3, 3))
        unit[..., i, j] = 1.0
        parts[f] = unit
        out[..., p, :, :] = parts[0] @ parts[1] @ parts[2]
    return out


def linear_part(kind: OperatorKind, values) -> np.ndarray:
    """Linear 3x3 part for parameter array ``values`` of shape ``(..., pc)``."""
    values = np.asarray(values, dtype=np.float64)
    kind = OperatorKind(kind)
    batch = values.shape[:-1]
    if kind in (OperatorKind.TRANSLATION, OperatorKind.IDENTITY):
        return np.broadcast_to(np.eye(3), batch + (3, 3)).copy()
    if kind is OperatorKind.SCALING:
        out = np.zeros(batch + (3, 3))
        idx = np.arange(3)
        out[..., idx, idx] = values
        return out
    if kind is OperatorKind.ROTATION:
        return _rotation(values)
    if kind is OperatorKind.REFLECTION:
        return _reflection(values)
    return _shear(values)


def linear_grad(kind: OperatorKind, values) -> np.ndarray:
    """Derivative of :func:`linear_part`, shape ``(..., pc, 3, 3)``."""
    values = np.asarray(values, dtype=np.float64)
    kind = OperatorKind(kind)
    batch = values.shape[:-1]
    if kind is OperatorKind.TRANSLATION:
        return np.zeros(batch + (3, 3, 3))
    if kind is OperatorKind.IDENTITY:
        return np.zeros(batch + (0, 3, 3))
    if kind is OperatorKind.SCALING:
        out = np.zeros(batch + (3, 3, 3))
        idx = np.arange(3)
        out[..., idx, idx, idx] = 1.0
        return out
    if kind is OperatorKind.ROTATION:
        return _rotation_grad(values)
    if kind is OperatorKind.REFLECTION:
        return _reflection_grad(values)
    return _shear_grad(values)


# ---------------------------------------------------------------------------
# single-operator API


def build_operator(params: OpParams) -> AffineOp:
    kind = params.kind
    if kind is OperatorKind.TRANSLATION:
        return AffineOp(np.eye(3), params.values.copy(), kind)
    return AffineOp(linear_part(kind, params.values), np.zeros(3), kind)


def compose(chain: Sequence[AffineOp]) -> AffineOp:
    """Collapse ``chain`` into one operator.

    The chain is in matrix-product order: ``compose([A, B])`` applies ``B``
    first, then ``A``.
    """
    if len(chain) == 0:
        raise ValueError("cannot compose an empty chain")
    linear = np.asarray(chain[-1].linear, dtype=np.float64)
    translation = np.asarray(chain[-1].translation, dtype=np.float64)
    for op in reversed(chain[:-1]):
        # (A2, b2) o (A1, b1) = (A2 A1, A2 b1 + b2)
        translation = op.linear @ translation + op.translation
        linear = op.linear @ linear
    kind = chain[0].kind if len(chain) == 1 else None
    return AffineOp(linear, translation, kind)


def apply(op: AffineOp, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ np.asarray(op.linear).T + op.translation


def apply_with_jacobians(params_chain: Sequence[OpParams], x):
    """Apply a parameterized chain to ``x`` and differentiate it.

    Returns ``(y, param_jacobians, dy_dx)`` where ``param_jacobians[j]`` has
    shape ``(3, pc_j)`` and holds ``dy/dtheta_j`` for the j-th operator of
    the chain (chain order, not application order).
    """
    if len(params_chain) == 0:
        raise ValueError("cannot apply an empty chain")
    x = np.asarray(x, dtype=np.float64)
    ops = [build_operator(p) for p in params_chain]

    # inputs[j] is the vector fed into ops[j]; application runs right to left
    inputs = [None] * len(ops)
    z = x
    for j in range(len(ops) - 1, -1, -1):
        inputs[j] = z
        z = apply(ops[j], z)
    y = z

    jacobians = [None] * len(ops)
    # outer[j] = d y / d (output of ops[j]); the last-applied op has identity
    outer = np.eye(3)
    for j in range(len(ops)):
        p = params_chain[j]
        if p.kind is OperatorKind.TRANSLATION:
            jacobians[j] = outer.copy()
        else:
            dlin = linear_grad(p.kind, p.values)  # (pc, 3, 3)
            local = np.einsum("kab,b->ak", dlin, inputs[j])
            jacobians[j] = outer @ local
        outer = outer @ ops[j].linear
    return y, jacobians, outer
