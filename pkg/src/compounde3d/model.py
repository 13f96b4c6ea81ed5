"""Entity table, per-relation operator parameters and the distance score.

An embedding of dimension ``d = 3n`` is split into ``n`` blocks of three.
Every relation owns a separate set of operator parameters for every block,
i.e. the relation operator is block diagonal with ``n`` distinct compound
3D operators. The score of ``(h, r, t)`` is

    || M_r h - M'_r t ||_p

where ``M_r`` is built from the head chain and ``M'_r`` from the tail chain
(an empty chain leaves that entity unchanged). Lower is better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OperatorKind, linear_grad, linear_part
from .variant import VariantSpec

SIDES = ("head", "tail")
INIT_EPSILON = 2.0
# queries * entities * dim budget for one chunk of all-candidate scoring
_CHUNK_ELEMENTS = 1 << 22


def param_count(variant: VariantSpec, dim: int, num_relations: int, num_entities: int = 0) -> int:
    """Total free parameters: ``|E| d + |R| (d/3) sum(pc)``."""
    if dim % 3:
        raise ValueError(f"dim must be a multiple of 3, got {dim}")
    return num_entities * dim + num_relations * (dim // 3) * variant.params_per_block


def _init_op_params(kind: OperatorKind, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    pc = kind.param_count
    if kind is OperatorKind.TRANSLATION or kind is OperatorKind.SHEAR:
        return np.zeros(shape + (pc,))
    if kind is OperatorKind.SCALING:
        return np.ones(shape + (pc,))
    if kind is OperatorKind.ROTATION:
        return rng.uniform(-math.pi, math.pi, size=shape + (pc,))
    # reflection: uniform direction on the sphere
    while True:
        raw = rng.standard_normal(size=shape + (pc,))
        norms = np.linalg.norm(raw, axis=-1, keepdims=True)
        if np.all(norms > 1e-6):
            return raw / norms


@dataclass
class Model:
    entity: np.ndarray
    variant: VariantSpec
    head_params: list[np.ndarray] = field(default_factory=list)
    tail_params: list[np.ndarray] = field(default_factory=list)
    norm_order: int = 2

    def __post_init__(self):
        if self.entity.ndim != 2 or self.entity.shape[1] % 3:
            raise ValueError("entity table must be |E| x 3n")
        if self.norm_order not in (1, 2):
            raise ValueError("norm_order must be 1 or 2")
        if len(self.head_params) != len(self.variant.head) or len(self.tail_params) != len(self.variant.tail):
            raise ValueError("parameter arrays do not match the variant chains")

    # -- shape info ---------------------------------------------------------

    @property
    def num_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    @property
    def num_blocks(self) -> int:
        return self.dim // 3

    @property
    def num_relations(self) -> int:
        params = self.head_params + self.tail_params
        return params[0].shape[0]

    def chain(self, side: str) -> tuple[OperatorKind, ...]:
        return self.variant.head if side == "head" else self.variant.tail

    def params(self, side: str) -> list[np.ndarray]:
        return self.head_params if side == "head" else self.tail_params

    def parameters(self) -> dict[str, np.ndarray]:
        out = {"entity": self.entity}
        for side in SIDES:
            for j, arr in enumerate(self.params(side)):
                out[f"{side}.{j}"] = arr
        return out

    def relation_param_count(self) -> int:
        return self.num_blocks * self.variant.params_per_block

    def total_param_count(self) -> int:
        return param_count(self.variant, self.dim, self.num_relations, self.num_entities)

    def copy(self) -> "Model":
        return Model(
            self.entity.copy(),
            self.variant,
            [p.copy() for p in self.head_params],
            [p.copy() for p in self.tail_params],
            self.norm_order,
        )

    # -- forward / backward through one side --------------------------------

    def transform(self, side: str, rel, x, keep_cache: bool = False):
        """Apply the relation operator of ``side`` to block vectors ``x``.

        ``x`` has shape ``S + (n, 3)``; ``rel`` is an integer array whose shape
        broadcasts against ``S``. Returns ``y`` (and a cache for
        :meth:`transform_backward` when ``keep_cache``).
        """
        rel = np.asarray(rel)
        chain = self.chain(side)
        params = self.params(side)
        cache = []
        z = x
        for j in range(len(chain) - 1, -1, -1):
            kind = chain[j]
            values = params[j][rel]  # S_r + (n, pc)
            if kind is OperatorKind.TRANSLATION:
                out = z + values
                lin = None
            elif kind is OperatorKind.SCALING:
                out = z * values
                lin = None
            else:
                lin = linear_part(kind, values)
                out = (lin @ z[..., None])[..., 0]
            if keep_cache:
                cache.append((j, kind, values, lin, z))
            z = out
        return (z, cache) if keep_cache else z

    def transform_backward(self, side: str, rel, cache, grad_out):
        """Backprop ``grad_out`` (same shape as the output of :meth:`transform`).

        Returns ``(grad_x, grads)`` where ``grads[j]`` has shape
        ``rel.shape + (n, pc_j)`` for operator ``j`` of the chain.
        """
        rel = np.asarray(rel)
        grads: list[np.ndarray | None] = [None] * len(self.chain(side))
        g = grad_out
        for j, kind, values, lin, z in reversed(cache):
            if kind is OperatorKind.TRANSLATION:
                grads[j] = _reduce_to(g, values.shape)
            elif kind is OperatorKind.SCALING:
                grads[j] = _reduce_to(g * z, values.shape)
                g = g * values
            else:
                g_lin = _reduce_to(g[..., :, None] * z[..., None, :], lin.shape)
                dlin = linear_grad(kind, values)
                grads[j] = np.einsum("...kab,...ab->...k", dlin, g_lin)
                g = (np.swapaxes(lin, -1, -2) @ g[..., None])[..., 0]
        return g, grads

    # -- scoring --------------------------------------------------------------

    def blocks(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        return self.entity[ids].reshape(ids.shape + (self.num_blocks, 3))

    def _norm(self, diff: np.ndarray) -> np.ndarray:
        if self.norm_order == 1:
            return np.abs(diff).sum(axis=-1)
        return np.sqrt((diff * diff).sum(axis=-1))

    def score_batch(self, triples) -> np.ndarray:
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self._check_ids(triples)
        h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
        fh = self.transform("head", r, self.blocks(h))
        ft = self.transform("tail", r, self.blocks(t))
        return self._norm((fh - ft).reshape(len(triples), -1))

    def score(self, h: int, r: int, t: int) -> float:
        return float(self.score_batch([[h, r, t]])[0])

    def transformed_table(self, side: str, r: int) -> np.ndarray:
        """All entities pushed through the ``side`` operator of relation ``r``, flat ``(|E|, d)``."""
        if not self.chain(side):
            return self.entity
        all_blocks = self.entity.reshape(self.num_entities, self.num_blocks, 3)
        return self.transform(side, np.array([r]), all_blocks).reshape(self.num_entities, -1)

    def _distances(self, anchors: np.ndarray, table: np.ndarray) -> np.ndarray:
        # anchors (Q, d) vs table (E, d) -> (Q, E); direct differences keep
        # results bit-identical to score_batch.
        q, e = anchors.shape[0], table.shape[0]
        out = np.empty((q, e))
        step = max(1, _CHUNK_ELEMENTS // max(1, e * table.shape[1]))
        for start in range(0, q, step):
            diff = anchors[start:start + step, None, :] - table[None, :, :]
            out[start:start + step] = self._norm(diff)
        return out

    def score_all_tails_batch(self, heads, r: int, table: np.ndarray | None = None) -> np.ndarray:
        heads = np.asarray(heads, dtype=np.int64).reshape(-1)
        self._check_entity(heads)
        self._check_relation(r)
        fh = self.transform("head", np.array([r]), self.blocks(heads)).reshape(len(heads), -1)
        if table is None:
            table = self.transformed_table("tail", r)
        # reversed difference order matches (M h - M' t)
        return self._distances(fh, table)

    def score_all_heads_batch(self, tails, r: int, table: np.ndarray | None = None) -> np.ndarray:
        tails = np.asarray(tails, dtype=np.int64).reshape(-1)
        self._check_entity(tails)
        self._check_relation(r)
        ft = self.transform("tail", np.array([r]), self.blocks(tails)).reshape(len(tails), -1)
        if table is None:
            table = self.transformed_table("head", r)
        # |a - b| is symmetric, but keep (head - tail) ordering for exactness
        q, e = ft.shape[0], table.shape[0]
        out = np.empty((q, e))
        step = max(1, _CHUNK_ELEMENTS // max(1, e * table.shape[1]))
        for start in range(0, q, step):
            diff = table[None, :, :] - ft[start:start + step, None, :]
            out[start:start + step] = self._norm(diff)
        return out

    def score_all_tails(self, h: int, r: int) -> np.ndarray:
        return self.score_all_tails_batch([h], r)[0]

    def score_all_heads(self, r: int, t: int) -> np.ndarray:
        return self.score_all_heads_batch([t], r)[0]

    # -- validation ---------------------------------------------------------

    def _check_entity(self, ids):
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_entities):
            raise IndexError(f"entity id out of range [0, {self.num_entities})")

    def _check_relation(self, r):
        r = np.asarray(r)
        if r.size and (r.min() < 0 or r.max() >= self.num_relations):
            raise IndexError(f"relation id out of range [0, {self.num_relations})")

    def _check_ids(self, triples):
        self._check_entity(triples[:, [0, 2]])
        self._check_relation(triples[:, 1])


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that were broadcast from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def init_model(
    num_entities: int,
    num_relations: int,
    dim: int,
    variant: VariantSpec,
    seed: int = 0,
    margin: float = 6.0,
    norm_order: int = 2,
) -> Model:
    """Fresh model; entities uniform in ``+-(margin + 2) / dim``.

    Translations start at 0, scalings at 1, shears at 0; rotation angles are
    uniform in [-pi, pi] and reflection normals uniform on the sphere.
    """
    if dim <= 0 or dim % 3:
        raise ValueError(f"dim must be a positive multiple of 3, got {dim}")
    if not isinstance(variant, VariantSpec):
        raise TypeError("variant must be a VariantSpec")
    rng = np.random.default_rng(seed)
    bound = (margin + INIT_EPSILON) / dim
    entity = rng.uniform(-bound, bound, size=(num_entities, dim))
    shape = (num_relations, dim // 3)
    head = [_init_op_params(k, shape, rng) for k in variant.head]
    tail = [_init_op_params(k, shape, rng) for k in variant.tail]
    return Model(entity, variant, head, tail, norm_order)
