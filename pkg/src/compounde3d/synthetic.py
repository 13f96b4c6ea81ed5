"""Small generated knowledge graphs with known relational structure.

Used by the test-suite and the acceptance runs; each generator returns
named triples per split so the result can be written out as TSV files or
encoded straight into a :class:`~compounde3d.data.TripleStore`.
"""

from __future__ import annotations

import numpy as np

from .data import SPLITS, TripleStore, Vocab

Splits = dict[str, list[tuple[str, str, str]]]


def encode_splits(splits: Splits) -> tuple[Vocab, TripleStore]:
    """First-appearance id assignment over train, valid, test (same as loading TSVs)."""
    vocab = Vocab()
    encoded = {}
    for split in SPLITS:
        rows = [(vocab.add_entity(h), vocab.add_relation(r), vocab.add_entity(t)) for h, r, t in splits.get(split, [])]
        encoded[split] = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return vocab, TripleStore(encoded["train"], encoded["valid"], encoded["test"])


def scale_translate_grid(
    rows: int = 10,
    cols: int = 8,
    factor: int = 2,
    offsets: tuple[int, ...] = (1, 3),
    seed: int = 0,
) -> Splits:
    """Two ``rows x cols`` grids linked by scale-then-translate maps.

    Within each grid ``succ_i`` links ``(i, j) -> (i+1, j)`` and ``succ_j``
    links ``(i, j) -> (i, j+1)``; both relations are shared by the grids,
    so one translation per relation lays both out with the same spacing.
    Relation ``map<k>`` links ``a(i, j) -> b(factor*i + offsets[k], 0)``:
    scale the i-axis by ``factor``, collapse the j-axis (scale 0), then
    translate. The collapse makes each map many-to-one, which only a
    head-side scaling expresses exactly; distinct offsets rule out absorbing
    the translation into the choice of origin. Validation and test each hold
    out a third of the map triples.
    """
    def name(grid, i, j):
        return f"{grid}_{i}_{j}"

    base, mapped = [], []
    for grid in ("a", "b"):
        for i in range(rows):
            for j in range(cols):
                if i + 1 < rows:
                    base.append((name(grid, i, j), "succ_i", name(grid, i + 1, j)))
                if j + 1 < cols:
                    base.append((name(grid, i, j), "succ_j", name(grid, i, j + 1)))
    for k, offset in enumerate(offsets):
        for i in range(rows):
            target = factor * i + offset
            if target >= rows:
                continue
            for j in range(cols):
                mapped.append((name("a", i, j), f"map{k}", name("b", target, 0)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(mapped))
    held = len(mapped) // 3
    valid = [mapped[k] for k in order[:held]]
    test = [mapped[k] for k in order[held:2 * held]]
    train = base + [mapped[k] for k in order[2 * held:]]
    train = [train[k] for k in rng.permutation(len(train))]
    return {"train": train, "valid": valid, "test": test}


def symmetric_pairs(num_pairs: int = 40, held_fraction: float = 0.25, seed: int = 0) -> Splits:
    """A single symmetric relation over disjoint entity pairs.

    Most pairs appear in both directions in train; for a ``held_fraction``
    of them only one direction is in train and the inverse triple goes to
    valid or test.
    """
    rng = np.random.default_rng(seed)
    held_pairs = int(num_pairs * held_fraction)
    train, held = [], []
    for p in rng.permutation(num_pairs):
        x, y = f"e{2 * p}", f"e{2 * p + 1}"
        if len(held) < held_pairs:
            train.append((y, "sym", x))
            held.append((x, "sym", y))
        else:
            train += [(x, "sym", y), (y, "sym", x)]
    half = len(held) // 2
    return {"train": train, "valid": held[:half], "test": held[half:]}


def toy_symmetric() -> Splits:
    """Four entities, one symmetric relation; the inverse of (c, r, d) is held out."""
    train = [("a", "r", "b"), ("b", "r", "a"), ("c", "r", "d")]
    return {"train": train, "valid": [("d", "r", "c")], "test": [("d", "r", "c")]}
