"""Triple datasets: TSV ingestion, vocabularies, filter index, relation types."""

from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
_SPLIT_SUFFIXES = (".txt", ".tsv", "")
RELATION_TYPES = ("1-to-1", "1-to-N", "N-to-1", "N-to-N")


class DataError(ValueError):
    """Malformed or missing dataset input."""


@dataclass
class Vocab:
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.entity2id = {e: i for i, e in enumerate(self.entities)}
        self.relation2id = {r: i for i, r in enumerate(self.relations)}
        if len(self.entity2id) != len(self.entities) or len(self.relation2id) != len(self.relations):
            raise DataError("vocabulary names must be unique")

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def add_entity(self, name: str) -> int:
        idx = self.entity2id.get(name)
        if idx is None:
            idx = self.entity2id[name] = len(self.entities)
            self.entities.append(name)
        return idx

    def add_relation(self, name: str) -> int:
        idx = self.relation2id.get(name)
        if idx is None:
            idx = self.relation2id[name] = len(self.relations)
            self.relations.append(name)
        return idx

    def encode(self, h: str, r: str, t: str) -> tuple[int, int, int]:
        return self.entity2id[h], self.relation2id[r], self.entity2id[t]

    def decode(self, triple) -> tuple[str, str, str]:
        h, r, t = (int(x) for x in triple)
        return self.entities[h], self.relations[r], self.entities[t]

    def hash(self) -> str:
        digest = hashlib.sha256()
        for name in self.entities:
            digest.update(name.encode("utf-8") + b"\x00")
        digest.update(b"\x01")
        for name in self.relations:
            digest.update(name.encode("utf-8") + b"\x00")
        return digest.hexdigest()[:16]


@dataclass
class TripleStore:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in SPLITS:
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 3)
            setattr(self, name, arr)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def counts(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def duplicate_counts(self) -> dict[str, int]:
        """Triples shared between splits (reported, never enforced)."""
        sets = {name: set(map(tuple, self.split(name).tolist())) for name in SPLITS}
        return {
            "train&valid": len(sets["train"] & sets["valid"]),
            "train&test": len(sets["train"] & sets["test"]),
            "valid&test": len(sets["valid"] & sets["test"]),
        }


class FilterIndex:
    """Known true tails per (h, r) and heads per (r, t) over every split."""

    def __init__(self, triples=()):
        self._tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        self._heads: dict[tuple[int, int], set[int]] = defaultdict(set)
        for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
            self._tails[(h, r)].add(t)
            self._heads[(r, t)].add(h)

    def tails(self, h: int, r: int) -> set[int]:
        return self._tails.get((int(h), int(r)), set())

    def heads(self, r: int, t: int) -> set[int]:
        return self._heads.get((int(r), int(t)), set())

    def __contains__(self, triple) -> bool:
        h, r, t = (int(x) for x in triple)
        return t in self.tails(h, r)

    def tail_items(self):
        return self._tails.items()

    def head_items(self):
        return self._heads.items()


def build_filter_index(store: TripleStore) -> FilterIndex:
    return FilterIndex(store.all_triples())


def _find_split_file(root: Path, split: str) -> Path:
    for suffix in _SPLIT_SUFFIXES:
        candidate = root / f"{split}{suffix}"
        if candidate.is_file():
            return candidate
    raise DataError(f"missing {split} file in {root}")


def _read_mapping(path: Path) -> list[str]:
    """Read an ``id<TAB>name`` mapping file into a dense name list."""
    names: dict[int, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'id<TAB>name'")
            names[int(parts[0])] = parts[1]
    if sorted(names) != list(range(len(names))):
        raise DataError(f"{path}: ids are not dense in [0, {len(names)})")
    return [names[i] for i in range(len(names))]


def _read_triples(path: Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def load_dataset(path) -> tuple[Vocab, TripleStore]:
    """Load ``train``/``valid``/``test`` TSV files from a directory.

    Ids are assigned in first-appearance order over train, then valid, then
    test, unless ``entities.dict`` and ``relations.dict`` mapping files are
    present, in which case those ids are used.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    raw = {split: _read_triples(_find_split_file(root, split)) for split in SPLITS}
    if not raw["train"]:
        raise DataError(f"{root}: empty train split")

    ent_map, rel_map = root / "entities.dict", root / "relations.dict"
    if ent_map.is_file() and rel_map.is_file():
        vocab = Vocab(_read_mapping(ent_map), _read_mapping(rel_map))
        frozen = True
    else:
        vocab = Vocab()
        frozen = False

    encoded = {}
    for split in SPLITS:
        ids = []
        for h, r, t in raw[split]:
            if frozen:
                try:
                    ids.append(vocab.encode(h, r, t))
                except KeyError as exc:
                    raise DataError(f"{split}: name {exc.args[0]!r} missing from mapping files") from None
            else:
                ids.append((vocab.add_entity(h), vocab.add_relation(r), vocab.add_entity(t)))
        encoded[split] = np.array(ids, dtype=np.int64).reshape(-1, 3)
    store = TripleStore(encoded["train"], encoded["valid"], encoded["test"])
    logger.info("loaded %s: %s", root, summary_line(vocab, store))
    return vocab, store


def summary(vocab: Vocab, store: TripleStore) -> dict[str, int | str]:
    out: dict[str, int | str] = {
        "entities": vocab.num_entities,
        "relations": vocab.num_relations,
    }
    out.update(store.counts())
    for key, value in store.duplicate_counts().items():
        out[f"dup_{key}"] = value
    out["vocab_hash"] = vocab.hash()
    return out


def summary_line(vocab: Vocab, store: TripleStore) -> str:
    return " ".join(f"{k}={v}" for k, v in summary(vocab, store).items())


def format_summary(vocab: Vocab, store: TripleStore) -> str:
    return "".join(f"{k}={v}\n" for k, v in summary(vocab, store).items())


def classify_relations(store: TripleStore, num_relations: int | None = None, threshold: float = 1.5) -> dict[int, str]:
    """Label relations 1-to-1 / 1-to-N / N-to-1 / N-to-N from the train split.

    ``tph`` is the mean number of tails per distinct head and ``hpt`` the
    mean number of heads per distinct tail; a side counts as "N" once its
    mean reaches ``threshold``. Relations absent from train are "unknown".
    """
    train = store.train
    if num_relations is None:
        num_relations = int(store.all_triples()[:, 1].max()) + 1 if len(store.all_triples()) else 0
    tails_of: dict[tuple[int, int], set[int]] = defaultdict(set)
    heads_of: dict[tuple[int, int], set[int]] = defaultdict(set)
    for h, r, t in train.tolist():
        tails_of[(r, h)].add(t)
        heads_of[(r, t)].add(h)
    per_rel_tph: dict[int, list[int]] = defaultdict(list)
    per_rel_hpt: dict[int, list[int]] = defaultdict(list)
    for (r, _), tails in tails_of.items():
        per_rel_tph[r].append(len(tails))
    for (r, _), heads in heads_of.items():
        per_rel_hpt[r].append(len(heads))

    labels = {}
    for r in range(num_relations):
        if r not in per_rel_tph:
            labels[r] = "unknown"
            continue
        tph = float(np.mean(per_rel_tph[r]))
        hpt = float(np.mean(per_rel_hpt[r]))
        many_tails, many_heads = tph >= threshold, hpt >= threshold
        if many_tails and many_heads:
            labels[r] = "N-to-N"
        elif many_tails:
            labels[r] = "1-to-N"
        elif many_heads:
            labels[r] = "N-to-1"
        else:
            labels[r] = "1-to-1"
    return labels


def write_dataset(path, splits: dict[str, list[tuple[str, str, str]]]) -> Path:
    """Write named triples as TSV split files (used by fixtures and generators)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        with open(root / f"{split}.txt", "w", encoding="utf-8") as f:
            for h, r, t in splits.get(split, []):
                f.write(f"{h}\t{r}\t{t}\n")
    return root
