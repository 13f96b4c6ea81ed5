"""Variant specs and their text form.

A variant is a pair of operator chains, one for the head entity and one for
the tail entity. Chains are in matrix-product order, so ``head=(R, S, T)``
means ``R @ S @ T @ h``: translation is applied first.

Text grammar::

    chain   := op ("." op)*
    op      := "T" | "S" | "R" | "F" | "H"
    variant := chain? "h" "-" chain? "t"

e.g. ``"R.S.T h - t"`` or ``"S h - T.R.S t"``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .geometry import CHAIN_KINDS, OperatorKind


class VariantSyntaxError(ValueError):
    def __init__(self, message: str, text: str, position: int):
        super().__init__(f"{message} at position {position}: {text!r}")
        self.text = text
        self.position = position


@dataclass(frozen=True, order=True)
class VariantSpec:
    head: tuple[OperatorKind, ...] = ()
    tail: tuple[OperatorKind, ...] = ()

    def __post_init__(self):
        head = tuple(OperatorKind(k) for k in self.head)
        tail = tuple(OperatorKind(k) for k in self.tail)
        for k in head + tail:
            if k not in CHAIN_KINDS:
                raise ValueError(f"{k.name} cannot appear in a relation chain")
        if not head and not tail:
            raise ValueError("variant needs at least one operator (h - t has no relation parameters)")
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "tail", tail)

    @property
    def op_count(self) -> int:
        return len(self.head) + len(self.tail)

    @property
    def params_per_block(self) -> int:
        return sum(k.param_count for k in self.head + self.tail)

    def render(self) -> str:
        return render_variant(self)

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "VariantSpec":
        return parse_variant(text)


def render_variant(spec: VariantSpec) -> str:
    head = ".".join(k.value for k in spec.head)
    tail = ".".join(k.value for k in spec.tail)
    return f"{head + ' ' if head else ''}h - {tail + ' ' if tail else ''}t"


_TOKEN = re.compile(r"\s*(?:(?P<op>[TSRFH])|(?P<dot>\.)|(?P<h>h)|(?P<t>t)|(?P<minus>-))")


def _tokens(text: str):
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            return
        m = _TOKEN.match(text, pos)
        if m is None:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise VariantSyntaxError(f"unexpected character {text[start]!r}", text, start)
        kind = m.lastgroup
        yield kind, m.group(kind), m.start(kind)
        pos = m.end()


def parse_variant(text: str) -> VariantSpec:
    """Parse the variant DSL. Raises :class:`VariantSyntaxError` on bad input."""
    toks = list(_tokens(text))
    toks.append(("end", "", len(text)))
    i = 0

    def chain(stop: str):
        nonlocal i
        ops: list[OperatorKind] = []
        if toks[i][0] == stop:
            return ops
        while True:
            kind, value, pos = toks[i]
            if kind != "op":
                raise VariantSyntaxError("expected operator", text, pos)
            ops.append(OperatorKind(value))
            i += 1
            kind, value, pos = toks[i]
            if kind == "dot":
                i += 1
                continue
            if kind == stop:
                return ops
            raise VariantSyntaxError(f"expected '.' or '{stop}'", text, pos)

    head = chain("h")
    i += 1
    kind, _, pos = toks[i]
    if kind != "minus":
        raise VariantSyntaxError("expected '-'", text, pos)
    i += 1
    tail = chain("t")
    i += 1
    kind, _, pos = toks[i]
    if kind != "end":
        raise VariantSyntaxError("trailing input", text, pos)
    if not head and not tail:
        raise VariantSyntaxError("both chains empty", text, 0)
    return VariantSpec(tuple(head), tuple(tail))
