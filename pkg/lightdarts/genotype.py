"""
Discrete architectures and their canonical text form.

Text form, one line per field::

    normal: (sep_conv_3x3,0) (skip_connect,1) (max_feature_map,0) ...
    reduce: (max_pool_3x3,0) (dil_conv_5x5,1) ...
    concat: 2-5

Node numbering follows DARTS: 0 and 1 are the cell inputs, intermediate node
j is numbered j + 2. Pairs are node-major, two per intermediate node.
"""

import re
from pathlib import Path
from typing import List, Tuple, Union

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .exceptions import GenotypeParseError
from .operations import OP_NAMES, OpKind

Pair = Tuple[str, int]

_PREFIX = re.compile(r"\s*(normal|reduce|concat)\s*:")
_PAIR = re.compile(r"\(\s*([A-Za-z0-9_]+)\s*,\s*(\d+)\s*\)")
_RANGE = re.compile(r"(\d+)\s*-\s*(\d+)\s*$")
_FIELDS = ("normal", "reduce", "concat")


class Genotype(BaseModel):
    """Chosen (operation, source node) pairs per cell type."""

    model_config = ConfigDict(frozen=True)

    normal: List[Pair]
    reduce: List[Pair]
    concat: List[int]

    @field_validator("normal", "reduce")
    @classmethod
    def validate_pairs(cls, pairs: List[Pair]) -> List[Pair]:
        if not pairs or len(pairs) % 2:
            raise ValueError(f"need two pairs per node, got {len(pairs)} pairs")
        for node in range(len(pairs) // 2):
            first, second = pairs[2 * node], pairs[2 * node + 1]
            for op, source in (first, second):
                if op not in OP_NAMES:
                    raise ValueError(f"unknown operation {op!r}")
                if op == OpKind.ZERO.value:
                    raise ValueError(f"node {node + 2} uses the zero operation")
                if not 0 <= source < node + 2:
                    raise ValueError(
                        f"node {node + 2} reads node {source}; valid sources are 0..{node + 1}"
                    )
            if first[1] == second[1]:
                raise ValueError(f"node {node + 2} reads node {first[1]} twice")
        return pairs

    @model_validator(mode="after")
    def validate_shape(self) -> "Genotype":
        if len(self.normal) != len(self.reduce):
            raise ValueError(
                f"normal has {len(self.normal)} pairs but reduce has {len(self.reduce)}"
            )
        expected = list(range(2, 2 + self.nodes))
        if self.concat != expected:
            raise ValueError(f"concat must be {expected[0]}-{expected[-1]}, got {self.concat}")
        return self

    @property
    def nodes(self) -> int:
        return len(self.normal) // 2

    def cell(self, reduction: bool) -> List[Pair]:
        return self.reduce if reduction else self.normal


def format_genotype(genotype: Genotype) -> str:
    def pairs(items: List[Pair]) -> str:
        return " ".join(f"({op},{source})" for op, source in items)

    return (
        f"normal: {pairs(genotype.normal)}\n"
        f"reduce: {pairs(genotype.reduce)}\n"
        f"concat: {genotype.concat[0]}-{genotype.concat[-1]}\n"
    )


def _parse_pairs(body: str, offset: int, line_no: int) -> List[Pair]:
    pairs: List[Pair] = []
    position = 0
    while position < len(body):
        if body[position].isspace():
            position += 1
            continue
        match = _PAIR.match(body, position)
        if match is None:
            raise GenotypeParseError("expected '(op,source)'", line_no, offset + position + 1)
        op = match.group(1)
        if op not in OP_NAMES:
            raise GenotypeParseError(
                f"unknown operation {op!r}", line_no, offset + match.start(1) + 1
            )
        pairs.append((op, int(match.group(2))))
        position = match.end()
    return pairs


def parse_genotype(text: str) -> Genotype:
    """
    Parse the canonical text form.

    Raises:
        GenotypeParseError: With the line and column of the first problem
    """
    lines = [line for line in text.splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    fields = {}
    for index, name in enumerate(_FIELDS):
        line_no = index + 1
        if index >= len(lines):
            raise GenotypeParseError(f"missing '{name}:' line", line_no, 1)
        line = lines[index]
        prefix = _PREFIX.match(line)
        if prefix is None or prefix.group(1) != name:
            raise GenotypeParseError(f"expected '{name}:'", line_no, 1)
        body = line[prefix.end() :]
        if name == "concat":
            span = _RANGE.match(body.strip())
            if span is None:
                raise GenotypeParseError("expected 'first-last'", line_no, prefix.end() + 1)
            fields[name] = list(range(int(span.group(1)), int(span.group(2)) + 1))
        else:
            fields[name] = _parse_pairs(body, prefix.end(), line_no)
    if len(lines) > len(_FIELDS):
        raise GenotypeParseError("unexpected trailing content", len(_FIELDS) + 1, 1)

    try:
        return Genotype(**fields)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = error["loc"][0] if error["loc"] else "concat"
        line_no = _FIELDS.index(field) + 1 if field in _FIELDS else 1
        raise GenotypeParseError(error["msg"], line_no, 1) from None


def save_genotype(genotype: Genotype, path: Union[str, Path]) -> None:
    Path(path).write_text(format_genotype(genotype), encoding="utf-8")


def load_genotype(path: Union[str, Path]) -> Genotype:
    return parse_genotype(Path(path).read_text(encoding="utf-8"))
