"""Record-schema DSL and padding-free packed layouts.

Grammar::

    schema <name> { field <id> : (f32|f64|i64) [x3] [@truncate(<int>)]; ... }
    field <id> : <kind> ...;                 # bare fields form an unnamed schema
    kernel <id> [reads <ids>] [writes <ids>];

Identifier lists may be separated by commas or whitespace.  ``#`` starts a
comment that runs to the end of the line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field, replace
from importlib import resources
from typing import Iterable

from soaforge.fpcodec import MAX_TOTAL_BITS, MIN_TOTAL_BITS, PrecisionSpec, layout_for

__all__ = [
    "SchemaError",
    "FieldDecl",
    "FieldSlot",
    "RecordSchema",
    "KernelAccessSet",
    "parse_schema",
    "parse_access_sets",
    "parse_document",
    "compute_layout",
    "format_schema",
    "load_schema",
    "builtin_schema",
    "builtin_access_sets",
    "KIND_BITS",
]

KIND_BITS = {"f32": 32, "f64": 64, "i64": 64}


class SchemaError(ValueError):
    """A diagnostic from the schema or access-set parser."""

    def __init__(self, message: str, line: int = 0, col: int = 0, code: str = "syntax"):
        self.message = message
        self.line = line
        self.col = col
        self.code = code
        where = f"line {line}, col {col}: " if line else ""
        super().__init__(f"{where}{message} [{code}]")


@dataclass(frozen=True)
class FieldSlot:
    offset_bits: int
    width_bits: int


@dataclass(frozen=True)
class FieldDecl:
    name: str
    base: str
    arity: int = 1
    truncation: int | None = None

    @property
    def is_float(self) -> bool:
        return self.base != "i64"

    @property
    def spec(self) -> PrecisionSpec | None:
        """Storage format of one lane; ``None`` for integers."""
        if not self.is_float:
            return None
        return layout_for(self.truncation or KIND_BITS[self.base])

    @property
    def stored_bits(self) -> int:
        """Bits per lane in compressed storage."""
        spec = self.spec
        return 64 if spec is None else spec.total_bits

    @property
    def native_bits(self) -> int:
        """Bits per lane once expanded to the enclosing IEEE format."""
        spec = self.spec
        return 64 if spec is None else spec.base_bits


@dataclass(frozen=True)
class RecordSchema:
    name: str
    fields: tuple[FieldDecl, ...]
    slots: tuple[FieldSlot, ...] = dc_field(init=False, compare=False, repr=False)
    record_bits: int = dc_field(init=False, compare=False)

    def __post_init__(self):
        slots = compute_layout(self)
        object.__setattr__(self, "slots", tuple(slots))
        object.__setattr__(
            self, "record_bits", sum(f.arity * f.stored_bits for f in self.fields)
        )
        object.__setattr__(self, "_hash", hash((self.name, self.fields)))

    def __hash__(self):
        # schemas key the layout caches; hashing the nested field tuples each time is slow
        return self._hash

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def field(self, name: str) -> FieldDecl:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(f"schema {self.name!r} has no field {name!r}")

    def __contains__(self, name: str) -> bool:
        return any(f.name == name for f in self.fields)

    def ordered(self, names: Iterable[str]) -> tuple[str, ...]:
        """``names`` in declaration order; unknown names raise KeyError."""
        wanted = set(names)
        unknown = wanted - set(self.names)
        if unknown:
            raise KeyError(f"unknown field(s) {sorted(unknown)} in schema {self.name!r}")
        return tuple(n for n in self.names if n in wanted)

    def with_truncation(self, total_bits: int | None, exclude: Iterable[str] = ("x",)) -> "RecordSchema":
        """Copy with every floating field outside ``exclude`` truncated.

        Fields keep their declared kind; ``None`` removes truncation.
        """
        if total_bits is not None:
            layout_for(total_bits)
        skip = set(exclude)
        fields = tuple(
            replace(f, truncation=total_bits) if f.is_float and f.name not in skip else f
            for f in self.fields
        )
        return RecordSchema(self.name, fields)

    def widened(self, exclude: Iterable[str] = ()) -> "RecordSchema":
        """Copy with floating fields outside ``exclude`` declared f64."""
        skip = set(exclude)
        fields = tuple(
            replace(f, base="f64") if f.is_float and f.name not in skip else f
            for f in self.fields
        )
        return RecordSchema(self.name, fields)


@dataclass(frozen=True)
class KernelAccessSet:
    kernel: str
    reads: frozenset[str]
    writes: frozenset[str]

    @property
    def fields(self) -> frozenset[str]:
        return self.reads | self.writes


def compute_layout(schema: RecordSchema) -> list[FieldSlot]:
    """One slot per lane, prefix sums in declaration order."""
    slots = []
    offset = 0
    for f in schema.fields:
        for _ in range(f.arity):
            slots.append(FieldSlot(offset, f.stored_bits))
            offset += f.stored_bits
    return slots


# -- lexer -----------------------------------------------------------------

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>\#[^\n]*)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<int>-?\d+)"
    r"|(?P<punct>[{}:;(),@])|(?P<bad>.)"
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _lex(text: str) -> list[_Tok]:
    toks = []
    line, line_start = 1, 0
    for m in _TOKEN.finditer(text):
        kind = m.lastgroup
        col = m.start() - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind in ("ws", "comment"):
            continue
        elif kind == "bad":
            raise SchemaError(f"unexpected character {m.group()!r}", line, col)
        else:
            toks.append(_Tok(kind, m.group(), line, col))
    toks.append(_Tok("eof", "", line, len(text) - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _lex(text)
        self.pos = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.pos]

    def advance(self) -> _Tok:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def fail(self, message: str, tok: _Tok | None = None, code: str = "syntax"):
        tok = tok or self.tok
        raise SchemaError(message, tok.line, tok.col, code)

    def expect(self, text: str) -> _Tok:
        if self.tok.text != text or self.tok.kind not in ("punct", "ident"):
            self.fail(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def ident(self, what: str) -> _Tok:
        if self.tok.kind != "ident":
            self.fail(f"expected {what}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def document(self):
        schema_name = None
        fields: list[tuple[FieldDecl, _Tok]] = []
        kernels: list[tuple[str, list[_Tok], list[_Tok], _Tok]] = []
        while self.tok.kind != "eof":
            t = self.tok
            if t.text == "schema":
                self.advance()
                name = self.ident("schema name")
                if schema_name is not None:
                    self.fail("only one schema per document", name, "duplicate-schema")
                schema_name = name.text
                self.expect("{")
                while self.tok.text != "}":
                    if self.tok.kind == "eof":
                        self.fail("unterminated schema block")
                    fields.append(self.field_decl())
                self.expect("}")
                if self.tok.text == ";":
                    self.advance()
            elif t.text == "field":
                fields.append(self.field_decl())
            elif t.text == "kernel":
                kernels.append(self.kernel_decl())
            else:
                self.fail(f"expected 'schema', 'field' or 'kernel', found {t.text!r}")
        return schema_name, fields, kernels

    def field_decl(self) -> tuple[FieldDecl, _Tok]:
        self.expect("field")
        name = self.ident("field name")
        self.expect(":")
        kind = self.ident("field kind")
        if kind.text not in KIND_BITS:
            self.fail(
                f"unknown base kind {kind.text!r} (expected f32, f64 or i64)",
                kind,
                "unknown-kind",
            )
        arity = 1
        if self.tok.kind == "ident" and self.tok.text == "x3":
            self.advance()
            arity = 3
        truncation = None
        if self.tok.text == "@":
            at = self.advance()
            attr = self.ident("attribute name")
            if attr.text != "truncate":
                self.fail(f"unknown attribute @{attr.text}", attr, "unknown-attribute")
            self.expect("(")
            num = self.tok
            if num.kind != "int":
                self.fail("expected an integer bit width")
            self.advance()
            self.expect(")")
            truncation = int(num.text)
            if kind.text == "i64":
                self.fail("@truncate is not allowed on i64 fields", at, "truncation-int")
            if not MIN_TOTAL_BITS <= truncation <= MAX_TOTAL_BITS:
                self.fail(
                    f"truncation width {truncation} outside "
                    f"[{MIN_TOTAL_BITS}, {MAX_TOTAL_BITS}]",
                    num,
                    "truncation-range",
                )
        self.expect(";")
        return FieldDecl(name.text, kind.text, arity, truncation), name

    def id_list(self) -> list[_Tok]:
        ids = [self.ident("field name")]
        while True:
            if self.tok.text == ",":
                self.advance()
                ids.append(self.ident("field name"))
            elif self.tok.kind == "ident" and self.tok.text not in ("reads", "writes"):
                ids.append(self.advance())
            else:
                return ids

    def kernel_decl(self):
        self.expect("kernel")
        name = self.ident("kernel name")
        reads: list[_Tok] = []
        writes: list[_Tok] = []
        while self.tok.text in ("reads", "writes"):
            which = self.advance().text
            (reads if which == "reads" else writes).extend(self.id_list())
        self.expect(";")
        if not reads and not writes:
            self.fail(f"kernel {name.text!r} accesses no fields", name, "empty-access")
        return name.text, reads, writes, name


def _build_schema(name, fields) -> RecordSchema:
    seen = set()
    for decl, tok in fields:
        if decl.name in seen:
            raise SchemaError(
                f"duplicate field {decl.name!r}", tok.line, tok.col, "duplicate-field"
            )
        seen.add(decl.name)
    return RecordSchema(name or "record", tuple(d for d, _ in fields))


def _build_access(kernels, schema: RecordSchema | None) -> list[KernelAccessSet]:
    out = []
    seen = set()
    for name, reads, writes, tok in kernels:
        if name in seen:
            raise SchemaError(f"duplicate kernel {name!r}", tok.line, tok.col, "duplicate-kernel")
        seen.add(name)
        if schema is not None:
            for t in reads + writes:
                if t.text not in schema:
                    raise SchemaError(
                        f"kernel {name!r} accesses undeclared field {t.text!r}",
                        t.line,
                        t.col,
                        "unknown-field",
                    )
        out.append(
            KernelAccessSet(name, frozenset(t.text for t in reads), frozenset(t.text for t in writes))
        )
    return out


def parse_document(text: str) -> tuple[RecordSchema | None, list[KernelAccessSet]]:
    """Parse schema and kernel declarations from one text."""
    name, fields, kernels = _Parser(text).document()
    schema = _build_schema(name, fields) if fields or name else None
    return schema, _build_access(kernels, schema)


def parse_schema(text: str) -> RecordSchema:
    schema, _ = parse_document(text)
    if schema is None or not schema.fields:
        raise SchemaError("no fields declared", code="empty-schema")
    return schema


def parse_access_sets(text: str, schema: RecordSchema | None = None) -> list[KernelAccessSet]:
    """Kernel declarations from ``text``.

    Field names are checked against ``schema`` if given, otherwise against
    a schema declared in the same text (if any).
    """
    name, fields, kernels = _Parser(text).document()
    if schema is None and (fields or name):
        schema = _build_schema(name, fields)
    return _build_access(kernels, schema)


def format_schema(schema: RecordSchema) -> str:
    lines = [f"schema {schema.name} {{"]
    for f in schema.fields:
        decl = f"    field {f.name} : {f.base}"
        if f.arity == 3:
            decl += " x3"
        if f.truncation is not None:
            decl += f" @truncate({f.truncation})"
        lines.append(decl + ";")
    lines.append("}")
    return "\n".join(lines) + "\n"


def format_access_sets(sets: Iterable[KernelAccessSet], schema: RecordSchema | None = None) -> str:
    def names(s):
        return ", ".join(schema.ordered(s) if schema else sorted(s))

    lines = []
    for a in sets:
        line = f"kernel {a.kernel}"
        if a.reads:
            line += f" reads {names(a.reads)}"
        if a.writes:
            line += f" writes {names(a.writes)}"
        lines.append(line + ";")
    return "\n".join(lines) + "\n"


def load_schema(path) -> tuple[RecordSchema, list[KernelAccessSet]]:
    """Read a ``.prec`` file; kernels missing from it use the built-in sets."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    schema, sets = parse_document(text)
    if schema is None:
        raise SchemaError(f"{path}: no schema declared", code="empty-schema")
    declared = {a.kernel for a in sets}
    for a in builtin_access_sets():
        if a.kernel not in declared and a.fields <= set(schema.names):
            sets.append(a)
    return schema, sets


def _data(name: str) -> str:
    return resources.files("soaforge").joinpath("data", name).read_text(encoding="utf-8")


def builtin_schema() -> RecordSchema:
    """The particle record of the SPH workload."""
    return parse_schema(_data("particle.prec"))


def builtin_access_sets() -> list[KernelAccessSet]:
    return parse_access_sets(_data("particle.prec"))
