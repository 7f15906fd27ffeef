#!/usr/bin/env python3
"""
LLVM IR Normalizer
Splits decompiled (RetDec-style) LLVM IR text into functions and standardises each
function body into a token stream:

  - local variables, globals and labels become VAR_n, GVAR_n, LBL_n (per function,
    numbered by first occurrence)
  - calls into functions defined in the same module become FUN, external callees
    keep their name
  - numeric literals are split into one token per character
  - an EOL token closes every code line
"""

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

import yaml

from errors import ConfigError, IrParseError

EOL = "EOL"
FUN = "FUN"
TYPE = "TYPE"
STR = "STR"

GOOD = "good"
BAD = "bad"

# Hex literals may carry an x87 / fp128 / ppc_fp128 / half / bfloat prefix (0xK, 0xL, 0xM, 0xH, 0xR)
_NUMBER = r"-?(?:0x[KLMHR]?[0-9a-fA-F]+|\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)"
NUMERIC_LITERAL = re.compile(_NUMBER)
PLACEHOLDER = re.compile(r"(?:VAR|GVAR|LBL)_[1-9]\d*")

_TOKEN = re.compile(
    r"""
      (?P<local>%(?:"[^"]*"|[-\w$.]+))
    | (?P<global>@(?:"[^"]*"|[-\w$.]+))
    | (?P<string>c?"(?:[^"\\]|\\.)*")
    | (?P<number>""" + _NUMBER + r""")
    | (?P<word>[A-Za-z_$.][\w$.]*)
    | (?P<punct>\S)
    """,
    re.VERBOSE,
)
_LABEL_DEF = re.compile(r'^(?P<name>"[^"]*"|[-\w$.]+):$')
_FUNCTION_NAME = re.compile(r'@(?P<name>"[^"]+"|[-\w$.]+)\s*\(')
_TYPE_DEF = re.compile(r'^%(?P<name>"[^"]*"|[-\w$.]+)\s*=\s*type\b')
_FILE_CWE = re.compile(r"^(?:CWE)?[-_]?(\d+)", re.IGNORECASE)


class CalleeKind(Enum):
    LOCAL = "Local"
    EXTERNAL = "External"


@dataclass(frozen=True)
class IrFunction:
    name: str
    body_lines: Tuple[str, ...]
    is_definition: bool
    line: int = 0


@dataclass
class IrModule:
    source_path: str
    functions: List[IrFunction] = field(default_factory=list)
    type_names: Set[str] = field(default_factory=set)

    @property
    def defined_names(self):
        return {f.name for f in self.functions if f.is_definition}

    @property
    def declared_names(self):
        return {f.name for f in self.functions if not f.is_definition}

    def definitions(self):
        return [f for f in self.functions if f.is_definition]


@dataclass
class TokenStream:
    tokens: List[str]
    function_name: str
    cwe_id: Optional[int] = None
    flaw_label: Optional[str] = None
    source_path: str = ""

    @property
    def id(self):
        return f"{Path(self.source_path).stem}::{self.function_name}"

    def to_record(self):
        # Field order is part of the record format
        return {
            "id": self.id,
            "function_name": self.function_name,
            "cwe_id": self.cwe_id,
            "flaw_label": self.flaw_label,
            "source_path": self.source_path,
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            tokens=list(record["tokens"]),
            function_name=record["function_name"],
            cwe_id=record.get("cwe_id"),
            flaw_label=record.get("flaw_label"),
            source_path=record.get("source_path", ""),
        )


@dataclass
class SymbolTable:
    """Per-function placeholder counters; each namespace counts from 1."""
    local_vars: Dict[str, int] = field(default_factory=dict)
    globals: Dict[str, int] = field(default_factory=dict)
    labels: Dict[str, int] = field(default_factory=dict)
    defined_functions: Set[str] = field(default_factory=set)

    @staticmethod
    def _number(table, key):
        if key not in table:
            table[key] = len(table) + 1
        return table[key]

    def local(self, key):
        return f"VAR_{self._number(self.local_vars, key)}"

    def global_var(self, key):
        return f"GVAR_{self._number(self.globals, key)}"

    def label(self, key):
        return f"LBL_{self._number(self.labels, key)}"


def _strip_comment(line):
    """Drop a trailing ';' comment that is not inside a quoted string"""
    in_quotes = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_quotes = not in_quotes
        elif ch == ";" and not in_quotes:
            return line[:i]
    return line


def _function_name(header, lineno):
    match = _FUNCTION_NAME.search(header)
    if not match:
        raise IrParseError("Cannot find function name in header", lineno)
    return match.group("name")


def parse_module(ir_text, source_path=""):
    """Split IR text into function definitions and declarations, in source order"""
    module = IrModule(source_path=str(source_path))
    seen = set()

    current_name = None
    current_line = None
    body = None
    pending = None  # (name, lineno) of a define header still waiting for '{'

    def add(function):
        if function.name in seen:
            raise IrParseError(f"Duplicate function name '{function.name}'", function.line)
        seen.add(function.name)
        module.functions.append(function)

    for lineno, raw in enumerate(ir_text.splitlines(), start=1):
        code = _strip_comment(raw).strip()

        if body is not None:
            if code == "}":
                if not body:
                    raise IrParseError(f"define '{current_name}' without body", current_line)
                add(IrFunction(current_name, tuple(body), True, current_line))
                body = None
            elif code.startswith("define ") or code.startswith("declare "):
                raise IrParseError(f"Missing closing brace for '{current_name}'", lineno)
            elif code:
                body.append(raw.rstrip())
            continue

        if pending is not None:
            if not code:
                continue
            if code == "{":
                current_name, current_line = pending
                pending = None
                body = []
                continue
            raise IrParseError(f"define '{pending[0]}' without body", pending[1])

        if code.startswith("define "):
            name = _function_name(code, lineno)
            if code.endswith("{"):
                current_name, current_line, body = name, lineno, []
            else:
                pending = (name, lineno)
        elif code.startswith("declare "):
            add(IrFunction(_function_name(code, lineno), (), False, lineno))
        elif code == "}":
            raise IrParseError("Unbalanced closing brace", lineno)
        else:
            type_match = _TYPE_DEF.match(code)
            if type_match:
                module.type_names.add(type_match.group("name"))

    if body is not None:
        raise IrParseError(f"Missing closing brace for '{current_name}'")
    if pending is not None:
        raise IrParseError(f"define '{pending[0]}' without body", pending[1])
    return module


def classify_callee(name, module):
    """Local iff the callee is defined in the same module; declarations and unknowns are External"""
    if name in module.defined_names:
        return CalleeKind.LOCAL
    return CalleeKind.EXTERNAL


def split_numeric_literal(lexeme):
    """Split a numeric literal into single-character tokens"""
    if not NUMERIC_LITERAL.fullmatch(lexeme):
        raise ValueError(f"Not a numeric literal: {lexeme!r}")
    return list(lexeme)


def _lex(code):
    return [(m.lastgroup, m.group()) for m in _TOKEN.finditer(code)]


def _collect_labels(lines):
    labels = set()
    for code in lines:
        label_def = _LABEL_DEF.match(code)
        if label_def:
            labels.add(label_def.group("name"))
            continue
        lexemes = _lex(code)
        for (kind, text), (next_kind, next_text) in zip(lexemes, lexemes[1:]):
            if kind == "word" and text == "label" and next_kind == "local":
                labels.add(next_text[1:])
    return labels


def standardize_function(fn, module, cwe_id=None, flaw_label=None):
    """Turn one function definition into its standardised token stream"""
    if not fn.is_definition:
        raise ValueError(f"'{fn.name}' is a declaration, only definitions can be standardised")

    defined = module.defined_names
    declared = module.declared_names
    symbols = SymbolTable(defined_functions=set(defined))

    lines = [c for c in (_strip_comment(line).strip() for line in fn.body_lines) if c]
    labels = _collect_labels(lines)
    tokens = []

    for code in lines:
        label_def = _LABEL_DEF.match(code)
        if label_def:
            tokens.extend([symbols.label(label_def.group("name")), ":", EOL])
            continue

        lexemes = _lex(code)
        for i, (kind, text) in enumerate(lexemes):
            if kind == "local":
                key = text[1:]
                if key in labels:
                    tokens.append(symbols.label(key))
                elif key in module.type_names:
                    tokens.append(TYPE)
                else:
                    tokens.append(symbols.local(key))
            elif kind == "global":
                key = text[1:]
                is_call = i + 1 < len(lexemes) and lexemes[i + 1][1] == "("
                if key in defined:
                    tokens.append(FUN)
                elif key in declared or is_call:
                    # classify_callee: anything not defined here is external
                    tokens.append(key.strip('"'))
                else:
                    tokens.append(symbols.global_var(key))
            elif kind == "number":
                tokens.extend(split_numeric_literal(text))
            elif kind == "string":
                tokens.append(STR)
            else:
                tokens.append(text)
        tokens.append(EOL)

    return TokenStream(
        tokens=tokens,
        function_name=fn.name,
        cwe_id=cwe_id,
        flaw_label=flaw_label,
        source_path=module.source_path,
    )


def load_metadata_overrides(path):
    """Read a YAML manifest mapping file name -> {cwe_id, flaw_label}"""
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as stream:
            data = yaml.safe_load(stream) or {}
    except OSError as exc:
        raise ConfigError(f"Cannot read metadata overrides {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"Metadata overrides {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Metadata overrides {path} must map file names to entries")

    overrides = {}
    for name, entry in data.items():
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: entry for {name} must be a mapping with cwe_id / flaw_label")
        cwe = entry.get("cwe_id")
        try:
            cwe = int(cwe) if cwe is not None else None
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: cwe_id of {name} is not an integer: {cwe!r}") from None
        label = entry.get("flaw_label")
        if label is not None:
            label = str(label).lower()
            if label not in (GOOD, BAD):
                raise ConfigError(f"{path}: flaw_label of {name} must be good or bad, not {label!r}")
        overrides[str(name)] = {"cwe_id": cwe, "flaw_label": label}
    return overrides


def parse_source_metadata(path, overrides=None):
    """Read (cwe_id, flaw_label) from `<CWE>__<testcase>__<good|bad>.ll`"""
    path = Path(path)
    if overrides and path.name in overrides:
        entry = overrides[path.name]
        cwe = entry.get("cwe_id")
        return (int(cwe) if cwe is not None else None), entry.get("flaw_label")

    parts = path.stem.split("__")
    cwe_id, flaw_label = None, None
    if len(parts) >= 3:
        match = _FILE_CWE.match(parts[0])
        if match:
            cwe_id = int(match.group(1))
        if parts[-1].lower() in (GOOD, BAD):
            flaw_label = parts[-1].lower()
    return cwe_id, flaw_label


def normalize_text(ir_text, source_path="", cwe_id=None, flaw_label=None):
    """Parse a module and standardise every definition, in source order"""
    module = parse_module(ir_text, source_path)
    return [standardize_function(fn, module, cwe_id, flaw_label) for fn in module.definitions()]


def normalize_file(path, overrides=None):
    cwe_id, flaw_label = parse_source_metadata(path, overrides)
    with open(path, "r", encoding="utf-8", errors="replace") as stream:
        text = stream.read()
    return normalize_text(text, str(path), cwe_id, flaw_label)
