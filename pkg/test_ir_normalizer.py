#!/usr/bin/env python3
"""
Tests for the LLVM IR normalizer: golden token streams, parse errors, literal splitting
"""

import numpy as np
import pytest

from errors import ConfigError, IrParseError
from ir_normalizer import (EOL, FUN, STR, TYPE, CalleeKind, TokenStream, classify_callee,
                           load_metadata_overrides, normalize_file, normalize_text, parse_module,
                           parse_source_metadata,
                           split_numeric_literal, standardize_function)


def tokens_of(ir_text, function_name=None):
    streams = normalize_text(ir_text, "CWE121__case_01__bad.ll")
    if function_name is None:
        return streams[0].tokens
    return next(s for s in streams if s.function_name == function_name).tokens


def wrap(body, header="define i32 @f()", prelude="", trailer=""):
    return f"{prelude}\n{header} {{\n{body}\n}}\n{trailer}"


GOLDEN = [
    # 1. plain return
    (wrap("  ret i32 0"), None,
     ["ret", "i32", "0", EOL]),
    # 2. locals numbered by first occurrence inside the body
    (wrap("  %b = add i32 %a, 1\n  ret i32 %b", header="define i32 @f(i32 %a)"), None,
     ["VAR_1", "=", "add", "i32", "VAR_2", ",", "1", EOL, "ret", "i32", "VAR_1", EOL]),
    # 3. integer literal split into digits
    (wrap("  store i32 1234, i32* %x, align 4"), None,
     ["store", "i32", "1", "2", "3", "4", ",", "i32", "*", "VAR_1", ",", "align", "4", EOL]),
    # 4. negative literal
    (wrap("  %y = mul i32 %x, -42"), None,
     ["VAR_1", "=", "mul", "i32", "VAR_2", ",", "-", "4", "2", EOL]),
    # 5. hex literal
    (wrap("  store i64 0x1F, i64* %p"), None,
     ["store", "i64", "0", "x", "1", "F", ",", "i64", "*", "VAR_1", EOL]),
    # 6. floating literal with exponent
    (wrap("  %f = fadd double %g, 1.5e+00"), None,
     ["VAR_1", "=", "fadd", "double", "VAR_2", ",", "1", ".", "5", "e", "+", "0", "0", EOL]),
    # 7. global variable
    (wrap("  %v = load i32, i32* @gv, align 4", prelude="@gv = global i32 0"), None,
     ["VAR_1", "=", "load", "i32", ",", "i32", "*", "GVAR_1", ",", "align", "4", EOL]),
    # 8. declared external callee keeps its name
    (wrap("  %r = call i32 (i8*, ...) @printf(i8* %s)", trailer="declare i32 @printf(i8*, ...)"), None,
     ["VAR_1", "=", "call", "i32", "(", "i8", "*", ",", "...", ")", "printf", "(", "i8", "*",
      "VAR_2", ")", EOL]),
    # 9. callee defined in the same module becomes FUN
    ("define void @helper() {\n  ret void\n}\n" + wrap("  call void @helper()\n  ret i32 0"), "f",
     ["call", "void", FUN, "(", ")", EOL, "ret", "i32", "0", EOL]),
    # 10. undeclared callee in call position is external
    (wrap("  call void @mystery(i32 1)"), None,
     ["call", "void", "mystery", "(", "i32", "1", ")", EOL]),
    # 11. label definitions and uses
    (wrap("entry:\n  br label %exit\nexit:\n  ret void", header="define void @f()"), None,
     ["LBL_1", ":", EOL, "br", "label", "LBL_2", EOL, "LBL_2", ":", EOL, "ret", "void", EOL]),
    # 12. getelementptr on a string global
    (wrap("  %s = getelementptr inbounds [4 x i8], [4 x i8]* @.str, i64 0, i64 0",
          prelude='@.str = private constant [4 x i8] c"abc\\00"'), None,
     ["VAR_1", "=", "getelementptr", "inbounds", "[", "4", "x", "i8", "]", ",", "[", "4", "x",
      "i8", "]", "*", "GVAR_1", ",", "i64", "0", ",", "i64", "0", EOL]),
    # 13. trailing comment dropped
    (wrap("  %a = add i32 1, 2 ; sum"), None,
     ["VAR_1", "=", "add", "i32", "1", ",", "2", EOL]),
    # 14. named type
    (wrap("  %p = alloca %struct.S, align 8", prelude="%struct.S = type { i32 }"), None,
     ["VAR_1", "=", "alloca", TYPE, ",", "align", "8", EOL]),
    # 15. quoted local name
    (wrap('  %"my var" = add i32 0, 0'), None,
     ["VAR_1", "=", "add", "i32", "0", ",", "0", EOL]),
    # 16. opening brace on its own line
    ("define void @f()\n{\n  ret void\n}\n", None,
     ["ret", "void", EOL]),
    # 17. conditional branch to two labels
    (wrap("  br i1 %c, label %t, label %e\nt:\n  ret i32 1\ne:\n  ret i32 0",
          header="define i32 @f(i1 %c)"), None,
     ["br", "i1", "VAR_1", ",", "label", "LBL_1", ",", "label", "LBL_2", EOL,
      "LBL_1", ":", EOL, "ret", "i32", "1", EOL, "LBL_2", ":", EOL, "ret", "i32", "0", EOL]),
    # 18. comment-only and blank lines emit nothing
    (wrap("\n  ; just a comment\n\n  ret void", header="define void @f()"), None,
     ["ret", "void", EOL]),
    # 19. string constant operand
    (wrap('  call void @puts(i8* c"hi\\00")'), None,
     ["call", "void", "puts", "(", "i8", "*", STR, ")", EOL]),
    # 20. intrinsic callee with dots in its name
    (wrap("  call void @llvm.memcpy.p0i8.p0i8.i64(i8* %d, i8* %s, i64 8, i1 false)",
          trailer="declare void @llvm.memcpy.p0i8.p0i8.i64(i8*, i8*, i64, i1)"), None,
     ["call", "void", "llvm.memcpy.p0i8.p0i8.i64", "(", "i8", "*", "VAR_1", ",", "i8", "*",
      "VAR_2", ",", "i64", "8", ",", "i1", "false", ")", EOL]),
    # 21. phi operands that name labels
    (wrap("a:\n  br label %b\nb:\n  %r = phi i32 [ 0, %a ], [ 1, %b ]\n  ret i32 %r"), None,
     ["LBL_1", ":", EOL, "br", "label", "LBL_2", EOL, "LBL_2", ":", EOL,
      "VAR_1", "=", "phi", "i32", "[", "0", ",", "LBL_1", "]", ",", "[", "1", ",", "LBL_2", "]", EOL,
      "ret", "i32", "VAR_1", EOL]),
    # 22. metadata attachment
    (wrap("  ret void, !dbg !12", header="define void @f()"), None,
     ["ret", "void", ",", "!", "dbg", "!", "1", "2", EOL]),
    # 23. globals and locals are numbered independently
    (wrap("  %a = load i32, i32* @g2\n  %b = load i32, i32* @g1\n  store i32 %b, i32* @g2",
          prelude="@g1 = global i32 0\n@g2 = global i32 0"), None,
     ["VAR_1", "=", "load", "i32", ",", "i32", "*", "GVAR_1", EOL,
      "VAR_2", "=", "load", "i32", ",", "i32", "*", "GVAR_2", EOL,
      "store", "i32", "VAR_2", ",", "i32", "*", "GVAR_1", EOL]),
    # 24. special float hex literals stay one literal
    (wrap("  store x86_fp80 0xK4000C9, x86_fp80* %p", header="define void @f()"), None,
     ["store", "x86_fp80", "0", "x", "K", "4", "0", "0", "0", "C", "9", ",", "x86_fp80", "*", "VAR_1", EOL]),
]


@pytest.mark.parametrize("ir_text, function_name, expected", GOLDEN)
def test_golden_token_streams(ir_text, function_name, expected):
    assert tokens_of(ir_text, function_name) == expected


def test_golden_suite_is_deterministic():
    first = [tokens_of(ir, name) for ir, name, _ in GOLDEN]
    second = [tokens_of(ir, name) for ir, name, _ in GOLDEN]
    assert first == second


def test_placeholder_numbering_restarts_per_function():
    ir = ("define i32 @a(i32 %x) {\n  %y = add i32 %x, 1\n  ret i32 %y\n}\n"
          "define i32 @b(i32 %x) {\n  %z = call i32 @a(i32 %x)\n  ret i32 %z\n}\n")
    a, b = normalize_text(ir, "m.ll")
    assert a.tokens[0] == "VAR_1"
    assert b.tokens == ["VAR_1", "=", "call", "i32", FUN, "(", "i32", "VAR_2", ")", EOL,
                        "ret", "i32", "VAR_1", EOL]


def test_one_eol_per_code_line():
    body = "  %a = add i32 1, 2\n\n  ; note\n  %b = add i32 %a, 3\n  ret i32 %b"
    tokens = tokens_of(wrap(body))
    assert tokens.count(EOL) == 3
    assert tokens[-1] == EOL


def test_parse_module_functions_in_source_order():
    ir = ("declare i32 @printf(i8*, ...)\n"
          "define void @first() {\n  ret void\n}\n"
          "define void @second() {\n  ret void\n}\n")
    module = parse_module(ir, "m.ll")
    assert [f.name for f in module.functions] == ["printf", "first", "second"]
    assert [f.is_definition for f in module.functions] == [False, True, True]
    assert module.declared_names == {"printf"}
    assert [f.name for f in module.definitions()] == ["first", "second"]


def test_function_without_body_reports_line():
    with pytest.raises(IrParseError) as exc:
        parse_module("; header\ndefine void @f()\n", "m.ll")
    assert exc.value.line == 2


def test_empty_body_is_an_error():
    with pytest.raises(IrParseError) as exc:
        parse_module("define void @f() {\n}\n", "m.ll")
    assert "without body" in str(exc.value)


def test_missing_closing_brace_at_end_of_file():
    with pytest.raises(IrParseError) as exc:
        parse_module("define void @f() {\n  ret void\n", "m.ll")
    assert exc.value.line is None
    assert "end-of-file" in str(exc.value)


def test_missing_closing_brace_before_next_define():
    with pytest.raises(IrParseError) as exc:
        parse_module("define void @f() {\n  ret void\ndefine void @g() {\n  ret void\n}\n", "m.ll")
    assert exc.value.line == 3


def test_unbalanced_closing_brace():
    with pytest.raises(IrParseError):
        parse_module("}\n", "m.ll")


def test_duplicate_function_names():
    ir = "define void @f() {\n  ret void\n}\ndefine void @f() {\n  ret void\n}\n"
    with pytest.raises(IrParseError) as exc:
        parse_module(ir, "m.ll")
    assert "Duplicate" in str(exc.value)


def test_classify_callee():
    ir = ("declare i32 @puts(i8*)\n"
          "define void @local_fn() {\n  ret void\n}\n")
    module = parse_module(ir, "m.ll")
    assert classify_callee("local_fn", module) is CalleeKind.LOCAL
    assert classify_callee("puts", module) is CalleeKind.EXTERNAL
    assert classify_callee("never_seen", module) is CalleeKind.EXTERNAL


def test_standardize_rejects_declarations():
    module = parse_module("declare i32 @puts(i8*)\n", "m.ll")
    with pytest.raises(ValueError):
        standardize_function(module.functions[0], module)


def test_split_numeric_literal_examples():
    assert split_numeric_literal("0") == ["0"]
    assert split_numeric_literal("-17") == ["-", "1", "7"]
    assert split_numeric_literal("0xFF") == ["0", "x", "F", "F"]
    assert split_numeric_literal("2.5e-3") == ["2", ".", "5", "e", "-", "3"]
    assert split_numeric_literal("1.0E+10") == ["1", ".", "0", "E", "+", "1", "0"]
    assert split_numeric_literal("0xL3FFF8000") == ["0", "x", "L", "3", "F", "F", "F", "8", "0", "0", "0"]


@pytest.mark.parametrize("lexeme", ["abc", "", "1.2.3", "--1", "0x", "0xK", "0xQ12"])
def test_split_numeric_literal_rejects_non_literals(lexeme):
    with pytest.raises(ValueError):
        split_numeric_literal(lexeme)


def _random_literal(rng):
    kind = rng.integers(0, 4)
    sign = "-" if rng.random() < 0.3 else ""
    if kind == 0:
        return sign + str(int(rng.integers(0, 10 ** 12)))
    if kind == 1:
        return sign + "0x" + "".join(rng.choice(list("0123456789abcdefABCDEF"), size=int(rng.integers(1, 17))))
    if kind == 2:
        return sign + f"{int(rng.integers(0, 10 ** 6))}.{int(rng.integers(0, 10 ** 6))}"
    exp_sign = rng.choice(["", "+", "-"])
    return sign + f"{int(rng.integers(0, 10))}.{int(rng.integers(0, 10 ** 6))}e{exp_sign}{int(rng.integers(0, 400))}"


def test_literal_split_round_trip():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        lexeme = _random_literal(rng)
        pieces = split_numeric_literal(lexeme)
        assert "".join(pieces) == lexeme
        assert all(len(p) == 1 for p in pieces)


def test_numbers_in_body_round_trip_through_tokens():
    tokens = tokens_of(wrap("  store i64 -9007199254740993, i64* %p"))
    assert "".join(tokens[2:tokens.index(",")]) == "-9007199254740993"


def test_parse_source_metadata():
    assert parse_source_metadata("ir/CWE121__CWE121_Stack_char_01__bad.ll") == (121, "bad")
    assert parse_source_metadata("190__CWE190_Overflow_02__good.ll") == (190, "good")
    assert parse_source_metadata("random_module.ll") == (None, None)


def test_parse_source_metadata_overrides():
    overrides = {"x.ll": {"cwe_id": 78, "flaw_label": "bad"}}
    assert parse_source_metadata("dir/x.ll", overrides) == (78, "bad")


def test_normalize_file_records(tmp_path):
    path = tmp_path / "CWE78__CWE78_OS_Command_01__bad.ll"
    path.write_text("define void @CWE78_bad() {\n  ret void\n}\n"
                    "define void @helper() {\n  ret void\n}\n", encoding="utf-8")
    streams = normalize_file(path)
    assert [s.function_name for s in streams] == ["CWE78_bad", "helper"]
    assert all(s.cwe_id == 78 and s.flaw_label == "bad" for s in streams)
    assert streams[0].id == "CWE78__CWE78_OS_Command_01__bad::CWE78_bad"

    record = streams[0].to_record()
    assert list(record) == ["id", "function_name", "cwe_id", "flaw_label", "source_path", "tokens"]
    assert TokenStream.from_record(record) == streams[0]


def test_load_metadata_overrides(tmp_path):
    path = tmp_path / "overrides.yaml"
    path.write_text("x.ll:\n  cwe_id: '78'\n  flaw_label: BAD\ny.ll:\n  flaw_label: good\n", encoding="utf-8")
    assert load_metadata_overrides(path) == {
        "x.ll": {"cwe_id": 78, "flaw_label": "bad"},
        "y.ll": {"cwe_id": None, "flaw_label": "good"},
    }
    assert load_metadata_overrides(None) == {}


@pytest.mark.parametrize("text", [
    "x.ll: 78\n",
    "x.ll:\n  cwe_id: seventy\n",
    "x.ll:\n  flaw_label: maybe\n",
    "- x.ll\n",
    "x.ll: [unclosed\n",
])
def test_load_metadata_overrides_rejects_malformed_entries(tmp_path, text):
    path = tmp_path / "overrides.yaml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_metadata_overrides(path)


def test_load_metadata_overrides_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_metadata_overrides(tmp_path / "absent.yaml")
