"""Lightweight SQLite-flavoured SQL lexer and text-level analyses.

This is deliberately a lexer, not a parser. It understands quoting rules,
comments and parenthesis depth well enough to locate string literals,
identifiers and top-level keywords, which is all the validator, the value
autocorrector and the benchmark harness need. Full grammar checking is
delegated to SQLite itself (see validate.validate_syntax).

Quoting handled: 'string' with '' escapes, "ident", `ident`, [ident],
x'blob', line comments (--) and block comments (/* */).
"""

from __future__ import annotations

from dataclasses import dataclass


class SqlLexError(ValueError):
    """Unterminated string or comment; the statement cannot be tokenized."""


# Keywords that matter for the analyses below. Function names (count, substr,
# ...) are intentionally absent: a function call is recognised positionally as
# an identifier followed by '('.
KEYWORDS = frozenset(
    """
    ABORT ACTION ADD AFTER ALL ALTER ANALYZE AND AS ASC ATTACH AUTOINCREMENT
    BEFORE BEGIN BETWEEN BY CASCADE CASE CAST CHECK COLLATE COLUMN COMMIT
    CONFLICT CONSTRAINT CREATE CROSS CURRENT CURRENT_DATE CURRENT_TIME
    CURRENT_TIMESTAMP DATABASE DEFAULT DEFERRABLE DEFERRED DELETE DESC DETACH
    DISTINCT DO DROP EACH ELSE END ESCAPE EXCEPT EXCLUDE EXCLUSIVE EXISTS
    EXPLAIN FAIL FILTER FIRST FOLLOWING FOR FOREIGN FROM FULL GENERATED GLOB
    GROUP GROUPS HAVING IF IGNORE IMMEDIATE IN INDEX INDEXED INITIALLY INNER
    INSERT INSTEAD INTERSECT INTO IS ISNULL JOIN KEY LAST LEFT LIKE LIMIT
    MATCH MATERIALIZED NATURAL NO NOT NOTHING NOTNULL NULL NULLS OF OFFSET ON
    OR ORDER OTHERS OUTER OVER PARTITION PLAN PRAGMA PRECEDING PRIMARY QUERY
    RAISE RANGE RECURSIVE REFERENCES REGEXP REINDEX RELEASE RENAME REPLACE
    RESTRICT RETURNING RIGHT ROLLBACK ROW ROWS SAVEPOINT SELECT SET TABLE TEMP
    TEMPORARY THEN TIES TO TRANSACTION TRIGGER UNBOUNDED UNION UNIQUE UPDATE
    USING VACUUM VALUES VIEW VIRTUAL WHEN WHERE WINDOW WITH WITHOUT
    """.split()
)

AGGREGATE_FUNCTIONS = frozenset({"COUNT", "SUM", "AVG", "MIN", "MAX", "TOTAL", "GROUP_CONCAT"})

_IDENT_START = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_CONT = _IDENT_START | frozenset("0123456789$")
_DIGITS = frozenset("0123456789")


@dataclass(frozen=True)
class Token:
    kind: str  # "ident" | "keyword" | "string" | "number" | "op" | "punct" | "param" | "blob"
    text: str  # raw source slice, quotes included
    value: str  # unquoted / case-normalised payload
    pos: int  # offset of the first character in the source
    end: int  # offset one past the last character
    depth: int  # parenthesis nesting depth at the token start


def tokenize(sql: str) -> list[Token]:
    """Tokenize one-or-more SQL statements. Raises SqlLexError on unterminated
    strings, quoted identifiers or block comments."""
    tokens: list[Token] = []
    i = 0
    n = len(sql)
    depth = 0
    while i < n:
        c = sql[i]
        if c in " \t\r\n\f":
            i += 1
            continue
        if c == "-" and sql.startswith("--", i):
            j = sql.find("\n", i)
            i = n if j < 0 else j + 1
            continue
        if c == "/" and sql.startswith("/*", i):
            j = sql.find("*/", i + 2)
            if j < 0:
                raise SqlLexError(f"unterminated block comment at offset {i}")
            i = j + 2
            continue
        if c == "'" or ((c in "xX") and sql.startswith("'", i + 1)):
            start = i
            kind = "string"
            if c != "'":
                kind = "blob"
                i += 1
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise SqlLexError(f"unterminated string literal at offset {start}")
                if sql[i] == "'":
                    if i + 1 < n and sql[i + 1] == "'":
                        buf.append("'")
                        i += 2
                        continue
                    i += 1
                    break
                buf.append(sql[i])
                i += 1
            tokens.append(Token(kind, sql[start:i], "".join(buf), start, i, depth))
            continue
        if c in '"`[':
            closer = {'"': '"', "`": "`", "[": "]"}[c]
            start = i
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise SqlLexError(f"unterminated quoted identifier at offset {start}")
                if sql[i] == closer:
                    if closer != "]" and i + 1 < n and sql[i + 1] == closer:
                        buf.append(closer)
                        i += 2
                        continue
                    i += 1
                    break
                buf.append(sql[i])
                i += 1
            tokens.append(Token("ident", sql[start:i], "".join(buf), start, i, depth))
            continue
        if c in _IDENT_START:
            start = i
            while i < n and sql[i] in _IDENT_CONT:
                i += 1
            word = sql[start:i]
            upper = word.upper()
            if upper in KEYWORDS:
                tokens.append(Token("keyword", word, upper, start, i, depth))
            else:
                tokens.append(Token("ident", word, word, start, i, depth))
            continue
        if c in _DIGITS or (c == "." and i + 1 < n and sql[i + 1] in _DIGITS):
            start = i
            while i < n and (sql[i] in _DIGITS or sql[i] in ".eExX+-" and _looks_numeric(sql, start, i)):
                i += 1
            tokens.append(Token("number", sql[start:i], sql[start:i], start, i, depth))
            continue
        if c in ":@?$" and c != "?":
            start = i
            i += 1
            while i < n and sql[i] in _IDENT_CONT:
                i += 1
            tokens.append(Token("param", sql[start:i], sql[start:i], start, i, depth))
            continue
        if c == "?":
            tokens.append(Token("param", "?", "?", i, i + 1, depth))
            i += 1
            continue
        if c == "(":
            tokens.append(Token("punct", "(", "(", i, i + 1, depth))
            depth += 1
            i += 1
            continue
        if c == ")":
            depth = max(0, depth - 1)
            tokens.append(Token("punct", ")", ")", i, i + 1, depth))
            i += 1
            continue
        if c in ",;.":
            tokens.append(Token("punct", c, c, i, i + 1, depth))
            i += 1
            continue
        # multi-char operators first
        for op in ("<>", "!=", "<=", ">=", "==", "||"):
            if sql.startswith(op, i):
                tokens.append(Token("op", op, op, i, i + len(op), depth))
                i += len(op)
                break
        else:
            tokens.append(Token("op", c, c, i, i + 1, depth))
            i += 1
    return tokens


def _looks_numeric(sql: str, start: int, i: int) -> bool:
    # Accept exponent/hex continuation only right after a digit or e/E sign.
    prev = sql[i - 1] if i > start else ""
    if sql[i] in "+-":
        return prev in "eE"
    return True


def paren_balance(sql: str) -> int:
    """Net parenthesis depth ignoring strings and comments. 0 means balanced."""
    depth = 0
    for tok in tokenize(sql):
        if tok.text == "(":
            depth += 1
        elif tok.text == ")":
            depth -= 1
    return depth


def split_statements(sql: str) -> list[str]:
    """Split on top-level semicolons, dropping empty fragments."""
    tokens = tokenize(sql)
    parts: list[str] = []
    start = 0
    for tok in tokens:
        if tok.kind == "punct" and tok.value == ";" and tok.depth == 0:
            frag = sql[start : tok.pos].strip()
            if frag:
                parts.append(frag)
            start = tok.end
    tail = sql[start:].strip()
    if tail:
        parts.append(tail)
    return parts


def statement_count(sql: str) -> int:
    try:
        return len(split_statements(sql))
    except SqlLexError:
        return 1


def has_top_level_order_by(sql: str) -> bool:
    """True when an ORDER BY appears at parenthesis depth 0.

    Used by the harness to decide between ordered and multiset result
    comparison; subquery ORDER BYs do not constrain the outer result order.
    """
    tokens = tokenize(sql)
    for a, b in zip(tokens, tokens[1:]):
        if a.kind == "keyword" and a.value == "ORDER" and a.depth == 0:
            if b.kind == "keyword" and b.value == "BY":
                return True
    return False


def contains_aggregate(sql: str) -> bool:
    """Syntactic aggregate detection: COUNT/SUM/AVG/MIN/MAX/... followed by
    '(' or a GROUP BY clause anywhere in the statement."""
    tokens = tokenize(sql)
    for idx, tok in enumerate(tokens):
        if tok.kind == "ident" and tok.value.upper() in AGGREGATE_FUNCTIONS:
            nxt = tokens[idx + 1] if idx + 1 < len(tokens) else None
            if nxt is not None and nxt.text == "(":
                return True
        if tok.kind == "keyword" and tok.value == "GROUP":
            nxt = tokens[idx + 1] if idx + 1 < len(tokens) else None
            if nxt is not None and nxt.kind == "keyword" and nxt.value == "BY":
                return True
    return False


def quote_string_literal(value: str) -> str:
    return "'" + value.replace("'", "''") + "'"
