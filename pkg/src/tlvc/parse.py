"""Lexer, recursive-descent parser, and printer for temporal predicate text.

Grammar (loosest to tightest binding)::

    expr   := or
    or     := and ("|" and)*
    and    := until ("&" until)*
    until  := unary ("U" until)?          # right-associative
    unary  := ("!" | "X" | "F" | "G") unary | primary
    primary:= IDENT | "true" | "false" | "(" expr ")"

Keywords: ``!``/``not``, ``&``/``and``, ``|``/``or``, ``X``, ``F``, ``G``,
``U``, ``true``, ``false``. Identifiers are ``[a-zA-Z_][a-zA-Z0-9_]*``
excluding keywords. ``#`` starts a line comment. There is no implicit
conjunction; adjacent terms are a parse error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from tlvc.logic import (
    And,
    Atom,
    FalsePred,
    Finally,
    Globally,
    Next,
    Not,
    Or,
    Predicate,
    TruePred,
    Until,
)


class TokenKind(enum.Enum):
    IDENT = "IDENT"
    TRUE = "TRUE"
    FALSE = "FALSE"
    NOT = "NOT"
    AND = "AND"
    OR = "OR"
    NEXT = "NEXT"
    FINALLY = "FINALLY"
    GLOBALLY = "GLOBALLY"
    UNTIL = "UNTIL"
    LPAREN = "LPAREN"
    RPAREN = "RPAREN"
    EOF = "EOF"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    lexeme: str
    span: tuple[int, int]  # (byte offset, length)


class ParseError(Exception):
    def __init__(
        self,
        message: str,
        span: tuple[int, int],
        expected: frozenset[TokenKind] = frozenset(),
    ) -> None:
        super().__init__(message)
        self.message = message
        self.span = span
        self.expected = expected

    def caret_diagnostic(self, source: str) -> str:
        """Render the offending source line with a caret under the span."""
        offset, length = self.span
        line_start = source.rfind("\n", 0, offset) + 1
        line_end = source.find("\n", offset)
        if line_end < 0:
            line_end = len(source)
        line = source[line_start:line_end]
        caret = " " * (offset - line_start) + "^" * max(length, 1)
        return f"{self.message}\n  {line}\n  {caret}"


_KEYWORDS = {
    "not": TokenKind.NOT,
    "and": TokenKind.AND,
    "or": TokenKind.OR,
    "X": TokenKind.NEXT,
    "F": TokenKind.FINALLY,
    "G": TokenKind.GLOBALLY,
    "U": TokenKind.UNTIL,
    "true": TokenKind.TRUE,
    "false": TokenKind.FALSE,
}

_PUNCT = {
    "!": TokenKind.NOT,
    "&": TokenKind.AND,
    "|": TokenKind.OR,
    "(": TokenKind.LPAREN,
    ")": TokenKind.RPAREN,
}


def lex(source: str) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    n = len(source)
    while i < n:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "#":
            nl = source.find("\n", i)
            i = n if nl < 0 else nl + 1
            continue
        if ch in _PUNCT:
            tokens.append(Token(_PUNCT[ch], ch, (i, 1)))
            i += 1
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            word = source[i:j]
            kind = _KEYWORDS.get(word, TokenKind.IDENT)
            tokens.append(Token(kind, word, (i, j - i)))
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", (i, 1))
    tokens.append(Token(TokenKind.EOF, "", (n, 0)))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token]) -> None:
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind is not TokenKind.EOF:
            self.pos += 1
        return tok

    def expect(self, kind: TokenKind) -> Token:
        tok = self.peek()
        if tok.kind is not kind:
            raise ParseError(
                f"expected {kind.value}, found {tok.kind.value}",
                tok.span,
                frozenset({kind}),
            )
        return self.advance()

    def parse_expr(self) -> Predicate:
        return self.parse_or()

    def parse_or(self) -> Predicate:
        parts = [self.parse_and()]
        while self.peek().kind is TokenKind.OR:
            self.advance()
            parts.append(self.parse_and())
        if len(parts) == 1:
            return parts[0]
        return Or(tuple(parts))

    def parse_and(self) -> Predicate:
        parts = [self.parse_until()]
        while self.peek().kind is TokenKind.AND:
            self.advance()
            parts.append(self.parse_until())
        if len(parts) == 1:
            return parts[0]
        return And(tuple(parts))

    def parse_until(self) -> Predicate:
        left = self.parse_unary()
        if self.peek().kind is TokenKind.UNTIL:
            self.advance()
            right = self.parse_until()
            return Until(left, right)
        return left

    def parse_unary(self) -> Predicate:
        tok = self.peek()
        if tok.kind is TokenKind.NOT:
            self.advance()
            return Not(self.parse_unary())
        if tok.kind is TokenKind.NEXT:
            self.advance()
            return Next(self.parse_unary())
        if tok.kind is TokenKind.FINALLY:
            self.advance()
            return Finally(self.parse_unary())
        if tok.kind is TokenKind.GLOBALLY:
            self.advance()
            return Globally(self.parse_unary())
        return self.parse_primary()

    def parse_primary(self) -> Predicate:
        tok = self.peek()
        if tok.kind is TokenKind.IDENT:
            self.advance()
            return Atom(tok.lexeme)
        if tok.kind is TokenKind.TRUE:
            self.advance()
            return TruePred()
        if tok.kind is TokenKind.FALSE:
            self.advance()
            return FalsePred()
        if tok.kind is TokenKind.LPAREN:
            self.advance()
            inner = self.parse_expr()
            self.expect(TokenKind.RPAREN)
            return inner
        raise ParseError(
            f"expected a predicate, found {tok.kind.value}",
            tok.span,
            frozenset(
                {
                    TokenKind.IDENT,
                    TokenKind.TRUE,
                    TokenKind.FALSE,
                    TokenKind.LPAREN,
                    TokenKind.NOT,
                    TokenKind.NEXT,
                    TokenKind.FINALLY,
                    TokenKind.GLOBALLY,
                }
            ),
        )


def parse(tokens: list[Token]) -> Predicate:
    parser = _Parser(tokens)
    result = parser.parse_expr()
    tok = parser.peek()
    if tok.kind is not TokenKind.EOF:
        raise ParseError(
            f"unexpected {tok.kind.value} after complete predicate",
            tok.span,
            frozenset({TokenKind.EOF}),
        )
    return result


def parse_string(source: str) -> Predicate:
    return parse(lex(source))


def print_predicate(p: Predicate) -> str:
    """Fully parenthesized text; ``parse(print_predicate(p))`` rebuilds p."""
    if isinstance(p, Atom):
        return p.atom_id
    if isinstance(p, TruePred):
        return "true"
    if isinstance(p, FalsePred):
        return "false"
    if isinstance(p, Not):
        return f"(! {print_predicate(p.child)})"
    if isinstance(p, And):
        return "(" + " & ".join(print_predicate(c) for c in p.children) + ")"
    if isinstance(p, Or):
        return "(" + " | ".join(print_predicate(c) for c in p.children) + ")"
    if isinstance(p, Next):
        return f"(X {print_predicate(p.child)})"
    if isinstance(p, Finally):
        return f"(F {print_predicate(p.child)})"
    if isinstance(p, Globally):
        return f"(G {print_predicate(p.child)})"
    if isinstance(p, Until):
        return f"({print_predicate(p.left)} U {print_predicate(p.right)})"
    raise TypeError(f"unknown predicate node {type(p).__name__}")


def pred_to_jsonable(p: Predicate) -> dict:
    """Plain-dict rendering of the tree for JSON dumps."""
    if isinstance(p, Atom):
        return {"kind": "atom", "id": p.atom_id}
    if isinstance(p, TruePred):
        return {"kind": "true"}
    if isinstance(p, FalsePred):
        return {"kind": "false"}
    if isinstance(p, Not):
        return {"kind": "not", "child": pred_to_jsonable(p.child)}
    if isinstance(p, And):
        return {"kind": "and", "children": [pred_to_jsonable(c) for c in p.children]}
    if isinstance(p, Or):
        return {"kind": "or", "children": [pred_to_jsonable(c) for c in p.children]}
    if isinstance(p, Next):
        return {"kind": "next", "child": pred_to_jsonable(p.child)}
    if isinstance(p, Finally):
        return {"kind": "finally", "child": pred_to_jsonable(p.child)}
    if isinstance(p, Globally):
        return {"kind": "globally", "child": pred_to_jsonable(p.child)}
    if isinstance(p, Until):
        return {
            "kind": "until",
            "left": pred_to_jsonable(p.left),
            "right": pred_to_jsonable(p.right),
        }
    raise TypeError(f"unknown predicate node {type(p).__name__}")
