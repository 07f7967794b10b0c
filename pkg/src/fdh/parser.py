"""Parser for the textual term grammar.

    term  := sum ;  sum := product ("+" product)* ; unary "-" binds between
    "+" and "*";  precedence  ^  >  .  >  *  >  -  >  + .
    atoms := "g" | "1" | "0" | "eG" | ["~"|"$"] ident [":" sort]

Name/variable sorts may be inferred from the position they occur in: a
fresh name written ``~m`` is FrE in exponent position and Fresh elsewhere;
an unannotated variable defaults to the expected sort of its position.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from .sorts import Sort, sort_leq, sort_of_name
from .terms import (
    ADD,
    EG,
    EXP,
    FST,
    GINV,
    GMUL,
    INV,
    MU,
    MUL,
    NEG,
    ONE,
    PAIR,
    SDEC,
    SENC,
    SND,
    ZERO,
    App,
    FunctionSymbol,
    G,
    Name,
    SortError,
    Term,
    Var,
    mk_app,
)


class ParseError(Exception):
    pass


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<ident>[A-Za-z_][A-Za-z0-9_']*)|(?P<num>\d+)"
    r"|(?P<op>[\^\.\*\+\-\(\)<>,:~\$@=#!\[\]&\|]))"
)


@dataclass
class Tok:
    kind: str
    text: str
    pos: int


def tokenize(text: str) -> list[Tok]:
    toks = []
    i = 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        if not m:
            if text[i:].strip() == "":
                break
            raise ParseError(f"bad character at {i}: {text[i:i + 10]!r}")
        if m.group("ident"):
            toks.append(Tok("ident", m.group("ident"), m.start("ident")))
        elif m.group("num"):
            toks.append(Tok("num", m.group("num"), m.start("num")))
        else:
            toks.append(Tok("op", m.group("op"), m.start("op")))
        i = m.end()
    return toks


# untyped AST produced by the grammar, elaborated to sorted terms afterwards
Ast = tuple


class _P:
    def __init__(self, toks: list[Tok], src: str):
        self.toks = toks
        self.i = 0
        self.src = src

    def peek(self) -> Optional[Tok]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> Tok:
        t = self.peek()
        if t is None:
            raise ParseError(f"unexpected end of input in {self.src!r}")
        self.i += 1
        return t

    def expect(self, text: str) -> Tok:
        t = self.next()
        if t.text != text:
            raise ParseError(f"expected {text!r}, got {t.text!r} in {self.src!r}")
        return t

    def at(self, text: str) -> bool:
        t = self.peek()
        return t is not None and t.text == text

    # sum := neg (("+" | "-") neg)*
    def sum(self) -> Ast:
        parts = [self.neg()]
        while self.at("+") or self.at("-"):
            minus = self.next().text == "-"
            nxt = self.neg()
            parts.append(("neg", nxt) if minus else nxt)
        return parts[0] if len(parts) == 1 else ("add", parts)

    def neg(self) -> Ast:
        if self.at("-"):
            self.next()
            return ("neg", self.neg())
        return self.prod()

    def prod(self) -> Ast:
        parts = [self.gprod()]
        while self.at("*"):
            self.next()
            parts.append(self.gprod())
        return parts[0] if len(parts) == 1 else ("mul", parts)

    def gprod(self) -> Ast:
        parts = [self.expterm()]
        while self.at("."):
            self.next()
            parts.append(self.expterm())
        return parts[0] if len(parts) == 1 else ("gmul", parts)

    def expterm(self) -> Ast:
        t = self.primary()
        while self.at("^"):
            self.next()
            t = ("exp", t, self.primary())
        return t

    def primary(self) -> Ast:
        tok = self.peek()
        if tok is None:
            raise ParseError(f"unexpected end of input in {self.src!r}")
        if tok.text == "(":
            self.next()
            t = self.sum()
            self.expect(")")
            return t
        if tok.text == "-":
            self.next()
            return ("neg", self.primary())
        if tok.text == "<":
            self.next()
            parts = [self.sum()]
            while self.at(","):
                self.next()
                parts.append(self.sum())
            self.expect(">")
            return ("pair", parts)
        if tok.text in ("~", "$"):
            self.next()
            ident = self.next()
            if ident.kind != "ident":
                raise ParseError(f"expected name after {tok.text!r}")
            sort = self._opt_sort()
            return ("name", tok.text, ident.text, sort)
        if tok.kind == "num":
            self.next()
            if tok.text not in ("0", "1"):
                raise ParseError(f"only the numerals 0 and 1 are terms, got {tok.text}")
            return ("var", tok.text, None)
        if tok.kind == "ident":
            self.next()
            if self.at("("):
                self.next()
                args = []
                if not self.at(")"):
                    args.append(self.sum())
                    while self.at(","):
                        self.next()
                        args.append(self.sum())
                self.expect(")")
                return ("app", tok.text, args)
            sort = self._opt_sort()
            return ("var", tok.text, sort)
        raise ParseError(f"unexpected token {tok.text!r} in {self.src!r}")

    def _opt_sort(self) -> Optional[Sort]:
        if self.at(":"):
            self.next()
            t = self.next()
            try:
                return sort_of_name(t.text)
            except ValueError as e:
                raise ParseError(str(e))
        return None


_FUNS = {
    "inv": INV,
    "mu": MU,
    "ginv": GINV,
    "fst": FST,
    "snd": SND,
    "senc": SENC,
    "sdec": SDEC,
    "pair": PAIR,
}

_CONSTS = {"eG": EG, "1": ONE, "0": ZERO}


def _elab(ast: Ast, expected: Sort, env: dict[str, Sort],
          user_funs: dict[str, FunctionSymbol],
          public_vars: bool = False) -> Term:
    kind = ast[0]
    if kind == "add":
        return mk_app(ADD, [_elab(a, Sort.E, env, user_funs, public_vars) for a in ast[1]])
    if kind == "mul":
        return mk_app(MUL, [_elab(a, Sort.E, env, user_funs, public_vars) for a in ast[1]])
    if kind == "gmul":
        return mk_app(GMUL, [_elab(a, Sort.G, env, user_funs, public_vars) for a in ast[1]])
    if kind == "neg":
        return mk_app(NEG, (_elab(ast[1], Sort.E, env, user_funs, public_vars),))
    if kind == "exp":
        return mk_app(
            EXP,
            (_elab(ast[1], Sort.G, env, user_funs, public_vars),
             _elab(ast[2], Sort.E, env, user_funs, public_vars)),
        )
    if kind == "pair":
        parts = [_elab(a, Sort.MSG, env, user_funs, public_vars) for a in ast[1]]
        t = parts[-1]
        for p in reversed(parts[:-1]):
            t = mk_app(PAIR, (p, t))
        return t
    if kind == "app":
        fname, args = ast[1], ast[2]
        sym = _FUNS.get(fname) or user_funs.get(fname)
        if sym is None:
            raise ParseError(f"unknown function symbol {fname!r}")
        if sym.ac:
            return mk_app(sym, [_elab(a, sym.arg_sorts[0], env, user_funs, public_vars)
                                for a in args])
        if len(args) != sym.arity:
            raise ParseError(f"{fname} expects {sym.arity} arguments")
        return mk_app(
            sym, [_elab(a, s, env, user_funs, public_vars) for a, s in zip(args, sym.arg_sorts)]
        )
    if kind == "name":
        marker, ident, sort = ast[1], ast[2], ast[3]
        if sort is None:
            if marker == "~":
                # fresh names are FrE in exponent position, Fresh elsewhere
                if expected in (Sort.E, Sort.FRE, Sort.VARE):
                    sort = Sort.FRE
                elif expected in (Sort.G, Sort.PUBG):
                    raise SortError(f"fresh name ~{ident} cannot have sort G")
                else:
                    sort = Sort.FRESH
            else:
                sort = Sort.PUBG if expected in (Sort.G, Sort.PUBG) else Sort.PUBLIC
        if public_vars and marker == "$" and sort == Sort.PUBLIC:
            # rule patterns follow the Tamarin convention: $x is a variable
            return Var(ident, Sort.PUBLIC)
        return Name(ident, sort)
    if kind == "var":
        ident, sort = ast[1], ast[2]
        if ident in _CONSTS and sort is None:
            return _CONSTS[ident]
        if ident == "g" and sort in (None, Sort.PUBG):
            return G
        if sort is None:
            sort = env.get(ident)
        if sort is None:
            sort = expected
        return Var(ident, sort)
    raise ParseError(f"bad ast node {kind!r}")


def parse_term(
    text: str,
    sort_env: Optional[dict[str, Sort]] = None,
    expected: Sort = Sort.MSG,
    user_funs: Optional[dict[str, FunctionSymbol]] = None,
    public_vars: bool = False,
) -> Term:
    """Parse a well-sorted AC-canonical term from text."""
    p = _P(tokenize(text), text)
    ast = p.sum()
    if p.peek() is not None:
        raise ParseError(f"trailing input at {p.peek().text!r} in {text!r}")
    return _elab(ast, expected, sort_env or {}, user_funs or {}, public_vars)
