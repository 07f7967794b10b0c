"""Parser for .fdh protocol model files.

Tamarin-flavored surface syntax:

    theory Name
    begin
    builtins: DH-multiplication, symmetric-encryption, pairing
    functions: f/2, h/1
    rule Name:
      let v = term in
      [ premises ] --[ actions ]-> [ conclusions ]
    lemma Name: exists-trace "formula"
    restriction Name: "formula"
    end

Comments run from // to end of line or between /* and */.
"""

from __future__ import annotations

import re
from typing import Optional

from .model import (
    Fact,
    FConn,
    FEq,
    FFact,
    FFalse,
    Formula,
    FQuant,
    FTime,
    Lemma,
    Protocol,
    Restriction,
    Rule,
    WellformednessError,
)
from .parser import ParseError, Tok, _P, parse_term, tokenize
from .rewrite import normalize
from .sorts import Sort, sort_leq, sort_of_name
from .terms import (
    App,
    EXP,
    FunctionSymbol,
    G,
    Name,
    Subst,
    Term,
    Var,
    apply_subst,
    mk_app,
    variables,
)

KEYWORDS = {"theory", "begin", "end", "builtins", "functions", "rule", "lemma",
            "restriction", "exists-trace", "let", "in"}

_COMMENT_RE = re.compile(r"//[^\n]*|/\*.*?\*/", re.S)
_STRING_RE = re.compile(r'"([^"]*)"')


def _strip_comments(text: str) -> str:
    return _COMMENT_RE.sub(" ", text)


class _ModelScanner:
    """Line-oriented scanner over the declaration structure."""

    def __init__(self, text: str):
        self.text = _strip_comments(text)
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek_word(self) -> Optional[str]:
        self.skip_ws()
        m = re.match(r"[A-Za-z_][A-Za-z0-9_\-]*", self.text[self.pos:])
        return m.group(0) if m else None

    def word(self) -> str:
        self.skip_ws()
        m = re.match(r"[A-Za-z_][A-Za-z0-9_\-]*", self.text[self.pos:])
        if not m:
            raise ParseError(f"expected a word at: {self.text[self.pos:self.pos + 30]!r}")
        self.pos += m.end()
        return m.group(0)

    def expect(self, lit: str):
        self.skip_ws()
        if not self.text.startswith(lit, self.pos):
            raise ParseError(
                f"expected {lit!r} at: {self.text[self.pos:self.pos + 30]!r}"
            )
        self.pos += len(lit)

    def at(self, lit: str) -> bool:
        self.skip_ws()
        return self.text.startswith(lit, self.pos)

    def until(self, stops: tuple[str, ...]) -> str:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text):
            for s in stops:
                if self.text.startswith(s, self.pos):
                    return self.text[start:self.pos]
            self.pos += 1
        return self.text[start:]

    def string(self) -> str:
        self.skip_ws()
        m = _STRING_RE.match(self.text, self.pos)
        if not m:
            raise ParseError(f"expected a quoted formula at: {self.text[self.pos:self.pos + 30]!r}")
        self.pos = m.end()
        return m.group(1)

    def eof(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)


def _parse_fact_list(text: str, env: dict[str, Sort],
                     user_funs: dict[str, FunctionSymbol],
                     lets: dict[str, Term]) -> list[Fact]:
    text = text.strip()
    if not text:
        return []
    facts = []
    depth = 0
    cur = ""
    parts = []
    for ch in text:
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
            continue
        if ch in "(<[":
            depth += 1
        if ch in ")>]":
            depth -= 1
        cur += ch
    if cur.strip():
        parts.append(cur)
    for part in parts:
        part = part.strip()
        if not part:
            continue
        persistent = part.startswith("!")
        if persistent:
            part = part[1:]
        m = re.match(r"([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)$", part, re.S)
        if not m:
            raise ParseError(f"bad fact: {part!r}")
        name, argtext = m.group(1), m.group(2)
        args = _split_args(argtext)
        terms = []
        for a in args:
            t = parse_term(a, sort_env=env, user_funs=user_funs, public_vars=True)
            t = _inline_lets(t, lets)
            _record_sorts(t, env)
            terms.append(t)
        if name in ("K",):
            persistent = True
        if name in ("In", "Out", "Fr", "K") and len(terms) != 1:
            raise ParseError(f"{name} takes exactly one argument")
        facts.append(Fact(name, tuple(terms), persistent))
    return facts


def _split_args(text: str) -> list[str]:
    out = []
    depth = 0
    cur = ""
    for ch in text:
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
            continue
        if ch in "(<[":
            depth += 1
        if ch in ")>]":
            depth -= 1
        cur += ch
    if cur.strip():
        out.append(cur)
    return [c.strip() for c in out if c.strip()]


def _record_sorts(t: Term, env: dict[str, Sort]):
    for v in variables(t):
        if v.sort != Sort.MSG:
            prev = env.get(v.name)
            if prev is None or sort_leq(v.sort, prev):
                env[v.name] = v.sort
            elif not sort_leq(prev, v.sort):
                raise WellformednessError(
                    f"variable {v.name} used at sorts {prev.value} and {v.sort.value}"
                )


def _inline_lets(t: Term, lets: dict[str, Term]) -> Term:
    if not lets:
        return t
    bind = {}
    for v in variables(t):
        if v.name in lets:
            bind[v] = lets[v.name]
    if not bind:
        return t
    return apply_subst(Subst.of(bind), t)


def _check_c1(rule: Rule) -> list[str]:
    """C1 lint: every G-sorted subterm should be g^e or a product of such."""
    from .terms import subterms

    warnings = []
    for f in rule.facts():
        for a in f.args:
            for s in subterms(a):
                if isinstance(s, Var) and s.sort == Sort.G:
                    warnings.append(
                        f"rule {rule.name}: bare G variable {s.name} (write g^e)"
                    )
    return warnings


def parse_model(text: str) -> Protocol:
    sc = _ModelScanner(text)
    sc.expect("theory")
    name = sc.word()
    sc.expect("begin")
    rules: list[Rule] = []
    lemmas: list[Lemma] = []
    restrictions: list[Restriction] = []
    builtins: tuple[str, ...] = ()
    user_funs: dict[str, FunctionSymbol] = {}
    warnings: list[str] = []
    while not sc.eof():
        w = sc.peek_word()
        if w == "end":
            sc.word()
            break
        if w == "builtins":
            sc.word()
            sc.expect(":")
            line = sc.until(("\n",))
            builtins = tuple(b.strip() for b in line.split(",") if b.strip())
            continue
        if w == "functions":
            sc.word()
            sc.expect(":")
            line = sc.until(("\n",))
            for decl in line.split(","):
                decl = decl.strip()
                if not decl:
                    continue
                m = re.match(r"([A-Za-z_][A-Za-z0-9_]*)\s*/\s*(\d+)$", decl)
                if not m:
                    raise ParseError(f"bad function declaration {decl!r}")
                fname, ar = m.group(1), int(m.group(2))
                user_funs[fname] = FunctionSymbol(
                    fname, ar, (Sort.MSG,) * ar, Sort.MSG
                )
            continue
        if w == "rule":
            sc.word()
            rname = sc.word()
            sc.expect(":")
            env: dict[str, Sort] = {}
            lets: dict[str, Term] = {}
            if sc.peek_word() == "let":
                sc.word()
                done = False
                while not done and sc.peek_word() != "in":
                    vname = sc.word()
                    sc.expect("=")
                    ttext = sc.until(("\n",)).strip()
                    # "in" may share the binding's line
                    if ttext.endswith(" in") or ttext == "in":
                        ttext = ttext[:-3].strip()
                        done = True
                    # successive let bindings may inline earlier ones
                    t = parse_term(ttext, sort_env=env, user_funs=user_funs, public_vars=True)
                    t = _inline_lets(t, lets)
                    _record_sorts(t, env)
                    lets[vname] = t
                if not done:
                    sc.word()  # consume "in"
            sc.expect("[")
            prems = _parse_fact_list(sc.until(("]",)), env, user_funs, lets)
            sc.expect("]")
            if sc.at("-->"):
                sc.expect("-->")
                acts: list[Fact] = []
            else:
                sc.expect("--[")
                acts = _parse_fact_list(sc.until(("]->",)), env, user_funs, lets)
                sc.expect("]->")
            sc.expect("[")
            concs = _parse_fact_list(sc.until(("]",)), env, user_funs, lets)
            sc.expect("]")
            rule = Rule(rname, tuple(prems), tuple(acts), tuple(concs))
            _check_wellformed(rule)
            warnings.extend(_check_c1(rule))
            rules.append(rule)
            continue
        if w == "lemma":
            sc.word()
            lname = sc.word()
            sc.expect(":")
            mode = "all_traces"
            if sc.peek_word() == "exists-trace":
                sc.word()
                mode = "exists_trace"
            formula = parse_formula(sc.string(), user_funs)
            lemmas.append(Lemma(lname, mode, formula))
            continue
        if w == "restriction":
            sc.word()
            rname = sc.word()
            sc.expect(":")
            formula = parse_formula(sc.string(), user_funs)
            restrictions.append(Restriction(rname, formula))
            continue
        raise ParseError(f"unexpected declaration {w!r}")
    return Protocol(name, rules, lemmas, restrictions, builtins, warnings)


def _check_wellformed(rule: Rule):
    bound: set[Var] = set()
    for f in rule.premises:
        for a in f.args:
            bound |= variables(a)
    for f in rule.premises:
        if f.name == "Fr":
            v = f.args[0]
            if not (isinstance(v, Var) and v.sort in (Sort.FRESH, Sort.FRE)):
                raise WellformednessError(
                    f"rule {rule.name}: Fr takes a Fresh/FrE variable, got {v}"
                )
    for f in list(rule.conclusions) + list(rule.actions):
        for a in f.args:
            for v in variables(a):
                if v in bound:
                    continue
                if v.sort in (Sort.PUBLIC, Sort.PUBG):
                    continue
                raise WellformednessError(
                    f"rule {rule.name}: variable {v.name}:{v.sort.value} not bound "
                    f"by any premise"
                )


# --- lemma formulas ----------------------------------------------------------------


class _FP(_P):
    def formula(self) -> Formula:
        return self._imp()

    def _imp(self) -> Formula:
        lhs = self._disj()
        if self.at("="):
            # allow ==> operator
            save = self.i
            t1 = self.next()
            if self.at("="):
                t2 = self.next()
                if self.at(">"):
                    self.next()
                    rhs = self._imp()
                    return FConn("imp", (lhs, rhs))
            self.i = save
        return lhs

    def _disj(self) -> Formula:
        parts = [self._conj()]
        while self.at("|"):
            self.next()
            parts.append(self._conj())
        return parts[0] if len(parts) == 1 else FConn("or", tuple(parts))

    def _conj(self) -> Formula:
        parts = [self._unary()]
        while self.at("&"):
            self.next()
            parts.append(self._unary())
        return parts[0] if len(parts) == 1 else FConn("and", tuple(parts))

    def _unary(self) -> Formula:
        t = self.peek()
        if t is None:
            raise ParseError("unexpected end of formula")
        if t.kind == "ident" and t.text in ("All", "Ex"):
            self.next()
            kind = "all" if t.text == "All" else "ex"
            vars_: list[Var] = []
            while not self.at("."):
                vars_.append(self._qvar())
            self.expect(".")
            body = self._imp()
            return FQuant(kind, tuple(vars_), body)
        if t.kind == "ident" and t.text == "not":
            self.next()
            return FConn("not", (self._unary(),))
        if t.text == "(":
            self.next()
            f = self._imp()
            self.expect(")")
            return f
        if t.kind == "ident" and t.text == "F" and not self._lookahead_call():
            self.next()
            return FFalse()
        if t.kind == "ident" and t.text == "T" and not self._lookahead_call():
            self.next()
            return FConn("not", (FFalse(),))
        return self._atom()

    def _lookahead_call(self) -> bool:
        nxt = self.toks[self.i + 1] if self.i + 1 < len(self.toks) else None
        return nxt is not None and nxt.text == "("

    def _qvar(self) -> Var:
        if self.at("#"):
            self.next()
            name = self.next()
            return Var(name.text, Sort.TEMPORAL)
        name = self.next()
        if name.kind != "ident":
            raise ParseError(f"bad quantified variable {name.text!r}")
        if self.at(":"):
            self.next()
            s = self.next()
            return Var(name.text, sort_of_name(s.text))
        return Var(name.text, Sort.MSG)

    def _timepoint(self) -> Term:
        if self.at("#"):
            self.next()
        name = self.next()
        return Var(name.text, Sort.TEMPORAL)

    def _atom(self) -> Formula:
        if self.at("#"):
            i = self._timepoint()
            if self.at("<"):
                self.next()
                return FTime("less", i, self._timepoint())
            self.expect("=")
            return FTime("eq", i, self._timepoint())
        # fact atom: Name(args)@tp, or a term (in)equality
        save = self.i
        t = self.peek()
        if t is not None and t.kind == "ident":
            name = self.next()
            if self.at("("):
                self.next()
                depth = 1
                args_toks: list[Tok] = []
                while depth > 0:
                    tok = self.next()
                    if tok.text == "(" or tok.text == "<":
                        depth += 1
                    elif tok.text == ")" or tok.text == ">":
                        depth -= 1
                        if depth == 0:
                            break
                    args_toks.append(tok)
                if self.at("@"):
                    self.next()
                    tp = self._timepoint()
                    argsrc = _render_tokens(args_toks)
                    args = [
                        parse_term(a, sort_env=self.sort_env, user_funs=self.user_funs)
                        for a in _split_args(argsrc)
                    ]
                    return FFact(Fact(name.text, tuple(args)), tp)
            self.i = save
        lhs_src, rhs_src = self._split_equality()
        lhs = parse_term(lhs_src, sort_env=self.sort_env, user_funs=self.user_funs)
        rhs = parse_term(rhs_src, sort_env=self.sort_env, user_funs=self.user_funs)
        return FEq(lhs, rhs)

    def _split_equality(self) -> tuple[str, str]:
        depth = 0
        lhs: list[Tok] = []
        while True:
            tok = self.next()
            if tok.text in ("(", "<") and depth >= 0:
                depth += 1
            elif tok.text in (")", ">"):
                depth -= 1
            elif tok.text == "=" and depth == 0:
                break
            lhs.append(tok)
        rhs: list[Tok] = []
        while self.peek() is not None and not self.peek().text in ("&", "|", ")", "="):
            rhs.append(self.next())
        return _render_tokens(lhs), _render_tokens(rhs)


def _render_tokens(toks: list[Tok]) -> str:
    out = []
    for t in toks:
        out.append(t.text)
    return " ".join(out).replace(" : ", ":").replace("~ ", "~").replace("$ ", "$")


def parse_formula(text: str, user_funs: Optional[dict] = None) -> Formula:
    toks = tokenize(text)
    p = _FP(toks, text)
    p.sort_env = {}
    p.user_funs = user_funs or {}
    f = p.formula()
    if p.peek() is not None:
        raise ParseError(f"trailing input in formula at {p.peek().text!r}: {text!r}")
    return _bind_formula_sorts(f)


def _bind_formula_sorts(f: Formula) -> Formula:
    """Propagate variable sorts found in fact atoms to their quantifiers."""
    sorts: dict[str, Sort] = {}

    def scan(g: Formula):
        if isinstance(g, FQuant):
            scan(g.body)
        elif isinstance(g, FConn):
            for p in g.parts:
                scan(p)
        elif isinstance(g, FFact):
            for a in g.fact.args:
                for v in variables(a):
                    if v.sort != Sort.MSG:
                        sorts[v.name] = v.sort
        elif isinstance(g, FEq):
            for v in variables(g.lhs) | variables(g.rhs):
                if v.sort != Sort.MSG:
                    sorts[v.name] = v.sort

    def fix_term(t: Term) -> Term:
        bind = {}
        for v in variables(t):
            if v.sort == Sort.MSG and v.name in sorts:
                bind[v] = Var(v.name, sorts[v.name])
        if not bind:
            return t
        return apply_subst(Subst.of(bind), t)

    def fix(g: Formula) -> Formula:
        if isinstance(g, FQuant):
            vs = tuple(
                Var(v.name, sorts.get(v.name, v.sort)) if v.sort == Sort.MSG else v
                for v in g.vars
            )
            return FQuant(g.kind, vs, fix(g.body))
        if isinstance(g, FConn):
            return FConn(g.kind, tuple(fix(p) for p in g.parts))
        if isinstance(g, FFact):
            return FFact(g.fact.map_args(fix_term), g.tp)
        if isinstance(g, FEq):
            return FEq(fix_term(g.lhs), fix_term(g.rhs))
        return g

    scan(f)
    return fix(f)
