"""AC-canonical order-sorted terms and substitutions.

Terms are immutable.  Arguments of the three AC symbols (group
multiplication, exponent multiplication, exponent addition) are kept
flattened and sorted under a fixed total order, so equality modulo AC is
structural equality.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from .sorts import NAME_SORTS, Sort, is_dh_sort, sort_leq


class SortError(Exception):
    pass


@dataclass(frozen=True)
class FunctionSymbol:
    name: str
    arity: int
    arg_sorts: tuple[Sort, ...]
    result_sort: Sort
    ac: bool = False
    origin: str = "user"  # dh_builtin | user

    def __repr__(self):
        return f"<{self.name}/{self.arity}>"


# --- the fixed DH signature -------------------------------------------------

GMUL = FunctionSymbol("gmul", 2, (Sort.G, Sort.G), Sort.G, ac=True, origin="dh_builtin")
GINV = FunctionSymbol("ginv", 1, (Sort.G,), Sort.G, origin="dh_builtin")
EXP = FunctionSymbol("exp", 2, (Sort.G, Sort.E), Sort.G, origin="dh_builtin")
ADD = FunctionSymbol("add", 2, (Sort.E, Sort.E), Sort.E, ac=True, origin="dh_builtin")
MUL = FunctionSymbol("mul", 2, (Sort.E, Sort.E), Sort.E, ac=True, origin="dh_builtin")
NEG = FunctionSymbol("neg", 1, (Sort.E,), Sort.E, origin="dh_builtin")
INV = FunctionSymbol("inv", 1, (Sort.E,), Sort.E, origin="dh_builtin")
MU = FunctionSymbol("mu", 1, (Sort.G,), Sort.E, origin="dh_builtin")
EG_SYM = FunctionSymbol("eG", 0, (), Sort.G, origin="dh_builtin")
ZERO_SYM = FunctionSymbol("zero", 0, (), Sort.E, origin="dh_builtin")
ONE_SYM = FunctionSymbol("one", 0, (), Sort.E, origin="dh_builtin")

DH_SYMBOLS = (GMUL, GINV, EXP, ADD, MUL, NEG, INV, MU, EG_SYM, ZERO_SYM, ONE_SYM)

# built-in user-theory symbols (pairing and symmetric encryption)
PAIR = FunctionSymbol("pair", 2, (Sort.MSG, Sort.MSG), Sort.MSG)
FST = FunctionSymbol("fst", 1, (Sort.MSG,), Sort.MSG)
SND = FunctionSymbol("snd", 1, (Sort.MSG,), Sort.MSG)
SENC = FunctionSymbol("senc", 2, (Sort.MSG, Sort.MSG), Sort.MSG)
SDEC = FunctionSymbol("sdec", 2, (Sort.MSG, Sort.MSG), Sort.MSG)

BUILTIN_USER_SYMBOLS = (PAIR, FST, SND, SENC, SDEC)


class Term:
    """Base class; concrete terms are Var, Name or App."""

    sort: Sort

    def __lt__(self, other: "Term") -> bool:
        return term_key(self) < term_key(other)


@dataclass(frozen=True, order=False)
class Var(Term):
    name: str
    sort: Sort = Sort.MSG

    def __str__(self):
        return render(self)


@dataclass(frozen=True, order=False)
class Name(Term):
    name: str
    sort: Sort = Sort.FRESH

    def __post_init__(self):
        if self.sort not in NAME_SORTS:
            raise SortError(f"names cannot have sort {self.sort.value}")

    def __str__(self):
        return render(self)


@dataclass(frozen=True, order=False)
class App(Term):
    sym: FunctionSymbol
    args: tuple[Term, ...] = ()

    @property
    def sort(self) -> Sort:  # type: ignore[override]
        return self.sym.result_sort

    def __str__(self):
        return render(self)


def _memo_hash_app(self):
    h = getattr(self, "_h", None)
    if h is None:
        h = hash((self.sym.name, self.args))
        object.__setattr__(self, "_h", h)
    return h


def _memo_hash_var(self):
    h = getattr(self, "_h", None)
    if h is None:
        h = hash(("v", self.name, self.sort))
        object.__setattr__(self, "_h", h)
    return h


def _memo_hash_name(self):
    h = getattr(self, "_h", None)
    if h is None:
        h = hash(("n", self.name, self.sort))
        object.__setattr__(self, "_h", h)
    return h


def _fast_eq_app(self, other):
    if self is other:
        return True
    if other.__class__ is not App:
        return NotImplemented
    if hash(self) != hash(other):
        return False
    return self.sym == other.sym and self.args == other.args


App.__hash__ = _memo_hash_app
Var.__hash__ = _memo_hash_var
Name.__hash__ = _memo_hash_name
App.__eq__ = _fast_eq_app

G = Name("g", Sort.PUBG)  # the fixed group generator
EG = App(EG_SYM)
ZERO = App(ZERO_SYM)
ONE = App(ONE_SYM)


def term_key(t: Term):
    """Total order key: (variant rank, symbol/name, sort, args)."""
    if isinstance(t, Name):
        return (0, t.name, t.sort.value)
    if isinstance(t, Var):
        return (1, t.name, t.sort.value)
    return (2, t.sym.name, t.sym.result_sort.value) + tuple(
        term_key(a) for a in t.args
    )


def mk_app(sym: FunctionSymbol, args: Iterable[Term]) -> Term:
    """Well-sorted, AC-canonical application."""
    args = tuple(args)
    if sym.ac:
        flat: list[Term] = []
        for a in args:
            if isinstance(a, App) and a.sym == sym:
                flat.extend(a.args)
            else:
                flat.append(a)
        if len(flat) < 2:
            raise SortError(f"{sym.name} needs at least 2 arguments")
        for a in flat:
            if not sort_leq(a.sort, sym.arg_sorts[0]):
                raise SortError(
                    f"{sym.name} expects {sym.arg_sorts[0].value}, got "
                    f"{a} : {a.sort.value}"
                )
        return App(sym, tuple(sorted(flat, key=term_key)))
    if len(args) != sym.arity:
        raise SortError(f"{sym.name} expects {sym.arity} arguments, got {len(args)}")
    for a, want in zip(args, sym.arg_sorts):
        if not sort_leq(a.sort, want):
            raise SortError(
                f"{sym.name} expects {want.value}, got {a} : {a.sort.value}"
            )
    return App(sym, args)


def ac_canonical(t: Term) -> Term:
    """Re-canonicalize a term bottom-up (flatten + sort AC arguments)."""
    if not isinstance(t, App):
        return t
    return mk_app(t.sym, [ac_canonical(a) for a in t.args])


def ac_equal(a: Term, b: Term) -> bool:
    """Equality modulo AC of canonical terms."""
    return a == b


def subterms(t: Term) -> Iterator[Term]:
    yield t
    if isinstance(t, App):
        for a in t.args:
            yield from subterms(a)


def variables(t: Term) -> set[Var]:
    return {s for s in subterms(t) if isinstance(s, Var)}


def names(t: Term) -> set[Name]:
    return {s for s in subterms(t) if isinstance(s, Name)}


def is_dh_term(t: Term) -> bool:
    return is_dh_sort(t.sort)


def exp(base: Term, e: Term) -> Term:
    return mk_app(EXP, (base, e))


def gmul(*ts: Term) -> Term:
    return mk_app(GMUL, ts)


def add(*ts: Term) -> Term:
    return mk_app(ADD, ts)


def mul(*ts: Term) -> Term:
    return mk_app(MUL, ts)


def neg(t: Term) -> Term:
    return mk_app(NEG, (t,))


def inv(t: Term) -> Term:
    return mk_app(INV, (t,))


def ginv(t: Term) -> Term:
    return mk_app(GINV, (t,))


def mu(t: Term) -> Term:
    return mk_app(MU, (t,))


def pair(*ts: Term) -> Term:
    if len(ts) == 1:
        return ts[0]
    return mk_app(PAIR, (ts[0], pair(*ts[1:])))


# --- substitutions ----------------------------------------------------------

def _image_bound(v: Var) -> Sort:
    # VarE unknowns are placeholders solved algebraically; they accept any
    # E-sorted image, same as plain E variables.
    if v.sort == Sort.VARE:
        return Sort.E
    return v.sort


@dataclass(frozen=True)
class Subst:
    """Sort-respecting substitution, idempotent after normalization."""

    bindings: tuple[tuple[Var, Term], ...] = ()

    @staticmethod
    def of(mapping: dict[Var, Term] | Iterable[tuple[Var, Term]]) -> "Subst":
        items = mapping.items() if isinstance(mapping, dict) else mapping
        out = []
        for v, t in items:
            if t == v:
                continue
            if not sort_leq(t.sort, _image_bound(v)):
                raise SortError(
                    f"cannot bind {v} : {v.sort.value} to {t} : {t.sort.value}"
                )
            out.append((v, t))
        return Subst(tuple(sorted(out, key=lambda b: term_key(b[0]))))

    def as_dict(self) -> dict[Var, Term]:
        return dict(self.bindings)

    @property
    def domain(self) -> set[Var]:
        return {v for v, _ in self.bindings}

    def get(self, v: Var) -> Optional[Term]:
        for w, t in self.bindings:
            if w == v:
                return t
        return None

    def __call__(self, t: Term) -> Term:
        return apply_subst(self, t)

    def compose(self, other: "Subst") -> "Subst":
        """self then other: (self.compose(other))(t) == other(self(t))."""
        out: dict[Var, Term] = {}
        for v, t in self.bindings:
            out[v] = apply_subst(other, t)
        for v, t in other.bindings:
            if v not in out:
                out[v] = t
        return Subst.of(out)

    def restrict(self, keep) -> "Subst":
        return Subst(tuple((v, t) for v, t in self.bindings if keep(v)))

    def is_renaming(self) -> bool:
        imgs = [t for _, t in self.bindings]
        return all(isinstance(t, Var) for t in imgs) and len(set(imgs)) == len(imgs)

    def __str__(self):
        inner = ", ".join(f"{v} -> {t}" for v, t in self.bindings)
        return "{" + inner + "}"


def apply_subst(s: Subst, t: Term) -> Term:
    """Homomorphic application followed by AC re-canonicalization."""
    if isinstance(t, Var):
        img = s.get(t)
        return img if img is not None else t
    if isinstance(t, Name):
        return t
    changed = False
    new_args = []
    for a in t.args:
        na = apply_subst(s, a)
        changed = changed or (na is not a)
        new_args.append(na)
    if not changed:
        return t
    return mk_app(t.sym, new_args)


# --- fresh-name source ------------------------------------------------------

class FreshSource:
    """Session-scoped counter for fresh variables and names (thread-safe)."""

    def __init__(self, seed: int = 0):
        self._n = itertools.count(seed)
        self._lock = threading.Lock()

    def _next(self) -> int:
        with self._lock:
            return next(self._n)

    def var(self, prefix: str, sort: Sort) -> Var:
        return Var(f"{prefix}{self._next()}", sort)

    def name(self, prefix: str, sort: Sort) -> Name:
        return Name(f"{prefix}{self._next()}", sort)


# --- rendering --------------------------------------------------------------

def _needs_parens(t: Term, ctx: int, prec: int) -> bool:
    return prec < ctx


_PREC = {"add": 1, "neg": 2, "mul": 3, "gmul": 4, "exp": 5}


def render(t: Term, ctx: int = 0) -> str:
    if isinstance(t, Var):
        base = t.name
        if t.sort != Sort.MSG:
            base += f":{t.sort.value}"
        return base
    if isinstance(t, Name):
        if t.sort == Sort.PUBG:
            return t.name if t.name == "g" else f"${t.name}:PubG"
        if t.sort == Sort.FRESH:
            return f"~{t.name}"
        if t.sort == Sort.FRE:
            return f"~{t.name}:FrE"
        return f"${t.name}"
    sym = t.sym
    if sym == EG_SYM:
        return "eG"
    if sym == ZERO_SYM:
        return "0"
    if sym == ONE_SYM:
        return "1"
    if sym == PAIR:
        parts = []
        cur: Term = t
        while isinstance(cur, App) and cur.sym == PAIR:
            parts.append(cur.args[0])
            cur = cur.args[1]
        parts.append(cur)
        return "<" + ", ".join(render(p) for p in parts) + ">"
    if sym.name in ("inv", "mu", "ginv", "fst", "snd"):
        return f"{sym.name}({render(t.args[0])})"
    if sym == NEG:
        p = _PREC["neg"]
        s = f"-{render(t.args[0], p + 1)}"
        return f"({s})" if _needs_parens(t, ctx, p) else s
    if sym in (ADD, MUL, GMUL, EXP):
        opch = {"add": " + ", "mul": "*", "gmul": ".", "exp": "^"}[sym.name]
        p = _PREC[sym.name]
        inner = opch.join(render(a, p + 1) for a in t.args)
        return f"({inner})" if _needs_parens(t, ctx, p) else inner
    return f"{sym.name}(" + ", ".join(render(a) for a in t.args) + ")"
