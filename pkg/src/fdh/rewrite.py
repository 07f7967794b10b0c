"""Normalization modulo AC for the Diffie-Hellman rewrite system.

Exponent terms normalize to sums of signed irreducible monomials; group
terms normalize to products of root factors g^m / ginv(g^m).  Instead of
stepwise redex rewriting, terms are evaluated bottom-up into canonical
normal-form structures (the evaluation implements each oriented rule, and
the rule system is convergent, so the result is the unique normal form).

inv applied to a sum (or to 0) has no rewrite rule; such terms are kept as
opaque exponent atoms, outside the Theorem-1 grammar but irreducible.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Callable, Iterable, Optional

from .sorts import Sort, sort_leq
from .terms import (
    ADD,
    App,
    EG,
    EG_SYM,
    EXP,
    FST,
    GINV,
    GMUL,
    INV,
    MU,
    MUL,
    NEG,
    Name,
    ONE,
    ONE_SYM,
    PAIR,
    SDEC,
    SENC,
    SND,
    Term,
    Var,
    ZERO,
    ZERO_SYM,
    mk_app,
    term_key,
)


class NotNormalForm(Exception):
    pass


class DivisionByZero(Exception):
    pass


# monomial: sorted ((atom, exponent), ...) with exponent != 0
Mono = tuple[tuple[Term, int], ...]
# exponent normal form: sorted ((monomial, count), ...) with count != 0
ENF = tuple[tuple[Mono, int], ...]
# group normal form: sorted (((base, monomial), count), ...) with count != 0
GNF = tuple[tuple[tuple[Term, Mono], int], ...]

EMPTY_MONO: Mono = ()

_steps = 0  # evaluation step counter, a proxy for rewrite-step counts


def reset_step_counter() -> None:
    global _steps
    _steps = 0


def step_count() -> int:
    return _steps


def _tick(n: int = 1) -> None:
    global _steps
    _steps += n


def _merge_counts(items) -> dict:
    out: dict = {}
    for k, n in items:
        out[k] = out.get(k, 0) + n
        if out[k] == 0:
            del out[k]
    return out


def mono_mul(a: Mono, b: Mono) -> Mono:
    merged = _merge_counts(list(a) + list(b))
    return tuple(sorted(merged.items(), key=lambda kv: term_key(kv[0])))


def mono_inv(a: Mono) -> Mono:
    return tuple((t, -k) for t, k in a)


def mono_of_atom(t: Term, k: int = 1) -> Mono:
    return ((t, k),)


def _sorted_enf(counts: dict[Mono, int]) -> ENF:
    return tuple(sorted(counts.items()))


def _sorted_gnf(counts: dict[tuple[Term, Mono], int]) -> GNF:
    return tuple(sorted(counts.items()))


ENF_ZERO: ENF = ()
ENF_ONE: ENF = ((EMPTY_MONO, 1),)


def enf_add(*es: ENF) -> ENF:
    _tick()
    return _sorted_enf(_merge_counts(p for e in es for p in e))


def enf_neg(e: ENF) -> ENF:
    _tick()
    return tuple((m, -n) for m, n in e)


def enf_mul(a: ENF, b: ENF) -> ENF:
    _tick(len(a) * len(b) + 1)
    # u * inv(u) -> 1 for an opaque inverted sum against the sum itself
    for x, y in ((a, b), (b, a)):
        if (
            len(y) == 1
            and y[0][1] == 1
            and len(y[0][0]) == 1
            and y[0][0][0][1] == 1
            and isinstance(y[0][0][0][0], App)
            and y[0][0][0][0].sym == INV
            and enf_of(y[0][0][0][0].args[0]) == x
        ):
            return ENF_ONE
    out: dict[Mono, int] = {}
    for m1, n1 in a:
        for m2, n2 in b:
            m = mono_mul(m1, m2)
            out[m] = out.get(m, 0) + n1 * n2
            if out[m] == 0:
                del out[m]
    return _sorted_enf(out)


def enf_inv(e: ENF) -> ENF:
    _tick()
    if len(e) == 1 and abs(e[0][1]) == 1:
        m, n = e[0]
        return ((mono_inv(m), n),)
    # inv of 0 or of a multi-monomial sum is irreducible: opaque atom
    return ((mono_of_atom(mk_app(INV, (term_of_enf(e),))), 1),)


def gnf_mul(*gs: GNF) -> GNF:
    _tick()
    return _sorted_gnf(_merge_counts(p for g in gs for p in g))


def gnf_inv(g: GNF) -> GNF:
    _tick()
    return tuple((f, -n) for f, n in g)


def gnf_exp(g: GNF, e: ENF) -> GNF:
    _tick(len(g) * len(e) + 1)
    out: dict[tuple[Term, Mono], int] = {}
    for (base, m), n in g:
        for m2, n2 in e:
            f = (base, mono_mul(m, m2))
            out[f] = out.get(f, 0) + n * n2
            if out[f] == 0:
                del out[f]
    return _sorted_gnf(out)


def enf_of(t: Term) -> ENF:
    """Evaluate an E-sorted term to its exponent normal form."""
    if isinstance(t, (Var, Name)):
        return ((mono_of_atom(t), 1),)
    if not isinstance(t, App):
        raise NotNormalForm(f"not an E term: {t}")
    sym = t.sym
    if sym == ZERO_SYM:
        return ENF_ZERO
    if sym == ONE_SYM:
        return ENF_ONE
    if sym == ADD:
        return enf_add(*[enf_of(a) for a in t.args])
    if sym == MUL:
        out = enf_of(t.args[0])
        for a in t.args[1:]:
            out = enf_mul(out, enf_of(a))
        return out
    if sym == NEG:
        return enf_neg(enf_of(t.args[0]))
    if sym == INV:
        return enf_inv(enf_of(t.args[0]))
    if sym == MU:
        return ((mono_of_atom(mk_app(MU, (normalize(t.args[0]),))), 1),)
    raise NotNormalForm(f"symbol {sym.name} is not E-sorted")


def gnf_of(t: Term) -> GNF:
    """Evaluate a G-sorted term to its group normal form."""
    if isinstance(t, (Var, Name)):
        return (((t, EMPTY_MONO), 1),)
    if not isinstance(t, App):
        raise NotNormalForm(f"not a G term: {t}")
    sym = t.sym
    if sym == EG_SYM:
        return ()
    if sym == GMUL:
        return gnf_mul(*[gnf_of(a) for a in t.args])
    if sym == GINV:
        return gnf_inv(gnf_of(t.args[0]))
    if sym == EXP:
        return gnf_exp(gnf_of(t.args[0]), enf_of(t.args[1]))
    raise NotNormalForm(f"symbol {sym.name} is not G-sorted")


def term_of_mono(m: Mono) -> Term:
    if not m:
        return ONE
    parts: list[Term] = []
    for atom, k in m:
        unit = atom if k > 0 else mk_app(INV, (atom,))
        parts.extend([unit] * abs(k))
    if len(parts) == 1:
        return parts[0]
    return mk_app(MUL, parts)


def term_of_enf(e: ENF) -> Term:
    if not e:
        return ZERO
    parts: list[Term] = []
    for m, n in e:
        unit = term_of_mono(m)
        if n < 0:
            unit = mk_app(NEG, (unit,))
        parts.extend([unit] * abs(n))
    if len(parts) == 1:
        return parts[0]
    return mk_app(ADD, parts)


def term_of_factor(base: Term, m: Mono, n: int) -> Term:
    unit = base if not m else mk_app(EXP, (base, term_of_mono(m)))
    if n < 0:
        unit = mk_app(GINV, (unit,))
    return unit


def term_of_gnf(g: GNF) -> Term:
    if not g:
        return EG
    parts: list[Term] = []
    for (base, m), n in g:
        parts.extend([term_of_factor(base, m, n)] * abs(n))
    if len(parts) == 1:
        return parts[0]
    return mk_app(GMUL, parts)


def normalize(t: Term) -> Term:
    """The unique (modulo AC) normal form of a well-sorted term."""
    if isinstance(t, (Var, Name)):
        return t
    if sort_leq(t.sort, Sort.E):
        return term_of_enf(enf_of(t))
    if sort_leq(t.sort, Sort.G):
        return term_of_gnf(gnf_of(t))
    assert isinstance(t, App)
    args = tuple(normalize(a) for a in t.args)
    # user-theory rules: pairing projections and symmetric decryption
    if t.sym == FST and isinstance(args[0], App) and args[0].sym == PAIR:
        return args[0].args[0]
    if t.sym == SND and isinstance(args[0], App) and args[0].sym == PAIR:
        return args[0].args[1]
    if (
        t.sym == SDEC
        and isinstance(args[0], App)
        and args[0].sym == SENC
        and args[0].args[1] == args[1]
    ):
        return args[0].args[0]
    return mk_app(t.sym, args)


def is_normal(t: Term) -> bool:
    return normalize(t) == t


def root_terms(t: Term) -> list[Term]:
    """Multiplicative factors (sort G) / additive summands (sort E) of a
    normal form; returned deduplicated in canonical order."""
    if not is_normal(t):
        raise NotNormalForm(f"not in normal form: {t}")
    if sort_leq(t.sort, Sort.G):
        g = gnf_of(t)
        return [term_of_factor(base, m, 1 if n > 0 else -1) for (base, m), n in g]
    if sort_leq(t.sort, Sort.E):
        e = enf_of(t)
        out = []
        for m, n in e:
            unit = term_of_mono(m)
            out.append(unit if n > 0 else mk_app(NEG, (unit,)))
        return out
    raise NotNormalForm(f"root terms need a DH-sorted term, got {t} : {t.sort.value}")


def is_root_term(t: Term) -> bool:
    return len(root_terms(t)) == 1


# --- Theorem-1 shape validation ----------------------------------------------

def _is_e_atom(t: Term) -> bool:
    if isinstance(t, Var) and sort_leq(t.sort, Sort.E):
        return True
    if isinstance(t, Name) and t.sort == Sort.FRE:
        return True
    if isinstance(t, App) and t.sym == MU:
        return True
    # irreducible inverted sum / inverted zero
    if isinstance(t, App) and t.sym == INV:
        return True
    return False


def check_shape(t: Term) -> bool:
    """Validate the normal-form grammar: E terms are sums of irreducible
    monomials, G terms are products of v / v^m root factors."""
    if sort_leq(t.sort, Sort.E):
        e = enf_of(t)
        return term_of_enf(e) == t and all(
            _is_e_atom(atom) for m, _ in e for atom, _ in m
        )
    if sort_leq(t.sort, Sort.G):
        g = gnf_of(t)
        if term_of_gnf(g) != t:
            return False
        for (base, m), _ in g:
            if not isinstance(base, (Var, Name)):
                return False
            if not all(_is_e_atom(atom) for atom, _ in m):
                return False
        return True
    return normalize(t) == t


# --- numeric soundness oracle -------------------------------------------------

class Assignment:
    """Total map from atoms to nonzero rationals; mu values are memoized by
    the numeric value of the argument, keeping the oracle independent of
    symbolic normalization."""

    def __init__(self, atom_values: dict[Term, Fraction], mu_salt: int = 7919):
        self.atom_values = dict(atom_values)
        self._mu_memo: dict[Fraction, Fraction] = {}
        self._mu_salt = mu_salt

    def atom(self, t: Term) -> Fraction:
        if t in self.atom_values:
            return Fraction(self.atom_values[t])
        if isinstance(t, Name) and t.sort == Sort.PUBG and t.name == "g":
            return Fraction(1)  # the generator itself carries exponent 1
        raise KeyError(f"no value assigned to atom {t}")

    def mu_value(self, arg_value: Fraction) -> Fraction:
        if arg_value not in self._mu_memo:
            k = len(self._mu_memo) + 1
            self._mu_memo[arg_value] = (
                Fraction(self._mu_salt, 1) + Fraction(k * k + 3, 2)
                + arg_value / (abs(arg_value) + 1)
            )
        return self._mu_memo[arg_value]


def eval_oracle(t: Term, rho: Assignment) -> Fraction:
    """Evaluate the exponent expression of t in Q (G terms evaluate to
    their total exponent)."""
    if isinstance(t, (Var, Name)):
        return rho.atom(t)
    assert isinstance(t, App)
    sym = t.sym
    if sym == ZERO_SYM:
        return Fraction(0)
    if sym == ONE_SYM:
        return Fraction(1)
    if sym == EG_SYM:
        return Fraction(0)
    if sym == ADD:
        return sum((eval_oracle(a, rho) for a in t.args), Fraction(0))
    if sym == MUL:
        out = Fraction(1)
        for a in t.args:
            out *= eval_oracle(a, rho)
        return out
    if sym == NEG:
        return -eval_oracle(t.args[0], rho)
    if sym == INV:
        v = eval_oracle(t.args[0], rho)
        if v == 0:
            raise DivisionByZero(f"inv of zero in {t}")
        return 1 / v
    if sym == MU:
        return rho.mu_value(eval_oracle(t.args[0], rho))
    if sym == GMUL:
        return sum((eval_oracle(a, rho) for a in t.args), Fraction(0))
    if sym == GINV:
        return -eval_oracle(t.args[0], rho)
    if sym == EXP:
        return eval_oracle(t.args[0], rho) * eval_oracle(t.args[1], rho)
    raise NotNormalForm(f"eval_oracle on non-DH symbol {sym.name}")
