"""Exact algebra over rational-function fields.

Exponent terms are interpreted as polynomials in the secret atoms whose
coefficients are polynomials in the solver unknowns over Q(leaked atoms).
Matching coefficients yields linear systems solved by exact Gaussian
elimination; pivots must carry a nonzero certificate (constants, hash
atoms, monomials in fresh atoms) because solutions are translated back
into symbolic substitutions and inverses of possibly-zero terms are not
allowed to appear.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

from .rewrite import enf_of, gnf_of, normalize, term_of_mono
from .sorts import Sort, sort_leq
from .terms import (
    ADD,
    App,
    FreshSource,
    INV,
    MU,
    MUL,
    NEG,
    Name,
    ONE,
    Subst,
    Term,
    Var,
    ZERO,
    apply_subst,
    mk_app,
    term_key,
    variables,
)


class AlgebraError(Exception):
    pass


class InvertSecret(AlgebraError):
    pass


class InvertPossiblyZero(AlgebraError):
    pass


class UnclassifiedAtom(AlgebraError):
    pass


class NoSolution(AlgebraError):
    pass


class NonlinearBeyondScope(AlgebraError):
    pass


class PivotNotProvablyNonzero(AlgebraError):
    pass


class SelfReferentialSolution(AlgebraError):
    pass


# --- multivariate polynomials over Q ------------------------------------------

# monomial: sorted ((symbol-term, exponent>0), ...)
PMono = tuple[tuple[Term, int], ...]
ONE_MONO: PMono = ()


def _pm_mul(a: PMono, b: PMono) -> PMono:
    out: dict[Term, int] = {}
    for t, k in itertools.chain(a, b):
        out[t] = out.get(t, 0) + k
        if out[t] == 0:
            del out[t]
    return tuple(sorted(out.items(), key=lambda kv: term_key(kv[0])))


def _pm_key(m: PMono):
    return (sum(k for _, k in m), tuple((term_key(t), k) for t, k in m))


@dataclass(frozen=True)
class Poly:
    terms: tuple[tuple[PMono, Fraction], ...] = ()

    @staticmethod
    def of(d: dict[PMono, Fraction]) -> "Poly":
        items = [(m, Fraction(c)) for m, c in d.items() if c != 0]
        return Poly(tuple(sorted(items, key=lambda kv: _pm_key(kv[0]))))

    @staticmethod
    def const(q) -> "Poly":
        q = Fraction(q)
        return Poly(((ONE_MONO, q),)) if q else Poly()

    @staticmethod
    def sym(t: Term, k: int = 1) -> "Poly":
        return Poly((((((t, k),)), Fraction(1)),))

    def as_dict(self) -> dict[PMono, Fraction]:
        return dict(self.terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def __add__(self, o: "Poly") -> "Poly":
        d = self.as_dict()
        for m, c in o.terms:
            d[m] = d.get(m, 0) + c
        return Poly.of(d)

    def __neg__(self) -> "Poly":
        return Poly(tuple((m, -c) for m, c in self.terms))

    def __sub__(self, o: "Poly") -> "Poly":
        return self + (-o)

    def __mul__(self, o: "Poly") -> "Poly":
        d: dict[PMono, Fraction] = {}
        for m1, c1 in self.terms:
            for m2, c2 in o.terms:
                m = _pm_mul(m1, m2)
                d[m] = d.get(m, 0) + c1 * c2
        return Poly.of(d)

    def scale(self, q: Fraction) -> "Poly":
        if q == 0:
            return Poly()
        return Poly(tuple((m, c * q) for m, c in self.terms))

    def symbols(self) -> set[Term]:
        return {t for m, _ in self.terms for t, _ in m}

    def leading(self) -> tuple[PMono, Fraction]:
        return self.terms[-1]

    @property
    def is_const(self) -> bool:
        return not self.terms or (len(self.terms) == 1 and self.terms[0][0] == ONE_MONO)

    def const_value(self) -> Fraction:
        if self.is_zero:
            return Fraction(0)
        assert self.is_const
        return self.terms[0][1]

    def __str__(self):
        if not self.terms:
            return "0"
        parts = []
        for m, c in self.terms:
            mono = "*".join(
                f"{t}^{k}" if k != 1 else f"{t}" for t, k in m
            )
            parts.append(f"{c}" if not m else (f"{c}*{mono}" if c != 1 else mono))
        return " + ".join(parts)


def _main_var(p: Poly) -> Optional[Term]:
    syms = p.symbols()
    return max(syms, key=term_key) if syms else None


def _as_univariate(p: Poly, x: Term) -> dict[int, Poly]:
    out: dict[int, dict[PMono, Fraction]] = {}
    for m, c in p.terms:
        deg = 0
        rest = []
        for t, k in m:
            if t == x:
                deg = k
            else:
                rest.append((t, k))
        out.setdefault(deg, {})[tuple(rest)] = out.setdefault(deg, {}).get(
            tuple(rest), 0
        ) + c
    return {d: Poly.of(coeffs) for d, coeffs in out.items() if not Poly.of(coeffs).is_zero}


def _from_univariate(coeffs: dict[int, Poly], x: Term) -> Poly:
    out: dict[PMono, Fraction] = {}
    for d, p in coeffs.items():
        for m, c in p.terms:
            mm = _pm_mul(m, ((x, d),) if d else ())
            out[mm] = out.get(mm, 0) + c
    return Poly.of(out)


def poly_divmod_uni(num: dict[int, Poly], den: dict[int, Poly], x: Term):
    """Pseudo/exact division in (Q[rest])[x]; returns (quot, rem) with exact
    coefficient division attempts, falling back to None when not exact."""
    q: dict[int, Poly] = {}
    r = dict(num)
    dd = max(den)
    lead = den[dd]
    while r and max(r) >= dd:
        nd = max(r)
        coeff = poly_div_exact(r[nd], lead)
        if coeff is None:
            return None, r
        q[nd - dd] = q.get(nd - dd, Poly()) + coeff
        for d2, p2 in den.items():
            tgt = nd - dd + d2
            r[tgt] = r.get(tgt, Poly()) - coeff * p2
            if r[tgt].is_zero:
                del r[tgt]
    return q, r


def poly_div_exact(p: Poly, d: Poly) -> Optional[Poly]:
    """p / d when the division is exact, else None."""
    if p.is_zero:
        return Poly()
    if d.is_zero:
        raise ZeroDivisionError("polynomial division by zero")
    if d.is_const:
        return p.scale(1 / d.const_value())
    x = _main_var(d)
    nu, du = _as_univariate(p, x), _as_univariate(d, x)
    if not nu:
        return None
    q, r = poly_divmod_uni(nu, du, x)
    if q is None or r:
        return None
    return _from_univariate(q, x)


def poly_content(p: Poly, x: Term) -> Poly:
    """GCD of the coefficients of p viewed as univariate in x."""
    coeffs = list(_as_univariate(p, x).values())
    g = coeffs[0]
    for c in coeffs[1:]:
        g = poly_gcd(g, c)
    return g


def poly_gcd(a: Poly, b: Poly) -> Poly:
    """Multivariate GCD by recursive content extraction; result has
    content-normalized rational coefficients (monic leading coefficient)."""
    if a.is_zero:
        return _monicize(b)
    if b.is_zero:
        return _monicize(a)
    if a.is_const or b.is_const:
        return Poly.const(1)
    x = max(_main_var(a), _main_var(b), key=term_key)
    au, bu = _as_univariate(a, x), _as_univariate(b, x)
    if len(au) == 1 and 0 in au:
        return _monicize(poly_gcd(au[0], poly_content(b, x)))
    if len(bu) == 1 and 0 in bu:
        return _monicize(poly_gcd(bu[0], poly_content(a, x)))
    ca, cb = poly_content(a, x), poly_content(b, x)
    cg = poly_gcd(ca, cb)
    pa = poly_div_exact(a, ca)
    pb = poly_div_exact(b, cb)
    # primitive Euclid on pseudo-remainders
    f, g = pa, pb
    while True:
        gu = _as_univariate(g, x)
        fu = _as_univariate(f, x)
        if not fu:
            res = g
            break
        if not gu:
            res = f
            break
        if max(fu) < max(gu):
            f, g = g, f
            fu, gu = gu, fu
        # pseudo-divide: multiply f by lead(g)^(deg diff + 1)
        lead = gu[max(gu)]
        shift = max(fu) - max(gu) + 1
        mult = Poly.const(1)
        for _ in range(shift):
            mult = mult * lead
        fq, fr = poly_divmod_uni(_as_univariate(mult * f, x), gu, x)
        if fq is None:
            # fall back: no common factor detectable
            return Poly.const(1)
        rem = _from_univariate(fr, x) if fr else Poly()
        if rem.is_zero:
            res = g
            break
        cr = poly_content(rem, x)
        f, g = g, poly_div_exact(rem, cr)
    cres = poly_content(res, x) if not res.is_const else res
    prim = poly_div_exact(res, cres) if not res.is_const else Poly.const(1)
    if prim is None or prim.is_const:
        return _monicize(cg)
    return _monicize(cg * prim)


def _monicize(p: Poly) -> Poly:
    if p.is_zero:
        return p
    return p.scale(1 / p.leading()[1])


# --- rational functions --------------------------------------------------------


@dataclass(frozen=True)
class RatFn:
    num: Poly = Poly()
    den: Poly = Poly.const(1)

    @staticmethod
    def of(num: Poly, den: Poly) -> "RatFn":
        if den.is_zero:
            raise ZeroDivisionError("rational function with zero denominator")
        if num.is_zero:
            return RatFn(Poly(), Poly.const(1))
        g = poly_gcd(num, den)
        if not g.is_const:
            num2, den2 = poly_div_exact(num, g), poly_div_exact(den, g)
            if num2 is not None and den2 is not None:
                num, den = num2, den2
        lc = den.leading()[1]
        num, den = num.scale(1 / lc), den.scale(1 / lc)
        return RatFn(num, den)

    @staticmethod
    def const(q) -> "RatFn":
        return RatFn(Poly.const(q), Poly.const(1))

    @staticmethod
    def sym(t: Term, k: int = 1) -> "RatFn":
        if k >= 0:
            return RatFn(Poly.sym(t, k) if k else Poly.const(1), Poly.const(1))
        return RatFn(Poly.const(1), Poly.sym(t, -k))

    @property
    def is_zero(self) -> bool:
        return self.num.is_zero

    def __add__(self, o: "RatFn") -> "RatFn":
        return RatFn.of(self.num * o.den + o.num * self.den, self.den * o.den)

    def __neg__(self) -> "RatFn":
        return RatFn(-self.num, self.den)

    def __sub__(self, o):
        return self + (-o)

    def __mul__(self, o: "RatFn") -> "RatFn":
        return RatFn.of(self.num * o.num, self.den * o.den)

    def reciprocal(self) -> "RatFn":
        if self.is_zero:
            raise ZeroDivisionError("reciprocal of zero")
        return RatFn.of(self.den, self.num)

    def __truediv__(self, o: "RatFn") -> "RatFn":
        return self * o.reciprocal()

    def symbols(self) -> set[Term]:
        return self.num.symbols() | self.den.symbols()

    def __str__(self):
        if self.den == Poly.const(1):
            return str(self.num)
        return f"({self.num})/({self.den})"


def certified_nonzero(r: RatFn, nonzero_syms: set[Term]) -> bool:
    """Nonzero constants, single monomials over hash/fresh atoms, and
    products/quotients of such."""

    def poly_ok(p: Poly) -> bool:
        if len(p.terms) != 1:
            return False
        m, c = p.terms[0]
        return c != 0 and all(t in nonzero_syms for t, _ in m)

    return not r.is_zero and poly_ok(r.num) and poly_ok(r.den)


# --- layered polynomials: secrets > unknowns > Q(leaked) -----------------------

UMono = PMono  # monomial over unknown variables


@dataclass(frozen=True)
class RFPoly:
    """Map secret-monomial -> (unknown-monomial -> coefficient)."""

    coeffs: tuple[tuple[PMono, tuple[tuple[UMono, RatFn], ...]], ...] = ()

    @staticmethod
    def of(d: dict[PMono, dict[UMono, RatFn]]) -> "RFPoly":
        items = []
        for sm, up in d.items():
            up2 = tuple(
                sorted(((um, c) for um, c in up.items() if not c.is_zero),
                       key=lambda kv: _pm_key(kv[0]))
            )
            if up2:
                items.append((sm, up2))
        return RFPoly(tuple(sorted(items, key=lambda kv: _pm_key(kv[0]))))

    def as_dict(self) -> dict[PMono, dict[UMono, RatFn]]:
        return {sm: dict(up) for sm, up in self.coeffs}

    def secret_monomials(self) -> list[PMono]:
        return [sm for sm, _ in self.coeffs]

    def __str__(self):
        parts = []
        for sm, up in self.coeffs:
            smt = "*".join(f"{t}" for t, k in sm for _ in range(k)) or "1"
            for um, c in up:
                umt = "*".join(f"{t}" for t, k in um for _ in range(k)) or ""
                parts.append("*".join(x for x in (f"({c})", umt, f"[{smt}]") if x))
        return " + ".join(parts) or "0"


@dataclass
class Classification:
    leaked: set[Term]
    secret: set[Term]
    unknowns: set[Var]
    nonzero_syms: set[Term] = field(default_factory=set)

    def __post_init__(self):
        self.leaked = {normalize(t) for t in self.leaked}
        self.secret = {normalize(t) for t in self.secret}
        for t in self.leaked | self.secret:
            if _certainly_nonzero_atom(t):
                self.nonzero_syms.add(t)


def _certainly_nonzero_atom(t: Term) -> bool:
    if isinstance(t, App) and t.sym == MU:
        return True  # hash images never equal 0: mu has no equations
    if isinstance(t, (Var, Name)) and t.sort == Sort.FRE:
        return True
    return False


def to_poly(t: Term, cls: Classification) -> RFPoly:
    """Interpret an exponent term (or the exponent of a G term) as a
    polynomial in the secret atoms over Q(leaked)[unknowns]."""
    t = normalize(t)
    if sort_leq(t.sort, Sort.G):
        entries = [(m, n) for (_b, m), n in gnf_of(t)]
    else:
        entries = list(enf_of(t))
    out: dict[PMono, dict[UMono, RatFn]] = {}
    for mono, count in entries:
        sm: dict[Term, int] = {}
        um: dict[Term, int] = {}
        coeff = RatFn.const(count)
        for atom, k in mono:
            can_invert = sort_leq(atom.sort, Sort.E)
            inv_atom = normalize(mk_app(INV, (atom,))) if can_invert else None
            if atom in cls.secret:
                if k < 0:
                    if inv_atom is not None and inv_atom in cls.secret:
                        sm[inv_atom] = sm.get(inv_atom, 0) - k
                        continue
                    raise InvertSecret(f"inv applied to secret atom {atom}")
                sm[atom] = sm.get(atom, 0) + k
                continue
            if k < 0 and inv_atom is not None and inv_atom in cls.secret:
                sm[inv_atom] = sm.get(inv_atom, 0) - k
                continue
            if isinstance(atom, Var) and atom in cls.unknowns:
                if k < 0:
                    raise InvertPossiblyZero(f"inv applied to unknown {atom}")
                um[atom] = um.get(atom, 0) + k
                continue
            if atom in cls.leaked:
                coeff = coeff * RatFn.sym(atom, k)
                continue
            raise UnclassifiedAtom(f"atom {atom} is neither leaked, secret nor unknown")
        smono = tuple(sorted(sm.items(), key=lambda kv: term_key(kv[0])))
        umono = tuple(sorted(um.items(), key=lambda kv: term_key(kv[0])))
        slot = out.setdefault(smono, {})
        slot[umono] = slot.get(umono, RatFn.const(0)) + coeff
    return RFPoly.of(out)


# --- mu abstraction -------------------------------------------------------------


@dataclass(frozen=True)
class MuCase:
    """One equality pattern over the hash subterms."""

    rep: tuple[tuple[Term, Term], ...]  # mu term -> representative symbol
    side_equations: tuple[tuple[Term, Term], ...]  # argument equalities

    def rep_of(self, mu_term: Term) -> Term:
        for t, r in self.rep:
            if t == mu_term:
                return r
        raise KeyError(mu_term)


@dataclass
class MuAbstraction:
    atoms: dict[Term, Term]  # symbol -> mu term it abstracts
    cases: list[MuCase]

    def symbol_of(self, mu_term: Term) -> Optional[Term]:
        for s, t in self.atoms.items():
            if t == mu_term:
                return s
        return None


def _collect_mu_terms(terms: Iterable[Term]) -> list[Term]:
    seen: list[Term] = []
    for t in terms:
        t = normalize(t)
        if sort_leq(t.sort, Sort.G):
            monos = [m for (_b, m), _n in gnf_of(t)]
        elif sort_leq(t.sort, Sort.E):
            monos = [m for m, _n in enf_of(t)]
        else:
            continue
        for m in monos:
            for a, _k in m:
                if isinstance(a, App) and a.sym == MU and a not in seen:
                    seen.append(a)
    return seen


def _partitions(items: list):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def mu_abstract(terms: list[Term], fresh: Optional[FreshSource] = None) -> MuAbstraction:
    """Abstract each syntactically distinct hash subterm by a fresh leaked
    atom and enumerate the equality patterns between them; merging two hash
    terms emits the side condition that their arguments are equal."""
    fresh = fresh or FreshSource(100)
    mu_terms = _collect_mu_terms(terms)
    atoms: dict[Term, Term] = {}
    for mt in mu_terms:
        atoms[fresh.var("·mu", Sort.E)] = mt
    sym_of = {mt: s for s, mt in atoms.items()}
    cases: list[MuCase] = []
    for part in _partitions(mu_terms):
        rep = []
        side = []
        feasible = True
        for cls in part:
            r = sym_of[cls[0]]
            for m in cls:
                rep.append((m, r))
            for other in cls[1:]:
                a1, a2 = cls[0].args[0], other.args[0]
                if a1 == a2:
                    continue
                if not (variables(a1) | variables(a2)):
                    feasible = False  # ground and distinct can never be equal
                    break
                side.append((a1, a2))
            if not feasible:
                break
        if feasible:
            cases.append(MuCase(tuple(rep), tuple(side)))
    cases.sort(key=lambda c: len(c.side_equations))
    return MuAbstraction(atoms, cases)


def abstract_term(t: Term, case: MuCase, abstraction: MuAbstraction) -> Term:
    """Replace hash atoms by their case representatives."""
    t = normalize(t)
    if isinstance(t, (Var, Name)):
        return t
    pairs = []
    for s, mt in abstraction.atoms.items():
        try:
            rep = case.rep_of(mt)
        except KeyError:
            rep = s
        pairs.append((mt, rep))

    def go(x: Term) -> Term:
        for mt, rep in pairs:
            if x == mt:
                return rep
        if isinstance(x, App):
            return mk_app(x.sym, [go(a) for a in x.args])
        return x

    return normalize(go(t))


# --- linear systems --------------------------------------------------------------


@dataclass
class LinearSystem:
    """Rows sum(coeff * unknown-monomial) = 0 (the empty monomial slot is
    the constant part)."""

    rows: list[dict[UMono, RatFn]]
    unknowns: list[Var]
    nonzero_syms: set[Term] = field(default_factory=set)
    mu_defs: dict[Term, Term] = field(default_factory=dict)  # mu symbol -> mu term

    def is_linear(self) -> bool:
        return all(
            sum(k for _, k in um) <= 1 for row in self.rows for um in row
        )


def match_coefficients(lhs: RFPoly, rhs: RFPoly, unknowns: list[Var],
                       nonzero_syms: Optional[set[Term]] = None) -> LinearSystem:
    """One equation per secret monomial occurring on either side."""
    dl, dr = lhs.as_dict(), rhs.as_dict()
    rows = []
    for sm in sorted(set(dl) | set(dr), key=_pm_key):
        row: dict[UMono, RatFn] = {}
        for um, c in dl.get(sm, {}).items():
            row[um] = row.get(um, RatFn.const(0)) + c
        for um, c in dr.get(sm, {}).items():
            row[um] = row.get(um, RatFn.const(0)) - c
        row = {um: c for um, c in row.items() if not c.is_zero}
        if row:
            rows.append(row)
    return LinearSystem(rows, list(unknowns), set(nonzero_syms or ()))


def linearize_products(sys: LinearSystem, fresh: Optional[FreshSource] = None
                       ) -> tuple[LinearSystem, dict[Var, UMono]]:
    """Replace every product of unknowns by a fresh unknown Z; the map is
    used after solving to recover the factors by unification."""
    fresh = fresh or FreshSource(300)
    pmap: dict[UMono, Var] = {}
    rows = []
    for row in sys.rows:
        nrow: dict[UMono, RatFn] = {}
        for um, c in row.items():
            if sum(k for _, k in um) <= 1:
                nrow[um] = nrow.get(um, RatFn.const(0)) + c
                continue
            if um not in pmap:
                pmap[um] = fresh.var("·Z", Sort.E)
            z = pmap[um]
            key = ((z, 1),)
            nrow[key] = nrow.get(key, RatFn.const(0)) + c
        rows.append(nrow)
    unknowns = list(sys.unknowns) + list(pmap.values())
    out = LinearSystem(rows, unknowns, set(sys.nonzero_syms), dict(sys.mu_defs))
    return out, {z: um for um, z in pmap.items()}


@dataclass
class AffineExpr:
    const: RatFn
    coeffs: dict[Var, RatFn]

    def symbols(self) -> set[Term]:
        out = set(self.const.symbols())
        for c in self.coeffs.values():
            out |= c.symbols()
        return out


@dataclass
class SolutionSpace:
    solved: dict[Var, AffineExpr]
    free: list[Var]
    mu_defs: dict[Term, Term]
    nonzero_syms: set[Term]


def _row_gcd_normalize(row: dict[UMono, RatFn]) -> dict[UMono, RatFn]:
    """Clear denominators and divide out the common polynomial factor of the
    row (sound over the coefficient field)."""
    if not row:
        return row
    den = Poly.const(1)
    for c in row.values():
        den = den * c.den
    polys = {um: poly_div_exact(c.num * den, c.den) for um, c in row.items()}
    g = None
    for p in polys.values():
        g = p if g is None else poly_gcd(g, p)
    if g is not None and not g.is_const:
        polys = {um: poly_div_exact(p, g) for um, p in polys.items()}
    return {um: RatFn.of(p, Poly.const(1)) for um, p in polys.items()}


def gauss_solve(sys: LinearSystem) -> SolutionSpace:
    """Exact elimination; raises NoSolution on inconsistency and
    PivotNotProvablyNonzero when elimination would need to divide by a
    coefficient without a nonzero certificate.  Pivot choices avoid
    expressing an unknown through a hash atom that mentions it."""
    if not sys.is_linear():
        raise NonlinearBeyondScope("system is nonlinear in the unknowns")
    rows = [_row_gcd_normalize(dict(r)) for r in sys.rows]
    rows = [r for r in rows if r]
    unknowns = list(sys.unknowns)
    mu_unknowns = {
        s: variables(d) for s, d in sys.mu_defs.items()
    }

    def col_of(row):
        return {u: row.get(((u, 1),), RatFn.const(0)) for u in unknowns}

    def attempt(banned: set[tuple[int, Var]]):
        work = [dict(r) for r in rows]
        solved: dict[Var, AffineExpr] = {}
        order: list[tuple[int, Var]] = []
        used_rows: set[int] = set()
        for _ in range(len(work)):
            progressed = False
            for ri, row in enumerate(work):
                if ri in used_rows or not row:
                    continue
                cells = col_of(row)
                cands = [u for u in unknowns if not cells[u].is_zero and u not in solved]
                if not cands:
                    const = row.get(ONE_MONO, RatFn.const(0))
                    leftover = {
                        um: c for um, c in row.items()
                        if um != ONE_MONO and not c.is_zero
                    }
                    if not leftover and not const.is_zero:
                        raise NoSolution(f"inconsistent row 0 = {const}")
                    used_rows.add(ri)
                    progressed = True
                    continue

                def pivot_rank(u):
                    c = cells[u]
                    cert = certified_nonzero(c, sys.nonzero_syms)
                    selfref = any(
                        u in mu_unknowns.get(s, set()) for s in _row_syms(row)
                    )
                    size = len(c.num.terms) + len(c.den.terms)
                    plain = c.num.is_const and c.den.is_const
                    return (not cert, selfref, not plain, size, term_key(u))

                ok = [u for u in cands if (ri, u) not in banned]
                if not ok:
                    return None, None  # pivot choices exhausted for this row
                ok.sort(key=pivot_rank)
                u = ok[0]
                c = cells[u]
                if not certified_nonzero(c, sys.nonzero_syms):
                    raise PivotNotProvablyNonzero(
                        f"pivot {c} for {u} lacks a nonzero certificate"
                    )
                expr_coeffs: dict[Var, RatFn] = {}
                const = RatFn.const(0)
                for um, cc in row.items():
                    if um == ((u, 1),):
                        continue
                    q = -(cc / c)
                    if um == ONE_MONO:
                        const = q
                    else:
                        expr_coeffs[um[0][0]] = q
                solved[u] = AffineExpr(const, expr_coeffs)
                order.append((ri, u))
                used_rows.add(ri)
                # substitute into the other rows
                for rj, row2 in enumerate(work):
                    if rj == ri or rj in used_rows:
                        continue
                    cu = row2.pop(((u, 1),), None)
                    if cu is None or cu.is_zero:
                        continue
                    row2[ONE_MONO] = row2.get(ONE_MONO, RatFn.const(0)) + cu * const
                    for v, q in expr_coeffs.items():
                        key = ((v, 1),)
                        row2[key] = row2.get(key, RatFn.const(0)) + cu * q
                    for k in [k for k, vv in row2.items() if vv.is_zero]:
                        del row2[k]
                progressed = True
            if not progressed:
                break
        # back-substitute solved into solved
        changed = True
        rounds = 0
        while changed and rounds < len(solved) + 2:
            changed = False
            rounds += 1
            for u, e in list(solved.items()):
                for v in list(e.coeffs):
                    if v in solved:
                        ev = solved[v]
                        q = e.coeffs.pop(v)
                        e.const = e.const + q * ev.const
                        for w, qq in ev.coeffs.items():
                            e.coeffs[w] = e.coeffs.get(w, RatFn.const(0)) + q * qq
                        changed = True
                e.coeffs = {v: q for v, q in e.coeffs.items() if not q.is_zero}
        free = [u for u in unknowns if u not in solved]
        # self-reference check through hash definitions
        for u, e in solved.items():
            for s in e.symbols():
                if u in mu_unknowns.get(s, set()):
                    return None, (next(ri for ri, uu in order if uu == u), u)
        return SolutionSpace(solved, free, dict(sys.mu_defs), set(sys.nonzero_syms)), None

    banned: set[tuple[int, Var]] = set()
    for _ in range(16):
        res, clash = attempt(banned)
        if res is not None:
            return res
        if clash is None:
            break
        banned.add(clash)
    raise SelfReferentialSolution(
        "every pivot order expresses an unknown through its own hash"
    )


def _row_syms(row: dict[UMono, RatFn]) -> set[Term]:
    out = set()
    for c in row.values():
        out |= c.symbols()
    return out


# --- back-translation to symbolic terms ------------------------------------------


def _nat_term(n: int) -> Term:
    assert n > 0
    if n == 1:
        return ONE
    return mk_app(ADD, [ONE] * n)


def _q_term(q: Fraction) -> Term:
    t = _nat_term(abs(q.numerator))
    if q.denominator != 1:
        t = mk_app(MUL, (t, mk_app(INV, (_nat_term(q.denominator),))))
    if q < 0:
        t = mk_app(NEG, (t,))
    return t


def poly_to_term(p: Poly, symmap) -> Term:
    if p.is_zero:
        return ZERO
    parts = []
    for m, c in p.terms:
        factors: list[Term] = []
        if abs(c) != 1:
            factors.append(_q_term(abs(c)))
        for s, k in m:
            base = symmap(s)
            unit = base if k > 0 else mk_app(INV, (base,))
            factors.extend([unit] * abs(k))
        if not factors:
            unit_t = ONE
        elif len(factors) == 1:
            unit_t = factors[0]
        else:
            unit_t = mk_app(MUL, factors)
        if c < 0:
            unit_t = mk_app(NEG, (unit_t,))
        parts.append(unit_t)
    return normalize(parts[0] if len(parts) == 1 else mk_app(ADD, parts))


def ratfn_to_term(r: RatFn, symmap, nonzero_syms: set[Term]) -> Term:
    numt = poly_to_term(r.num, symmap)
    if r.den == Poly.const(1):
        return numt
    if not certified_nonzero(RatFn(Poly.const(1), r.den), nonzero_syms):
        raise InvertPossiblyZero(f"denominator {r.den} lacks a nonzero certificate")
    dent = poly_to_term(r.den, symmap)
    return normalize(mk_app(MUL, (numt, mk_app(INV, (dent,)))))


def solutions_to_substitutions(space: SolutionSpace,
                               fresh: Optional[FreshSource] = None) -> list[Subst]:
    """The general solution as one substitution: free unknowns become fresh
    E variables, solved unknowns become their back-translated expressions
    (hash atoms re-expanded, with the solution applied inside)."""
    fresh = fresh or FreshSource(500)
    # free generalization unknowns become fresh adversary-choice variables;
    # free combination unknowns (VarE: the X/W scale factors) default to 0,
    # the minimal choice (no extra multiplicand, no cancellation)
    free_map: dict[Var, Term] = {}
    for u in space.free:
        if u.sort == Sort.VARE:
            free_map[u] = ZERO
        else:
            free_map[u] = fresh.var(f"v_{u.name.lstrip(chr(183))}_", Sort.VARE)

    resolved: dict[Var, Term] = dict(free_map)

    def symmap(s: Term) -> Term:
        if s in space.mu_defs:
            return normalize(mk_app(MU, (space.mu_defs[s].args[0],)))
        return s

    bind: dict[Var, Term] = {}
    for u, e in space.solved.items():
        parts = [ratfn_to_term(e.const, symmap, space.nonzero_syms)]
        for v, q in e.coeffs.items():
            qt = ratfn_to_term(q, symmap, space.nonzero_syms)
            parts.append(normalize(mk_app(MUL, (qt, v))))
        parts = [p for p in parts if p != ZERO]
        if not parts:
            bind[u] = ZERO
        elif len(parts) == 1:
            bind[u] = parts[0]
        else:
            bind[u] = normalize(mk_app(ADD, parts))
    bind.update(free_map)
    sigma = Subst.of(bind)
    # iterate: images may mention solved/free unknowns (incl. inside hashes)
    for _ in range(len(bind) + 2):
        nxt = Subst.of({v: normalize(apply_subst(sigma, t)) for v, t in sigma.bindings})
        if nxt == sigma:
            break
        sigma = nxt
    leftover = {
        v
        for _, t in sigma.bindings
        for v in variables(t)
        if v in space.solved or v in space.free
    }
    if leftover:
        raise SelfReferentialSolution(f"unresolved unknowns {leftover} in solution")
    return [sigma]
