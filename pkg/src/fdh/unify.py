"""Unification of root terms in the simplified theory (no +, -, 0).

Root-term equations reduce to monomial equations in the free abelian group
over exponent atoms.  Variable images are solved column-wise as integer
linear systems (Hermite-style); hash subterms are opaque atoms that may be
identified pairwise, which recursively unifies their arguments.  Fresh
variables of sort FrE only ever unify with FrE atoms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .rewrite import (
    EMPTY_MONO,
    ENF,
    Mono,
    enf_of,
    gnf_of,
    mono_mul,
    normalize,
    root_terms,
    term_of_enf,
    term_of_mono,
)
from .sorts import Sort, sort_leq
from .terms import (
    ADD,
    App,
    FreshSource,
    MU,
    Name,
    Subst,
    Term,
    Var,
    apply_subst,
    mk_app,
    term_key,
    variables,
)

MGU_CAP = 64


class NoUnifier(Exception):
    pass


class MGUCapExceeded(Exception):
    def __init__(self, partial):
        super().__init__(f"more than {MGU_CAP} most general unifiers")
        self.partial = partial


@dataclass(frozen=True)
class UnificationProblem:
    """Root-term equations plus the sum-splitting substitution that produced
    them (identity when no root repetition was used)."""

    equations: tuple[tuple[Term, Term], ...]
    presubst: Subst = Subst()


# --- integer linear algebra ---------------------------------------------------


def _row_reduce_z(a: list[list[int]]) -> tuple[list[list[int]], list[list[int]]]:
    """Column-style Hermite reduction: returns (h, u) with h = a @ u, u
    unimodular, h in column echelon form."""
    m = len(a)
    n = len(a[0]) if m else 0
    h = [row[:] for row in a]
    u = [[1 if i == j else 0 for j in range(n)] for i in range(n)]

    def col(j):
        return [h[i][j] for i in range(m)]

    def addmul_col(dst, src, k):
        for i in range(m):
            h[i][dst] += k * h[i][src]
        for i in range(n):
            u[i][dst] += k * u[i][src]

    def swap_col(i, j):
        for r in range(m):
            h[r][i], h[r][j] = h[r][j], h[r][i]
        for r in range(n):
            u[r][i], u[r][j] = u[r][j], u[r][i]

    def neg_col(j):
        for r in range(m):
            h[r][j] = -h[r][j]
        for r in range(n):
            u[r][j] = -u[r][j]

    pr, pc = 0, 0
    while pr < m and pc < n:
        # find a column with nonzero entry in row pr at or after pc
        nz = [j for j in range(pc, n) if h[pr][j] != 0]
        if not nz:
            pr += 1
            continue
        # gcd-reduce columns so only one has a nonzero in this row
        while len(nz) > 1:
            nz.sort(key=lambda j: abs(h[pr][j]))
            j0 = nz[0]
            for j in nz[1:]:
                q = h[pr][j] // h[pr][j0]
                addmul_col(j, j0, -q)
            nz = [j for j in nz if h[pr][j] != 0]
        j0 = nz[0]
        if j0 != pc:
            swap_col(j0, pc)
        if h[pr][pc] < 0:
            neg_col(pc)
        pr += 1
        pc += 1
    return h, u


def solve_integer_system(a: list[list[int]], bs: list[list[int]]):
    """Solve a x = b over the integers for each b in bs.

    Returns (particulars, kernel_basis) where particulars[i] is a solution
    vector for bs[i] (or None when unsolvable), kernel_basis spans the
    integer kernel of a."""
    m = len(a)
    n = len(a[0]) if m else 0
    if n == 0:
        kernel: list[list[int]] = []
        parts = [None if any(x != 0 for x in b) else [] for b in bs]
        return parts, kernel
    h, u = _row_reduce_z(a)
    # identify pivot structure of h (column echelon): for each column, its
    # lowest... we built it so that scanning rows, each pivot column has its
    # first nonzero at increasing rows.
    pivots = []  # (row, col)
    c = 0
    for r in range(m):
        if c < n and h[r][c] != 0:
            pivots.append((r, c))
            c += 1
    rank = len(pivots)
    kernel = [[u[i][j] for i in range(n)] for j in range(rank, n)]
    parts = []
    for b in bs:
        y = [0] * n
        resid = list(b)
        ok = True
        for r, c in pivots:
            if resid[r] % h[r][c] != 0:
                ok = False
                break
            q = resid[r] // h[r][c]
            y[c] = q
            for i in range(m):
                resid[i] -= q * h[i][c]
        if ok and any(x != 0 for x in resid):
            ok = False
        if not ok:
            parts.append(None)
            continue
        x = [sum(u[i][j] * y[j] for j in range(n)) for i in range(n)]
        parts.append(x)
    return parts, kernel


def _solve_gf2(rows: list[tuple[list[int], int]], n: int) -> Optional[list[int]]:
    """Solve a GF(2) system; returns one solution (free bits 0) or None."""
    mat = [([c % 2 for c in coeffs], rhs % 2) for coeffs, rhs in rows]
    piv = []
    r = 0
    for c in range(n):
        sel = None
        for i in range(r, len(mat)):
            if mat[i][0][c]:
                sel = i
                break
        if sel is None:
            continue
        mat[r], mat[sel] = mat[sel], mat[r]
        for i in range(len(mat)):
            if i != r and mat[i][0][c]:
                mat[i] = (
                    [x ^ y for x, y in zip(mat[i][0], mat[r][0])],
                    mat[i][1] ^ mat[r][1],
                )
        piv.append(c)
        r += 1
    sol = [0] * n
    for i, c in enumerate(piv):
        sol[c] = mat[i][1]
    for i in range(r, len(mat)):
        if mat[i][1]:
            return None
    return sol


# --- decomposition ------------------------------------------------------------


@dataclass
class _MonoEq:
    lhs: Mono
    rhs: Mono
    sign: int  # +1 when both sides have the same sign


def _decompose_root_eq(l: Term, r: Term) -> _MonoEq:
    """Reduce a root-term equation to a monomial equation."""
    if sort_leq(l.sort, Sort.G) and sort_leq(r.sort, Sort.G):
        gl, gr = gnf_of(l), gnf_of(r)
        if len(gl) != 1 or len(gr) != 1 or abs(gl[0][1]) != 1 or abs(gr[0][1]) != 1:
            raise NoUnifier(f"not root terms: {l} = {r}")
        (bl, ml), nl = gl[0]
        (br, mr), nr = gr[0]
        if isinstance(bl, Var) or isinstance(br, Var):
            # bare G variables: only unifiable when identical (model
            # discipline keeps all bases at the generator)
            if bl != br:
                raise NoUnifier(f"distinct group bases {bl} and {br}")
        elif bl != br:
            raise NoUnifier(f"distinct group constants {bl} and {br}")
        return _MonoEq(ml, mr, nl * nr)
    if sort_leq(l.sort, Sort.E) and sort_leq(r.sort, Sort.E):
        el, er = enf_of(l), enf_of(r)
        if len(el) != 1 or len(er) != 1 or abs(el[0][1]) != 1 or abs(er[0][1]) != 1:
            raise NoUnifier(f"not root terms: {l} = {r}")
        ml, nl = el[0]
        mr, nr = er[0]
        return _MonoEq(ml, mr, nl * nr)
    raise NoUnifier(f"sort clash: {l} : {l.sort.value} vs {r} : {r.sort.value}")


def _is_unifiable_var(a: Term) -> bool:
    return isinstance(a, Var) and a.sort in (Sort.E, Sort.VARE)


def _is_fre_var(a: Term) -> bool:
    return isinstance(a, Var) and a.sort == Sort.FRE


def _is_mu(a: Term) -> bool:
    return isinstance(a, App) and a.sym == MU


def _partitions(items: list):
    """All set partitions of items."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


# --- the solver ---------------------------------------------------------------


class _Branch:
    """One choice of mu identifications and FrE assignments."""

    def __init__(self, eqs: list[_MonoEq], mu_class: dict[Term, Term],
                 fre_map: dict[Var, Term]):
        self.eqs = eqs
        self.mu_class = mu_class  # mu atom -> class representative
        self.fre_map = fre_map  # FrE var -> FrE var/name it is identified with

    def rewrite_atom(self, a: Term) -> Term:
        if _is_mu(a):
            return self.mu_class.get(a, a)
        if _is_fre_var(a):
            return self.fre_map.get(a, a)
        return a

    def rewrite_mono(self, m: Mono) -> Mono:
        counts: dict[Term, int] = {}
        for a, k in m:
            a2 = self.rewrite_atom(a)
            counts[a2] = counts.get(a2, 0) + k
            if counts[a2] == 0:
                del counts[a2]
        return tuple(sorted(counts.items(), key=lambda kv: term_key(kv[0])))


def _collect_mu_atoms(eqs: list[_MonoEq]) -> list[Term]:
    seen = []
    for eq in eqs:
        for m in (eq.lhs, eq.rhs):
            for a, _ in m:
                if _is_mu(a) and a not in seen:
                    seen.append(a)
    return seen


def _collect_fre_vars(eqs: list[_MonoEq]) -> list[Var]:
    seen = []
    for eq in eqs:
        for m in (eq.lhs, eq.rhs):
            for a, _ in m:
                if _is_fre_var(a) and a not in seen:
                    seen.append(a)
    return seen


def _collect_fre_names(eqs: list[_MonoEq]) -> list[Name]:
    seen = []
    for eq in eqs:
        for m in (eq.lhs, eq.rhs):
            for a, _ in m:
                if isinstance(a, Name) and a.sort == Sort.FRE and a not in seen:
                    seen.append(a)
    return seen


def _mu_arg_equations(cls: list[Term]) -> list[_MonoEq]:
    """Equations forcing the arguments of identified mu atoms equal."""
    out = []
    rep = cls[0]
    for other in cls[1:]:
        a1, a2 = rep.args[0], other.args[0]
        r1, r2 = root_terms(a1), root_terms(a2)
        if len(r1) != len(r2):
            raise NoUnifier(f"mu arguments differ in root count: {a1} vs {a2}")
        if len(r1) != 1:
            raise NoUnifier("mu arguments with several roots are unsupported")
        out.append(_decompose_root_eq(r1[0], r2[0]))
    return out


def _solve_branch(branch: _Branch, fresh: FreshSource) -> Optional[Subst]:
    eqs = [
        _MonoEq(branch.rewrite_mono(e.lhs), branch.rewrite_mono(e.rhs), e.sign)
        for e in branch.eqs
    ]
    evars: list[Var] = []
    grounds: list[Term] = []
    for e in eqs:
        for m in (e.lhs, e.rhs):
            for a, _ in m:
                if _is_unifiable_var(a):
                    if a not in evars:
                        evars.append(a)
                elif a not in grounds:
                    grounds.append(a)
    evars.sort(key=term_key)
    grounds.sort(key=term_key)

    # net exponents per equation: lhs - rhs
    acoef = []
    consts = []
    signs = []
    for e in eqs:
        net: dict[Term, int] = {}
        for a, k in e.lhs:
            net[a] = net.get(a, 0) + k
        for a, k in e.rhs:
            net[a] = net.get(a, 0) - k
        acoef.append([net.get(v, 0) for v in evars])
        consts.append([net.get(c, 0) for c in grounds])
        signs.append(0 if e.sign > 0 else 1)

    m = len(eqs)
    n = len(evars)
    if n == 0:
        for i in range(m):
            if any(consts[i]) or signs[i]:
                return None
        try:
            return _close_substitution(Subst.of(dict(branch.fre_map)))
        except Exception:
            return None

    # sign parity system over GF(2)
    sign_rows = [([c % 2 for c in acoef[i]], signs[i]) for i in range(m)]
    sign_sol = _solve_gf2(sign_rows, n)
    if sign_sol is None:
        return None

    # one integer system per ground atom (negated constant column)
    bs = [[-consts[i][ci] for i in range(m)] for ci in range(len(grounds))]
    parts, kernel = solve_integer_system(acoef, bs)
    if any(p is None for p in parts):
        return None

    # assemble images: v -> sign * prod grounds^exp * prod fresh^kernel
    zvars = [fresh.var("·z", Sort.E) for _ in kernel]
    monos: dict[Var, Mono] = {}
    zuse: dict[Var, int] = {}
    for vi, v in enumerate(evars):
        m_img: Mono = EMPTY_MONO
        for ci, c in enumerate(grounds):
            k = parts[ci][vi]
            if k:
                m_img = mono_mul(m_img, ((c, k),))
        for zi, kv in enumerate(kernel):
            if kv[vi]:
                m_img = mono_mul(m_img, ((zvars[zi], kv[vi]),))
                zuse[zvars[zi]] = zuse.get(zvars[zi], 0) + 1
        monos[v] = m_img
    bind: dict[Var, Term] = {}
    for vi, v in enumerate(evars):
        m_img = monos[v]
        # an unconstrained variable whose image is a private fresh variable
        # stays unbound (the fresh variable is just a renaming)
        if (
            not sign_sol[vi]
            and len(m_img) == 1
            and m_img[0][1] == 1
            and m_img[0][0] in zuse
            and zuse[m_img[0][0]] == 1
        ):
            continue
        img = term_of_mono(m_img)
        if sign_sol[vi]:
            img = term_of_enf(((m_img, -1),))
        bind[v] = img
    for u, tgt in branch.fre_map.items():
        bind[u] = tgt
    try:
        sigma = Subst.of(bind)
    except Exception:
        return None
    return _close_substitution(sigma)


def _close_substitution(sigma: Subst) -> Optional[Subst]:
    """Apply sigma into its own images (mu arguments may mention solved
    variables) until fixpoint; None when cyclic."""
    dom = sigma.domain
    deps = {v: variables(t) & dom for v, t in sigma.bindings}
    state: dict[Var, int] = {}

    def cyclic(v: Var) -> bool:
        if state.get(v) == 1:
            return True
        if state.get(v) == 2:
            return False
        state[v] = 1
        if any(cyclic(w) for w in deps[v]):
            return True
        state[v] = 2
        return False

    if any(cyclic(v) for v in dom):
        return None
    cur = sigma
    for _ in range(len(dom) + 1):
        out = {v: normalize(apply_subst(cur, t)) for v, t in cur.bindings}
        nxt = Subst.of(out)
        if nxt == cur:
            return cur
        cur = nxt
    return cur


def _verify(sigma: Subst, problem: UnificationProblem) -> bool:
    for l, r in problem.equations:
        if normalize(apply_subst(sigma, l)) != normalize(apply_subst(sigma, r)):
            return False
    return True


_SOLVABLE_CACHE: dict[str, bool] = {}


def _problem_key(problem: UnificationProblem) -> str:
    names: dict[str, str] = {}

    def go(x: Term) -> str:
        if isinstance(x, Var):
            if x.name not in names:
                names[x.name] = f"v{len(names)}"
            return f"{names[x.name]}:{x.sort.value}"
        if isinstance(x, Name):
            return f"~{x.name}:{x.sort.value}"
        return x.sym.name + "(" + ",".join(go(a) for a in x.args) + ")"

    return ";".join(f"{go(l)}={go(r)}" for l, r in problem.equations)


def has_unifier(problem: UnificationProblem,
                fresh: Optional[FreshSource] = None) -> bool:
    """Cached solvability test (unifiability is renaming-invariant)."""
    key = _problem_key(problem)
    hit = _SOLVABLE_CACHE.get(key)
    if hit is not None:
        return hit
    try:
        unify_simp(problem, fresh)
        out = True
    except NoUnifier:
        out = False
    except MGUCapExceeded:
        out = True
    _SOLVABLE_CACHE[key] = out
    return out


def unify_simp(problem: UnificationProblem,
               fresh: Optional[FreshSource] = None) -> list[Subst]:
    """A complete set of most general unifiers of root-term equations in the
    simplified theory; raises NoUnifier when there is none.

    When some unifier identifies no two FrE variables, that single unifier
    is returned alone (the later generalization step recovers the rest)."""
    fresh = fresh or FreshSource(9000)
    base_eqs = [_decompose_root_eq(l, r) for l, r in problem.equations]
    mu_atoms = _collect_mu_atoms(base_eqs)
    fre_vars = _collect_fre_vars(base_eqs)
    fre_names = _collect_fre_names(base_eqs)

    solutions: list[Subst] = []
    seen: set = set()

    def admit(sigma: Optional[Subst]) -> bool:
        if sigma is None or not _verify(sigma, problem):
            return False
        key = tuple(sigma.bindings)
        if key in seen:
            return True  # valid but already collected
        seen.add(key)
        solutions.append(sigma)
        if len(solutions) > MGU_CAP:
            raise MGUCapExceeded(solutions)
        return True

    def merges_fre(sigma: Subst) -> bool:
        imgs = [apply_subst(sigma, u) for u in fre_vars]
        return len(set(imgs)) != len(imgs)

    # mu identification cases: all partitions of the mu atoms (identity
    # partition first, which usually suffices)
    mu_cases = []
    for part in _partitions(mu_atoms):
        try:
            extra = []
            mu_class = {}
            for cls in part:
                for a in cls:
                    mu_class[a] = cls[0]
                if len(cls) > 1:
                    extra.extend(_mu_arg_equations(cls))
            mu_cases.append((sum(len(c) - 1 for c in part), mu_class, extra))
        except NoUnifier:
            continue
    mu_cases.sort(key=lambda x: x[0])

    # FrE assignment cases: partitions of FrE variables, each class bound to
    # one of its members or to an FrE name from the problem
    def fre_cases():
        yield {}
        items = list(fre_vars)
        for part in _partitions(items):
            name_targets = [[None] + list(fre_names) for _ in part]
            for targets in itertools.product(*name_targets):
                fmap = {}
                trivial = True
                for cls, tgt in zip(part, targets):
                    rep = tgt if tgt is not None else cls[0]
                    for v in cls:
                        if v != rep:
                            fmap[v] = rep
                            trivial = False
                if not trivial:
                    yield fmap

    # One unifier per mu-identification case when it merges no FrE
    # variables (the generalization step recovers the rest of that family);
    # the complete set otherwise.  Distinct mu cases are distinct families.
    attempts = 0
    for _, mu_class, extra in mu_cases:
        eqs = base_eqs + extra
        for fmap in fre_cases():
            attempts += 1
            if attempts > 600:
                raise MGUCapExceeded(solutions)
            sigma = _solve_branch(_Branch(eqs, mu_class, fmap), fresh)
            if sigma is not None and admit(sigma) and not merges_fre(sigma):
                break
    if not solutions:
        raise NoUnifier(f"no unifier for {[(str(l), str(r)) for l, r in problem.equations]}")
    return solutions


# --- root combinations with sum splitting ------------------------------------


def root_combinations(t: Term, h: Term,
                      fresh: Optional[FreshSource] = None) -> list[UnificationProblem]:
    """All ways to match each root of t against a (possibly repeated) root
    of h; a root used p >= 2 times has one of its exponent variables split
    into a sum of p fresh variables."""
    fresh = fresh or FreshSource(7000)
    rt_t = root_terms(t)
    rt_h = root_terms(h)
    if not rt_h:
        return []
    out = []
    for seq in itertools.product(range(len(rt_h)), repeat=len(rt_t)):
        groups: dict[int, list[int]] = {}
        for pos, j in enumerate(seq):
            groups.setdefault(j, []).append(pos)
        repeated = []
        for j, poss in groups.items():
            if len(poss) < 2:
                continue
            evars = sorted(
                {v for v in variables(rt_h[j]) if v.sort in (Sort.E, Sort.VARE)},
                key=term_key,
            )
            repeated.append((j, poss, evars))
        if not repeated or all(not ev for _, _, ev in repeated):
            eqs = tuple((rt_t[i], rt_h[seq[i]]) for i in range(len(rt_t)))
            out.append(UnificationProblem(eqs))
            continue
        choice_lists = [[(j, poss, e) for e in evars] if evars else [(j, poss, None)]
                        for j, poss, evars in repeated]
        for choices in itertools.product(*choice_lists):
            split: dict[Var, Term] = {}
            occ_var: dict[tuple[int, int], tuple[Var, Term]] = {}
            for j, poss, e in choices:
                if e is None:
                    continue
                fs = [fresh.var("·f", Sort.E) for _ in poss]
                split[e] = mk_app(ADD, fs)
                for k, pos in enumerate(poss):
                    occ_var[(j, pos)] = (e, fs[k])
            presubst = Subst.of(split)
            eqs = []
            ok = True
            for pos, j in enumerate(seq):
                # this occurrence's split variable takes its own summand; any
                # other split variable takes the full sum
                bind = dict(split)
                if (j, pos) in occ_var:
                    e, f = occ_var[(j, pos)]
                    bind[e] = f
                rhs = normalize(apply_subst(Subst.of(bind), rt_h[j]))
                rts = root_terms(rhs)
                if len(rts) != 1:
                    ok = False  # a split variable occurred non-linearly
                    break
                eqs.append((rt_t[pos], rhs))
            if ok:
                out.append(UnificationProblem(tuple(eqs), presubst))
    return out


# --- generalization -----------------------------------------------------------


@dataclass(frozen=True)
class GeneralizedUnifier:
    base: Subst
    subst: Subst
    fresh_unknowns: tuple[Var, ...]
    provenance: str = "gen"


def generalize(s: Subst, evars: Iterable[Var],
               fresh: Optional[FreshSource] = None) -> GeneralizedUnifier:
    """gen(sigma): FrE bindings kept; every E variable v becomes
    sigma(v) + Y_v (or just Y_v when untouched)."""
    fresh = fresh or FreshSource(8000)
    bind: dict[Var, Term] = {}
    ys = []
    domain = {v for v in s.domain}
    allvars = sorted(set(evars) | domain, key=term_key)
    for v in allvars:
        img = s.get(v)
        if v.sort == Sort.FRE:
            if img is not None:
                bind[v] = img
            continue
        if not sort_leq(v.sort, Sort.E):
            if img is not None:
                bind[v] = img
            continue
        y = fresh.var("·Y", Sort.E)
        ys.append(y)
        if img is None or img == v:
            bind[v] = y
        else:
            bind[v] = normalize(mk_app(ADD, (img, y)))
    return GeneralizedUnifier(s, Subst.of(bind), tuple(ys), "gen")


def generalize_H(s: Subst, t: Term, h_terms: Iterable[Term], secret: Iterable[Term],
                 evars: Iterable[Var],
                 fresh: Optional[FreshSource] = None) -> GeneralizedUnifier:
    """gen_H(sigma): like gen, but every E variable additionally absorbs
    Y_i * e_i terms over the secret monomials e_i of the h side that do not
    occur in sigma(t)."""
    fresh = fresh or FreshSource(8500)
    secret_set = {normalize(x) for x in secret}

    def secret_monos(term: Term) -> list[Term]:
        out = []
        nt = normalize(apply_subst(s, term))
        if sort_leq(nt.sort, Sort.G):
            monos = [term_of_mono(m) for (_b, m), _n in gnf_of(nt)]
        else:
            monos = [term_of_mono(m) for m, _n in enf_of(nt)]
        for mt in monos:
            atoms = {a for m, _ in enf_of(mt) for a, _k in m}
            if any(a in secret_set for a in atoms):
                out.append(mt)
        return out

    t_monos = set(secret_monos(t))
    sh: list[Term] = []
    for h in h_terms:
        for mt in secret_monos(h):
            if mt not in t_monos and mt not in sh:
                sh.append(mt)

    base = generalize(s, evars, fresh)
    if not sh:
        return GeneralizedUnifier(s, base.subst, base.fresh_unknowns, "gen_H")
    from .terms import MUL

    bind = base.subst.as_dict()
    ys = list(base.fresh_unknowns)
    for v in list(bind):
        if sort_leq(v.sort, Sort.E) and v.sort != Sort.FRE:
            parts = [bind[v]]
            for e in sh:
                y = fresh.var("·Y", Sort.E)
                ys.append(y)
                parts.append(mk_app(MUL, (y, e)))
            bind[v] = normalize(mk_app(ADD, parts))
    return GeneralizedUnifier(s, Subst.of(bind), tuple(ys), "gen_H")
