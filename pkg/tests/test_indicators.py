import random

import pytest

from fdh.indicators import (
    LeakedSet,
    NotRootTerm,
    indicator,
    is_trivial_indicator,
    no_canc_pair,
    no_canc_prime,
    no_canc_term,
)
from fdh.parser import parse_term
from fdh.rewrite import normalize, root_terms
from fdh.sorts import Sort
from fdh.terms import (
    EG,
    App,
    GMUL,
    Name,
    ONE,
    Subst,
    Term,
    Var,
    add,
    apply_subst,
    gmul,
)
from genterms import E_ATOMS, random_e_term, random_g_term

T = parse_term


def N(s):
    return normalize(parse_term(s))


class TestIndicator:
    def test_partially_leaked_product(self):
        L = [T("y:E"), T("w:E")]
        assert indicator(N("g^(x:E*y:E)"), L) == N("g^(x:E)")

    def test_fully_leaked_is_trivial(self):
        L = [T("y:E"), T("w:E")]
        assert indicator(N("g^(w:E)"), L) == EG
        assert is_trivial_indicator(indicator(N("g^(w:E)"), L))

    def test_mu_with_secret_inside_stays_whole(self):
        # one secret exponent keeps the entire hash secret
        L = [T("y:E"), T("w:E")]
        t = N("g^(mu(g^(x:E*w:E)))")
        assert indicator(t, L) == t

    def test_mu_membership_in_leaked_set(self):
        L = [T("mu(g^(y:E))")]
        got = indicator(N("g^((sk:FrE) * mu(g^(y:E)) * (x:FrE))"), L)
        assert got == N("g^((sk:FrE)*(x:FrE))")

    def test_mu_with_all_leaked_args_drops(self):
        L = [T("x:E")]
        assert indicator(N("g^(mu(g^(x:E)) * y:E)"), L) == N("g^(y:E)")

    def test_inv_is_dropped(self):
        assert indicator(N("inv(x:E)"), []) == T("x:E")
        assert indicator(N("ginv(g^(x:E))"), []) == N("g^(x:E)")

    def test_e_sorted(self):
        assert indicator(N("x:E*y:E"), [T("y:E")]) == T("x:E")
        assert indicator(N("y:E"), [T("y:E")]) == ONE

    def test_rejects_non_root(self):
        with pytest.raises(NotRootTerm):
            indicator(N("g^(x:E) . g^(y:E)"), [])


class TestIndicatorTheorem:
    """Theorem 3: function application cannot create new indicators."""

    def rand_seed_terms(self, rng):
        from fdh.terms import exp, mul, mu, G

        L = [T("y:E"), T("w:E"), Name("lf", Sort.FRE)]
        # seed terms: E members must have indicator 1 (built from L only)
        seeds = [
            N("y:E*w:E"),
            N("w:E"),
            normalize(exp(G, T("x:E"))),
            normalize(exp(G, mul(T("x2:E"), T("y:E")))),
            normalize(exp(G, Name("lf", Sort.FRE))),
        ]
        return L, seeds

    def seed_indicators(self, seeds, L):
        out = set()
        for s in seeds:
            for r in root_terms(s):
                out.add(indicator(r, L))
        return out

    def test_closure(self):
        from fdh.terms import add, exp, ginv, gmul, inv, mk_app, mu, mul, neg
        from fdh.sorts import sort_leq

        rng = random.Random(42)
        violations = 0
        for trial in range(150):
            L, seeds = self.rand_seed_terms(rng)
            base_inds = self.seed_indicators(seeds, L)
            pool = list(seeds)
            for _ in range(8):
                a = rng.choice(pool)
                b = rng.choice(pool)
                ops = []
                if sort_leq(a.sort, Sort.E) and sort_leq(b.sort, Sort.E):
                    ops = [lambda: add(a, b), lambda: mul(a, b), lambda: neg(a)]
                elif sort_leq(a.sort, Sort.G) and sort_leq(b.sort, Sort.G):
                    ops = [lambda: gmul(a, b), lambda: ginv(a), lambda: mu(a)]
                elif sort_leq(a.sort, Sort.G) and sort_leq(b.sort, Sort.E):
                    ops = [lambda: exp(a, b), lambda: mu(a)]
                if not ops:
                    continue
                t = normalize(rng.choice(ops)())
                pool.append(t)
                if sort_leq(t.sort, Sort.E):
                    # every generated E term must have trivial indicator...
                    # unless it is a mu image (mu output may be secret; the
                    # theorem's premise is about the seed set)
                    for r in root_terms(t):
                        ind = indicator(r, L)
                        if not is_trivial_indicator(ind):
                            # must stem from a seed indicator
                            if ind not in base_inds and not any(
                                isinstance(a2, App) and a2.sym.name == "mu"
                                for m in [ind]
                                for a2 in _atoms_of(m)
                            ):
                                violations += 1
                else:
                    for r in root_terms(t):
                        ind = indicator(r, L)
                        if is_trivial_indicator(ind):
                            continue
                        assert ind in base_inds or _has_mu_atom(ind), (
                            f"new indicator {ind} from {t}"
                        )
        assert violations == 0


def _atoms_of(t: Term):
    from fdh.rewrite import enf_of, gnf_of
    from fdh.sorts import sort_leq

    if sort_leq(t.sort, Sort.G):
        return [a for (_b, m), _n in gnf_of(t) for a, _ in m]
    return [a for m, _n in enf_of(t) for a, _ in m]


def _has_mu_atom(t: Term) -> bool:
    return any(isinstance(a, App) and a.sym.name == "mu" for a in _atoms_of(t))


class TestNoCanc:
    def test_all_fresh(self):
        v = no_canc_pair(N("g^(~m)"), N("g^(~y)"))
        assert v.holds and v.witness == "AllFresh"

    def test_mqv_secrecy_pairs(self):
        key = N(
            "(g^(y:E) . g^((skB:FrE)*mu(g^(y:E))))"
            "^((x:FrE) + (a:FrE)*mu(g^(x:FrE)))"
        )
        X2 = N("g^((skB:FrE)*(a:FrE)*mu(g^(y:E))*mu(g^(x:FrE)))")
        X1 = N("g^((skB:FrE)*mu(g^(y:E))*(x:FrE))")
        assert no_canc_term(key).status == "unknown"
        assert no_canc_prime(X2, key).holds
        assert no_canc_prime(X1, key).holds

    def test_spec_case2_pair(self):
        X = N("g^((skB:FrE)*(a:FrE)*mu(g^(y:E))*mu(g^(x:FrE)))")
        Y = N("g^((y:E)*(x:FrE))")
        v = no_canc_pair(X, Y)
        assert v.holds and v.witness in ("Thm4Case1", "Thm4Case2")

    def test_elgamal_alice_view_fails(self):
        X = N("ginv(g^((c1:E)*(ska:FrE)))")
        Y = N("g^(c2:E)")
        assert no_canc_pair(X, Y).status == "unknown"

    def test_singleton_vacuous(self):
        assert no_canc_term(N("g^(~m)")).holds

    def test_explicit_inverse_pair_unknown(self):
        t = N("g^(x:E) . g^(inv(x:E))")
        v = no_canc_term(t)
        assert v.status == "unknown"
        assert len(v.pairs) >= 1

    def test_unknown_reports_minimal_pairs(self):
        t = N("g^(~a) . g^(x:E)")
        v = no_canc_term(t)
        assert v.status == "unknown"
        for X, Y in v.pairs:
            assert no_canc_pair(X, Y).status == "unknown"


class TestNoCancFuzz:
    N_SUBST = 2000

    def random_theta(self, rng, vs):
        bind = {}
        for v in vs:
            if v.sort == Sort.FRE:
                bind[v] = rng.choice(
                    [Name("ff1", Sort.FRE), Name("ff2", Sort.FRE), Var("fv", Sort.FRE)]
                )
            elif v.sort in (Sort.E, Sort.VARE):
                bind[v] = normalize(random_e_term(rng, rng.randint(0, 2)))
            elif v.sort == Sort.G:
                bind[v] = normalize(random_g_term(rng, rng.randint(0, 2)))
        return Subst.of(bind)

    def test_holds_pairs_never_cancel(self):
        from fdh.terms import variables

        rng = random.Random(7)
        pairs = [
            (N("g^(~m)"), N("g^(~y)")),
            (N("g^((skB:FrE)*mu(g^(y:E))*(x:FrE))"), N("g^((y:E)*(x:FrE))")),
            (
                N("g^((skB:FrE)*(a:FrE)*mu(g^(y:E))*mu(g^(x:FrE)))"),
                N("g^((y:E)*mu(g^(x:FrE))*(a:FrE))"),
            ),
            (N("u1:FrE * u2:FrE"), N("~f1 * u1:FrE")),
        ]
        checked = 0
        for X, Y in pairs:
            v = no_canc_pair(X, Y)
            assert v.holds, f"expected Holds for {X}, {Y}"
            vs = variables(X) | variables(Y)
            for _ in range(self.N_SUBST // len(pairs)):
                theta = self.random_theta(rng, vs)
                tx = normalize(apply_subst(theta, X))
                ty = normalize(apply_subst(theta, Y))
                if X.sort in (Sort.G, Sort.PUBG):
                    assert tx != normalize(T("eG"))
                    assert normalize(gmul(tx, ty)) != normalize(T("eG"))
                else:
                    assert tx != normalize(T("0"))
                    assert normalize(add(tx, ty)) != normalize(T("0"))
                checked += 1
        assert checked >= 1000


class TestLeakedSet:
    def test_monotone(self):
        class Sys:
            def k_action_entries(self):
                return [(T("x:E"), 1), (T("y:E"), 3)]

            def time_less(self, a, b):
                return a < b

        from fdh.indicators import leaked_set

        s = Sys()
        l2 = leaked_set(s, 2)
        l4 = leaked_set(s, 4)
        assert T("x:E") in l2 and T("y:E") not in l2
        assert l2.terms() <= l4.terms()

    def test_empty(self):
        class Sys:
            def k_action_entries(self):
                return []

            def time_less(self, a, b):
                return False

        from fdh.indicators import leaked_set

        assert leaked_set(Sys(), 5).terms() == frozenset()
