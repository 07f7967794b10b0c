import itertools

import pytest

from fdh.parser import ParseError, parse_term
from fdh.sorts import Sort, sort_leq
from fdh.terms import (
    EXP,
    App,
    G,
    GMUL,
    Name,
    SortError,
    Subst,
    Var,
    ac_canonical,
    ac_equal,
    add,
    apply_subst,
    exp,
    mul,
    mk_app,
    pair,
)


def T(s, **kw):
    return parse_term(s, **kw)


class TestSortOrder:
    def test_subsort_edges(self):
        assert sort_leq(Sort.FRE, Sort.E)
        assert sort_leq(Sort.VARE, Sort.E)
        assert sort_leq(Sort.PUBG, Sort.G)
        assert sort_leq(Sort.G, Sort.MSG)
        assert sort_leq(Sort.E, Sort.MSG)
        assert not sort_leq(Sort.G, Sort.E)
        assert not sort_leq(Sort.E, Sort.G)
        assert not sort_leq(Sort.FRESH, Sort.PUBLIC)
        assert not sort_leq(Sort.FRE, Sort.VARE)
        assert not sort_leq(Sort.PUBG, Sort.FRE)
        for s in Sort:
            if s != Sort.TEMPORAL:
                assert not sort_leq(Sort.TEMPORAL, s)
                assert not sort_leq(s, Sort.TEMPORAL)

    def test_partial_order_axioms(self):
        sorts = list(Sort)
        for a in sorts:
            assert sort_leq(a, a)
        for a, b in itertools.product(sorts, sorts):
            if sort_leq(a, b) and sort_leq(b, a):
                assert a == b
        for a, b, c in itertools.product(sorts, sorts, sorts):
            if sort_leq(a, b) and sort_leq(b, c):
                assert sort_leq(a, c)


class TestParser:
    def test_exp_of_fresh(self):
        t = T("g^(x:FrE)")
        assert t == exp(G, Var("x", Sort.FRE))

    def test_mu_needs_group_argument(self):
        with pytest.raises(SortError):
            T("mu(x:FrE)")

    def test_elgamal_output_message(self):
        t = T("g^(y:FrE) . g^(m:FrE)")
        assert isinstance(t, App) and t.sym == GMUL
        assert set(t.args) == {exp(G, Var("y", Sort.FRE)), exp(G, Var("m", Sort.FRE))}

    def test_pair_sugar(self):
        t = T("<g^(y:FrE), g^(m:FrE), x>")
        assert t == pair(
            exp(G, Var("y", Sort.FRE)), exp(G, Var("m", Sort.FRE)), Var("x", Sort.MSG)
        )

    def test_names_vs_variables(self):
        assert T("~n") == Name("n", Sort.FRESH)
        assert T("$p") == Name("p", Sort.PUBLIC)
        assert T("g^(~m)") == exp(G, Name("m", Sort.FRE))
        assert T("x:E") == Var("x", Sort.E)

    def test_sort_env(self):
        t = T("g^ska", sort_env={"ska": Sort.FRE})
        assert t == exp(G, Var("ska", Sort.FRE))

    def test_precedence(self):
        # ^ > . > * > unary - > +
        t = T("-x:E*y:E + z:E")
        want = add(mk_app_neg(mul(Var("x", Sort.E), Var("y", Sort.E))), Var("z", Sort.E))
        assert t == want

    def test_rejects_garbage(self):
        with pytest.raises(ParseError):
            T("g^^x")
        with pytest.raises(ParseError):
            T("2*x:E")

    def test_roundtrip_render(self):
        for s in ["g^(x:E + y:E)", "inv(x:E)*y:E", "<~n, $p>", "mu(g^(x:FrE))",
                  "ginv(g^(x:E))", "senc(g^(m:FrE), x)"]:
            t = T(s)
            assert T(str(t)) == t


def mk_app_neg(t):
    from fdh.terms import NEG

    return mk_app(NEG, (t,))


class TestAcEquality:
    def test_commutativity(self):
        assert ac_equal(T("x:E*y:E"), T("y:E*x:E"))

    def test_associativity(self):
        assert ac_equal(T("(x:E*y:E)*z:E"), T("x:E*(y:E*z:E)"))

    def test_distinct_heads(self):
        assert not ac_equal(T("x:E+y:E"), T("x:E*y:E"))

    def test_random_permutations(self):
        import random

        rng = random.Random(1)
        args = [Var(n, Sort.E) for n in "abcdef"]
        t = mul(*args)
        for _ in range(50):
            p = args[:]
            rng.shuffle(p)
            assert ac_equal(t, mul(*p))

    def test_canonical_idempotent(self):
        t = T("(x:E*y:E)*(z:E*w:E)")
        assert ac_canonical(t) == ac_canonical(ac_canonical(t))


class TestSubstitution:
    def test_simple(self):
        s = Subst.of({Var("x", Sort.E): Name("m", Sort.FRE)})
        assert apply_subst(s, T("g^(x:E)")) == T("g^(~m)")

    def test_paper_gen_image(self):
        # c2 maps to (~m) + Y1, applied under the exponent
        s = Subst.of({Var("c2", Sort.E): T("~m + Y1:E")})
        assert apply_subst(s, T("g^(c2:E)")) == T("g^(~m + Y1:E)")

    def test_fresh_variable_cannot_take_composite_image(self):
        with pytest.raises(SortError):
            Subst.of({Var("v", Sort.FRE): T("a:E + b:E")})

    def test_sort_respecting_images(self):
        Subst.of({Var("v", Sort.FRE): Var("w", Sort.FRE)})
        Subst.of({Var("v", Sort.FRE): Name("n", Sort.FRE)})
        with pytest.raises(SortError):
            Subst.of({Var("v", Sort.FRE): Var("w", Sort.E)})
        with pytest.raises(SortError):
            Subst.of({Var("v", Sort.G): Var("w", Sort.E)})

    def test_compose_idempotent(self):
        x, y = Var("x", Sort.E), Var("y", Sort.E)
        s = Subst.of({x: mul(y, y)})
        r = Subst.of({y: Name("m", Sort.FRE)})
        c = s.compose(r)
        t = T("g^(x:E + y:E)")
        assert apply_subst(c, apply_subst(c, t)) == apply_subst(c, t)

    def test_homomorphic(self):
        s = Subst.of({Var("x", Sort.E): T("y:E*z:E")})
        a, b = T("x:E"), T("w:E")
        assert apply_subst(s, add(a, b)) == add(apply_subst(s, a), apply_subst(s, b))
