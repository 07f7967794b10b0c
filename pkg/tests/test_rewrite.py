import random

import pytest

from fdh.parser import parse_term
from fdh.rewrite import (
    Assignment,
    NotNormalForm,
    check_shape,
    eval_oracle,
    is_root_term,
    normalize,
    reset_step_counter,
    root_terms,
    step_count,
)
from genterms import (
    eval_pair,
    random_dh_term,
    random_reassociation,
)

T = parse_term


def N(s):
    return normalize(parse_term(s))


class TestNormalizeExamples:
    def test_module_law_addition(self):
        assert N("g^(x:E + y:E)") == N("g^(x:E) . g^(y:E)")

    def test_unit_exponent(self):
        assert N("g^1") == T("g")

    def test_mul_inverse_cancels(self):
        assert N("x:E * inv(x:E)") == T("1")

    def test_zero_exponent(self):
        assert N("g^0") == T("eG")

    def test_mqv_key_expansion(self):
        # (g^y . g^(b*mu(g^y)))^(x + a*mu(g^x))
        key = N("(g^(y:E) . g^((b:E)*mu(g^(y:E))))^((x:FrE) + (a:FrE)*mu(g^(x:FrE)))")
        want = N(
            "g^((y:E)*(x:FrE)) . g^((b:E)*mu(g^(y:E))*(x:FrE))"
            " . g^((y:E)*mu(g^(x:FrE))*(a:FrE))"
            " . g^((b:E)*mu(g^(y:E))*mu(g^(x:FrE))*(a:FrE))"
        )
        assert key == want

    def test_paper_typo_zero_times_x(self):
        # ring axioms force 0*x -> 0 (not -> x)
        assert N("0 * x:E") == T("0")

    def test_inverse_laws(self):
        assert N("inv(1)") == T("1")
        assert N("inv(inv(u:E))") == T("u:E")
        assert N("inv(-u:E)") == N("-inv(u:E)")
        assert N("inv(u:E*v:E)") == N("inv(u:E)*inv(v:E)")

    def test_group_laws(self):
        assert N("ginv(ginv(a:G))") == T("a:G")
        assert N("ginv(eG)") == T("eG")
        assert N("a:G . ginv(a:G)") == T("eG")
        assert N("ginv(a:G . b:G)") == N("ginv(a:G).ginv(b:G)")
        assert N("(ginv(a:G))^(x:E)") == N("ginv(a:G^(x:E))")

    def test_e_ring_laws(self):
        assert N("x:E + 0") == T("x:E")
        assert N("x:E * 1") == T("x:E")
        assert N("x:E + (-x:E)") == T("0")
        assert N("-(-x:E)") == T("x:E")
        assert N("-(x:E + y:E)") == N("(-x:E) + (-y:E)")
        assert N("x:E*(y:E + z:E)") == N("x:E*y:E + x:E*z:E")

    def test_exp_tower(self):
        assert N("(g^(x:E))^(y:E)") == N("g^(x:E*y:E)")

    def test_neg_exponent(self):
        assert N("a:G^(-x:E)") == N("ginv(a:G^(x:E))")


class TestRootTerms:
    def test_two_factors(self):
        rts = root_terms(N("g^(x:E) . g^(y:E*z:E)"))
        assert set(rts) == {N("g^(x:E)"), N("g^(y:E*z:E)")}

    def test_singleton(self):
        assert root_terms(N("g^(~m)")) == [N("g^(~m)")]
        assert is_root_term(N("g^(~m)"))

    def test_e_summands(self):
        rts = root_terms(N("x:E + (-(y:E*z:E))"))
        assert set(rts) == {T("x:E"), N("-(y:E*z:E)")}

    def test_rejects_non_normal(self):
        with pytest.raises(NotNormalForm):
            root_terms(T("g^(x:E + y:E)"))


class TestEvalOracle:
    def test_inverse(self):
        from fractions import Fraction

        rho = Assignment({T("x:E"): Fraction(3)})
        assert eval_oracle(T("x:E * inv(x:E)"), rho) == 1

    def test_addition(self):
        from fractions import Fraction

        rho = Assignment({T("x:E"): Fraction(2), T("y:E"): Fraction(5)})
        assert eval_oracle(T("g^(x:E + y:E)"), rho) == 7

    def test_division_by_zero(self):
        from fdh.rewrite import DivisionByZero
        from fractions import Fraction

        rho = Assignment({T("x:E"): Fraction(0)})
        with pytest.raises(DivisionByZero):
            eval_oracle(T("inv(x:E)"), rho)


class TestProperties:
    N_TERMS = 400

    def test_idempotence(self):
        rng = random.Random(11)
        for _ in range(self.N_TERMS):
            t = random_dh_term(rng, depth=5)
            n = normalize(t)
            assert normalize(n) == n

    def test_confluence_sampling(self):
        rng = random.Random(12)
        for _ in range(self.N_TERMS):
            t = random_dh_term(rng, depth=5)
            u = random_reassociation(t, rng)
            assert normalize(t) == normalize(u)

    def test_eval_oracle_agreement(self):
        rng = random.Random(13)
        checked = 0
        for _ in range(self.N_TERMS):
            t = random_dh_term(rng, depth=5)
            pairv = eval_pair(t, normalize(t), rng)
            if pairv is None:
                continue
            assert pairv[0] == pairv[1], f"eval mismatch on {t}"
            checked += 1
        assert checked > self.N_TERMS // 2

    def test_normal_form_shape(self):
        rng = random.Random(14)
        for _ in range(self.N_TERMS):
            t = random_dh_term(rng, depth=5)
            assert check_shape(normalize(t)), str(t)

    def test_termination_step_budget(self):
        rng = random.Random(15)
        for _ in range(60):
            t = random_dh_term(rng, depth=12)
            reset_step_counter()
            normalize(t)
            assert step_count() < 10**6
