"""Random well-sorted DH term generation for property tests."""

from __future__ import annotations

import random
from fractions import Fraction

from fdh.rewrite import Assignment, DivisionByZero, eval_oracle
from fdh.sorts import Sort
from fdh.terms import (
    EG,
    G,
    Name,
    ONE,
    Term,
    Var,
    ZERO,
    add,
    exp,
    ginv,
    gmul,
    inv,
    mk_app,
    mu,
    mul,
    neg,
)

E_VARS = [Var(n, Sort.E) for n in ("x", "y", "z", "w")]
FRE_VARS = [Var(n, Sort.FRE) for n in ("u1", "u2")]
FRE_NAMES = [Name(n, Sort.FRE) for n in ("f1", "f2")]
E_ATOMS: list[Term] = E_VARS + FRE_VARS + FRE_NAMES


def random_e_term(rng: random.Random, depth: int) -> Term:
    if depth <= 0:
        return rng.choice(E_ATOMS + [ONE, ZERO])
    op = rng.randrange(8)
    if op == 0:
        return add(random_e_term(rng, depth - 1), random_e_term(rng, depth - 1))
    if op == 1:
        return mul(random_e_term(rng, depth - 1), random_e_term(rng, depth - 1))
    if op == 2:
        return neg(random_e_term(rng, depth - 1))
    if op == 3:
        return inv(random_e_term(rng, depth - 1))
    if op == 4:
        return mu(random_g_term(rng, depth - 1))
    return rng.choice(E_ATOMS)


def random_g_term(rng: random.Random, depth: int) -> Term:
    if depth <= 0:
        return rng.choice([G, EG])
    op = rng.randrange(6)
    if op == 0:
        return gmul(random_g_term(rng, depth - 1), random_g_term(rng, depth - 1))
    if op == 1:
        return ginv(random_g_term(rng, depth - 1))
    if op in (2, 3):
        return exp(random_g_term(rng, depth - 1), random_e_term(rng, depth - 1))
    return G


def random_dh_term(rng: random.Random, depth: int = 5) -> Term:
    return random_g_term(rng, depth) if rng.random() < 0.5 else random_e_term(rng, depth)


def random_assignment(rng: random.Random) -> Assignment:
    vals = {}
    for a in E_ATOMS:
        v = Fraction(0)
        while v == 0:
            v = Fraction(rng.randint(-9, 9), rng.randint(1, 7))
        vals[a] = v
    return Assignment(vals, mu_salt=rng.randint(100, 10000))


def eval_pair(t: Term, u: Term, rng: random.Random, tries: int = 30):
    """Evaluate both terms under a shared random assignment, retrying when a
    denominator hits zero; returns None if every retry divides by zero."""
    for _ in range(tries):
        rho = random_assignment(rng)
        try:
            return eval_oracle(t, rho), eval_oracle(u, rho)
        except DivisionByZero:
            continue
    return None


def random_reassociation(t: Term, rng: random.Random) -> Term:
    """A random AC rearrangement of t (same term modulo AC), used to sample
    strategy independence of normalization."""
    from fdh.terms import App

    if not isinstance(t, App):
        return t
    args = [random_reassociation(a, rng) for a in t.args]
    if not t.sym.ac:
        return mk_app(t.sym, args)
    rng.shuffle(args)
    while len(args) > 2:
        i = rng.randrange(len(args) - 1)
        merged = App(t.sym, (args[i], args[i + 1]))
        args[i: i + 2] = [merged]
    return mk_app(t.sym, args) if len(args) >= 2 else args[0]
