"""PCTL checker tests.

Two oracles (in oracles.py) guard the value-iteration engine: a
top-down memoized recursion over (state, steps-left) that enumerates
the action choices at every depth, and, on small instances, a full
enumeration of every time-dependent memoryless scheduler whose induced
chain is evaluated by plain path expansion.
"""

import numpy as np
import pytest
from oracles import make_mdp, oracle_bounded_reach, oracle_scheduler_enumeration, random_mdp

from cpsguard.pmc import (
    Ap,
    Finally,
    Next,
    PctlSyntaxError,
    ProbF,
    TrueF,
    check,
    check_all,
    format_pctl,
    parse_pctl,
    reach_prob,
)


# ---------------------------------------------------------------------------
# parsing


class TestParse:
    def test_safety_query(self):
        f = parse_pctl('P>0.8 [ F<=10 "rob=-1" ]')
        assert f == ProbF(">", 0.8, Finally(Ap("rob=-1"), 10))

    def test_next_query(self):
        f = parse_pctl('P>0.5 [ X "rob=-1" ]')
        assert f == ProbF(">", 0.5, Next(Ap("rob=-1")))

    def test_probability_out_of_range(self):
        with pytest.raises(PctlSyntaxError, match="outside"):
            parse_pctl('P>1.5 [ X "rob=-1" ]')

    def test_roundtrip(self):
        texts = [
            'P>0.8 [ F<=10 "rob=-1" ]',
            'P>0.5 [ X "rob=-1" ]',
            'P<0.1 [ G "rob=+1" ]',
            'P<=0.9 [ ("rob=+1") U<=3 ("rob=-1") ]',
            'true & !("rob=-1")',
            'P>=0 [ ("rob=+1") U ("rob=-1") ]',
        ]
        for text in texts:
            f = parse_pctl(text)
            assert parse_pctl(format_pctl(f)) == f, text

    def test_trailing_garbage(self):
        with pytest.raises(PctlSyntaxError, match="trailing"):
            parse_pctl("true true")


# ---------------------------------------------------------------------------
# reachability worked examples


class TestReach:
    def test_target_state_probability_one(self):
        model = make_mdp(2, {(0, 0): {1: 1.0}})
        for k in (0, 1, 5):
            res = reach_prob(model, {(1, 0)}, k=k)
            assert res.probs[(1, 0)] == 1.0

    def test_two_state_chain(self):
        # s -> 0.5 s' + 0.5 s; within 2 steps: 0.5 + 0.5*0.5
        model = make_mdp(2, {(0, 0): {1: 0.5, 0: 0.5}})
        res = reach_prob(model, {(1, 0)}, k=2)
        assert res.probs[(0, 0)] == pytest.approx(0.75, abs=1e-12)

    def test_unreachable_is_zero(self):
        model = make_mdp(3, {(0, 0): {0: 1.0}, (2, 0): {1: 1.0}})
        res = reach_prob(model, {(1, 0)}, k=None)
        assert res.probs[(0, 0)] == 0.0
        assert res.converged

    def test_dead_end_contributes_zero(self):
        model = make_mdp(2, {(0, 0): {1: 1.0}})
        res = reach_prob(model, {(0, 0)}, k=3)
        assert res.probs[(1, 0)] == 0.0  # state 1 has no outgoing entry

    def test_unknown_target_rejected(self):
        model = make_mdp(2, {(0, 0): {1: 1.0}})
        with pytest.raises(ValueError, match="not in the model"):
            reach_prob(model, {(9, 0)})


class TestOracleEquivalence:
    def test_bounded_reach_matches_recursion(self):
        rng = np.random.default_rng(77)
        for _ in range(60):
            model = random_mdp(rng)
            target = {sid for sid in model.states if model.states[sid].label == -1}
            k = int(rng.integers(0, 6))
            for semantics in ("MAX", "MIN"):
                got = reach_prob(model, target, k=k, semantics=semantics).probs
                want = oracle_bounded_reach(model, target, k, semantics)
                for sid in model.states:
                    assert got[sid] == pytest.approx(want[sid], abs=1e-9)

    def test_matches_full_scheduler_enumeration_on_tiny_models(self):
        rng = np.random.default_rng(78)
        done = 0
        while done < 12:
            model = random_mdp(rng, max_states=3, max_actions=2)
            target = {sid for sid in model.states if model.states[sid].label == -1}
            if not target:
                continue
            k = 3
            for semantics in ("MAX", "MIN"):
                got = reach_prob(model, target, k=k, semantics=semantics).probs
                want = oracle_scheduler_enumeration(model, target, k, semantics, model.initial)
                assert got[model.initial] == pytest.approx(want, abs=1e-9)
            done += 1

    def test_monotone_in_k_and_max_dominates_min(self):
        rng = np.random.default_rng(79)
        for _ in range(30):
            model = random_mdp(rng)
            target = {sid for sid in model.states if model.states[sid].label == -1}
            prev = None
            for k in range(0, 6):
                cur = reach_prob(model, target, k=k).probs
                if prev is not None:
                    for sid in model.states:
                        assert cur[sid] >= prev[sid] - 1e-12
                prev = cur
            pmax = reach_prob(model, target, k=4, semantics="MAX").probs
            pmin = reach_prob(model, target, k=4, semantics="MIN").probs
            for sid in model.states:
                assert pmax[sid] >= pmin[sid] - 1e-12
                assert -1e-12 <= pmax[sid] <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# check()


class TestCheck:
    def test_unsafe_state_hits_immediately(self):
        model = make_mdp(2, {(0, 0): {1: 1.0}}, labels={0: -1})
        v = check(model, (0, 0), parse_pctl('P>0.8 [ F<=10 "rob=-1" ]'))
        assert v.holds and v.probability == 1.0

    def test_avoider_probability_zero(self):
        model = make_mdp(2, {(0, 0): {0: 1.0}}, labels={1: -1})
        v = check(model, (0, 0), parse_pctl('P>0.8 [ F<=10 "rob=-1" ]'))
        assert not v.holds
        assert v.probability == 0.0

    def test_three_state_hand_mdp_matches_oracle(self):
        transitions = {
            (0, 0): {1: 0.6, 2: 0.4},
            (0, 1): {2: 1.0},
            (1, 0): {1: 1.0},
            (2, 0): {0: 0.5, 1: 0.5},
        }
        model = make_mdp(3, transitions, labels={1: -1})
        target = {(1, 0)}
        for k in (1, 2, 4):
            want = oracle_bounded_reach(model, target, k, "MAX")[(0, 0)]
            got = check(model, (0, 0), ProbF(">=", 0.0, Finally(Ap("rob=-1"), k)))
            assert got.probability == pytest.approx(want, abs=1e-12)

    def test_next_semantics(self):
        model = make_mdp(2, {(0, 0): {1: 0.3, 0: 0.7}}, labels={1: -1})
        v = check(model, (0, 0), parse_pctl('P>0.5 [ X "rob=-1" ]'))
        assert v.probability == pytest.approx(0.3)
        assert not v.holds

    def test_globally_duality(self):
        model = make_mdp(2, {(0, 0): {1: 0.5, 0: 0.5}, (1, 0): {1: 1.0}}, labels={1: -1})
        safe = parse_pctl('P>=0.5 [ G "rob=+1" ]')
        v = check(model, (0, 0), safe, semantics="MAX")
        # staying safe forever from 0 has probability 0 under every scheduler
        assert v.probability == pytest.approx(0.0, abs=1e-6)

    def test_unbounded_until(self):
        model = make_mdp(3, {(0, 0): {1: 0.5, 2: 0.5}, (2, 0): {2: 1.0}}, labels={1: -1})
        f = parse_pctl('P>=0 [ ("rob=+1") U ("rob=-1") ]')
        v = check(model, (0, 0), f)
        assert v.probability == pytest.approx(0.5, abs=1e-9)

    def test_unknown_ap_rejected(self):
        model = make_mdp(2, {(0, 0): {1: 1.0}})
        with pytest.raises(ValueError, match="atomic proposition"):
            check(model, (0, 0), parse_pctl('P>0.5 [ X "no-such-label" ]'))

    def test_unknown_state_rejected(self):
        model = make_mdp(2, {(0, 0): {1: 1.0}})
        with pytest.raises(ValueError, match="not in the model"):
            check(model, (9, 0), TrueF())

    def test_check_all_covers_every_state_and_caches(self):
        model = make_mdp(3, {(0, 0): {1: 1.0}, (1, 0): {2: 1.0}}, labels={2: -1})
        f = parse_pctl('P>0.5 [ F<=2 "rob=-1" ]')
        first = check_all(model, f)
        assert set(first) == set(model.states)
        assert check_all(model, f) is first  # memoized on the model

    def test_non_prob_formula_has_no_probability(self):
        model = make_mdp(2, {(0, 0): {1: 1.0}}, labels={0: -1})
        v = check(model, (0, 0), parse_pctl('"rob=-1"'))
        assert v.holds and v.probability is None
