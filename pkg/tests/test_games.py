from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metastack import games
from metastack.games import GameFormatError, NormalFormGame, StrategyProfile


def labels(g, profiles):
    return sorted(g.label(p.actions) for p in profiles if p.is_pure)


def test_interpolation_endpoints():
    rng = np.random.default_rng(0)
    phi = rng.uniform(-1, 1, (2, 3))
    f = [rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2)]
    team = games.interpolate_game(phi, f, 0.0)
    assert games.is_team_game(team)
    g1 = games.interpolate_game(phi, f, 1.0)
    dec = games.potential_decomposition(g1)
    # potentials are unique up to a constant
    assert np.allclose(dec.potential - dec.potential[0, 0], phi - phi[0, 0])


def test_interpolation_rejects_own_action_residual():
    with pytest.raises(ValueError):
        games.interpolate_game(np.zeros((2, 2)), [np.zeros((2, 2)), np.zeros(2)], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 10_000))
def test_any_lambda_is_potential(lam, seed):
    assert games.is_potential_game(games.make_potential_game(np.random.default_rng(seed), (3, 2), lam))


def test_potential_examples():
    assert games.is_potential_game(games.prisoners_dilemma())
    assert not games.is_potential_game(games.matching_pennies())
    assert games.is_potential_game(games.make_team_game(np.random.default_rng(1), (3, 3)))


def test_classification_tags():
    assert games.classify(games.pure_coordination()) == "team"
    assert games.classify(games.make_coordination_game(np.random.default_rng(0), 3)) in ("coordination", "team")
    assert games.classify(games.prisoners_dilemma()) == "potential"
    assert games.classify(games.matching_pennies()) == "general"


def test_pure_nash_examples():
    assert labels(games.prisoners_dilemma(), games.pure_nash(games.prisoners_dilemma())) == ["(D,D)"]
    pc = games.pure_coordination()
    assert labels(pc, games.pure_nash(pc)) == ["(A,A)", "(B,B)"]
    assert games.pure_nash(games.matching_pennies()) == []


def test_mixed_examples():
    mp = games.mixed_nash_2x2(games.matching_pennies())
    assert len(mp) == 1 and np.allclose(mp[0].strategies[0], [0.5, 0.5])
    pc = games.mixed_nash_2x2(games.pure_coordination())
    assert len(pc) == 3 and sum(not p.is_pure for p in pc) == 1


def test_degenerate_game_flagged():
    g = NormalFormGame(np.zeros((2, 2, 2)))
    eq = games.mixed_nash_2x2(g)
    assert eq.degenerate and eq.notes
    assert len(eq) == 4


def test_mixed_requires_2x2():
    with pytest.raises(ValueError):
        games.mixed_nash_2x2(games.make_general_game(np.random.default_rng(0), (3, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_every_returned_profile_is_equilibrium(seed):
    g = games.make_general_game(np.random.default_rng(seed))
    for p in games.mixed_nash_2x2(g):
        assert np.all(games.deviation_gains(g, p) <= 1e-9)


def test_best_response_examples():
    pd = games.prisoners_dilemma()
    run = games.best_response_dynamics(pd, (1, 1))
    assert run.converged and run.improvement_steps == 0
    run = games.best_response_dynamics(pd, (0, 0))
    assert run.converged and pd.label(run.trajectory[-1]) == "(D,D)"
    run = games.best_response_dynamics(games.matching_pennies(), (0, 0), max_iters=50)
    assert not run.converged


def test_best_response_validates_start():
    with pytest.raises(ValueError):
        games.best_response_dynamics(games.prisoners_dilemma(), (0,))


def test_strategy_profile_validation():
    with pytest.raises(ValueError):
        StrategyProfile([np.array([0.7, 0.7]), np.array([1.0, 0.0])])


def test_game_validation():
    with pytest.raises(ValueError):
        NormalFormGame(np.array([[[np.inf, 0], [0, 0]], [[0, 0], [0, 0]]]))


def test_file_roundtrip(tmp_path):
    path = tmp_path / "pd.yaml"
    games.save_game(games.prisoners_dilemma(), path)
    g = games.load_game(path)
    assert np.array_equal(g.payoffs, games.prisoners_dilemma().payoffs)
    assert g.action_names == [["C", "D"], ["C", "D"]]


@pytest.mark.parametrize(
    "text",
    ["payoffs: [1, 2", "- 1\n- 2\n", "name: x\n", "payoffs: [[1, 2], [3]]\n", "payoffs: [[[1,2],[3,4]],[[1,2],[3,4]]]\nextra: 1\n"],
)
def test_malformed_files(tmp_path, text):
    path = tmp_path / "g.yaml"
    path.write_text(text)
    with pytest.raises(GameFormatError):
        games.load_game(path)


def test_missing_file():
    with pytest.raises(GameFormatError):
        games.load_game("/nonexistent/game.yaml")
