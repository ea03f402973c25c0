"""Normal-form games, the team / coordination / potential hierarchy and exact equilibrium oracles.

Desk scale: two players, at most four actions each, so every oracle here is a
brute-force enumeration and exact up to float tolerance.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml

TOL = 1e-9
GAME_CLASSES = ("team", "coordination", "potential", "general")


class GameFormatError(ValueError):
    """Malformed game file or payload."""


@dataclass
class NormalFormGame:
    """``payoffs[i]`` is player ``i``'s payoff tensor over joint actions."""

    payoffs: np.ndarray
    action_names: list[list[str]] | None = None
    name: str = ""

    def __post_init__(self) -> None:
        self.payoffs = np.asarray(self.payoffs, dtype=np.float64)
        if self.payoffs.ndim < 2 or self.payoffs.shape[0] != self.payoffs.ndim - 1:
            raise GameFormatError(
                f"payoff array of shape {self.payoffs.shape} is not (N, |A_1|, ..., |A_N|)"
            )
        if not np.all(np.isfinite(self.payoffs)):
            raise GameFormatError("payoffs must be finite")
        if self.action_names is None:
            self.action_names = [[chr(ord("A") + j) for j in range(n)] for n in self.sizes]
        if [len(a) for a in self.action_names] != list(self.sizes):
            raise GameFormatError("action names do not match payoff shape")

    @property
    def n_players(self) -> int:
        return self.payoffs.shape[0]

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.payoffs.shape[1:]

    def payoff(self, player: int, joint: Sequence[int]) -> float:
        return float(self.payoffs[(player, *joint)])

    def flat(self) -> np.ndarray:
        return self.payoffs.reshape(-1).copy()

    def label(self, joint: Sequence[int]) -> str:
        return "(" + ",".join(self.action_names[i][a] for i, a in enumerate(joint)) + ")"


@dataclass
class StrategyProfile:
    """One probability vector per player."""

    strategies: list[np.ndarray]

    def __post_init__(self) -> None:
        self.strategies = [np.asarray(s, dtype=np.float64) for s in self.strategies]
        for s in self.strategies:
            if np.any(s < -1e-12) or abs(float(s.sum()) - 1.0) > 1e-12:
                raise ValueError(f"not a probability vector: {s}")

    @classmethod
    def pure(cls, joint: Sequence[int], sizes: Sequence[int]) -> "StrategyProfile":
        return cls([np.eye(n)[a] for a, n in zip(joint, sizes)])

    @property
    def is_pure(self) -> bool:
        return all(np.max(s) == 1.0 for s in self.strategies)

    @property
    def actions(self) -> tuple[int, ...]:
        if not self.is_pure:
            raise ValueError("mixed profile has no single joint action")
        return tuple(int(np.argmax(s)) for s in self.strategies)

    def close_to(self, other: "StrategyProfile", tol: float = TOL) -> bool:
        return all(np.allclose(a, b, atol=tol, rtol=0) for a, b in zip(self.strategies, other.strategies))


@dataclass
class EquilibriumSet:
    """Equilibria from a solver plus whether the indifference system was degenerate."""

    profiles: list[StrategyProfile]
    degenerate: bool = False
    notes: list[str] = field(default_factory=list)

    def __iter__(self) -> Iterator[StrategyProfile]:
        return iter(self.profiles)

    def __len__(self) -> int:
        return len(self.profiles)

    def __getitem__(self, i: int) -> StrategyProfile:
        return self.profiles[i]


@dataclass
class PotentialDecomposition:
    """``u_i = potential + residuals[i]`` with each residual a function of opponents only."""

    potential: np.ndarray
    residuals: list[np.ndarray]


# ---- construction ---------------------------------------------------------


def make_team_game(rng: np.random.Generator, sizes: Sequence[int] = (2, 2)) -> NormalFormGame:
    """All players share one utility tensor drawn uniformly from [-1, 1]."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 2 or min(sizes) < 1:
        raise ValueError(f"invalid sizes {sizes}")
    shared = rng.uniform(-1.0, 1.0, size=sizes)
    return NormalFormGame(np.stack([shared] * len(sizes)), name="team")


def _check_residual_shapes(phi: np.ndarray, residuals: Sequence[np.ndarray]) -> list[np.ndarray]:
    if phi.ndim != 2 or len(residuals) != 2:
        raise ValueError("interpolation is implemented for two-player games")
    n1, n2 = phi.shape
    f1 = np.asarray(residuals[0], dtype=np.float64)
    f2 = np.asarray(residuals[1], dtype=np.float64)
    # player 0's residual may vary only with player 1's action and vice versa
    if f1.shape != (n2,):
        raise ValueError(f"residual for player 0 must have shape ({n2},), got {f1.shape}: it may not depend on own action")
    if f2.shape != (n1,):
        raise ValueError(f"residual for player 1 must have shape ({n1},), got {f2.shape}: it may not depend on own action")
    return [f1, f2]


def interpolate_game(phi: np.ndarray, residuals: Sequence[np.ndarray], lam: float) -> NormalFormGame:
    """``u_i = phi + lam * F_i``: ``lam = 0`` is the team game on ``phi``."""
    phi = np.asarray(phi, dtype=np.float64)
    f1, f2 = _check_residual_shapes(phi, residuals)
    u1 = phi + lam * f1[None, :]
    u2 = phi + lam * f2[:, None]
    return NormalFormGame(np.stack([u1, u2]), name=f"interpolated(lam={lam:g})")


def make_potential_game(rng: np.random.Generator, sizes: Sequence[int] = (2, 2), lam: float = 1.0) -> NormalFormGame:
    n1, n2 = sizes
    phi = rng.uniform(-1.0, 1.0, size=(n1, n2))
    return interpolate_game(phi, [rng.uniform(-1.0, 1.0, n2), rng.uniform(-1.0, 1.0, n1)], lam)


def make_coordination_game(rng: np.random.Generator, n_actions: int = 2) -> NormalFormGame:
    """Square potential game whose diagonal outcomes Pareto-dominate the off-diagonal ones.

    The residual scale is shrunk until every unilateral deviation moves both
    players' payoffs in the same direction.
    """
    n = int(n_actions)
    phi = rng.uniform(-1.0, 0.0, size=(n, n))
    phi[np.diag_indices(n)] = rng.uniform(1.0, 2.0, size=n)
    f1, f2 = rng.uniform(-0.25, 0.25, n), rng.uniform(-0.25, 0.25, n)
    dphi = [abs(phi[a, b] - phi[c, b]) for a, c, b in itertools.product(range(n), range(n), range(n)) if a != c]
    dphi += [abs(phi[a, b] - phi[a, c]) for a, b, c in itertools.product(range(n), range(n), range(n)) if b != c]
    df = max(np.ptp(f1), np.ptp(f2), 1e-12)
    scale = min(1.0, 0.5 * min(dphi, default=1.0) / df)
    g = interpolate_game(phi, [f1, f2], scale)
    g.name = "coordination"
    return g


def make_general_game(rng: np.random.Generator, sizes: Sequence[int] = (2, 2)) -> NormalFormGame:
    """Independent uniform payoffs per player (almost surely not a potential game)."""
    return NormalFormGame(rng.uniform(-1.0, 1.0, size=(2, *sizes)), name="general")


def prisoners_dilemma() -> NormalFormGame:
    u1 = np.array([[3.0, 0.0], [5.0, 1.0]])
    return NormalFormGame(np.stack([u1, u1.T]), [["C", "D"], ["C", "D"]], "prisoners_dilemma")


def matching_pennies() -> NormalFormGame:
    u1 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    return NormalFormGame(np.stack([u1, -u1]), [["H", "T"], ["H", "T"]], "matching_pennies")


def pure_coordination() -> NormalFormGame:
    u = np.eye(2)
    return NormalFormGame(np.stack([u, u]), [["A", "B"], ["A", "B"]], "pure_coordination")


# ---- classification -------------------------------------------------------


def _require_two_players(g: NormalFormGame) -> None:
    if g.n_players != 2:
        raise NotImplementedError("only two-player games are supported")


def _tol(g: NormalFormGame) -> float:
    return TOL * max(1.0, float(np.max(np.abs(g.payoffs))))


def is_team_game(g: NormalFormGame) -> bool:
    return all(np.allclose(g.payoffs[0], g.payoffs[i], atol=_tol(g), rtol=0) for i in range(1, g.n_players))


def is_potential_game(g: NormalFormGame) -> bool:
    """Exact-potential test: the payoff changes around every 2x2 four-cycle sum to zero."""
    _require_two_players(g)
    u1, u2 = g.payoffs
    # cyc[a, a', b, b'] for the cycle (a,b) -> (a',b) -> (a',b') -> (a,b') -> (a,b)
    cyc = (
        (u1[None, :, :, None] - u1[:, None, :, None])
        + (u2[None, :, None, :] - u2[None, :, :, None])
        + (u1[:, None, None, :] - u1[None, :, None, :])
        + (u2[:, None, :, None] - u2[:, None, None, :])
    )
    return bool(np.max(np.abs(cyc)) <= _tol(g))


def is_coordination_game(g: NormalFormGame) -> bool:
    """Exact potential game in which every unilateral deviation moves all payoffs the same way."""
    if not is_potential_game(g):
        return False
    u1, u2 = g.payoffs
    tol = _tol(g)
    n1, n2 = g.sizes
    for b in range(n2):
        for a, a2 in itertools.product(range(n1), repeat=2):
            if (u1[a2, b] - u1[a, b]) * (u2[a2, b] - u2[a, b]) < -tol:
                return False
    for a in range(n1):
        for b, b2 in itertools.product(range(n2), repeat=2):
            if (u1[a, b2] - u1[a, b]) * (u2[a, b2] - u2[a, b]) < -tol:
                return False
    return True


def classify(g: NormalFormGame) -> str:
    """Most specific class tag in the hierarchy team ⊂ coordination ⊂ potential ⊂ general."""
    if is_team_game(g):
        return "team"
    if is_coordination_game(g):
        return "coordination"
    if is_potential_game(g):
        return "potential"
    return "general"


def potential_decomposition(g: NormalFormGame) -> PotentialDecomposition:
    """Reconstruct the exact potential of a two-player potential game."""
    _require_two_players(g)
    if not is_potential_game(g):
        raise ValueError("game is not an exact potential game")
    u1, u2 = g.payoffs
    phi = u1 - u1[0:1, :] + u2[0:1, :] - u2[0, 0]
    return PotentialDecomposition(phi, [u1 - phi, u2 - phi])


# ---- equilibria -----------------------------------------------------------


def _expected_payoffs(g: NormalFormGame, profile: StrategyProfile) -> np.ndarray:
    out = np.empty(g.n_players)
    for i in range(g.n_players):
        t = g.payoffs[i]
        for s in reversed(profile.strategies):
            t = t @ s
        out[i] = t
    return out


def deviation_gains(g: NormalFormGame, profile: StrategyProfile) -> np.ndarray:
    """Per player: best pure-deviation payoff minus current expected payoff (≤ 0 at equilibrium)."""
    _require_two_players(g)
    u1, u2 = g.payoffs
    s1, s2 = profile.strategies
    current = _expected_payoffs(g, profile)
    best1 = float(np.max(u1 @ s2))
    best2 = float(np.max(s1 @ u2))
    return np.array([best1 - current[0], best2 - current[1]])


def is_equilibrium(g: NormalFormGame, profile: StrategyProfile, tol: float = TOL) -> bool:
    return bool(np.all(deviation_gains(g, profile) <= tol * max(1.0, float(np.max(np.abs(g.payoffs))))))


def pure_nash(g: NormalFormGame) -> list[StrategyProfile]:
    """All joint actions from which no player gains strictly by deviating, in lexicographic order."""
    out = []
    for joint in itertools.product(*(range(n) for n in g.sizes)):
        stable = True
        for i in range(g.n_players):
            current = g.payoffs[(i, *joint)]
            for alt in range(g.sizes[i]):
                dev = list(joint)
                dev[i] = alt
                if g.payoffs[(i, *dev)] > current + _tol(g):
                    stable = False
                    break
            if not stable:
                break
        if stable:
            out.append(StrategyProfile.pure(joint, g.sizes))
    return out


def mixed_nash_2x2(g: NormalFormGame) -> EquilibriumSet:
    """Support enumeration for 2x2 games: pure equilibria plus the fully mixed point if interior.

    The fully mixed candidate makes each player indifferent between their two
    actions. If a player's indifference equation has no unique solution the
    set is flagged ``degenerate``.
    """
    _require_two_players(g)
    if g.sizes != (2, 2):
        raise ValueError(f"mixed_nash_2x2 needs a 2x2 game, got {g.sizes}")
    result = EquilibriumSet(pure_nash(g))
    u1, u2 = g.payoffs
    tol = _tol(g)
    # player 0 plays action 0 w.p. p, chosen so player 1 is indifferent
    den_p = u2[0, 0] - u2[1, 0] - u2[0, 1] + u2[1, 1]
    den_q = u1[0, 0] - u1[0, 1] - u1[1, 0] + u1[1, 1]
    if abs(den_p) <= tol or abs(den_q) <= tol:
        result.degenerate = True
        result.notes.append("indifference system is singular; mixed equilibria may form a continuum")
        return result
    p = (u2[1, 1] - u2[1, 0]) / den_p
    q = (u1[1, 1] - u1[0, 1]) / den_q
    if (abs(p) <= tol or abs(p - 1) <= tol) or (abs(q) <= tol or abs(q - 1) <= tol):
        result.degenerate = True
        result.notes.append("indifference point lies on the simplex boundary")
        return result
    if 0.0 < p < 1.0 and 0.0 < q < 1.0:
        result.profiles.append(StrategyProfile([np.array([p, 1 - p]), np.array([q, 1 - q])]))
    return result


def canonical_equilibrium(g: NormalFormGame) -> StrategyProfile:
    """Deterministic representative: the welfare-maximising pure NE, else the mixed one."""
    pures = pure_nash(g)
    if pures:
        welfare = [float(sum(g.payoffs[(i, *p.actions)] for i in range(g.n_players))) for p in pures]
        return pures[int(np.argmax(welfare))]
    eq = mixed_nash_2x2(g)
    mixed = [p for p in eq if not p.is_pure]
    if mixed:
        return mixed[0]
    raise ValueError("no equilibrium found (degenerate game)")


@dataclass
class BestResponseRun:
    trajectory: list[tuple[int, ...]]
    converged: bool
    improvement_steps: int


def best_response_dynamics(g: NormalFormGame, start: Sequence[int], max_iters: int = 100) -> BestResponseRun:
    """Sequential best responses, players in index order, lowest-index tie-break.

    A player moves only if the switch strictly improves their payoff. One
    iteration is a pass over all players; the run converges when a full pass
    leaves the profile unchanged.
    """
    joint = list(int(a) for a in start)
    if len(joint) != g.n_players:
        raise ValueError("start profile has wrong length")
    trajectory = [tuple(joint)]
    tol = _tol(g)
    steps = 0
    for _ in range(max_iters):
        moved = False
        for i in range(g.n_players):
            vals = []
            for alt in range(g.sizes[i]):
                dev = list(joint)
                dev[i] = alt
                vals.append(g.payoffs[(i, *dev)])
            vals = np.asarray(vals)
            current = vals[joint[i]]
            best = int(np.argmax(vals))
            if vals[best] > current + tol:
                joint[i] = best
                trajectory.append(tuple(joint))
                steps += 1
                moved = True
        if not moved:
            return BestResponseRun(trajectory, True, steps)
    return BestResponseRun(trajectory, False, steps)


# ---- file format ----------------------------------------------------------


def game_to_dict(g: NormalFormGame) -> dict:
    return {
        "name": g.name,
        "actions": g.action_names,
        "payoffs": [g.payoffs[i].tolist() for i in range(g.n_players)],
    }


def game_from_dict(data) -> NormalFormGame:
    if not isinstance(data, dict):
        raise GameFormatError("game file must hold a mapping")
    unknown = set(data) - {"name", "actions", "payoffs"}
    if unknown:
        raise GameFormatError(f"unknown game keys: {sorted(unknown)}")
    if "payoffs" not in data:
        raise GameFormatError("missing 'payoffs'")
    try:
        payoffs = np.asarray(data["payoffs"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise GameFormatError(f"payoffs are not a rectangular numeric array: {exc}") from None
    actions = data.get("actions")
    if actions is not None:
        if not isinstance(actions, list) or not all(isinstance(a, list) for a in actions):
            raise GameFormatError("'actions' must be a list of action-name lists")
        actions = [[str(x) for x in a] for a in actions]
    return NormalFormGame(payoffs, actions, str(data.get("name", "")))


def load_game(path: str | Path) -> NormalFormGame:
    """Read a game file: YAML or JSON with ``payoffs`` as one row-major matrix per player."""
    try:
        text = Path(path).read_text()
        data = yaml.safe_load(text)
    except (OSError, yaml.YAMLError) as exc:
        raise GameFormatError(f"cannot read game file {path}: {exc}") from None
    return game_from_dict(data)


def save_game(g: NormalFormGame, path: str | Path) -> None:
    Path(path).write_text(json.dumps(game_to_dict(g), indent=2) + "\n")
