"""Single-lane traffic corridor with a light and a leading vehicle.

Cells are numbered 0..length-1 from the agent's start. The light sits on a
cell; leaving that cell forward while red is a violation, leaving it on green
is a crossing. The light starts red and turns green once somebody has waited
a step on the light cell, then stays green for the episode.

The leading vehicle moves before the agent each step. ``vehicle_action`` in the
state is the move the vehicle is about to make, so the agent can react to it.
A vehicle leaving the last cell exits (``vehicle_pos == length``).
"""
from __future__ import annotations

from ..core import DiscreteEnv, EnvSpec, FeatureDomain

STAY, FORWARD = 0, 1
RED, GREEN = 0, 1
AGENT, GOAL, VEHICLE_ACTION, VEHICLE_POS, LIGHT_POS, LIGHT_COLOR = range(6)

STEP_REWARD = -1.0
FAIL_REWARD = -10.0
CROSS_REWARD = 10.0
GOAL_REWARD = 10.0


class TrafficEnv(DiscreteEnv):
    action_names = ("stay", "forward")

    def __init__(
        self,
        seed: int = 0,
        length: int = 6,
        light_pos: int = 3,
        goal_pos: int | None = None,
        rule_following: bool = True,
        p_violate: float = 0.3,
        random_start_prob: float = 0.0,
        max_steps: int = 200,
    ):
        goal_pos = length - 1 if goal_pos is None else goal_pos
        if not 1 <= light_pos < goal_pos < length:
            raise ValueError("need 1 <= light_pos < goal_pos < length")
        spec = EnvSpec(
            "minigrid",
            [
                FeatureDomain("agent_pos", length, "agent cell"),
                FeatureDomain("goal_pos", length, "goal cell"),
                FeatureDomain("vehicle_action", 2, "leading vehicle's next move: 0 stay, 1 forward"),
                FeatureDomain("vehicle_pos", length + 1, "vehicle cell, length = exited"),
                FeatureDomain("light_pos", length, "light cell"),
                FeatureDomain("light_color", 2, "0 red, 1 green"),
            ],
            n_actions=2,
            max_steps=max_steps,
            seed=seed,
            params={
                "length": length,
                "light_pos": light_pos,
                "goal_pos": goal_pos,
                "rule_following": rule_following,
                "p_violate": p_violate,
                "random_start_prob": random_start_prob,
            },
        )
        super().__init__(spec)
        self.length = length
        self.exit = length
        self.light_pos = light_pos
        self.goal_pos = goal_pos
        self.rule_following = rule_following
        self.p_violate = p_violate
        self.random_start_prob = random_start_prob

    def leading_vehicle_policy(self, agent, vehicle, light_pos, color, rng=None) -> int:
        if vehicle == self.exit:
            return FORWARD
        if agent == vehicle + 1:
            return STAY  # blocked
        if vehicle != light_pos:
            return FORWARD
        action = STAY if color == RED else FORWARD
        if not self.rule_following:
            rng = self.rng if rng is None else rng
            if rng.random() < self.p_violate:
                action = FORWARD if action == STAY else STAY
        return action

    def _initial_state(self, rng):
        lp, g = self.light_pos, self.goal_pos
        if self.random_start_prob > 0 and rng.random() < self.random_start_prob:
            agent = int(rng.integers(g))
            vehicle = int(rng.integers(agent + 1, self.exit + 1))
            color = int(rng.integers(2))
        else:
            agent, vehicle, color = 0, 1, RED
        va = self.leading_vehicle_policy(agent, vehicle, lp, color, rng)
        return (agent, g, va, vehicle, lp, color)

    def admissible(self, state) -> bool:
        return state[AGENT] != state[VEHICLE_POS]

    def _transition(self, state, action):
        a, g, va, b, lp, color = state
        nb = b
        if b != self.exit and va == FORWARD:
            nb = b + 1
        na = min(a + 1, self.length - 1) if action == FORWARD else a
        waited = color == RED and ((b == lp and nb == lp) or (a == lp and na == a))
        ncolor = GREEN if waited else color
        moved = na != a

        if na == nb:
            return (na, g, va, nb, lp, ncolor), FAIL_REWARD, True
        crossed = moved and a == lp
        if crossed and color == RED:
            return (na, g, va, nb, lp, ncolor), FAIL_REWARD, True
        reward = 0.0
        if crossed:
            reward += CROSS_REWARD
        reached = moved and na == g
        if reached:
            reward += GOAL_REWARD
        if not (crossed or reached):
            reward = STEP_REWARD
        nva = self.leading_vehicle_policy(na, nb, lp, ncolor)
        return (na, g, nva, nb, lp, ncolor), reward, reached
