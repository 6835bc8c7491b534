"""5x5 taxi with a passenger descriptor that predicts the destination.

Features: taxi x, taxi y, passenger descriptor, passenger location (one of the
four corner stands, or ``IN_TAXI``), destination stand.
"""
from __future__ import annotations

import numpy as np

from ..core import DiscreteEnv, EnvSpec, FeatureDomain, State

SIZE = 5
STANDS = ((0, 0), (4, 0), (0, 4), (4, 4))
IN_TAXI = 4

SOUTH, NORTH, EAST, WEST, PICKUP, DROPOFF = range(6)
MOVES = {SOUTH: (0, 1), NORTH: (0, -1), EAST: (1, 0), WEST: (-1, 0)}

X, Y, DESCRIPTOR, PASSENGER, DESTINATION = range(5)

# fixed bijection destination -> descriptor
DESCRIPTOR_OF = (2, 0, 3, 1)
DESTINATION_OF = tuple(DESCRIPTOR_OF.index(d) for d in range(4))

STEP_REWARD = -1.0
PICKUP_REWARD = 10.0
DROPOFF_REWARD = 20.0
ILLEGAL_REWARD = -10.0


def couple_descriptor(destination: int, rng: np.random.Generator, p_couple: float) -> int:
    """Descriptor drawn for a passenger heading to ``destination``."""
    image = DESCRIPTOR_OF[destination]
    if rng.random() < p_couple:
        return image
    others = [d for d in range(4) if d != image]
    return int(others[rng.integers(len(others))])


def is_coupled(state: State) -> bool:
    return DESCRIPTOR_OF[state[DESTINATION]] == state[DESCRIPTOR]


class TaxiEnv(DiscreteEnv):
    action_names = ("south", "north", "east", "west", "pickup", "dropoff")

    def __init__(self, seed: int = 0, p_couple: float = 0.95, max_steps: int = 200):
        if not 0.0 <= p_couple <= 1.0:
            raise ValueError("p_couple must lie in [0, 1]")
        spec = EnvSpec(
            "taxi",
            [
                FeatureDomain("x", SIZE, "taxi column"),
                FeatureDomain("y", SIZE, "taxi row"),
                FeatureDomain("descriptor", 4, "passenger descriptor, proxy for destination"),
                FeatureDomain("passenger_loc", 5, "stand index or 4 = in taxi"),
                FeatureDomain("destination", 4, "stand index"),
            ],
            n_actions=6,
            max_steps=max_steps,
            seed=seed,
            params={"p_couple": p_couple},
        )
        super().__init__(spec)
        self.p_couple = p_couple

    def _initial_state(self, rng):
        passenger = int(rng.integers(4))
        destination = int([d for d in range(4) if d != passenger][rng.integers(3)])
        descriptor = couple_descriptor(destination, rng, self.p_couple)
        x, y = int(rng.integers(SIZE)), int(rng.integers(SIZE))
        return (x, y, descriptor, passenger, destination)

    def _transition(self, state, action):
        x, y, desc, passenger, dest = state
        if action in MOVES:
            dx, dy = MOVES[action]
            x = min(max(x + dx, 0), SIZE - 1)
            y = min(max(y + dy, 0), SIZE - 1)
            return (x, y, desc, passenger, dest), STEP_REWARD, False
        here = (x, y)
        if action == PICKUP:
            if passenger != IN_TAXI and STANDS[passenger] == here:
                return (x, y, desc, IN_TAXI, dest), PICKUP_REWARD, False
            return state, ILLEGAL_REWARD, False
        # dropoff
        if passenger == IN_TAXI and STANDS[dest] == here:
            return (x, y, desc, dest, dest), DROPOFF_REWARD, True
        return state, ILLEGAL_REWARD, False

    def admissible(self, state) -> bool:
        # a passenger waiting at their own destination only exists as a finished trip
        return state[PASSENGER] != state[DESTINATION]

    def _propagate(self, before, after, feature):
        # descriptor -> destination: a coupled passenger keeps following the
        # descriptor; an intervened destination leaves the descriptor alone
        if feature == DESCRIPTOR and is_coupled(before):
            after = list(after)
            after[DESTINATION] = DESTINATION_OF[after[DESCRIPTOR]]
            return tuple(after)
        return after

    # helpers used by tests and reports
    @staticmethod
    def pickup_ready(state: State) -> bool:
        return state[PASSENGER] != IN_TAXI and STANDS[state[PASSENGER]] == (state[X], state[Y])

    @staticmethod
    def dropoff_ready(state: State) -> bool:
        return state[PASSENGER] == IN_TAXI and STANDS[state[DESTINATION]] == (state[X], state[Y])
