from .taxi import TaxiEnv
from .traffic import TrafficEnv

ENVIRONMENTS = {"taxi": TaxiEnv, "minigrid": TrafficEnv}


def make_env(env_id: str, seed: int = 0, **params):
    try:
        cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(seed=seed, **params)


__all__ = ["TaxiEnv", "TrafficEnv", "ENVIRONMENTS", "make_env"]
