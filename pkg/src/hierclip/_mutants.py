"""Fault-injection switches used by ``selfcheck`` to prove its checks can fail."""

from contextlib import contextmanager

KNOWN = {
    "min-path": "combine the two single-turn path products with min instead of max",
    "drop-affinity-grad": "stop gradients flowing through the per-layer affinity estimate",
}

ACTIVE: set = set()


@contextmanager
def activated(*names: str):
    unknown = set(names) - set(KNOWN)
    if unknown:
        raise ValueError(f"unknown mutant(s): {sorted(unknown)}")
    previous = set(ACTIVE)
    ACTIVE.update(names)
    try:
        yield
    finally:
        ACTIVE.clear()
        ACTIVE.update(previous)
