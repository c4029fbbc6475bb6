import functools

import pytest

from nlbellman.config import apply_overrides, build, preset
from nlbellman.solver import assemble, policy_iteration

PRESET_NAMES = ("constant", "outward-1d", "inward-1d", "mixed-disk", "linear-validate", "switching-1d")


@functools.lru_cache(maxsize=None)
def setup_for(name, overrides=()):
    cfg = preset(name)
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    return cfg, build(cfg)


@functools.lru_cache(maxsize=None)
def scheme_for(name, overrides=(), refine=0):
    _, s = setup_for(name, overrides)
    return assemble(s.domain, s.kernel, s.problem, s.grid(refine), s.quad)


@functools.lru_cache(maxsize=None)
def solve_for(name, overrides=(), refine=0):
    return policy_iteration(scheme_for(name, overrides, refine))


@pytest.fixture(params=PRESET_NAMES)
def preset_name(request):
    return request.param
