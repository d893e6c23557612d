"""Shared fixtures: small synthetic datasets, tariffs and environments."""

import pytest

from services.dispatch_service import ObjectiveWeights
from services.env_service import BessEnv
from services.ingest_service import synth_profiles
from services.market_service import Tariff
from services.plant_service import StringSpec, StringState


@pytest.fixture
def specs():
    return StringSpec.default_pair()


@pytest.fixture
def two_days():
    return synth_profiles(2, seed=3)


@pytest.fixture
def week():
    return synth_profiles(7, seed=11)


@pytest.fixture
def tariff_for():
    def _tariff(series, sell_price=0.086):
        return Tariff(buy_price=series.price, sell_price=sell_price)
    return _tariff


@pytest.fixture
def weights():
    return ObjectiveWeights(x=1.0, y=0.01, z=0.001)


@pytest.fixture
def make_env(specs, tariff_for, weights):
    def _env(series, socs=(0.5, 0.5), taus=(25.0, 25.0), length=None, w=None):
        states = [StringState(soc=s, temperature=t) for s, t in zip(socs, taus)]
        return BessEnv(series, tariff_for(series), specs, w or weights,
                       initial_states=states, length=length)
    return _env
