import datetime

import numpy as np
import pytest

from routegame.market import Market, ObservedDay, PreferenceParams, Provider, UserGroup


def make_market(prices, alphas, demands, delays=None, biases=None,
                w_q=1.0, w_d=1.0, price_cap=None):
    """Small-market builder; the last provider is the pricing target."""
    m, n = len(prices), len(demands)
    delays = np.zeros((n, m)) if delays is None else np.asarray(delays, dtype=float)
    biases = [0.0] * m if biases is None else [float(b) for b in biases]
    if price_cap is None:
        price_cap = max(1.0, 4.0 * max(prices))
    providers = tuple(
        Provider(id=f"s{j}", price=float(prices[j]), capacity=float(alphas[j]),
                 perceived_value=biases[j], is_target=(j == m - 1))
        for j in range(m)
    )
    users = tuple(
        UserGroup(id=f"u{i}", demand=float(demands[i]), delays=tuple(delays[i]))
        for i in range(n)
    )
    params = PreferenceParams(w_q=w_q, w_d=w_d, biases=tuple(biases))
    return Market(providers, users, params, float(price_cap))


def make_day(market, flows, date=datetime.date(2025, 7, 1)):
    flows = np.asarray(flows, dtype=float)
    return ObservedDay(
        date=date,
        flows=flows,
        demands=flows.sum(axis=1),
        prices=market.prices,
        capacities=market.capacities,
        delays=market.delays,
        user_ids=tuple(u.id for u in market.users),
        provider_ids=tuple(p.id for p in market.providers),
    )


@pytest.fixture
def two_provider_market():
    """1 user with D=10 over prices (1, 2); equilibrium flow is (5.25, 4.75)."""
    return make_market([1.0, 2.0], [1.0, 1.0], [10.0], price_cap=40.0)
