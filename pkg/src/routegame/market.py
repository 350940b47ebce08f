"""Game-instance types, CSV ingestion, capacity derivation, and synthetic markets.

A market bundles the providers (prices p_j, capacities alpha_j, perceived
values b_j), the user groups (demands D_i, per-provider delays d_ij) and the
preference weights. The last provider is always the pricing target; everything
downstream (flow matrices, Jacobians) relies on that ordering.

Units: prices are dollars per million tokens, flows and demands are millions
of tokens per period, capacities are scaled so congestion load/alpha is a
dimensionless factor comparable in magnitude to prices.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import re
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateCapacityError,
    NotFoundError,
    SchemaError,
    ValidationError,
)

ROW_SUM_RTOL = 1e-6          # observed-flow row sums may drift this much before erroring
USAGE_FILTER_FRACTION = 0.01  # apps below this share of the top app are dropped per model

_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


def _parse_date(text, row=None):
    if not _DATE_RE.match(text):
        raise ValidationError(f"date {text!r} is not in YYYY-MM-DD form", row=row)
    try:
        return _dt.date.fromisoformat(text)
    except ValueError as exc:
        raise ValidationError(f"date {text!r}: {exc}", row=row) from None


def _readonly(a):
    a = np.asarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Provider:
    """One service provider: price, capacity, perceived value, target flag."""

    id: str
    price: float
    capacity: float
    perceived_value: float = 0.0
    is_target: bool = False

    def __post_init__(self):
        if not self.capacity > 0:
            raise ValidationError(f"provider {self.id}: capacity must be > 0, got {self.capacity}")
        if self.price < 0:
            raise ValidationError(f"provider {self.id}: price must be >= 0, got {self.price}")
        if self.perceived_value < 0:
            raise ValidationError(
                f"provider {self.id}: perceived_value must be >= 0, got {self.perceived_value}"
            )


@dataclass(frozen=True)
class UserGroup:
    """An aggregated user (an app or enterprise client) with a token demand."""

    id: str
    demand: float
    delays: tuple

    def __post_init__(self):
        object.__setattr__(self, "delays", tuple(float(d) for d in self.delays))
        if self.demand < 0:
            raise ValidationError(f"user {self.id}: demand must be >= 0, got {self.demand}")
        if any(d < 0 for d in self.delays):
            raise ValidationError(f"user {self.id}: delays must be >= 0")


@dataclass(frozen=True)
class PreferenceParams:
    """Preference weights (w_p fixed to 1 for identifiability) plus per-provider biases."""

    w_q: float
    w_d: float
    biases: tuple
    w_p: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "biases", tuple(float(b) for b in self.biases))
        if self.w_p != 1.0:
            raise ValidationError(f"w_p is normalized to 1, got {self.w_p}")
        if self.w_q < 0 or self.w_d < 0:
            raise ValidationError("w_q and w_d must be nonnegative")
        if any(b < 0 for b in self.biases):
            raise ValidationError("biases must be nonnegative")

    @classmethod
    def default(cls, m):
        return cls(w_q=1.0, w_d=1.0, biases=(0.0,) * m)

    def as_vector(self):
        """[w_q, w_d, b_0, ..., b_{m-1}], the free coordinates."""
        return np.concatenate([[self.w_q, self.w_d], self.biases])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        return cls(w_q=float(vec[0]), w_d=float(vec[1]), biases=tuple(vec[2:]))


@dataclass(frozen=True)
class Market:
    """Immutable game instance: providers (target last), users, preferences, price cap."""

    providers: tuple
    users: tuple
    params: PreferenceParams
    price_cap: float

    def __post_init__(self):
        object.__setattr__(self, "providers", tuple(self.providers))
        object.__setattr__(self, "users", tuple(self.users))
        m = len(self.providers)
        if m < 1:
            raise ValidationError("market needs at least one provider")
        targets = [j for j, p in enumerate(self.providers) if p.is_target]
        if targets != [m - 1]:
            raise ValidationError(
                "exactly one provider must be the target and it must be stored last; "
                f"target flags at indices {targets}"
            )
        for u in self.users:
            if len(u.delays) != m:
                raise ValidationError(
                    f"user {u.id}: {len(u.delays)} delays for {m} providers"
                )
        if not self.price_cap > 0:
            raise ValidationError(f"price_cap must be > 0, got {self.price_cap}")
        tgt = self.providers[-1]
        if not 0 <= tgt.price <= self.price_cap:
            raise ValidationError(
                f"target price {tgt.price} outside [0, {self.price_cap}]"
            )
        if len(self.params.biases) != m:
            raise ValidationError(
                f"params carries {len(self.params.biases)} biases for {m} providers"
            )
        for p, b in zip(self.providers, self.params.biases):
            if p.perceived_value != b:
                raise ValidationError(
                    f"provider {p.id}: perceived_value {p.perceived_value} differs "
                    f"from params bias {b}"
                )

    # -- array views (read-only, cached) --------------------------------

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_providers(self):
        return len(self.providers)

    @property
    def n_rivals(self):
        return len(self.providers) - 1

    @property
    def target_index(self):
        return len(self.providers) - 1

    @property
    def target(self):
        return self.providers[-1]

    @cached_property
    def prices(self):
        return _readonly([p.price for p in self.providers])

    @cached_property
    def capacities(self):
        return _readonly([p.capacity for p in self.providers])

    @cached_property
    def biases(self):
        return _readonly(self.params.biases)

    @cached_property
    def demands(self):
        return _readonly([u.demand for u in self.users])

    @cached_property
    def delays(self):
        return _readonly([u.delays for u in self.users]).reshape(self.n_users, self.n_providers)

    @cached_property
    def base_costs(self):
        """w_p*p_j + w_d*d_ij - b_j, the congestion-free part of the marginal cost."""
        p = self.params
        return _readonly(p.w_p * self.prices[None, :] + p.w_d * self.delays - self.biases[None, :])

    # -- derived markets -------------------------------------------------

    def with_target_price(self, price):
        if not 0 <= price <= self.price_cap:
            raise ValidationError(f"target price {price} outside [0, {self.price_cap}]")
        tgt = replace(self.providers[-1], price=float(price))
        return Market(self.providers[:-1] + (tgt,), self.users, self.params, self.price_cap)

    def with_params(self, params):
        """Rebuild the market under new preference params (biases flow into providers)."""
        if len(params.biases) != self.n_providers:
            raise ValidationError("params bias vector length mismatch")
        providers = tuple(
            replace(p, perceived_value=float(b)) for p, b in zip(self.providers, params.biases)
        )
        return Market(providers, self.users, params, self.price_cap)

    def with_demands(self, demands):
        if len(demands) != self.n_users:
            raise ValidationError("demand vector length mismatch")
        users = tuple(replace(u, demand=float(d)) for u, d in zip(self.users, demands))
        return Market(self.providers, users, self.params, self.price_cap)


@dataclass(frozen=True)
class ObservedDay:
    """One day of observed routing: flows, demands, and the objective snapshot."""

    date: _dt.date
    flows: np.ndarray          # (n, m) millions of tokens
    demands: np.ndarray        # (n,)
    prices: np.ndarray         # (m,)
    capacities: np.ndarray     # (m,)
    delays: np.ndarray         # (n, m)
    user_ids: tuple = ()
    provider_ids: tuple = ()

    def __post_init__(self):
        flows = np.array(self.flows, dtype=float)
        demands = np.asarray(self.demands, dtype=float)
        if flows.ndim != 2 or flows.shape[0] != demands.shape[0]:
            raise ValidationError("flows must be (n_users, n_providers)")
        if (flows < 0).any():
            raise ValidationError("observed flows must be nonnegative")
        # Row sums must match demands up to CSV noise; renormalize small drift.
        for i in range(flows.shape[0]):
            s, d = flows[i].sum(), demands[i]
            if d <= 0:
                if s > ROW_SUM_RTOL * max(1.0, abs(d)):
                    raise ValidationError(f"user row {i}: positive flow with zero demand")
                flows[i] = 0.0
                continue
            if abs(s - d) > ROW_SUM_RTOL * max(abs(s), abs(d)):
                raise ValidationError(
                    f"user row {i}: flow sum {s} deviates from demand {d} beyond tolerance"
                )
            if s > 0:
                flows[i] *= d / s
        object.__setattr__(self, "flows", _readonly(flows))
        object.__setattr__(self, "demands", _readonly(demands))
        object.__setattr__(self, "prices", _readonly(self.prices))
        object.__setattr__(self, "capacities", _readonly(self.capacities))
        object.__setattr__(self, "delays", _readonly(np.asarray(self.delays, dtype=float)))
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(f"u{i}" for i in range(flows.shape[0])))
        if not self.provider_ids:
            object.__setattr__(self, "provider_ids", tuple(f"s{j}" for j in range(flows.shape[1])))

    def to_market(self, params, price_cap=None):
        """Materialize this day's objective snapshot as a solvable market."""
        m = self.flows.shape[1]
        if price_cap is None:
            price_cap = max(1.0, 2.0 * float(self.prices.max()))
        providers = tuple(
            Provider(
                id=self.provider_ids[j],
                price=float(self.prices[j]),
                capacity=float(self.capacities[j]),
                perceived_value=float(params.biases[j]),
                is_target=(j == m - 1),
            )
            for j in range(m)
        )
        users = tuple(
            UserGroup(id=self.user_ids[i], demand=float(self.demands[i]), delays=tuple(self.delays[i]))
            for i in range(self.flows.shape[0])
        )
        return Market(providers, users, params, float(price_cap))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

USAGE_COLUMNS = (
    "Date",
    "app_name",
    "model_name",
    "model_usage_token",
    "output_speed",
    "time_to_first_token",
)
PERFORMANCE_COLUMNS = (
    "Date",
    "model_name",
    "total_token_usage_M",
    "output_speed",
    "time_to_first_token",
)


@dataclass(frozen=True)
class UsageRecord:
    date: _dt.date
    app: str
    model: str
    tokens: int
    tps: float
    ttft: float


@dataclass(frozen=True)
class PerformanceRecord:
    date: _dt.date
    model: str
    usage_m: float
    tps: float
    ttft: float


def _check_header(header, expected, path):
    got, want = set(header), set(expected)
    missing = want - got
    extra = got - want
    if missing:
        raise SchemaError(f"{path}: missing column {sorted(missing)[0]!r}")
    if extra:
        raise SchemaError(f"{path}: unexpected column {sorted(extra)[0]!r}")


def _nonneg_float(text, what, row):
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"{what} {text!r} is not a number", row=row) from None
    if not np.isfinite(value) or value < 0:
        raise ValidationError(f"{what} must be finite and >= 0, got {text!r}", row=row)
    return value


def _nonneg_int(text, what, row):
    try:
        value = int(text)
    except ValueError:
        raise ValidationError(f"{what} {text!r} is not an integer", row=row) from None
    if value < 0:
        raise ValidationError(f"{what} must be >= 0, got {value}", row=row)
    return value


def load_usage_csv(path):
    """Parse per-(app, model, day) routing volumes and QoS observations."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, header row required")
        _check_header(reader.fieldnames, USAGE_COLUMNS, path)
        for row_no, row in enumerate(reader, start=2):
            records.append(
                UsageRecord(
                    date=_parse_date(row["Date"], row=row_no),
                    app=row["app_name"],
                    model=row["model_name"],
                    tokens=_nonneg_int(row["model_usage_token"], "token count", row_no),
                    tps=_nonneg_float(row["output_speed"], "output speed", row_no),
                    ttft=_nonneg_float(row["time_to_first_token"], "time to first token", row_no),
                )
            )
    return records


def load_performance_csv(path):
    """Parse per-(model, day) totals; usage is already in millions of tokens."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, header row required")
        _check_header(reader.fieldnames, PERFORMANCE_COLUMNS, path)
        for row_no, row in enumerate(reader, start=2):
            records.append(
                PerformanceRecord(
                    date=_parse_date(row["Date"], row=row_no),
                    model=row["model_name"],
                    usage_m=_nonneg_float(row["total_token_usage_M"], "token usage", row_no),
                    tps=_nonneg_float(row["output_speed"], "output speed", row_no),
                    ttft=_nonneg_float(row["time_to_first_token"], "time to first token", row_no),
                )
            )
    return records


def build_market(
    usage,
    performance,
    date_range,
    target_model,
    prices=None,
    price_cap=None,
    filter_fraction=USAGE_FILTER_FRACTION,
):
    """Assemble a market and its observed days from ingested records.

    Capacity is total usage over the range divided by mean output speed.
    Users are the apps that clear the relative-usage filter for at least one
    model; delays are mean observed TTFT per (app, model), falling back to
    the model's mean TTFT for unobserved pairs.

    The CSV schemas carry no prices, so ``prices`` (a model -> price mapping)
    is supplied separately; absent entries default to 0.
    """
    dates = sorted(set(date_range))
    if not dates:
        raise ConfigurationError("date_range must be nonempty")
    in_range = set(dates)

    perf = [r for r in performance if r.date in in_range]
    use = [r for r in usage if r.date in in_range]

    models = sorted({r.model for r in perf})
    if target_model not in models:
        raise NotFoundError(f"target model {target_model!r} has no performance data in range")
    models.remove(target_model)
    models.append(target_model)  # target last
    model_idx = {name: j for j, name in enumerate(models)}
    m = len(models)

    # Capacity: total usage (millions) over the range / mean output speed.
    alphas = np.zeros(m)
    model_ttft = np.zeros(m)
    for j, name in enumerate(models):
        rows = [r for r in perf if r.model == name]
        total = sum(r.usage_m for r in rows)
        speed = float(np.mean([r.tps for r in rows]))
        if speed <= 0:
            raise DegenerateCapacityError(f"model {name}: mean output speed is zero")
        if total <= 0:
            raise DegenerateCapacityError(f"model {name}: zero total usage over the range")
        alphas[j] = total / speed
        model_ttft[j] = float(np.mean([r.ttft for r in rows]))

    # Relative-usage filter, applied per model over range totals.
    pair_tokens = {}
    for r in use:
        if r.model in model_idx:
            pair_tokens[(r.app, r.model)] = pair_tokens.get((r.app, r.model), 0) + r.tokens
    kept_apps = set()
    for name in models:
        per_app = {a: t for (a, mod), t in pair_tokens.items() if mod == name}
        if not per_app:
            continue
        top = max(per_app.values())
        kept_apps.update(a for a, t in per_app.items() if t >= filter_fraction * top)
    apps = sorted(kept_apps)
    if not apps:
        raise ValidationError("no app clears the usage filter for any model")
    app_idx = {a: i for i, a in enumerate(apps)}
    n = len(apps)

    # Delays: mean TTFT per (app, model), model-mean fallback for unseen pairs.
    delays = np.tile(model_ttft, (n, 1))
    pair_ttft = {}
    for r in use:
        if r.app in app_idx and r.model in model_idx:
            pair_ttft.setdefault((r.app, r.model), []).append(r.ttft)
    for (a, mod), vals in pair_ttft.items():
        delays[app_idx[a], model_idx[mod]] = float(np.mean(vals))

    price_map = dict(prices or {})
    price_vec = np.array([float(price_map.get(name, 0.0)) for name in models])
    if price_cap is None:
        price_cap = max(1.0, 2.0 * float(price_vec.max()))

    params = PreferenceParams.default(m)
    providers = tuple(
        Provider(
            id=name,
            price=float(price_vec[j]),
            capacity=float(alphas[j]),
            perceived_value=0.0,
            is_target=(j == m - 1),
        )
        for j, name in enumerate(models)
    )

    # Daily flows in millions of tokens; demand is the routed row sum.
    daily_flows = {d: np.zeros((n, m)) for d in dates}
    daily_ttft = {d: {} for d in dates}
    for r in use:
        if r.app in app_idx and r.model in model_idx:
            daily_flows[r.date][app_idx[r.app], model_idx[r.model]] += r.tokens / 1e6
            daily_ttft[r.date].setdefault((app_idx[r.app], model_idx[r.model]), []).append(r.ttft)

    days = []
    for d in dates:
        flows = daily_flows[d]
        day_delays = delays.copy()
        for (i, j), vals in daily_ttft[d].items():
            day_delays[i, j] = float(np.mean(vals))
        days.append(
            ObservedDay(
                date=d,
                flows=flows,
                demands=flows.sum(axis=1),
                prices=price_vec,
                capacities=alphas,
                delays=day_delays,
                user_ids=tuple(apps),
                provider_ids=tuple(models),
            )
        )

    users = tuple(
        UserGroup(
            id=a,
            demand=float(np.mean([daily_flows[d][app_idx[a]].sum() for d in dates])),
            delays=tuple(delays[app_idx[a]]),
        )
        for a in apps
    )
    market = Market(providers, users, params, float(price_cap))
    return market, days


# ---------------------------------------------------------------------------
# Synthetic markets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthRanges:
    """Uniform sampling bounds for synthetic market attributes.

    Defaults keep congestion terms comparable to price spreads so the target
    provider's profit curve has an interior maximum instead of a winner-take-
    all cliff.
    """

    price: tuple = (0.5, 3.0)
    capacity: tuple = (1.0, 6.0)
    delay: tuple = (0.05, 1.0)
    demand: tuple = (1.0, 10.0)
    bias: tuple = (0.0, 1.0)
    price_cap: float | None = None  # defaults to 2x the price upper bound

    def __post_init__(self):
        for name in ("price", "capacity", "delay", "demand", "bias"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ConfigurationError(f"range {name}=({lo}, {hi}) is empty or inverted")
            if lo < 0:
                raise ConfigurationError(f"range {name} must be nonnegative")
        if self.capacity[0] <= 0:
            raise ConfigurationError("capacity range must be strictly positive")


def synth_market(seed, n_users, m_providers, ranges=None):
    """Draw a reproducible random market; identical (seed, ranges) give identical markets."""
    if n_users < 1 or m_providers < 2:
        raise ConfigurationError("need n_users >= 1 and m_providers >= 2")
    ranges = ranges or SynthRanges()
    rng = np.random.default_rng(seed)
    prices = rng.uniform(*ranges.price, m_providers)
    alphas = rng.uniform(*ranges.capacity, m_providers)
    biases = rng.uniform(*ranges.bias, m_providers)
    demands = rng.uniform(*ranges.demand, n_users)
    delays = rng.uniform(*ranges.delay, (n_users, m_providers))
    price_cap = ranges.price_cap if ranges.price_cap is not None else 2.0 * ranges.price[1]

    providers = tuple(
        Provider(
            id=f"s{j}",
            price=float(prices[j]),
            capacity=float(alphas[j]),
            perceived_value=float(biases[j]),
            is_target=(j == m_providers - 1),
        )
        for j in range(m_providers)
    )
    users = tuple(
        UserGroup(id=f"u{i}", demand=float(demands[i]), delays=tuple(delays[i]))
        for i in range(n_users)
    )
    params = PreferenceParams(w_q=1.0, w_d=1.0, biases=tuple(float(b) for b in biases))
    tgt_price = min(float(prices[-1]), price_cap)
    market = Market(providers, users, params, float(price_cap))
    return market.with_target_price(tgt_price)


# ---------------------------------------------------------------------------
# Market config I/O (canonical JSON, deterministic field order)
# ---------------------------------------------------------------------------


def market_to_dict(market):
    return {
        "providers": [
            {
                "id": p.id,
                "price": p.price,
                "capacity": p.capacity,
                "perceived_value": p.perceived_value,
                "is_target": p.is_target,
            }
            for p in market.providers
        ],
        "users": [
            {"id": u.id, "demand": u.demand, "delays": list(u.delays)} for u in market.users
        ],
        "params": {
            "w_p": market.params.w_p,
            "w_q": market.params.w_q,
            "w_d": market.params.w_d,
            "biases": list(market.params.biases),
        },
        "price_cap": market.price_cap,
    }


def market_from_dict(data):
    try:
        providers = tuple(
            Provider(
                id=p["id"],
                price=float(p["price"]),
                capacity=float(p["capacity"]),
                perceived_value=float(p.get("perceived_value", 0.0)),
                is_target=bool(p.get("is_target", False)),
            )
            for p in data["providers"]
        )
        users = tuple(
            UserGroup(id=u["id"], demand=float(u["demand"]), delays=tuple(u["delays"]))
            for u in data["users"]
        )
        pr = data["params"]
        params = PreferenceParams(
            w_q=float(pr["w_q"]), w_d=float(pr["w_d"]), biases=tuple(pr["biases"]),
            w_p=float(pr.get("w_p", 1.0)),
        )
        return Market(providers, users, params, float(data["price_cap"]))
    except KeyError as exc:
        raise SchemaError(f"market config: missing field {exc.args[0]!r}") from None


def save_market(market, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(market_to_dict(market), fh, indent=2)
        fh.write("\n")


def load_market(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return market_from_dict(data)
