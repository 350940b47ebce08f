"""Rival ranking, tail aggregation, and the profit-curve-preserving scorer.

Each rival is embedded from nine standardized features; a shared per-rival
transform concatenated with a mean-pooled context (two tanh layers, width 32)
keeps the map permutation-equivariant. Two heads emit parallel scores: the
sum head (softplus) weights capacity accumulation, the avg head (exponential,
normalized over the aggregated subset) weights attribute averaging.

The training loss compares the target's profit curve in the original and
abstracted markets over sampled prices, normalized by the original curve's
sup-norm. Gradients flow through the abstracted equilibria via the KKT
system, analytically through the aggregation formulas, then by backprop
through the network; the discrete top-(K-1) selection is held constant
within a step.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .equilibrium import solve_equilibrium
from .errors import (
    ConfigurationError,
    DegeneracyError,
    NumericalError,
    SchemaHashError,
    ValidationError,
)
from .market import Market, PreferenceParams, Provider
from .sensitivity import ParamRef, loss_gradient

FEATURE_NAMES = (
    "price",
    "perceived_value",
    "log_capacity",
    "mean_delay",
    "min_delay",
    "price_minus_target",
    "value_minus_target",
    "log_capacity_minus_target",
    "demand_weighted_delay_gap",
)
SCHEMA_VERSION = 1
STD_FLOOR = 1e-9
HIDDEN = 32


def feature_schema_hash():
    text = f"v{SCHEMA_VERSION}:" + "|".join(FEATURE_NAMES)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def rival_features(market):
    """Per-rival feature matrix (rivals x 9), standardized over rivals."""
    if market.n_rivals < 1:
        raise ValidationError("market has no rivals to featurize")
    r = market.n_rivals
    prices, alphas, biases = market.prices, market.capacities, market.biases
    delays, demands = market.delays, market.demands
    s = market.target_index
    total_d = demands.sum()
    weights = demands / total_d if total_d > 0 else np.full(market.n_users, 1.0 / max(market.n_users, 1))

    X = np.zeros((r, len(FEATURE_NAMES)))
    for j in range(r):
        gap = delays[:, j] - delays[:, s]
        X[j] = [
            prices[j],
            biases[j],
            np.log(alphas[j]),
            delays[:, j].mean(),
            delays[:, j].min(),
            prices[j] - prices[s],
            biases[j] - biases[s],
            np.log(alphas[j]) - np.log(alphas[s]),
            float(weights @ gap),
        ]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return (X - mean) / np.maximum(std, STD_FLOOR)


@dataclass(frozen=True)
class RivalScores:
    sum_scores: np.ndarray
    avg_scores: np.ndarray

    def __post_init__(self):
        ss = np.asarray(self.sum_scores, dtype=float)
        av = np.asarray(self.avg_scores, dtype=float)
        if not (np.isfinite(ss).all() and np.isfinite(av).all()):
            raise NumericalError("scores must be finite")
        if (ss < 0).any() or (av < 0).any():
            raise ValidationError("scores must be nonnegative")
        if not (av > 0).any():
            raise ValidationError("avg scores must not all be zero")
        object.__setattr__(self, "sum_scores", ss)
        object.__setattr__(self, "avg_scores", av)


def _softplus(z):
    return np.logaddexp(0.0, z)


class ScorerModel:
    """Permutation-equivariant rival scorer with explicit backprop."""

    PARAM_SHAPES = (
        ("W1", (HIDDEN, len(FEATURE_NAMES))),
        ("b1", (HIDDEN,)),
        ("W2", (HIDDEN, 2 * HIDDEN)),
        ("b2", (HIDDEN,)),
        ("w_sum", (HIDDEN,)),
        ("c_sum", ()),
        ("w_avg", (HIDDEN,)),
        ("c_avg", ()),
    )

    def __init__(self, params, schema_hash=None):
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self.schema_hash = schema_hash or feature_schema_hash()
        for name, shape in self.PARAM_SHAPES:
            if self.params[name].shape != shape:
                raise ValidationError(f"scorer parameter {name} has shape "
                                      f"{self.params[name].shape}, expected {shape}")

    @classmethod
    def initialize(cls, seed=0):
        """Zero heads with biases chosen so every rival starts at uniform scores
        (sum scores 1, equal avg weights): the attribute-averaging baseline."""
        rng = np.random.default_rng(seed)
        nf = len(FEATURE_NAMES)
        params = {
            "W1": rng.normal(0.0, 1.0 / np.sqrt(nf), (HIDDEN, nf)),
            "b1": np.zeros(HIDDEN),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(2 * HIDDEN), (HIDDEN, 2 * HIDDEN)),
            "b2": np.zeros(HIDDEN),
            "w_sum": np.zeros(HIDDEN),
            "c_sum": np.array(np.log(np.e - 1.0)),  # softplus(c_sum) == 1
            "w_avg": np.zeros(HIDDEN),
            "c_avg": np.array(0.0),
        }
        return cls(params)

    # -- flat parameter view (optimizers, SPSA, finite differences) -------

    def flat(self):
        return np.concatenate([self.params[n].ravel() for n, _ in self.PARAM_SHAPES])

    def set_flat(self, vec):
        pos = 0
        for name, shape in self.PARAM_SHAPES:
            size = int(np.prod(shape)) if shape else 1
            self.params[name] = np.asarray(vec[pos : pos + size], dtype=float).reshape(shape)
            pos += size

    def copy(self):
        return ScorerModel({k: v.copy() for k, v in self.params.items()}, self.schema_hash)

    # -- forward / backward ------------------------------------------------

    def forward(self, X):
        p = self.params
        A1 = X @ p["W1"].T + p["b1"]
        H = np.tanh(A1)
        ctx = H.mean(axis=0)
        Z = np.hstack([H, np.tile(ctx, (X.shape[0], 1))])
        A2 = Z @ p["W2"].T + p["b2"]
        G = np.tanh(A2)
        z_sum = G @ p["w_sum"] + p["c_sum"]
        z_avg = G @ p["w_avg"] + p["c_avg"]
        for name, arr in (("embed", H), ("interaction", G), ("sum head", z_sum), ("avg head", z_avg)):
            if not np.isfinite(arr).all():
                raise NumericalError(f"non-finite activation in {name} layer")
        sum_scores = _softplus(z_sum)
        avg_scores = np.exp(z_avg - z_avg.max())
        cache = {"X": X, "H": H, "Z": Z, "G": G, "z_sum": z_sum, "z_avg": z_avg}
        return RivalScores(sum_scores=sum_scores, avg_scores=avg_scores), cache

    def backward(self, cache, dz_sum, dz_avg):
        """Gradient of a scalar loss wrt the flat parameters, given gradients
        at the pre-activation heads."""
        p = self.params
        X, H, Z, G = cache["X"], cache["H"], cache["Z"], cache["G"]
        r = X.shape[0]
        g = {}
        g["w_sum"] = G.T @ dz_sum
        g["c_sum"] = np.array(dz_sum.sum())
        g["w_avg"] = G.T @ dz_avg
        g["c_avg"] = np.array(dz_avg.sum())
        dG = np.outer(dz_sum, p["w_sum"]) + np.outer(dz_avg, p["w_avg"])
        dA2 = dG * (1.0 - G**2)
        g["W2"] = dA2.T @ Z
        g["b2"] = dA2.sum(axis=0)
        dZ = dA2 @ p["W2"]
        dH = dZ[:, :HIDDEN] + dZ[:, HIDDEN:].sum(axis=0) / r
        dA1 = dH * (1.0 - H**2)
        g["W1"] = dA1.T @ X
        g["b1"] = dA1.sum(axis=0)
        return np.concatenate([g[n].ravel() for n, _ in self.PARAM_SHAPES])

    # -- persistence --------------------------------------------------------

    def save(self, path):
        data = {
            "version": SCHEMA_VERSION,
            "schema_hash": self.schema_hash,
            "params": {n: self.params[n].tolist() for n, _ in self.PARAM_SHAPES},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: corrupt scorer file ({exc})") from None
        try:
            return cls(
                {n: np.asarray(data["params"][n]) for n, _ in cls.PARAM_SHAPES},
                schema_hash=data["schema_hash"],
            )
        except KeyError as exc:
            raise ValidationError(f"{path}: corrupt scorer file, missing {exc.args[0]!r}") from None


def score_rivals(scorer, market):
    """Run the scorer over a market's rivals; refuses a stale feature schema."""
    if scorer.schema_hash != feature_schema_hash():
        raise SchemaHashError(
            f"scorer was built for feature schema {scorer.schema_hash}, "
            f"current featurizer is {feature_schema_hash()}"
        )
    scores, _ = scorer.forward(rival_features(market))
    return scores


def heuristic_scores(market, kind, K=None):
    """Score vectors for the cheapest-rivals and uniform-average baselines."""
    r = market.n_rivals
    if r < 1:
        raise ValidationError("market has no rivals")
    if kind == "MIN":
        rank = np.argsort(np.argsort(market.prices[:r], kind="stable"), kind="stable")
        return RivalScores(sum_scores=np.ones(r), avg_scores=(r - rank).astype(float))
    if kind == "AVG":
        return RivalScores(sum_scores=np.ones(r), avg_scores=np.ones(r))
    raise ConfigurationError(f"unknown heuristic kind {kind!r}")


@dataclass(frozen=True)
class AbstractedMarket:
    market: Market
    kept_indices: tuple
    aggregate_weights: RivalScores
    aggregate_index: int | None  # provider slot of the aggregate rival, None for identity

    @property
    def is_identity(self):
        return self.aggregate_index is None


def aggregate(market, scores, K):
    """Keep the top K-1 rivals by avg score and collapse the rest into one.

    The aggregate's capacity is the sum-score weighted sum; price, delays,
    and perceived value are avg-score weighted averages. K equal to the rival
    count keeps every rival (identity; no aggregate slot).
    """
    r = market.n_rivals
    if not 1 <= K <= r:
        raise ValidationError(f"K={K} outside [1, {r}] for {r} rivals")
    if len(scores.sum_scores) != r or len(scores.avg_scores) != r:
        raise ValidationError("score vectors must cover every rival")
    if K == r:
        return AbstractedMarket(
            market=market, kept_indices=tuple(range(r)), aggregate_weights=scores,
            aggregate_index=None,
        )

    order = np.argsort(-scores.avg_scores, kind="stable")  # ties keep original index order
    kept = tuple(sorted(int(j) for j in order[: K - 1]))
    agg = sorted(int(j) for j in order[K - 1 :])

    avg_w = scores.avg_scores[agg]
    total = avg_w.sum()
    if total <= 0:
        raise DegeneracyError("avg scores over the aggregated rivals sum to zero")
    u = avg_w / total
    alphas = market.capacities
    alpha_a = float(scores.sum_scores[agg] @ alphas[agg])
    if alpha_a <= 0:
        raise DegeneracyError("aggregate capacity is zero; sum scores vanish on the tail")
    price_a = float(u @ market.prices[agg])
    bias_a = float(u @ market.biases[agg])
    delay_a = market.delays[:, agg] @ u

    providers = [market.providers[j] for j in kept]
    providers.append(
        Provider(id="aggregate", price=price_a, capacity=alpha_a,
                 perceived_value=bias_a, is_target=False)
    )
    providers.append(market.target)
    keep_cols = list(kept)
    users = tuple(
        replace(
            usr,
            delays=tuple(np.concatenate([market.delays[i, keep_cols],
                                         [delay_a[i]],
                                         [market.delays[i, -1]]])),
        )
        for i, usr in enumerate(market.users)
    )
    biases = tuple(
        [float(market.biases[j]) for j in kept] + [bias_a] + [float(market.biases[-1])]
    )
    params = PreferenceParams(
        w_q=market.params.w_q, w_d=market.params.w_d, biases=biases, w_p=market.params.w_p
    )
    small = Market(tuple(providers), users, params, market.price_cap)
    return AbstractedMarket(
        market=small, kept_indices=kept, aggregate_weights=scores, aggregate_index=len(kept)
    )


def replicated_average_market(market, K):
    """The uniform-average baseline market: K identical copies of the mean
    rival (summed capacity, averaged attributes) plus the target."""
    r = market.n_rivals
    if r < 1:
        raise ValidationError("market has no rivals")
    alpha_a = float(market.capacities[:r].sum())
    price_a = float(market.prices[:r].mean())
    bias_a = float(market.biases[:r].mean())
    delay_a = market.delays[:, :r].mean(axis=1)
    providers = tuple(
        Provider(id=f"avg{k}", price=price_a, capacity=alpha_a,
                 perceived_value=bias_a, is_target=False)
        for k in range(K)
    ) + (market.target,)
    users = tuple(
        replace(u, delays=tuple([float(delay_a[i])] * K + [float(market.delays[i, -1])]))
        for i, u in enumerate(market.users)
    )
    biases = tuple([bias_a] * K + [float(market.biases[-1])])
    params = PreferenceParams(
        w_q=market.params.w_q, w_d=market.params.w_d, biases=biases, w_p=market.params.w_p
    )
    return Market(providers, users, params, market.price_cap)


# ---------------------------------------------------------------------------
# Curve loss and its gradient
# ---------------------------------------------------------------------------


def _abstract_param_refs(market, agg_index):
    refs = [
        ParamRef("price", j=agg_index),
        ParamRef("log_capacity", j=agg_index),
        ParamRef("bias", j=agg_index),
    ]
    refs += [ParamRef("delay", i=i, j=agg_index) for i in range(market.n_users)]
    return refs


def curve_loss(scorer, market, K, price_samples):
    """Normalized MSE between original and abstracted profit curves."""
    loss, _, _ = _curve_loss_impl(scorer, market, K, price_samples, want_grad=False)
    return loss


def curve_loss_and_grad(scorer, market, K, price_samples):
    """(loss, d loss / d flat params, fraction of degenerate equilibria)."""
    return _curve_loss_impl(scorer, market, K, price_samples, want_grad=True)


def _curve_loss_impl(scorer, market, K, price_samples, want_grad):
    from . import pricing  # local import; pricing also exposes the pipeline

    prices = np.asarray(price_samples, dtype=float)
    if prices.size < 2:
        raise ValidationError("need at least two price samples")
    if (prices < 0).any() or (prices > market.price_cap).any():
        raise ValidationError("price samples must lie in [0, price_cap]")
    L = prices.size
    zeros = np.zeros(scorer.flat().size)

    feats = rival_features(market)
    scores, cache = scorer.forward(feats)
    abst = aggregate(market, scores, K)

    Y = np.array([pricing.profit(p, market)[0] for p in prices])
    norm = float(np.abs(Y).max())
    if norm == 0.0:
        return 0.0, zeros, 0.0

    if abst.is_identity:
        yhat = np.array([pricing.profit(p, abst.market)[0] for p in prices])
        loss = float(((Y - yhat) ** 2).mean()) / norm**2
        return loss, zeros, 0.0

    ja = abst.aggregate_index
    refs = _abstract_param_refs(market, ja)
    attr_grads = np.zeros(len(refs))
    degenerate = 0
    loss = 0.0
    for k, p in enumerate(prices):
        priced = abst.market.with_target_price(float(p))
        result = solve_equilibrium(priced)
        load_s = float(result.flow.values[:, -1].sum())
        yhat = p * load_s
        err = (yhat - Y[k]) / norm
        loss += err**2 / L
        if want_grad:
            dl_dyhat = 2.0 * err / (L * norm)
            lg = np.zeros_like(result.flow.values)
            lg[:, -1] = dl_dyhat * p
            grad = loss_gradient(lg, result, priced, refs)
            attr_grads += grad.values
            if grad.degenerate:
                degenerate += 1

    if not want_grad:
        return float(loss), zeros, degenerate / L

    # Chain through the aggregation formulas into the score heads.
    agg_set = [j for j in range(market.n_rivals) if j not in abst.kept_indices]
    avg_w = scores.avg_scores[agg_set]
    u = avg_w / avg_w.sum()
    alphas = market.capacities
    alpha_a = float(scores.sum_scores[agg_set] @ alphas[agg_set])

    d_price, d_logalpha, d_bias = attr_grads[0], attr_grads[1], attr_grads[2]
    d_delay = attr_grads[3:]

    r = market.n_rivals
    dz_sum = np.zeros(r)
    dz_avg = np.zeros(r)
    sig = 1.0 / (1.0 + np.exp(-cache["z_sum"]))
    price_a = float(u @ market.prices[agg_set])
    bias_a = float(u @ market.biases[agg_set])
    delay_a = market.delays[:, agg_set] @ u
    for pos, j in enumerate(agg_set):
        dz_sum[j] = d_logalpha * (alphas[j] / alpha_a) * sig[j]
        attr_term = d_price * (market.prices[j] - price_a) + d_bias * (market.biases[j] - bias_a)
        attr_term += float(d_delay @ (market.delays[:, j] - delay_a))
        dz_avg[j] = u[pos] * attr_term
    flat_grad = scorer.backward(cache, dz_sum, dz_avg)
    return float(loss), flat_grad, degenerate / L


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-2
    val_fraction: float = 0.25
    seed: int = 0
    price_samples: int = 16
    jitter: bool = True
    patience: int = 20
    degenerate_threshold: float = 0.1  # batch fraction that triggers the SPSA fallback
    spsa_step: float = 1e-3


def _sample_prices(market, L, rng, jitter):
    base = np.linspace(0.0, market.price_cap, L)
    if not jitter:
        return base
    spread = market.price_cap / (2.0 * (L - 1))
    return np.clip(base + rng.uniform(-spread, spread, L), 0.0, market.price_cap)


def train_scorer(scenarios, K, opts=None, init_scorer=None):
    """Minimize the mean curve loss over scenario minibatches with Adam.

    Batches whose equilibria are too often degenerate fall back to a
    simultaneous-perturbation (SPSA) gradient estimate. Early stopping
    tracks validation loss on unjittered price grids.
    """
    opts = opts or TrainOptions()
    if not scenarios:
        raise ValidationError("need at least one training scenario")
    rng = np.random.default_rng(opts.seed)
    perm = rng.permutation(len(scenarios))
    n_val = int(round(opts.val_fraction * len(scenarios)))
    if n_val >= len(scenarios):
        raise ValidationError("validation split leaves no training scenarios")
    train = [scenarios[i] for i in perm[n_val:]]
    val = [scenarios[i] for i in perm[:n_val]] or train  # no split: validate in-sample

    scorer = init_scorer.copy() if init_scorer is not None else ScorerModel.initialize(seed=opts.seed)
    flat = scorer.flat()
    m_adam = np.zeros_like(flat)
    v_adam = np.zeros_like(flat)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    steps = 0

    def validation_loss(model):
        total = 0.0
        for mkt in val:
            grid = _sample_prices(mkt, opts.price_samples, rng, jitter=False)
            total += curve_loss(model, mkt, min(K, mkt.n_rivals), grid)
        return total / len(val)

    def batch_loss(model, batch, grids):
        return sum(
            curve_loss(model, mkt, min(K, mkt.n_rivals), grid)
            for mkt, grid in zip(batch, grids)
        ) / len(batch)

    history = {"train": [], "val": [], "spsa_batches": 0}
    baseline = validation_loss(scorer)
    history["val"].append(baseline)
    best = (baseline, scorer.copy(), 0)

    start = time.perf_counter()
    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(train), opts.batch_size):
            batch = [train[i] for i in order[lo : lo + opts.batch_size]]
            grids = [
                _sample_prices(mkt, opts.price_samples, rng, jitter=opts.jitter)
                for mkt in batch
            ]
            loss_sum = 0.0
            grad = np.zeros_like(flat)
            degen = 0.0
            for mkt, grid in zip(batch, grids):
                l, g, frac = curve_loss_and_grad(scorer, mkt, min(K, mkt.n_rivals), grid)
                loss_sum += l
                grad += g
                degen += frac
            loss = loss_sum / len(batch)
            grad /= len(batch)
            if degen / len(batch) > opts.degenerate_threshold:
                history["spsa_batches"] += 1
                delta = rng.choice([-1.0, 1.0], size=flat.size)
                probe = scorer.copy()
                probe.set_flat(flat + opts.spsa_step * delta)
                up = batch_loss(probe, batch, grids)
                probe.set_flat(flat - opts.spsa_step * delta)
                down = batch_loss(probe, batch, grids)
                grad = (up - down) / (2.0 * opts.spsa_step) * delta

            steps += 1
            m_adam = beta1 * m_adam + (1 - beta1) * grad
            v_adam = beta2 * v_adam + (1 - beta2) * grad**2
            mhat = m_adam / (1 - beta1**steps)
            vhat = v_adam / (1 - beta2**steps)
            flat = flat - opts.learning_rate * mhat / (np.sqrt(vhat) + eps)
            scorer.set_flat(flat)
            epoch_loss += loss
            n_batches += 1

        history["train"].append(epoch_loss / max(n_batches, 1))
        vloss = validation_loss(scorer)
        history["val"].append(vloss)
        if vloss < best[0] - 1e-12:
            best = (vloss, scorer.copy(), epoch)
        elif epoch - best[2] >= opts.patience:
            break

    report = {
        "train_losses": history["train"],
        "val_losses": history["val"],
        "baseline_val_loss": baseline,
        "best_val_loss": best[0],
        "best_epoch": best[2],
        "spsa_batches": history["spsa_batches"],
        "wall_time": time.perf_counter() - start,
        "n_train": len(train),
        "n_val": len(val),
    }
    return best[1], report
