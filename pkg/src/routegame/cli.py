"""Command-line surface: simulate, calibrate, train-agg, price, eval.

All commands are deterministic given their flags: stochastic routines consume
the --seed flag through seeded generators, and result records never embed
wall-clock values (timings go to a separate timings.json). Exit statuses:
0 success, 2 input error, 3 convergence error, 4 scale error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import abstraction, calibration, market as market_mod, pricing
from .equilibrium import solve_equilibrium
from .errors import ConvergenceError, RouteGameError, ScaleError
from .market import (
    ObservedDay,
    PreferenceParams,
    SynthRanges,
    load_market,
    load_usage_csv,
    save_market,
    synth_market,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_SCALE = 4


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _write_curve_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["price", "profit", "load"])
        for price, profit, load in rows:
            writer.writerow([repr(float(price)), repr(float(profit)), repr(float(load))])


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate_days(mkt, theta, n_days, seed):
    """Forward-simulate observed days by scaling demands and solving equilibria."""
    rng = np.random.default_rng(seed)
    truth = mkt.with_params(theta)
    days = []
    base = datetime.date(2025, 7, 1)
    for t in range(n_days):
        scale = rng.uniform(0.6, 1.4, mkt.n_users)
        day_mkt = truth.with_demands(truth.demands * scale)
        result = solve_equilibrium(day_mkt, tol=1e-11)
        days.append(
            ObservedDay(
                date=base.fromordinal(base.toordinal() + t),
                flows=result.flow.values,
                demands=day_mkt.demands,
                prices=day_mkt.prices,
                capacities=day_mkt.capacities,
                delays=day_mkt.delays,
                user_ids=tuple(u.id for u in mkt.users),
                provider_ids=tuple(p.id for p in mkt.providers),
            )
        )
    return days


def _write_usage_csv(path, days):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(market_mod.USAGE_COLUMNS)
        for day in days:
            for i, uid in enumerate(day.user_ids):
                for j, pid in enumerate(day.provider_ids):
                    tokens = int(round(day.flows[i, j] * 1e6))
                    writer.writerow(
                        [day.date.isoformat(), uid, pid, tokens, "60.0",
                         repr(float(day.delays[i, j]))]
                    )


def cmd_simulate(args):
    out = _out_dir(args)
    mkt = synth_market(args.seed, args.users, args.providers, SynthRanges())
    rng = np.random.default_rng(args.seed + 1)
    true_theta = PreferenceParams(
        w_q=args.wq, w_d=args.wd,
        biases=tuple(np.round(rng.uniform(0.0, 2.0, mkt.n_providers), 6)),
    )
    days = _simulate_days(mkt, true_theta, args.days, args.seed + 2)
    neutral = mkt.with_params(PreferenceParams.default(mkt.n_providers))
    save_market(neutral, out / "market.json")
    _write_usage_csv(out / "usage.csv", days)
    _write_json(
        out / "truth.json",
        {
            "w_p": 1.0,
            "w_q": true_theta.w_q,
            "w_d": true_theta.w_d,
            "biases": list(true_theta.biases),
        },
    )
    print(f"simulated {len(days)} days for {mkt.n_users} users x {mkt.n_providers} providers")
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def days_from_usage(mkt, records):
    """Group usage records into observed days aligned with a market's ids."""
    user_idx = {u.id: i for i, u in enumerate(mkt.users)}
    prov_idx = {p.id: j for j, p in enumerate(mkt.providers)}
    for r in records:
        if r.app not in user_idx:
            raise RouteGameError(f"usage row references unknown app {r.app!r}")
        if r.model not in prov_idx:
            raise RouteGameError(f"usage row references unknown model {r.model!r}")
    dates = sorted({r.date for r in records})
    n, m = mkt.n_users, mkt.n_providers
    days = []
    for d in dates:
        flows = np.zeros((n, m))
        ttft = {}
        for r in records:
            if r.date != d:
                continue
            i, j = user_idx[r.app], prov_idx[r.model]
            flows[i, j] += r.tokens / 1e6
            ttft.setdefault((i, j), []).append(r.ttft)
        delays = np.array(mkt.delays)
        for (i, j), vals in ttft.items():
            delays[i, j] = float(np.mean(vals))
        days.append(
            ObservedDay(
                date=d,
                flows=flows,
                demands=flows.sum(axis=1),
                prices=mkt.prices,
                capacities=mkt.capacities,
                delays=delays,
                user_ids=tuple(u.id for u in mkt.users),
                provider_ids=tuple(p.id for p in mkt.providers),
            )
        )
    return days


def cmd_calibrate(args):
    _require_file(args.config, "market config")
    _require_file(args.usage, "usage CSV")
    out = _out_dir(args)
    mkt = load_market(args.config)
    records = load_usage_csv(args.usage)
    days = days_from_usage(mkt, records)

    t0 = time.perf_counter()
    init = calibration.init_biases(days)
    theta0 = PreferenceParams(w_q=1.0, w_d=1.0, biases=tuple(init.biases))
    opts = calibration.FitOptions(max_iters=args.max_iters)
    report = calibration.fit_theta(days, theta0, opts)
    elapsed = time.perf_counter() - t0

    record = report.to_dict()
    record["init_total_slack"] = init.total_slack
    _write_json(out / "calibration_report.json", record)
    save_market(mkt.with_params(report.theta), out / "fitted_market.json")
    _write_json(out / "timings.json", {"calibrate_seconds": elapsed})
    print(
        f"R2 {report.r2:.6f}  MAE {report.mae:.6g}M tokens  "
        f"final loss {report.loss_trace[-1]:.6g}  iters {report.iterations}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-agg
# ---------------------------------------------------------------------------


def _scenario_set(seed, count, n_users, m_providers):
    return [synth_market(seed + 1000 + i, n_users, m_providers) for i in range(count)]


def cmd_train_agg(args):
    out = _out_dir(args)
    init_scorer = None
    if args.resume:
        _require_file(args.resume, "scorer file")
        init_scorer = abstraction.ScorerModel.load(args.resume)
    scenarios = _scenario_set(args.seed, args.scenarios, args.users, args.providers)
    opts = abstraction.TrainOptions(
        epochs=args.epochs,
        seed=args.seed,
        price_samples=args.price_samples,
        batch_size=args.batch_size,
        learning_rate=args.lr,
    )
    scorer, report = abstraction.train_scorer(scenarios, args.k, opts, init_scorer=init_scorer)
    scorer.save(out / "scorer.json")
    with open(out / "training_losses.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        writer.writerow([0, "", repr(float(report["val_losses"][0]))])
        for e, (tr, vl) in enumerate(zip(report["train_losses"], report["val_losses"][1:]), 1):
            writer.writerow([e, repr(float(tr)), repr(float(vl))])
    wall = report.pop("wall_time")
    _write_json(out / "training_report.json", report)
    _write_json(out / "timings.json", {"train_seconds": wall})
    print(
        f"baseline val loss {report['baseline_val_loss']:.6g} -> "
        f"best {report['best_val_loss']:.6g} at epoch {report['best_epoch']}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# price
# ---------------------------------------------------------------------------


def cmd_price(args):
    _require_file(args.config, "market config")
    if args.method == "abstracted" and not args.scorer:
        raise RouteGameError("--method abstracted requires --scorer")
    scorer = None
    if args.scorer:
        _require_file(args.scorer, "scorer file")
        scorer = abstraction.ScorerModel.load(args.scorer)
    out = _out_dir(args)
    mkt = load_market(args.config)

    if args.method == "abstracted":
        result = pricing.optimize_price_abstracted(
            mkt, scorer, args.k, compute_oracle=args.oracle
        )
    elif args.method == "exact":
        result = pricing.optimize_price_exact(mkt)
    else:
        result = pricing.optimize_price_sweep(mkt, coarse_points=args.coarse)
    if args.oracle and result.oracle_ratio is None:
        denom, _ = pricing.oracle_profit(mkt)
        denom = max(denom, result.best_profit)
        result.oracle_ratio = result.best_profit / denom if denom > 0 else 1.0

    _write_json(out / "pricing_result.json", result.to_dict())
    curve = result.abstracted_curve if result.abstracted_curve is not None else result.curve
    _write_curve_csv(out / "curve.csv", curve)
    _write_json(out / "timings.json", {"price_seconds": result.solve_time})
    line = f"best price {result.best_price:.6g}  profit {result.best_profit:.6g}"
    if result.oracle_ratio is not None:
        line += f"  oracle ratio {result.oracle_ratio:.4f}"
    print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


EVAL_METHODS = ("BF", "DA", "MIN", "AVG")


def eval_matrix(markets, scorer, k_heuristic=2, k_range=(1, 2, 3, 4), methods=EVAL_METHODS):
    """(method, market, profit_ratio, time) rows over the method set."""
    bad = [m for m in methods if m not in EVAL_METHODS]
    if bad or not methods:
        raise RouteGameError(
            f"method list must be a nonempty subset of {EVAL_METHODS}, got {list(methods)}"
        )
    rows = []
    for name, mkt in markets:
        t0 = time.perf_counter()
        if mkt.n_users * mkt.n_providers <= pricing.EXACT_CELL_BOUND:
            oracle = pricing.optimize_price_exact(mkt).best_profit
        else:
            oracle = pricing.dense_grid_profit(mkt)[1]
        oracle_time = time.perf_counter() - t0
        if "BF" in methods:
            rows.append(("BF", name, 1.0, oracle_time))

        def ratio(value):
            denom = max(oracle, value)
            return value / denom if denom > 0 else 1.0

        if "DA" in methods:
            for K in k_range:
                if K > mkt.n_rivals:
                    continue
                res = pricing.optimize_price_abstracted(mkt, scorer, K)
                rows.append((f"DA_K{K}", name, ratio(res.best_profit), res.solve_time))

        if "MIN" in methods:
            t0 = time.perf_counter()
            scores = abstraction.heuristic_scores(mkt, "MIN", k_heuristic)
            abst = abstraction.aggregate(mkt, scores, min(k_heuristic, mkt.n_rivals))
            inner = pricing.optimize_price_sweep(abst.market)
            value, _ = pricing.profit(inner.best_price, mkt)
            rows.append(("MIN", name, ratio(value), time.perf_counter() - t0))

        if "AVG" in methods:
            t0 = time.perf_counter()
            avg_mkt = abstraction.replicated_average_market(mkt, k_heuristic)
            inner = pricing.optimize_price_sweep(avg_mkt)
            value, _ = pricing.profit(inner.best_price, mkt)
            rows.append(("AVG", name, ratio(value), time.perf_counter() - t0))
    return rows


def cmd_eval(args):
    if args.markets < 1:
        raise RouteGameError("need at least one evaluation market")
    methods = tuple(m for m in args.methods.split(",") if m)
    bad = [m for m in methods if m not in EVAL_METHODS]
    if bad or not methods:
        raise RouteGameError(
            f"--methods must be a nonempty subset of {EVAL_METHODS}, got {args.methods!r}"
        )
    if args.scorer:
        _require_file(args.scorer, "scorer file")
        scorer = abstraction.ScorerModel.load(args.scorer)
    else:
        scorer = abstraction.ScorerModel.initialize(seed=args.seed)
    out = _out_dir(args)
    markets = [
        (f"m{i:02d}", synth_market(args.seed + 500 + i, args.users, args.providers))
        for i in range(args.markets)
    ]
    rows = eval_matrix(markets, scorer, k_heuristic=args.k, methods=methods)
    with open(out / "eval_table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "market", "profit_ratio", "time"])
        for method, name, ratio, secs in rows:
            writer.writerow([method, name, repr(float(ratio)), f"{secs:.6f}"])
    by_method = {}
    for method, _, ratio, _ in rows:
        by_method.setdefault(method, []).append(ratio)
    for method in sorted(by_method):
        vals = by_method[method]
        print(f"{method}: mean profit ratio {np.mean(vals):.4f} over {len(vals)} markets")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="routegame",
        description="Routing-market equilibria, calibration, abstraction, pricing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic market and observed days")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=3)
    p.add_argument("--providers", type=int, default=4)
    p.add_argument("--days", type=int, default=6)
    p.add_argument("--wq", type=float, default=0.7)
    p.add_argument("--wd", type=float, default=1.3)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="recover preference parameters from observed flows")
    p.add_argument("--config", required=True)
    p.add_argument("--usage", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=500)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train-agg", help="train the rival-aggregation scorer")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--scenarios", type=int, default=64)
    p.add_argument("--users", type=int, default=2)
    p.add_argument("--providers", type=int, default=6)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--price-samples", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train_agg)

    p = sub.add_parser("price", help="optimize the target provider's price")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=["sweep", "exact", "abstracted"], default="sweep")
    p.add_argument("--scorer", default=None)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--coarse", type=int, default=64)
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("eval", help="run the method x market evaluation matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--markets", type=int, default=4)
    p.add_argument("--users", type=int, default=2)
    p.add_argument("--providers", type=int, default=8)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--scorer", default=None)
    p.add_argument("--methods", default="BF,DA,MIN,AVG")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScaleError as exc:
        print(f"scale error: {exc}", file=sys.stderr)
        return EXIT_SCALE
    except ConvergenceError as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (RouteGameError, FileNotFoundError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
