"""Command-line pipeline: simulate, ingest, features, fit, tune, infer, eval-ls,
allocate, backtest, report.

Every subcommand reads the run config (``--config`` or the
``FACTOR_REGIMES_CONFIG`` environment variable), applies dotted overrides
such as ``--grid.lambdas 50 100`` and writes into ``--output-dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .backtest import ew_benchmark, max_drawdown, ols_alpha_beta, performance_report, run_dynamic
from .black_litterman import Equilibrium, build_views, ewm_covariance, target_tracking_error
from .config import CONFIG_ENV_VAR, ConfigError, config_hash, load_config
from .features import build_features, standardize
from .jump_model import JumpModelConfig, JumpModelFit, OnlineState, fit_sparse_jump_model, infer_sequence, label_states
from .market_data import TRADING_DAYS, AlignedPanel, DataError, ReturnSeries, load_panel
from .strategy import (
    RegimeSignal,
    TuningGrid,
    TuningSchedule,
    expected_active_return,
    run_long_short,
    tune_hyperparameters,
)
from .synthetic import simulate_universe

logger = logging.getLogger("factor_regimes")

SUBCOMMANDS = ("simulate", "ingest", "features", "fit", "tune", "infer", "eval-ls", "allocate", "backtest", "report")


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `{producer}` first")
        self.producer = producer


class Run:
    """Config, output locations and artifact writers for one invocation."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.meta = {"config_hash": config_hash(cfg), "seed": int(cfg["seed"]), "version": __version__}

    # -- writers
    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_csv(self, df: pd.DataFrame, *parts, index=True) -> Path:
        p = self.path(*parts)
        df = df.copy()
        if isinstance(df.index, pd.DatetimeIndex):
            df.index = df.index.strftime("%Y-%m-%d")
            df.index.name = "date"
        header = "# " + " ".join(f"{k}={v}" for k, v in self.meta.items()) + "\n"
        with open(p, "w", newline="") as fh:
            fh.write(header)
            df.to_csv(fh, index=index, float_format="%.10g", lineterminator="\n")
        return p

    def write_json(self, obj: dict, *parts) -> Path:
        p = self.path(*parts)
        with open(p, "w") as fh:
            json.dump({"meta": self.meta, **obj}, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return p

    def read_json(self, name: str, producer: str) -> dict:
        p = self.out / name
        if not p.exists():
            raise MissingArtifact(p, producer)
        with open(p) as fh:
            return json.load(fh)

    # -- inputs
    @property
    def market(self) -> str:
        return self.cfg["universe"]["market"]

    @property
    def factors(self) -> list[str]:
        return list(self.cfg["universe"]["factors"])

    @property
    def assets(self) -> list[str]:
        return [self.market] + self.factors

    def panel(self) -> AlignedPanel:
        d = self.cfg["data"]
        returns = Path(d["returns"]) if d["returns"] else self.out / "data" / "returns.csv"
        env = Path(d["env"]) if d["env"] else self.out / "data" / "env.csv"
        for p in (returns, env):
            if not p.exists():
                raise MissingArtifact(p, "simulate")
        u = self.cfg["universe"]
        raw = list(u["env"]) + ([u["rf"]] if u["rf"] else [])
        paths = [returns] if returns == env else [returns, env]
        panel = load_panel(paths, d["schema"], input_kind=d["input_kind"], raw_columns=raw)
        missing = [c for c in self.assets + raw if c not in panel]
        if missing:
            raise DataError(f"input data lacks columns {missing}")
        return panel

    def rf(self, panel: AlignedPanel) -> np.ndarray:
        name = self.cfg["universe"]["rf"]
        return panel.values(name) if name else np.zeros(len(panel))

    def market_excess(self, panel: AlignedPanel) -> ReturnSeries:
        m = panel.series(self.market)
        return ReturnSeries(m.dates, m.values - self.rf(panel) / TRADING_DAYS, "market_excess")

    def active(self, panel: AlignedPanel, factor: str) -> ReturnSeries:
        f, m = panel.series(factor), panel.series(self.market)
        return ReturnSeries(f.dates, f.values - m.values, f"{factor}_active")

    def features(self, panel: AlignedPanel, factor: str):
        env = panel.select(self.cfg["universe"]["env"])
        fm = build_features(self.active(panel, factor), self.market_excess(panel), env,
                            windows=self.cfg["features"]["windows"])
        act = self.active(panel, factor)
        keep = np.isin(act.dates, fm.dates)
        return fm, ReturnSeries(act.dates[keep], act.values[keep], act.name)

    def jm_config(self, **kw) -> JumpModelConfig:
        j = dict(self.cfg["jump_model"])
        j.update(kw)
        return JumpModelConfig(K=int(j["K"]), lam=float(j["lam"]), kappa_sq=float(j["kappa_sq"]),
                               n_init=int(j["n_init"]), max_iter=int(j["max_iter"]), tol=float(j["tol"]),
                               seed=int(self.cfg["seed"]))

    def schedule(self) -> TuningSchedule:
        return TuningSchedule(**self.cfg["schedule"])

    def signals(self) -> dict[str, RegimeSignal]:
        data = self.read_json("signals.json", "tune")
        return {f: RegimeSignal.from_dict(s) for f, s in data["signals"].items()}


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.datetime64, pd.Timestamp)):
        return str(o)[:10]
    raise TypeError(f"not serializable: {type(o)}")


# --- subcommands ----------------------------------------------------------


def cmd_simulate(run: Run, args) -> None:
    s = run.cfg["simulate"]
    u = run.cfg["universe"]
    uni = simulate_universe(T=int(s["days"]), seed=int(run.cfg["seed"]), factors=run.factors,
                            p_stay=tuple(s["p_stay"]), mu=tuple(s["mu"]), vol=tuple(s["vol"]), rf=float(s["rf"]))
    frame = uni.panel.frame
    ret_cols = [run.market] + run.factors + ([u["rf"]] if u["rf"] else [])
    frame = frame.rename(columns={"market": run.market, "rf": u["rf"] or "rf"})
    run.write_csv(frame[ret_cols], "data", "returns.csv")
    run.write_csv(frame[["vix", "y2", "y10"]], "data", "env.csv")
    truth = pd.DataFrame(uni.states, index=frame.index)
    run.write_csv(truth, "data", "truth.csv")


def cmd_ingest(run: Run, args) -> None:
    panel = run.panel()
    run.write_csv(panel.frame, "panel.csv")
    run.write_json({"rows": len(panel), "dropped_rows": panel.dropped_rows, "columns": panel.columns}, "ingest.json")


def cmd_features(run: Run, args) -> None:
    panel = run.panel()
    for f in run.factors:
        fm, _ = run.features(panel, f)
        run.write_csv(fm.to_frame(), "features", f"{f}.csv")


def _fit_factor(run: Run, panel, factor, end=None):
    fm, act = run.features(panel, factor)
    sched = run.schedule()
    dates = fm.dates
    hi = len(dates) if end is None else int(np.searchsorted(dates, np.datetime64(pd.Timestamp(end), "D"), "right"))
    start = pd.Timestamp(dates[hi - 1]) - pd.DateOffset(months=int(round(12 * sched.train_max_years)))
    lo = int(np.searchsorted(dates, np.datetime64(start, "D"), "right"))
    train = standardize(fm.rows(slice(lo, hi)))
    fit = fit_sparse_jump_model(train, run.jm_config())
    labels = label_states(fit, act.values[lo:hi])
    mu = [expected_active_return(fit.states, act.values[lo:hi], k) for k in range(fit.K)]
    return fit, labels, mu, dates[lo], dates[hi - 1]


def cmd_fit(run: Run, args) -> None:
    panel = run.panel()
    for f in run.factors:
        fit, labels, mu, t0, t1 = _fit_factor(run, panel, f, args.end)
        d = fit.to_dict()
        d["labels"] = {str(k): v for k, v in labels.items()}
        run.write_json({"fit": d, "factor": f, "train_start": str(t0), "train_end": str(t1), "mu_by_state": mu},
                       "fits", f"{f}.json")


def cmd_infer(run: Run, args) -> None:
    panel = run.panel()
    rows = []
    for f in run.factors:
        data = run.read_json(f"fits/{f}.json", "fit")
        fit = JumpModelFit.from_dict(data["fit"])
        fm, _ = run.features(panel, f)
        new = fm.dates > np.datetime64(data["train_end"], "D")
        if not new.any():
            continue
        states, _ = infer_sequence(fit, fit.prepare(fm.X[new]), OnlineState.from_fit(fit))
        mu = np.asarray(data["mu_by_state"])
        for d, s in zip(fm.dates[new], states):
            rows.append({"date": str(d), "factor": f, "state": int(s), "label": fit.labels[int(s)], "mu_hat": mu[s]})
    run.write_csv(pd.DataFrame(rows, columns=["date", "factor", "state", "label", "mu_hat"]), "inferred.csv", index=False)


def cmd_tune(run: Run, args) -> None:
    panel = run.panel()
    grid = TuningGrid(tuple(run.cfg["grid"]["lambdas"]), tuple(run.cfg["grid"]["kappa_sqs"]))
    rows = []
    signals = {}
    for f in run.factors:
        fm, act = run.features(panel, f)
        res = tune_hyperparameters(fm, act, grid, run.schedule(), run.jm_config(),
                                   tc=float(run.cfg["allocation"]["tc"]), threads=int(run.cfg["threads"]))
        for sel in res.selections:
            rows.append({"block_start": str(sel.block_start), "factor": f, "lambda": sel.lam,
                         "kappa_sq": sel.kappa_sq, "validation_sharpe": sel.validation_sharpe})
        signals[f] = res.signal.to_dict()
    run.write_csv(pd.DataFrame(rows, columns=["block_start", "factor", "lambda", "kappa_sq", "validation_sharpe"]),
                  "tuning.csv", index=False)
    run.write_json({"signals": signals}, "signals.json")


def _long_short_tables(run: Run, panel, signals):
    rows, rets = [], {}
    tc = float(run.cfg["allocation"]["tc"])
    for f in run.factors:
        sig = signals[f]
        sub = panel.slice(pd.Timestamp(sig.dates[0]), pd.Timestamp(sig.dates[-1]) + pd.Timedelta(days=1))
        res = run_long_short(sig, sub.series(f), sub.series(run.market), tc)
        rows.append({"factor": f, "sharpe": res.sharpe, "shifts_per_year": res.shifts_per_year, "turnover": res.turnover})
        rets[f] = res.returns
    table = pd.DataFrame(rows).set_index("factor")
    corr = pd.DataFrame(rets).corr()
    corr.index.name = "factor"
    return table, corr


def cmd_eval_ls(run: Run, args) -> None:
    panel = run.panel()
    table, corr = _long_short_tables(run, panel, run.signals())
    run.write_csv(table, "long_short.csv")
    run.write_csv(corr, "long_short_corr.csv")


def cmd_allocate(run: Run, args) -> None:
    panel = run.panel()
    signals = run.signals()
    if args.signals:
        with open(args.signals) as fh:
            signals = {f: RegimeSignal.from_dict(s) for f, s in json.load(fh)["signals"].items()}
    first = signals[run.factors[0]]
    date = np.datetime64(args.date, "D") if args.date else first.dates[-1]
    mu = {}
    for f in run.factors:
        sig = signals[f]
        i = int(np.searchsorted(sig.dates, date, "right")) - 1
        if i < 0:
            raise DataError(f"no signal for {f} on or before {date}")
        mu[f] = float(sig.mu_hat[i])
    te = float(args.te) if args.te else run.cfg["allocation"]["te_targets"][0]
    hist = panel.slice(None, pd.Timestamp(date) + pd.Timedelta(days=1))
    R = hist.frame[run.assets].to_numpy() - run.rf(hist)[:, None] / TRADING_DAYS
    a = run.cfg["allocation"]
    eq = Equilibrium(ewm_covariance(R, float(a["halflife"])), np.full(len(run.assets), 1 / len(run.assets)),
                     float(a["delta"]))
    res = target_tracking_error(eq, build_views(mu, run.assets, run.market), te)
    run.write_json({"date": str(date), "te_target": te, "assets": run.assets, **res.to_dict()},
                   f"allocation_{date}_te{te:g}.json")


def _te_label(te: float) -> str:
    return f"te{round(te * 100, 4):g}"


def cmd_backtest(run: Run, args) -> None:
    panel = run.panel()
    signals = run.signals()
    a = run.cfg["allocation"]
    tc = float(a["tc"])
    start = signals[run.factors[0]].dates[0]
    test = panel.slice(pd.Timestamp(start))
    rf = run.rf(test)
    market = test.values(run.market)
    ew = ew_benchmark(test.frame, run.assets, tc)

    reports = {
        "market": performance_report(market, ew.returns, market, rf),
        "ew": performance_report(ew.returns, ew.returns, market, rf, turnover=ew.turnover),
    }
    vs_market = {"market": _active_vs(market, market), "ew": _active_vs(ew.returns, market)}
    cum = {"market": market, "ew": ew.returns}
    rebalances = {}
    for te in a["te_targets"]:
        dyn = run_dynamic(panel, signals, te, tc, assets=run.assets, market=run.market, start=start,
                          rf=run.rf(panel), delta=float(a["delta"]), halflife=float(a["halflife"]))
        label = f"dynamic_{_te_label(te)}"
        run.write_csv(dyn.path.to_frame(), "backtest", f"path_{_te_label(te)}.csv")
        reports[label] = performance_report(dyn.path.returns, ew.returns, market, rf, turnover=dyn.path.turnover)
        vs_market[label] = _active_vs(dyn.path.returns, market)
        cum[label] = dyn.path.returns
        rebalances[label] = {
            "count": len(dyn.reasons),
            "signal": sum("signal" in r for r in dyn.reasons.values()),
            "quarterly": sum("quarterly" in r for r in dyn.reasons.values()),
            "flags": sorted({fl for al in dyn.allocations.values() for fl in al.flags}),
        }
    run.write_csv(ew.to_frame(), "backtest", "path_ew.csv")
    cum_df = pd.DataFrame({k: np.cumprod(1 + v - rf / TRADING_DAYS) - 1 for k, v in cum.items()},
                          index=pd.DatetimeIndex(test.frame.index))
    run.write_csv(cum_df, "backtest", "cumulative_excess.csv")
    run.write_json({"reports": {k: v.to_dict() for k, v in reports.items()},
                    "active_vs_market": vs_market, "rebalances": rebalances}, "backtest", "report.json")


def _active_vs(r, market):
    diff = np.asarray(r) - np.asarray(market)
    ar = float(TRADING_DAYS * diff.mean())
    te = float(np.sqrt(TRADING_DAYS) * diff.std(ddof=1))
    return {"active_return": ar, "tracking_error": te, "information_ratio": ar / te if te >= 1e-10 else None}


def factor_active_table(run: Run, panel) -> pd.DataFrame:
    """Per-factor active performance vs the market over the whole panel."""
    rf = run.rf(panel)
    m = panel.values(run.market)
    rows = {}
    for f in run.factors:
        r = panel.values(f)
        act = r - m
        ar = TRADING_DAYS * act.mean()
        te = np.sqrt(TRADING_DAYS) * act.std(ddof=1)
        alpha, beta, t = ols_alpha_beta(r - rf / TRADING_DAYS, m - rf / TRADING_DAYS)
        rows[f] = {
            "active_return": ar,
            "information_ratio": ar / te if te >= 1e-10 else None,
            "max_drawdown": max_drawdown(act),
            "alpha": TRADING_DAYS * alpha,
            "alpha_t_stat": t,
            "beta": beta,
        }
    return pd.DataFrame(rows).rename_axis("metric")


def cmd_report(run: Run, args) -> None:
    bt = run.read_json("backtest/report.json", "backtest")
    panel = run.panel()
    signals = run.signals()
    ex1 = factor_active_table(run, panel)
    ls, corr = _long_short_tables(run, panel, signals)
    perf = pd.DataFrame(bt["reports"]).rename_axis("metric")
    vsm = pd.DataFrame(bt["active_vs_market"]).rename_axis("metric")
    run.write_csv(ex1, "report", "factor_active_performance.csv")
    run.write_csv(ls, "report", "long_short.csv")
    run.write_csv(corr, "report", "long_short_corr.csv")
    run.write_csv(vsm, "report", "active_vs_market.csv")
    run.write_csv(perf, "report", "performance.csv")
    run.write_json({
        "factor_active_performance": ex1.to_dict(),
        "long_short": ls.to_dict(orient="index"),
        "long_short_corr": corr.to_dict(),
        "active_vs_market": bt["active_vs_market"],
        "performance": bt["reports"],
        "rebalances": bt["rebalances"],
    }, "report", "report.json")


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "features": cmd_features,
    "fit": cmd_fit,
    "tune": cmd_tune,
    "infer": cmd_infer,
    "eval-ls": cmd_eval_ls,
    "allocate": cmd_allocate,
    "backtest": cmd_backtest,
    "report": cmd_report,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="factor-regimes", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", default=os.environ.get(CONFIG_ENV_VAR))
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--date", help="allocate: signal date (default: last)")
    p.add_argument("--te", help="allocate: tracking-error target")
    p.add_argument("--signals", help="allocate: signals JSON (default: output of tune)")
    p.add_argument("--end", help="fit: last training date (default: last available)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _split_overrides(extra: list[str]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    key = None
    for tok in extra:
        if tok.startswith("--"):
            key, _, val = tok[2:].partition("=")
            if "." not in key:
                raise ConfigError(f"unrecognized option --{key}")
            out[key] = [val] if val else []
        elif key is None:
            raise ConfigError(f"unexpected argument {tok!r}")
        else:
            out[key].append(tok)
    return out


def main(argv=None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _split_overrides(extra)
        for flag in ("output_dir", "seed", "threads"):
            val = getattr(args, flag)
            if val is not None:
                overrides[flag] = [str(val)]
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](Run(cfg), args)
    except (ConfigError, DataError, MissingArtifact, ValueError, ArithmeticError) as exc:
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        if isinstance(exc, MissingArtifact):
            err["producer"] = exc.producer
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
