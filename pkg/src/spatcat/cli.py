"""Command-line interface.

Subcommands: simulate, fit, select-dim, predict, summarize, diagnostics.
Each command reads a JSON config (overridable with repeated --set
key.path=value flags), validates it up front, and exits 0 on success, 1 on
validation failure, or 2 on a runtime failure.  The SPATCAT_MAX_THREADS
environment variable caps worker processes for multi-chain fits.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import dataio
from .basis import KnotSet, build_knot_grid, subsample_knots
from .config import ConfigError, RunConfig, load_run_config, load_sim_config
from .diagnostics import ess_autocorr, split_rhat
from .errors import ChainAbortError, InvalidInputError, SpatcatError
from .model import Dataset
from .prediction import (
    area_occurrence,
    predict,
    rectangular_partition,
    summarize_predictions,
)
from .sampler import ChainStore, run_chain
from .selection import ternary_search_u, waic
from .simulation import simulate_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _max_workers(requested: int) -> int:
    cap = os.environ.get("SPATCAT_MAX_THREADS")
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise InvalidInputError(
                f"SPATCAT_MAX_THREADS={cap!r} is not an integer"
            ) from None
    return max(1, requested)


def _data_bounds(locations: np.ndarray) -> tuple:
    pad = 1e-9
    return (
        float(locations[:, 0].min()) - pad, float(locations[:, 0].max()) + pad,
        float(locations[:, 1].min()) - pad, float(locations[:, 1].max()) + pad,
    )


def _build_knots(cfg: RunConfig, data: Dataset) -> KnotSet:
    kc = cfg.knots
    if kc.mode == "subsample":
        return subsample_knots(data.locations, kc.k, seed=kc.seed)
    bounds = tuple(kc.bounds) if kc.bounds else _data_bounds(data.locations)
    return build_knot_grid(kc.nx, kc.ny, bounds)


def _load_train(cfg: RunConfig) -> Dataset:
    if not cfg.data.train_csv:
        raise InvalidInputError("config is missing data.train_csv")
    data = load_dataset_checked(cfg.data.train_csv, cfg.data.control_label)
    freq = dict(zip(
        data.class_labels,
        np.append(data.Y.sum(axis=0), data.control_counts.sum()).tolist(),
    ))
    print(f"loaded {data.n} observations, J={data.J} classes")
    print(f"class frequencies: {freq}")
    return data


def load_dataset_checked(path, control_label):
    if not Path(path).exists():
        raise InvalidInputError(f"dataset file not found: {path}")
    return dataio.load_dataset(path, control_label)


def _fit_single(args) -> str:
    data, priors, u, fit_cfg, knots, out_path = args
    chain = run_chain(data, priors, u, fit_cfg, knots)
    dataio.save_chain(chain, out_path)
    return out_path


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = load_sim_config(args.config, args.set)
    out = Path(args.out or "sim_out")
    out.mkdir(parents=True, exist_ok=True)
    train, test, truth = simulate_dataset(cfg)
    dataio.save_dataset(train, out / "train.csv")
    dataio.save_dataset(test, out / "test.csv")
    dataio.write_truth_json(truth, out / "truth.json")
    print(f"simulated {train.n} training and {test.n} test observations")
    print(f"wrote {out / 'train.csv'}, {out / 'test.csv'}, {out / 'truth.json'}")
    return EXIT_OK


def _print_fit_report(chain: ChainStore) -> None:
    rates = chain.acceptance_rates()
    print("acceptance rates (sampling phase):")
    for name in sorted(rates):
        acc, prop = chain.acceptance_counts[name]
        print(f"  {name:>8}: {100 * rates[name]:5.1f}%  ({acc}/{prop})")
    if chain.mean_cycle_seconds > 0:
        print(f"mean seconds per cycle: {chain.mean_cycle_seconds:.4f}")


def cmd_fit(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if cfg.model.u is None:
        raise InvalidInputError("fit requires model.u in the config")
    data = _load_train(cfg)
    u = cfg.model.u
    if u > data.J - 1:
        raise InvalidInputError(f"model.u={u} exceeds J-1={data.J - 1}")
    knots = _build_knots(cfg, data)
    priors = cfg.priors.build(data.J, u)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    init_state = None
    if args.resume:
        prev = dataio.load_chain(args.resume)
        if prev.n_draws == 0:
            raise InvalidInputError(f"{args.resume} holds no draws to resume from")
        init_state = prev.state_at(prev.n_draws - 1)
        print(f"warm start from draw {prev.n_draws - 1} of {args.resume}")

    n_chains = max(1, args.chains)
    if n_chains == 1:
        chain = run_chain(data, priors, u, cfg.sampler, knots, init_state=init_state)
        path = out / f"chain_u{u}.spchain"
        dataio.save_chain(chain, path)
        _print_fit_report(chain)
        if args.csv:
            dataio.export_chain_csv(chain, out / f"chain_u{u}.csv")
        print(f"wrote {path}")
        return EXIT_OK

    seeds = [
        int(np.random.SeedSequence([cfg.sampler.seed, c]).generate_state(1)[0])
        for c in range(n_chains)
    ]
    tasks = [
        (data, priors, u, dc_replace(cfg.sampler, seed=s), knots,
         str(out / f"chain_u{u}_c{c}.spchain"))
        for c, s in enumerate(seeds)
    ]
    workers = _max_workers(n_chains)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(_fit_single, tasks))
    else:
        paths = [_fit_single(t) for t in tasks]
    for path in paths:
        chain = dataio.load_chain(path)
        print(f"--- {path}")
        _print_fit_report(chain)
    return EXIT_OK


def cmd_select_dim(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if cfg.model.u_min is None:
        raise InvalidInputError("select-dim requires model.u_min and model.u_max")
    data = _load_train(cfg)
    if cfg.model.u_max > data.J - 1:
        raise InvalidInputError(
            f"model.u_max={cfg.model.u_max} exceeds J-1={data.J - 1}"
        )
    knots = _build_knots(cfg, data)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = ternary_search_u(
        data, cfg.priors, cfg.sampler, cfg.model.u_min, cfg.model.u_max, knots
    )
    dataio.write_dim_trace_json(trace, out / "dim_trace.json")
    best_path = out / f"chain_u{trace.selected_u}.spchain"
    dataio.save_chain(trace.best_chain, best_path)
    print("dimension search trace:")
    for u, w, secs in trace.evaluated:
        print(f"  u={u:2d}  WAIC={w:12.3f}  ({secs:.1f}s)")
    print(f"selected u={trace.selected_u}")
    print(f"wrote {out / 'dim_trace.json'} and {best_path}")
    return EXIT_OK


def _prediction_locations(cfg: RunConfig, chain: ChainStore) -> np.ndarray:
    pc = cfg.prediction
    if pc.locations_csv:
        if not Path(pc.locations_csv).exists():
            raise InvalidInputError(f"locations file not found: {pc.locations_csv}")
        import csv as _csv

        with open(pc.locations_csv, newline="") as fh:
            reader = _csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if "x" not in header or "y" not in header:
                raise InvalidInputError(
                    f"{pc.locations_csv}: needs columns x and y"
                )
            ix, iy = header.index("x"), header.index("y")
            pts = [(float(row[ix]), float(row[iy])) for row in reader]
        return np.asarray(pts)
    if pc.grid_nx is None:
        raise InvalidInputError(
            "config needs prediction.grid_nx/grid_ny or prediction.locations_csv"
        )
    bounds = tuple(pc.bounds) if pc.bounds else _data_bounds(chain.knots.coords)
    return build_knot_grid(pc.grid_nx, pc.grid_ny, bounds).coords


def cmd_predict(args) -> int:
    cfg = load_run_config(args.config, args.set)
    chain = dataio.load_chain(args.chain)
    locations = _prediction_locations(cfg, chain)
    pc = cfg.prediction
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed if cfg.seed is not None else chain.rng_seed)

    summary = summarize_predictions(
        chain, chain.knots, locations, rng=rng,
        want_outcomes=pc.want_outcomes,
        quantile_levels=tuple(pc.quantiles),
        reservoir_size=pc.reservoir_size,
    )
    pred_path = out / "predictions.csv"
    dataio.write_prediction_csv(summary, pred_path)
    print(f"wrote {pred_path} ({summary.locations.shape[0]} locations, "
          f"{summary.n_draws} draws)")

    if pc.tile:
        if pc.area_class is None:
            raise InvalidInputError("prediction.area_class required with tile")
        if pc.area_class not in chain.class_labels:
            raise InvalidInputError(
                f"area_class {pc.area_class!r} not among {chain.class_labels}"
            )
        class_j = chain.class_labels.index(pc.area_class)
        grid = predict(chain, chain.knots, locations,
                       rng=np.random.default_rng(chain.rng_seed ^ 0xA11EA),
                       want_outcomes=True)
        partition = rectangular_partition(locations, pc.tile[0], pc.tile[1])
        areas = area_occurrence(grid, partition, class_j)
        area_path = out / "areas.csv"
        dataio.write_area_csv(areas, pc.area_class, area_path)
        print(f"wrote {area_path} ({len(areas)} areas)")
    return EXIT_OK


def _summary_frame(chain: ChainStore) -> pd.DataFrame:
    rows = []

    def add(name, draws):
        draws = np.asarray(draws, dtype=float)
        rows.append({
            "parameter": name,
            "mean": draws.mean(),
            "sd": draws.std(ddof=1) if draws.size > 1 else 0.0,
            "q2.5": np.quantile(draws, 0.025),
            "q50": np.quantile(draws, 0.5),
            "q97.5": np.quantile(draws, 0.975),
            "ess": ess_autocorr(draws),
        })

    for j in range(chain.J - 1):
        add(f"mu[{chain.class_labels[j]}]", chain.mu[:, j])
    for j in range(chain.u):
        add(f"omega[{j + 1}]", chain.omega[:, j])
    add("phi", chain.phi)
    for j in range(chain.gamma.shape[1]):
        add(f"gamma[{j + 1}]", chain.gamma[:, j])
    return pd.DataFrame(rows)


def cmd_summarize(args) -> int:
    chain = dataio.load_chain(args.chain)
    if chain.n_draws == 0:
        raise InvalidInputError("chain holds no draws")
    frame = _summary_frame(chain)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if args.out:
        frame.to_csv(args.out, index=False)
        print(f"wrote {args.out}")
    wa, _ = waic(chain.pointwise_loglik)
    print(f"WAIC: {wa:.3f}")
    return EXIT_OK


def cmd_diagnostics(args) -> int:
    chains = [dataio.load_chain(p) for p in args.chain]
    for path, chain in zip(args.chain, chains):
        print(f"--- {path}")
        _print_fit_report(chain)

    first = chains[0]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        step = max(1, first.n_draws // 500)
        trace = pd.DataFrame({
            "draw": np.arange(first.n_draws)[::step],
            "phi": first.phi[::step],
            **{f"mu_{j + 1}": first.mu[::step, j] for j in range(first.J - 1)},
            **{f"omega_{j + 1}": first.omega[::step, j] for j in range(first.u)},
        })
        trace.to_csv(out / "trace.csv", index=False)
        print(f"wrote {out / 'trace.csv'}")

    if len(chains) >= 2:
        n = min(c.n_draws for c in chains)
        if n < 4:
            raise InvalidInputError("need >= 4 draws per chain for split R-hat")
        print("split-chain R-hat across supplied chains:")
        for j in range(first.J - 1):
            r = split_rhat([c.mu[:n, j] for c in chains])
            print(f"  mu[{first.class_labels[j]}]: {r:.4f}")
        for j in range(first.u):
            r = split_rhat([c.omega[:n, j] for c in chains])
            print(f"  omega[{j + 1}]: {r:.4f}")
        if all(c.config.update_phi for c in chains):
            print(f"  phi: {split_rhat([c.phi[:n] for c in chains]):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatcat",
        description="Reduced-rank spatial multinomial modeling: simulate, "
                    "fit, select a latent dimension, and predict.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON config file")
            p.add_argument("--set", action="append", default=[],
                           metavar="KEY.PATH=VALUE",
                           help="override a config value (repeatable)")

    p = sub.add_parser("simulate", help="generate synthetic datasets")
    add_common(p)
    p.add_argument("--out", help="output directory (default sim_out)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the model at a fixed latent dimension")
    add_common(p)
    p.add_argument("--chains", type=int, default=1,
                   help="number of independent chains")
    p.add_argument("--resume", help="warm start from a saved chain artifact")
    p.add_argument("--csv", action="store_true",
                   help="also export draws as CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select-dim",
                       help="search the latent dimension by WAIC")
    add_common(p)
    p.set_defaults(func=cmd_select_dim)

    p = sub.add_parser("predict", help="posterior predictive summaries")
    add_common(p)
    p.add_argument("--chain", required=True, help="chain artifact path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("summarize", help="posterior summary table")
    p.add_argument("--chain", required=True)
    p.add_argument("--out", help="write the table as CSV")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("diagnostics", help="acceptance, traces, split R-hat")
    p.add_argument("--chain", nargs="+", required=True,
                   help="one or more chain artifacts")
    p.add_argument("--out", help="directory for trace extracts")
    p.set_defaults(func=cmd_diagnostics)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ChainAbortError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SpatcatError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
