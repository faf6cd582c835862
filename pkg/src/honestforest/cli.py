"""Command-line front end.

Every output carries the resolved configuration (a ``# config:`` line in
CSV/text files, a ``config`` key in JSON), and ``--config <output file>``
re-runs from it.  Paths and the thread count are execution details and
are not part of the embedded configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import placebo as plc
from .causal_forest import ForestParams, default_threads
from .data_pipeline import filter_one_way, ingest_users, load_samples, read_centroids, read_events
from .effects import common_support_check, estimate_gates, fit
from .errors import DataError, NumericalError, UsageError
from .heterogeneity import (cluster_profile, density_csv, epanechnikov_density, gate_minus_ate_tests,
                            kmeanspp_cluster, wald_equality)
from .report import (config_line, json_document, read_embedded_config, render_effect_table,
                     render_side_by_side, render_wald, with_header, write_text)
from .sample import ARM_NAMES, DEFAULT_HETEROGENEITY
from .synthetic_dgp import (DgpConfig, _fmt, _write_lines, simulate_visit_log, simulate_world,
                            true_effect_summary, write_world)

log = logging.getLogger("honestforest")

DATA_DIR_ENV = "HONESTFOREST_DATA_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("simulate", "estimate", "gate", "cluster", "placebo", "report")

DEFAULTS = {
    "seed": 0,
    "trees": 1000,
    "share_weights": True,
    "support_threshold": 0.01,
    "k": 5,
    "gender": "m",
    "contrast": [3, 0],
    "variables": list(DEFAULT_HETEROGENEITY),
    "n_bins": 25,
    "n_init": 10,
    "forest": {},
    "dgp": {},
    "visit_log": {"n_users": 400, "visits_per_sender": 8},
    "placebo": {"rule": "scaled_max", "fraction": 0.95, "visit_rate": 0.5},
    "n_mc": 100000,
    "density_points": 200,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on|off")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="honestforest", description="Honest multi-arm causal forest pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config, or any honestforest output to re-run from")
    p.add_argument("--data-dir", help=f"input data directory (default ${DATA_DIR_ENV} or ./data)")
    p.add_argument("--out", help="output directory (default <data-dir>/results)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p.add_argument("--trees", type=int)
    p.add_argument("--share-weights", type=_on_off, metavar="on|off")
    p.add_argument("--support-threshold", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--gender", choices=("f", "m"), help="recipient gender of the sample")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> dict:
    config = {k: (v.copy() if isinstance(v, (dict, list)) else v) for k, v in DEFAULTS.items()}
    if args.config:
        try:
            loaded = read_embedded_config(args.config)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        config.update(loaded)
    for key in ("seed", "trees", "share_weights", "support_threshold", "k", "gender"):
        value = getattr(args, key)
        if value is not None:
            config[key] = value
    _validate(config)
    return config


def _validate(config):
    if config["k"] < 1:
        raise UsageError("k must be at least 1")
    if config["trees"] < 1:
        raise UsageError("trees must be at least 1")
    if not 0 < config["support_threshold"] <= 0.2:
        raise UsageError("support threshold must be in (0, 0.2]")
    m, l = config["contrast"]
    if m == l or not (0 <= m < len(ARM_NAMES) and 0 <= l < len(ARM_NAMES)):
        raise UsageError("contrast must name two different arms")
    known = {f.name for f in fields(ForestParams)}
    bad = set(config["forest"]) - known
    if bad or "n_trees" in config["forest"] or "seed" in config["forest"]:
        raise UsageError(f"invalid forest keys: {sorted(bad | ({'n_trees', 'seed'} & set(config['forest'])))}")


def forest_params(config) -> ForestParams:
    return ForestParams(n_trees=config["trees"], seed=config["seed"], **config["forest"])


class Run:
    """Resolved config plus paths; shared state across the steps of one invocation."""

    def __init__(self, command, config, data_dir, out_dir, threads):
        self.command = command
        self.config = config
        self.data_dir = Path(data_dir)
        self.out_dir = Path(out_dir)
        self.threads = threads
        self._loaded = None
        self._fit = None

    def write(self, name, text):
        path = self.out_dir / name
        write_text(path, text)
        log.info("wrote %s", path)

    def csv(self, name, body):
        self.write(name, with_header(body, self.command, self.config))

    def json(self, name, payload):
        self.write(name, json_document(self.command, self.config, payload))

    # data -------------------------------------------------------------

    def loaded(self):
        if self._loaded is None:
            if not self.data_dir.is_dir():
                raise DataError(f"data directory {self.data_dir} does not exist")
            self._loaded = load_samples(self.data_dir)
        return self._loaded

    def sample(self):
        _, _, _, female, male, _ = self.loaded()
        sample = male if self.config["gender"] == "m" else female
        if sample.n == 0:
            raise DataError(f"no observations with recipient gender {self.config['gender']!r}")
        return sample

    def fitted(self):
        """Common-support trimming, then the forest fit (cached)."""
        if self._fit is None:
            sample = self.sample()
            keep, support = common_support_check(sample, self.config["support_threshold"],
                                                 seed=self.config["seed"])
            log.info("common support: dropped %d of %d rows", support.dropped, sample.n)
            trimmed = sample.subset(keep)
            result = fit(trimmed, forest_params(self.config), self.threads)
            self._fit = (trimmed, support, result)
        return self._fit


# --------------------------------------------------------------------------
# Commands


def cmd_simulate(run: Run):
    cfg = dict(run.config["dgp"])
    cfg["seed"] = run.config["seed"]
    try:
        dgp = DgpConfig(**cfg)
    except TypeError as exc:
        raise UsageError(f"invalid dgp config: {exc}") from exc
    world = simulate_world(dgp)
    header = "\n".join([f"honestforest {run.command}", config_line(run.config)])
    try:
        write_world(world, run.data_dir, header=header)
    except OSError as exc:
        raise UsageError(f"cannot write to {run.data_dir}: {exc}") from exc
    truth = true_effect_summary(world.oracle, dgp, run.config["n_mc"], seed=run.config["seed"])
    truth["arms"] = list(ARM_NAMES)
    truth["treatment_intercepts"] = world.oracle.treatment_intercepts.tolist()
    truth["dgp"] = dgp.to_json()
    write_text(run.data_dir / "truth.json", json_document(run.command, run.config, {"truth": truth}))
    users, interactions, centroids = simulate_visit_log(dgp, **run.config["visit_log"])
    _write_visit_log(run.data_dir / "visits", users, interactions, centroids, header)
    log.info("simulated %d pairs into %s", world.sample.n, run.data_dir)
    return {"n": world.sample.n, "shares": world.sample.arm_shares().tolist()}


def _write_visit_log(out, users, interactions, centroids, header):
    out.mkdir(parents=True, exist_ok=True)
    frame = users.frame
    feats = users.features
    cols = ["user_id", "gender", "age", "sport_freq", "income", "education", "zip"] + [f.name for f in feats]
    lines = [",".join(cols)]
    for uid, row in zip(frame.index, frame.itertuples(index=False)):
        rec = dict(zip(frame.columns, row))
        vals = [uid, rec["gender"], str(int(rec["age"])), str(int(rec["sport_freq"])),
                str(int(rec["income"])), str(int(rec["education"])), rec["zip"]]
        vals += [_fmt(rec[f.name]) if f.kind == "ordered" else str(int(rec[f.name])) for f in feats]
        lines.append(",".join(vals))
    _write_lines(out / "users.csv", lines, header)
    ev = ["sender_id,recipient_id,timestamp,action"]
    ev += [f"{it.sender_id},{it.recipient_id},{int(it.first_visit_time)},visit" for it in interactions]
    _write_lines(out / "events.csv", ev, header)
    cen = ["zip,lat,lon"] + [f"{z},{lat!r},{lon!r}" for z, (lat, lon) in centroids.items()]
    _write_lines(out / "zip_centroids.csv", cen, header)
    (out / "features.json").write_text(json.dumps(
        [{"name": f.name, "kind": f.kind, "role": f.role} for f in feats], indent=2) + "\n")


def cmd_estimate(run: Run):
    sample, support, result = run.fitted()
    cfg = run.config
    table = result.ate(share_weights=cfg["share_weights"], label=f"effects ({cfg['gender']})")
    run.csv("ate.csv", table.to_csv())
    run.json("ate.json", {"ate": table.to_json(), "support": support.to_json()})
    run.write("effects.txt", with_header(render_effect_table(table, "Effects in % points"),
                                        run.command, cfg))
    honest = result.forest.honest_idx
    run.csv("iates.csv", result.iates.to_csv(row_ids=[int(i) for i in honest]))
    gates = _gates(run, sample, result)
    for name, g in gates.items():
        run.csv(f"gates_{name}.csv", g.to_csv())
    return {"ate": table, "gates": gates}


def _gates(run, sample, result):
    cfg = run.config
    m, l = cfg["contrast"]
    honest = result.forest.honest_idx
    out = {}
    for name in cfg["variables"]:
        try:
            z = sample.column(name)[honest]
        except KeyError as exc:
            raise UsageError(f"unknown heterogeneity variable {name!r}") from exc
        out[name] = estimate_gates(result.iates, z, m, l, variable=name,
                                   share_weights=cfg["share_weights"], n_bins=cfg["n_bins"])
    return out


def cmd_gate(run: Run):
    sample, _, result = run.fitted()
    gates = _gates(run, sample, result)
    walds, text = {}, []
    for name, g in gates.items():
        run.csv(f"gates_{name}.csv", g.to_csv())
        tests = gate_minus_ate_tests(g)
        run.csv(f"gate_tests_{name}.csv", tests.to_csv())
        text.append(f"{name}: GATE - ATE (Delta in % points, p in %)\n" + tests.render(name))
        if g.n_groups >= 2:
            walds[name] = wald_equality(g)
    run.json("wald.json", {"wald": {k: v.to_json() for k, v in walds.items()}})
    run.write("wald.txt", with_header(render_wald(walds), run.command, run.config))
    run.write("gate_tests.txt", with_header("\n".join(text), run.command, run.config))
    return {"gates": gates, "wald": walds}


def cmd_cluster(run: Run):
    sample, _, result = run.fitted()
    cfg = run.config
    m, l = cfg["contrast"]
    iates = result.iates
    rows = np.flatnonzero(iates.supported)
    eff = iates.effect(m, l)[rows]
    km = kmeanspp_cluster(eff, cfg["k"], seed=cfg["seed"], n_init=cfg["n_init"])
    honest = result.forest.honest_idx[rows]
    descriptors = {}
    for name in cfg["variables"]:
        descriptors[name] = sample.column(name)[honest]
    summary = cluster_profile(km.labels, eff, descriptors,
                              effect_name=f"IATE {ARM_NAMES[m]}-{ARM_NAMES[l]}")
    run.csv("clusters.csv", summary.to_csv())
    run.json("clusters.json", {"clusters": summary.to_json(), "inertia": km.inertia,
                               "iterations": km.n_iter})
    run.write("clusters.txt", with_header(summary.render(), run.command, cfg))
    grid, dens = epanechnikov_density(100.0 * eff, n_grid=cfg["density_points"])
    run.csv("iate_density.csv", density_csv(grid, dens))
    return {"clusters": summary}


def cmd_placebo(run: Run, main_table=None):
    cfg = run.config
    sample, _, result = run.fitted()
    if main_table is None:
        main_table = result.ate(share_weights=cfg["share_weights"], label="main")
    visits = run.data_dir / "visits"
    src = visits if visits.is_dir() else run.data_dir
    users = ingest_users(src / "users.csv", (), src / "features.json")
    centroids = read_centroids(src / "zip_centroids.csv")
    realized = filter_one_way(read_events(src / "events.csv"))
    pc = cfg["placebo"]
    cands = plc.impute_potential_visits(users, realized, centroids, rule=pc["rule"],
                                        fraction=pc["fraction"], recipient_gender=cfg["gender"])
    log.info("potential visits: %s", cands.counts())
    drawn = plc.draw_matched_sample(cands, realized, users, centroids, sample.n,
                                    sample.arm_shares(), seed=cfg["seed"],
                                    recipient_gender=cfg["gender"], visit_rate=pc["visit_rate"])
    table = plc.run_placebo(drawn, forest_params(cfg), run.threads, cfg["share_weights"])
    verdict = plc.placebo_verdict(table)
    run.csv("placebo.csv", table.to_csv())
    run.json("placebo.json", {"placebo": table.to_json(), "verdict": verdict,
                              "candidates": cands.counts(), "draw_warnings": drawn.warnings,
                              "achieved_shares": drawn.achieved_shares.tolist(),
                              "target_shares": drawn.target_shares.tolist()})
    text = render_side_by_side(render_effect_table(main_table, "Main outcome (message)"),
                               render_effect_table(table, "Placebo outcome (visit)"))
    run.write("placebo.txt", with_header(text + f"verdict: {verdict}\n", run.command, cfg))
    print(verdict)
    return {"placebo": table, "verdict": verdict}


def cmd_report(run: Run):
    est = cmd_estimate(run)
    het = cmd_gate(run)
    clu = cmd_cluster(run)
    plac = cmd_placebo(run, est["ate"])
    parts = [render_effect_table(est["ate"], "Effects in % points"),
             "Wald tests of GATE equality\n" + render_wald(het["wald"]),
             "Clusters of the IATE\n" + clu["clusters"].render(),
             render_effect_table(plac["placebo"], "Placebo outcome (visit)"),
             f"verdict: {plac['verdict']}\n"]
    run.write("report.txt", with_header("\n".join(parts), run.command, run.config))
    return {}


HANDLERS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "gate": cmd_gate,
            "cluster": cmd_cluster, "placebo": cmd_placebo, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        config = resolve_config(args)
        data_dir = args.data_dir or os.environ.get(DATA_DIR_ENV) or "data"
        out_dir = args.out or str(Path(data_dir) / "results")
        threads = args.threads if args.threads is not None else default_threads()
        if threads < 1:
            raise UsageError("threads must be positive")
        log.info("command %s, seed %d, threads %d, config %s", args.command, config["seed"],
                 threads, config)
        HANDLERS[args.command](Run(args.command, config, data_dir, out_dir, threads))
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
