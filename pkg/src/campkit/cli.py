"""Command-line front end: synthesis, ingestion, fitting, evaluation,
similarity analysis and the small-instance oracle checks.

Every command is deterministic given its resolved configuration (a config
file of flat ``key = value`` pairs, overridden by flags; the resolved mapping
is echoed into the JSON outputs).  Exit codes: 0 success, 1 usage error,
2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dirichlet import MixtureBase, MixtureError
from .engine import CampConfig, CampError, fit, lemma1_weights
from .gibbs import GibbsConfig, GibbsError, draw_batch
from .metrics import (MetricError, metric_rows, mf_users, similarity_matrix,
                      write_metrics_csv)
from .predictors import KINDS, PredictorError, RefitSchedule, run_streaming
from .synthetic import (SynthError, SyntheticPrior, co_cluster_matrix,
                        enumerate_posterior, generate, random_kernels)
from .traces import TraceError, ingest_csv, write_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

_DATA_ERRORS = (TraceError, MixtureError, GibbsError, CampError,
                PredictorError, MetricError, SynthError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config_file(path: str) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _resolve(args, keys: dict) -> dict:
    """Merge config-file values under the given keys with flag overrides."""
    cfg = {}
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        for key, (attr, conv) in keys.items():
            if key in file_cfg:
                cfg[attr] = conv(file_cfg[key])
    for attr, _ in keys.values():
        flag = getattr(args, attr, None)
        if flag is not None:
            cfg[attr] = flag
    return cfg


def _camp_config(resolved: dict, seed: int) -> CampConfig:
    return CampConfig(
        iterations=resolved.get("camp_k", 3),
        samples_per_iteration=resolved.get("camp_b", 8),
        sweeps=resolved.get("camp_m", 30),
        seed=seed,
        max_components=resolved.get("max_components", 512),
        min_weight=resolved.get("min_weight", 1e-10),
    )


def _alphabet_policy(text: str):
    if text == "all":
        return "all"
    if text.startswith("top:"):
        return ("top", int(text.split(":", 1)[1]))
    raise UsageError(f"bad alphabet policy {text!r} (use 'all' or 'top:K')")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> int:
    if args.seed is None:
        raise UsageError("synth requires --seed for reproducibility")
    rng = np.random.default_rng(args.seed)
    lengths = ("fixed", args.length) if args.length_max is None \
        else ("uniform", args.length, args.length_max)
    stay_means = None if args.stay_mean is None else np.full(args.locations, args.stay_mean)
    if args.mode == "perfect":
        kernels = random_kernels(args.clusters, args.locations, rng)
        prior = SyntheticPrior.perfect_clusters(kernels, lengths, stay_means)
    elif args.mode == "noise":
        kernels = random_kernels(args.clusters, args.locations, rng)
        prior = SyntheticPrior.dirichlet_noise(kernels, args.spread, lengths, stay_means)
    elif args.mode == "dp":
        prior = SyntheticPrior.dp_draw(args.locations, args.alpha, args.truncation,
                                       lengths, stay_means)
    else:
        raise UsageError(f"unknown mode {args.mode!r}")

    traces, thetas, labels = generate(prior, args.users, args.seed + 1)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(traces, out / "traces.csv")
    _write_json(out / "truth.json", {
        "config": {k: getattr(args, k) for k in
                   ("mode", "users", "locations", "clusters", "length", "length_max",
                    "seed", "alpha", "truncation", "spread", "stay_mean")},
        "labels": {u: int(lab) for u, lab in zip(traces.user_ids, labels)},
        "kernels": {u: thetas[i].tolist() for i, u in enumerate(traces.user_ids)},
    })
    print(f"wrote {out / 'traces.csv'} and {out / 'truth.json'}")
    return EXIT_OK


def _cmd_ingest(args) -> int:
    traces = ingest_csv(args.input, _alphabet_policy(args.alphabet))
    write_csv(traces, args.out)
    print(f"{traces.n_users} users, {traces.alphabet.size} locations -> {args.out}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    if args.seed is None:
        raise UsageError("fit requires --seed")
    resolved = _resolve(args, _CAMP_KEYS)
    traces = ingest_csv(args.input, _alphabet_policy(args.alphabet))
    model = fit(traces, _camp_config(resolved, args.seed))
    payload = model.to_dict()
    payload["resolved_config"] = {**resolved, "seed": args.seed, "input": str(args.input)}
    _write_json(Path(args.out), payload)
    print(f"fitted {traces.n_users} users; alpha={model.alpha:.6g}, "
          f"{model.base.n_components} base components -> {args.out}")
    return EXIT_OK


_CAMP_KEYS = {
    "camp.K": ("camp_k", int),
    "camp.B": ("camp_b", int),
    "camp.M": ("camp_m", int),
    "prune.max_components": ("max_components", int),
    "prune.min_weight": ("min_weight", float),
}

_EVAL_KEYS = dict(_CAMP_KEYS)
_EVAL_KEYS.update({
    "predictor": ("predictors", lambda s: s),
    "refit.epoch": ("epoch", lambda s: s),
})


def _cmd_eval(args) -> int:
    if args.seed is None:
        raise UsageError("eval requires --seed")
    resolved = _resolve(args, _EVAL_KEYS)
    kinds = [k.strip() for k in resolved.get("predictors", args.predictors).split(",")]
    for kind in kinds:
        if kind not in KINDS:
            raise UsageError(f"unknown predictor {kind!r} (choose from {', '.join(KINDS)})")
    metrics = [m.strip() for m in args.metrics.split(",")]
    for metric in metrics:
        if metric not in ("capr_time", "capr", "iapr", "stay"):
            raise UsageError(f"unknown metric {metric!r}")
    schedule = RefitSchedule.parse(str(resolved.get("epoch", args.epoch)))

    traces = ingest_csv(args.input, _alphabet_policy(args.alphabet))
    camp_cfg = _camp_config(resolved, args.seed)
    events = run_streaming(traces, kinds, camp_cfg, schedule,
                           with_stays="stay" in metrics)

    users = None
    population = "all"
    if args.population == "mf":
        population = "mf"
        users = mf_users(similarity_matrix(traces), args.sim_threshold)

    rows = metric_rows(events, traces, kinds, metrics, population, users)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "metrics.csv")
    final = {}
    for kind in kinds:
        picked = [e for e in events if users is None or e.user in users]
        hits = sum(e.predictions[kind] == e.actual for e in picked)
        final[kind] = hits / len(picked) if picked else None
    _write_json(out / "summary.json", {
        "resolved_config": {
            "predictors": ",".join(kinds), "metrics": ",".join(metrics),
            "population": args.population, "sim_threshold": args.sim_threshold,
            "epoch": str(resolved.get("epoch", args.epoch)), "seed": args.seed,
            "camp_k": camp_cfg.iterations, "camp_b": camp_cfg.samples_per_iteration,
            "camp_m": camp_cfg.sweeps, "input": str(args.input),
        },
        "n_events": len(events),
        "n_users": traces.n_users,
        "population_size": traces.n_users if users is None else len(users),
        "overall_accuracy": final,
    })
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return EXIT_OK


def _cmd_similarity(args) -> int:
    traces = ingest_csv(args.input, _alphabet_policy(args.alphabet))
    sim = similarity_matrix(traces)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "similarity.csv", "w", encoding="utf-8") as fh:
        fh.write("user,other,value\n")
        for a, u in enumerate(sim.user_ids):
            for b, v in enumerate(sim.user_ids):
                val = sim.values[a, b]
                fh.write(f"{u},{v},{'' if np.isnan(val) else format(val, '.6g')}\n")
    friendly = sorted(mf_users(sim, args.threshold))
    _write_json(out / "mf_users.json", {
        "threshold": args.threshold,
        "mf_users": friendly,
        "n_users": len(sim.user_ids),
        "clamped_ratios": sim.clamp_count,
    })
    print(f"{len(friendly)} of {len(sim.user_ids)} users have a neighbour "
          f"above {args.threshold}")
    return EXIT_OK


def _oracle_instances(args):
    rng = np.random.default_rng(args.seed)
    for _ in range(args.instances):
        kernels = random_kernels(2, args.locations, rng)
        prior = SyntheticPrior.perfect_clusters(
            kernels, ("uniform", 2, args.max_length))
        yield generate(prior, args.users, int(rng.integers(2 ** 31)))[0]


def _cmd_oracle_check(args) -> int:
    failures = []
    checked = []

    if args.suite in ("all", "gibbs"):
        worst = 0.0
        for idx, traces in enumerate(_oracle_instances(args)):
            exact = enumerate_posterior(traces, 1.0)
            cfg = GibbsConfig(alpha=1.0, base=MixtureBase.uniform(traces.alphabet.size),
                              sweeps=args.sweeps, seed=args.seed + 1000 + idx)
            samples = draw_batch(traces, cfg, args.chains)
            got = co_cluster_matrix(samples, traces.user_ids)
            gap = float(np.abs(got - exact.co_cluster_matrix()).max())
            worst = max(worst, gap)
        checked.append(("gibbs co-clustering", worst, args.tol_cocluster))
        if worst > args.tol_cocluster:
            failures.append("gibbs")

    if args.suite in ("all", "camp"):
        worst = 0.0
        for idx, traces in enumerate(_oracle_instances(args)):
            exact = enumerate_posterior(traces, 1.0)
            cfg = CampConfig(iterations=1, samples_per_iteration=args.batches,
                             sweeps=args.sweeps, seed=args.seed + 5000 + idx)
            model = fit(traces, cfg)
            gap = max(float(np.abs(model.theta(u).theta - exact.expected_theta(u)).max())
                      for u in traces.user_ids)
            worst = max(worst, gap)
        checked.append(("kernel estimate vs oracle", worst, args.tol_theta))
        if worst > args.tol_theta:
            failures.append("camp")

    if args.suite in ("all", "lemma1"):
        worst = 0.0
        for idx, traces in enumerate(_oracle_instances(args)):
            for depth in (1, 2):
                cfg = CampConfig(iterations=depth, samples_per_iteration=2,
                                 sweeps=5, seed=args.seed + 9000 + idx)
                model = fit(traces, cfg)
                for u in traces.user_ids:
                    eta, gamma = lemma1_weights(model, u)
                    rebuilt = np.tile(eta[:, None], (1, traces.alphabet.size))
                    for v in traces.user_ids:
                        counts = model.counts[v]
                        rows = counts.row_sums.astype(float)
                        safe = np.where(rows > 0, rows, 1.0)
                        rebuilt += gamma[v][:, None] * counts.counts / safe[:, None]
                    gap = float(np.abs(rebuilt - model.theta(u).theta).max())
                    worst = max(worst, gap)
        checked.append(("expansion identity", worst, args.tol_identity))
        if worst > args.tol_identity:
            failures.append("lemma1")

    for name, worst, tol in checked:
        status = "PASS" if worst <= tol else "FAIL"
        print(f"{status} {name}: worst gap {worst:.6g} (tolerance {tol:g})")
    if failures:
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="campkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate synthetic clustered traces")
    synth.add_argument("--mode", default="perfect", choices=["perfect", "noise", "dp"])
    synth.add_argument("--users", type=int, default=60)
    synth.add_argument("--locations", type=int, default=10)
    synth.add_argument("--clusters", type=int, default=3)
    synth.add_argument("--len", dest="length", type=int, default=20)
    synth.add_argument("--len-max", dest="length_max", type=int, default=None)
    synth.add_argument("--alpha", type=float, default=1.0)
    synth.add_argument("--truncation", type=int, default=50)
    synth.add_argument("--spread", type=float, default=0.1)
    synth.add_argument("--stay-mean", type=float, default=None)
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--out-dir", default="synth_out")
    synth.set_defaults(func=_cmd_synth)

    ingest = sub.add_parser("ingest", help="normalize a raw trace CSV")
    ingest.add_argument("--input", required=True)
    ingest.add_argument("--alphabet", default="all")
    ingest.add_argument("--out", required=True)
    ingest.set_defaults(func=_cmd_ingest)

    fit_cmd = sub.add_parser("fit", help="fit the cluster-aided model")
    fit_cmd.add_argument("--input", required=True)
    fit_cmd.add_argument("--alphabet", default="all")
    fit_cmd.add_argument("--config", default=None)
    fit_cmd.add_argument("--camp-k", dest="camp_k", type=int, default=None)
    fit_cmd.add_argument("--camp-b", dest="camp_b", type=int, default=None)
    fit_cmd.add_argument("--camp-m", dest="camp_m", type=int, default=None)
    fit_cmd.add_argument("--max-components", dest="max_components", type=int, default=None)
    fit_cmd.add_argument("--min-weight", dest="min_weight", type=float, default=None)
    fit_cmd.add_argument("--seed", type=int, default=None)
    fit_cmd.add_argument("--out", required=True)
    fit_cmd.set_defaults(func=_cmd_fit)

    ev = sub.add_parser("eval", help="streaming evaluation of predictors")
    ev.add_argument("--input", required=True)
    ev.add_argument("--alphabet", default="all")
    ev.add_argument("--config", default=None)
    ev.add_argument("--predictors", default="markov,agg,camp")
    ev.add_argument("--metrics", default="capr_time,capr,iapr")
    ev.add_argument("--population", default="all", choices=["all", "mf"])
    ev.add_argument("--sim-threshold", type=float, default=0.5)
    ev.add_argument("--epoch", default="25")
    ev.add_argument("--camp-k", dest="camp_k", type=int, default=None)
    ev.add_argument("--camp-b", dest="camp_b", type=int, default=None)
    ev.add_argument("--camp-m", dest="camp_m", type=int, default=None)
    ev.add_argument("--max-components", dest="max_components", type=int, default=None)
    ev.add_argument("--min-weight", dest="min_weight", type=float, default=None)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--out-dir", default="eval_out")
    ev.set_defaults(func=_cmd_eval)

    sim = sub.add_parser("similarity", help="pairwise mutual-prediction similarity")
    sim.add_argument("--input", required=True)
    sim.add_argument("--alphabet", default="all")
    sim.add_argument("--threshold", type=float, default=0.5)
    sim.add_argument("--out-dir", default="similarity_out")
    sim.set_defaults(func=_cmd_similarity)

    oc = sub.add_parser("oracle-check", help="compare sampler and estimates "
                        "against exact enumeration on small instances")
    oc.add_argument("--suite", default="all", choices=["all", "gibbs", "camp", "lemma1"])
    oc.add_argument("--instances", type=int, default=5)
    oc.add_argument("--users", type=int, default=4)
    oc.add_argument("--locations", type=int, default=3)
    oc.add_argument("--max-length", dest="max_length", type=int, default=5)
    oc.add_argument("--chains", type=int, default=2000)
    oc.add_argument("--batches", type=int, default=400)
    oc.add_argument("--sweeps", type=int, default=50)
    oc.add_argument("--tol-cocluster", type=float, default=0.05)
    oc.add_argument("--tol-theta", type=float, default=0.05)
    oc.add_argument("--tol-identity", type=float, default=1e-8)
    oc.add_argument("--seed", type=int, default=0)
    oc.set_defaults(func=_cmd_oracle_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
