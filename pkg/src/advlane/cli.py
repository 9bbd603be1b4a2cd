"""Command-line entry point.

Commands: train-ego, train-adversaries, evaluate, cluster, beta-sweep.
Every command takes --config (a JSON document validated against the
published schema), plus --seed / --jobs / --output-dir / --resume
overrides. Stages communicate only through artifact files under the
output directory; repeating a command with the same config, seed and
build reproduces the data artifacts byte for byte.

Exit codes: 0 ok, 2 config error, 3 training budget exhausted,
4 ensemble total failure, 5 missing artifact.
"""

import argparse
import csv
import datetime
import hashlib
import json
import os
import re
import sys

import jsonschema
import numpy as np

from . import __version__
from .adversary import (
    DdpgHyper,
    build_ego_controller,
    load_member,
    train_ensemble,
    train_single,
    write_ensemble_index,
)
from .analysis import AnalysisSettings, cluster_report, evaluate_policy
from .ego import DqnHyper, dqn_train
from .scenario import IdmAdversary, IdmParams, RewardConfig, ScenarioConfig
from .svgplot import heatmap_svg, line_svg, scatter_svg

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_ENSEMBLE = 4
EXIT_MISSING = 5

OUTPUT_ROOT_ENV = "ADVLANE_OUTPUT_ROOT"
_SCHEMA_DIR = os.path.join(os.path.dirname(__file__), "schemas")


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


def _load_schema(name):
    with open(os.path.join(_SCHEMA_DIR, name)) as f:
        return json.load(f)


def _error_pointer(err):
    path = "/" + "/".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        m = re.search(r"'([^']+)' is a required property", err.message)
        if m:
            return (path.rstrip("/") + "/" + m.group(1)) if path != "/" \
                else "/" + m.group(1)
    if err.validator == "additionalProperties":
        m = re.search(r"\('?([^'\s,)]+)'?", err.message)
        if m:
            return (path.rstrip("/") + "/" + m.group(1)) if path != "/" \
                else "/" + m.group(1)
    return path


def load_run_config(path):
    """Read, schema-validate and materialize a run configuration."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
        doc = json.loads(raw.decode("utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    schema = _load_schema("run_config.schema.json")
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  at {_error_pointer(e)}: {e.message}" for e in errors]
        raise ConfigError("config validation failed:\n" + "\n".join(lines))
    return doc, raw


class Run:
    """Materialized configuration plus output-directory bookkeeping."""

    def __init__(self, doc, raw, args):
        self.doc = doc
        self.raw = raw
        self.base_seed = args.seed if args.seed is not None else doc["base_seed"]
        out = args.output_dir or doc["output_dir"]
        if not os.path.isabs(out):
            out = os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "."), out)
        self.out = out
        self.jobs = args.jobs or (os.cpu_count() or 1)
        self.resume = args.resume
        self.cfg = ScenarioConfig.from_dict(doc.get("scenario", {}))
        self.rcfg = RewardConfig.from_dict(doc.get("reward", {}))
        self.idm = IdmParams(**doc.get("idm", {}))
        self.hyper = DdpgHyper(**doc.get("hyper", {}))
        ego = doc.get("ego", {})
        self.ego_kind = ego.get("controller", "gap_acceptance")
        self.ego_spec = {
            "controller": self.ego_kind,
            "idm": doc.get("idm", {}),
            "margin": ego.get("margin", 1.0),
            "maneuver_duration": ego.get("maneuver_duration", 3.0),
            "align": ego.get("align", True),
        }
        if self.ego_kind == "dqn":
            self.ego_spec["weights"] = self.path("ego", "dqn_weights.json")
        dqn = ego.get("dqn", {})
        self.dqn_hyper = DqnHyper(**dqn)
        ana = doc.get("analysis", {})
        self.analysis = AnalysisSettings(
            rollout_episodes=ana.get("rollout_episodes", 50),
            eval_episodes=ana.get("eval_episodes", 200),
            grid_bins=ana.get("grid_bins", 30),
            k_hint=ana.get("k_hint", 3),
            smoothing=ana.get("smoothing", 1e-6),
            gamma=self.hyper.gamma,
        )
        self.sweep_members = ana.get("sweep_members", 3)
        self.sweep_max_episodes = ana.get("sweep_max_episodes", 120)
        self.sweep_eval_episodes = ana.get("sweep_eval_episodes", 100)

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def ensure(self, *parts):
        p = self.path(*parts)
        os.makedirs(p, exist_ok=True)
        return p

    def ego_factory(self):
        spec = dict(self.ego_spec)
        cfg = self.cfg
        return lambda: build_ego_controller(cfg, spec)

    def require(self, *parts):
        p = self.path(*parts)
        if not os.path.exists(p):
            raise MissingArtifact(p)
        return p

    def write_manifest(self, command, artifacts, status, started):
        doc = {
            "command": command,
            "config_sha256": hashlib.sha256(self.raw).hexdigest(),
            "build": __version__,
            "base_seed": self.base_seed,
            "started": started,
            "finished": _now(),
            "artifacts": artifacts,
            "exit_status": status,
        }
        os.makedirs(self.out, exist_ok=True)
        path = self.path(f"{command.replace('-', '_')}_manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
        os.replace(tmp, path)
        return path


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _eval_row(rep):
    return [rep.policy_id, rep.episodes, rep.success_rate, rep.crash_rate,
            rep.timeout_rate, rep.mean_ego_return, rep.mean_adv_return,
            rep.seed]


EVAL_HEADER = ["policy", "episodes", "success_rate", "crash_rate",
               "timeout_rate", "mean_ego_return", "mean_adv_return", "seed"]


# ---------------------------------------------------------------------------
# commands


def cmd_train_ego(run):
    started = _now()
    if run.ego_kind != "dqn":
        print("ego controller is rule-based (gap acceptance); "
              "nothing to train.")
        run.write_manifest("train-ego", [], EXIT_OK, started)
        return EXIT_OK
    print(f"training DQN ego (cap {run.dqn_hyper.max_episodes} episodes, "
          f"seed {run.base_seed})")
    policy = dqn_train(run.cfg, run.rcfg, run.dqn_hyper, seed=run.base_seed,
                       idm=run.idm, align=run.ego_spec["align"])
    run.ensure("ego")
    weights = run.path("ego", "dqn_weights.json")
    policy.save(weights)
    curve = run.path("ego", "dqn_curve.csv")
    _write_csv(curve, ["episode", "return", "outcome", "moving_success_rate"],
               [[ep, ret, out, rate] for ep, ret, out, rate in policy.curve])
    artifacts = [
        {"path": weights, "sha256": _sha256_file(weights)},
        {"path": curve, "sha256": _sha256_file(curve)},
    ]
    status = EXIT_OK if policy.converged else EXIT_BUDGET
    run.write_manifest("train-ego", artifacts, status, started)
    if not policy.converged:
        print(f"training budget exhausted after {len(policy.curve)} episodes "
              "without convergence; best snapshot kept")
    else:
        print(f"converged after {len(policy.curve)} episodes")
    return status


def cmd_train_adversaries(run):
    started = _now()
    if run.ego_kind == "dqn":
        run.require("ego", "dqn_weights.json")
    out = run.ensure("adversaries")
    print(f"training ensemble of {run.hyper.ensemble_size} adversaries vs "
          f"{run.ego_kind} ego (jobs={run.jobs})")
    results = train_ensemble(
        run.cfg, run.rcfg, run.ego_spec, run.hyper, run.base_seed,
        out_dir=out, jobs=run.jobs, resume=run.resume,
        progress=lambda i, status: print(f"  member {i:03d}: {status}"))
    index = write_ensemble_index(out, results, run.hyper, run.base_seed)
    ok = sum(1 for r in results if r.ok)
    status = EXIT_OK if ok >= 1 else EXIT_ENSEMBLE
    run.write_manifest(
        "train-adversaries",
        [{"path": index, "sha256": _sha256_file(index)}], status, started)
    print(f"{ok}/{len(results)} members trained")
    return status


def _load_ensemble(run):
    index_path = run.require("adversaries", "index.json")
    with open(index_path) as f:
        index = json.load(f)
    members = []
    for m in index["members"]:
        if m["status"] != "ok":
            continue
        members.append((f"member_{m['index']:03d}",
                        load_member(run.path("adversaries"), m["index"])))
    if not members:
        raise MissingArtifact("ensemble has no usable members")
    return members


def cmd_evaluate(run, adversary_sel):
    started = _now()
    run.ensure("eval")
    ego_factory = run.ego_factory()
    episodes = run.analysis.eval_episodes
    seed = run.base_seed + 900_000
    artifacts = []

    if adversary_sel == "naturalistic":
        rep = evaluate_policy(IdmAdversary(run.idm, run.cfg), ego_factory(),
                              run.cfg, run.rcfg, episodes, seed,
                              policy_id="naturalistic",
                              gamma=run.hyper.gamma)
        path = run.path("eval", "naturalistic.csv")
        _write_csv(path, EVAL_HEADER, [_eval_row(rep)])
        artifacts.append(path)
        print(f"naturalistic: success={rep.success_rate:.3f} "
              f"crash={rep.crash_rate:.3f} timeout={rep.timeout_rate:.3f}")
    else:
        members = _load_ensemble(run)
        if adversary_sel != "ensemble":
            wanted = {adversary_sel}
            m = re.fullmatch(r"(?:member[_-])?(\d+)", adversary_sel)
            if m:
                wanted.add(f"member_{int(m.group(1)):03d}")
            members = [(pid, pol) for pid, pol in members if pid in wanted]
            if not members:
                raise MissingArtifact(f"unknown ensemble member "
                                      f"{adversary_sel!r}")
        reports = []
        for k, (pid, policy) in enumerate(members):
            rep = evaluate_policy(policy, ego_factory(), run.cfg, run.rcfg,
                                  episodes, seed + k, policy_id=pid,
                                  gamma=run.hyper.gamma)
            reports.append(rep)
            print(f"{pid}: success={rep.success_rate:.3f} "
                  f"crash={rep.crash_rate:.3f} timeout={rep.timeout_rate:.3f}")
        path = run.path("eval", "members.csv")
        _write_csv(path, EVAL_HEADER, [_eval_row(r) for r in reports])
        artifacts.append(path)
        summary = run.path("eval", "summary.csv")
        _write_csv(summary,
                   ["policies", "episodes_per_policy", "mean_success_rate",
                    "mean_crash_rate", "mean_timeout_rate"],
                   [[len(reports), episodes,
                     float(np.mean([r.success_rate for r in reports])),
                     float(np.mean([r.crash_rate for r in reports])),
                     float(np.mean([r.timeout_rate for r in reports]))]])
        artifacts.append(summary)
    run.write_manifest(
        "evaluate",
        [{"path": p, "sha256": _sha256_file(p)} for p in artifacts],
        EXIT_OK, started)
    return EXIT_OK


def cmd_cluster(run):
    started = _now()
    members = _load_ensemble(run)
    run.ensure("cluster")
    from .analysis import rollout_states

    naturalistic = rollout_states(
        IdmAdversary(run.idm, run.cfg), run.ego_factory()(), run.cfg,
        run.rcfg, run.analysis.rollout_episodes,
        run.base_seed + 800_000, policy_id="naturalistic",
        gamma=run.hyper.gamma)
    report = cluster_report(members, run.ego_factory(), run.cfg, run.rcfg,
                            run.analysis, run.base_seed + 700_000,
                            naturalistic=naturalistic,
                            warn=lambda msg: print(f"warning: {msg}"))
    jsonschema.validate(report, _load_schema("cluster_report.schema.json"))
    report_path = run.path("cluster", "report.json")
    tmp = report_path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    os.replace(tmp, report_path)
    artifacts = [report_path]

    points, labels = [], []
    for entry in report["scatter"]:
        points.extend(entry["points"])
        labels.extend([entry["cluster"]] * len(entry["points"]))
    scatter_path = run.path("cluster", "pca_scatter.svg")
    with open(scatter_path, "w") as f:
        f.write(scatter_svg(points, labels,
                            title=f"visited states by cluster (k={report['k']})"))
    artifacts.append(scatter_path)
    for c in report["clusters"]:
        p = run.path("cluster", f"cluster_{c['cluster']}_heatmap.svg")
        with open(p, "w") as f:
            f.write(heatmap_svg(
                c["mean_density"],
                title=f"cluster {c['cluster']} mean state density "
                      f"(n={c['size']})"))
        artifacts.append(p)
    run.write_manifest(
        "cluster", [{"path": p, "sha256": _sha256_file(p)} for p in artifacts],
        EXIT_OK, started)
    print(f"k={report['k']} clusters, lambda={report['lambda']:.4f}; "
          f"report at {report_path}")
    return EXIT_OK


def cmd_beta_sweep(run, betas):
    started = _now()
    if len(betas) < 2:
        raise ConfigError("beta sweep needs at least 2 values")
    if any(b <= 0 for b in betas):
        raise ConfigError("beta values must be positive")
    if run.ego_kind == "dqn":
        run.require("ego", "dqn_weights.json")
    run.ensure("sweep")
    betas = sorted(betas)
    hyper_doc = run.hyper.to_dict()
    hyper_doc["ensemble_size"] = run.sweep_members
    hyper_doc["max_episodes"] = run.sweep_max_episodes
    sweep_hyper = DdpgHyper(**hyper_doc)
    rows = []
    member_rows = []
    for beta in betas:
        rcfg_doc = run.rcfg.to_dict()
        rcfg_doc["beta"] = beta
        rcfg = RewardConfig.from_dict(rcfg_doc)
        # shared seeds: the same member seeds are reused for every beta
        results = train_ensemble(run.cfg, rcfg, run.ego_spec, sweep_hyper,
                                 run.base_seed, out_dir=None, jobs=run.jobs)
        crash_rates = []
        for r in results:
            if not r.ok:
                continue
            rep = evaluate_policy(r.policy, run.ego_factory()(), run.cfg,
                                  rcfg, run.sweep_eval_episodes,
                                  run.base_seed + 600_000 + r.index,
                                  policy_id=f"member_{r.index:03d}",
                                  gamma=run.hyper.gamma)
            crash_rates.append(rep.crash_rate)
            member_rows.append([beta, r.index, rep.success_rate,
                                rep.crash_rate, rep.timeout_rate])
        mean_crash = float(np.mean(crash_rates)) if crash_rates else 0.0
        rows.append([beta, mean_crash])
        print(f"beta={beta}: mean crash rate {mean_crash:.3f} over "
              f"{len(crash_rates)} members")
    csv_path = run.path("sweep", "beta_sweep.csv")
    _write_csv(csv_path, ["beta", "crash_rate"], rows)
    members_path = run.path("sweep", "beta_sweep_members.csv")
    _write_csv(members_path,
               ["beta", "member", "success_rate", "crash_rate",
                "timeout_rate"], member_rows)
    svg_path = run.path("sweep", "beta_sweep.svg")
    with open(svg_path, "w") as f:
        f.write(line_svg(
            [("crash rate", [r[0] for r in rows], [r[1] for r in rows])],
            title="crash rate vs rationality weight",
            x_label="beta", y_label="crash rate"))
    run.write_manifest(
        "beta-sweep",
        [{"path": p, "sha256": _sha256_file(p)}
         for p in (csv_path, members_path, svg_path)], EXIT_OK, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advlane",
        description="Adversarial lane-change evaluation workbench")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override base_seed")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker pool size (default: logical cores)")
        p.add_argument("--output-dir", default=None,
                       help="override output directory")
        p.add_argument("--resume", action="store_true",
                       help="skip already-finished members")

    common(sub.add_parser("train-ego", help="train the DQN ego controller"))
    common(sub.add_parser("train-adversaries",
                          help="train the adversarial ensemble"))
    p = sub.add_parser("evaluate", help="Monte-Carlo evaluation")
    common(p)
    p.add_argument("--adversary", default="ensemble",
                   help="naturalistic | ensemble | member id")
    common(sub.add_parser("cluster", help="cluster the adversarial ensemble"))
    p = sub.add_parser("beta-sweep", help="crash rate vs rationality weight")
    common(p)
    p.add_argument("--betas", default="0.1,1,2",
                   help="comma-separated beta values (>= 2 required)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        doc, raw = load_run_config(args.config)
        run = Run(doc, raw, args)
        if args.command == "train-ego":
            return cmd_train_ego(run)
        if args.command == "train-adversaries":
            return cmd_train_adversaries(run)
        if args.command == "evaluate":
            return cmd_evaluate(run, args.adversary)
        if args.command == "cluster":
            return cmd_cluster(run)
        if args.command == "beta-sweep":
            try:
                betas = [float(b) for b in args.betas.split(",") if b.strip()]
            except ValueError as e:
                raise ConfigError(f"cannot parse --betas: {e}") from e
            return cmd_beta_sweep(run, betas)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
