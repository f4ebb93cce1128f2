"""Command-line interface.

Subcommands: run (full pipeline), simulate (synthetic study data with a
known true effect), check-balance (similarity diagnostics only), and
validate (config file check without touching data). Exit codes: 0 on
success, 1 for configuration or analysis errors, 2 for IO errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import PipelineConfig, load_config, validate_config
from .dataset import save_study
from .errors import ConfigError, TrialReachError
from .pipeline import run, write_outputs
from .similarity import similarity_report
from .simulate import DgpSpec, generate_synthetic
from .weighting import estimate_sampling_score, make_weights


def _load_pipeline_config(path: str) -> PipelineConfig:
    try:
        cfg, base_dir = load_config(path)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file is not valid JSON: {exc}"]) from None
    return PipelineConfig.from_dict(cfg, base_dir)


def _cmd_run(args) -> int:
    config = _load_pipeline_config(args.config)
    if config.output_dir is None:
        raise ConfigError(["paths.output_dir is required to run the pipeline"])
    report = run(config, threads=args.threads)
    files = write_outputs(report, config.output_dir, config.report_formats)
    for msg in report.payload.get("warnings", []):
        print(f"warning: {msg}", file=sys.stderr)
    for msg in report.caveats:
        print(f"caveat: {msg}", file=sys.stderr)
    for path in files:
        print(f"wrote {path}")
    return 0


def _cmd_simulate(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec_obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"spec file is not valid JSON: {exc}"]) from None
    spec = DgpSpec.from_dict(spec_obj)
    trial, target, true_pate = generate_synthetic(spec, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    trial_path = os.path.join(args.out, "trial.csv")
    target_path = os.path.join(args.out, "target.csv")
    schema_path = os.path.join(args.out, "schema.json")
    truth_path = os.path.join(args.out, "truth.json")
    save_study(trial, trial_path)
    save_study(target, target_path)
    with open(schema_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(
            {"covariates": [c.to_dict() for c in trial.schema]},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    with open(truth_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(
            {"true_pate": true_pate, "seed": args.seed, "spec": spec.to_dict()},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    for path in (trial_path, target_path, schema_path, truth_path):
        print(f"wrote {path}")
    return 0


def _cmd_check_balance(args) -> int:
    from . import dataset
    from .pipeline import _build_knobs, _drop_incomplete, _weights_from

    config = _load_pipeline_config(args.config)
    with open(config.schema_json, "r", encoding="utf-8") as fh:
        schema = dataset.schema_from_json(json.load(fh))
    trial = dataset.load_study(config.trial_csv, schema, "trial")
    target = dataset.load_study(config.target_csv, schema, "target")
    trial, target = dataset.harmonize(trial, target)
    knobs = _build_knobs(config, trial.schema)
    trial_cc, d_tr = _drop_incomplete(trial, knobs.ps_covariates)
    target_cc, d_tg = _drop_incomplete(target, knobs.ps_covariates)
    if d_tr + d_tg:
        print(
            f"note: dropped {d_tr} trial and {d_tg} target units with "
            "missing sampling-model covariates for this check",
            file=sys.stderr,
        )
    data = dataset.stack(trial_cc, target_cc)
    fit = estimate_sampling_score(
        data,
        scenario=config.scenario,
        family=knobs.ps_family,
        covariates=list(knobs.ps_covariates),
        forest_params=knobs.forest,
    )
    weights = _weights_from(fit, knobs)
    sim = similarity_report(
        data, fit, weights=weights, threshold=config.smd_threshold
    )
    label = f" ({sim.overlap_label})" if sim.overlap_label else ""
    print(f"sampling score overlap index: {sim.overlap_index:.4f}{label}")
    print(f"standardized score difference: {sim.delta_p:.4f}")
    print(f"effective sample size after weighting: "
          f"{weights.effective_sample_size:.1f} of {data.n_trial} trial units")
    width = max([len("covariate")] + [len(k) for k in sim.smd_unweighted])
    print(f"{'covariate':<{width}}  {'SMD before':>10}  {'SMD after':>10}  flag")
    after = sim.smd_weighted or {}
    for name in sorted(sim.smd_unweighted):
        b = sim.smd_unweighted[name]
        a = after.get(name, float("nan"))
        flag = "*" if name in sim.flagged else ""
        print(f"{name:<{width}}  {b:>10.4f}  {a:>10.4f}  {flag}")
    return 0


def _cmd_validate(args) -> int:
    try:
        cfg, _ = load_config(args.config)
    except json.JSONDecodeError as exc:
        print(f"config file is not valid JSON: {exc}", file=sys.stderr)
        return 1
    problems = validate_config(cfg)
    if problems:
        for p in problems:
            print(f"config problem: {p}", file=sys.stderr)
        return 1
    print("config ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialreach",
        description=(
            "Translate a randomized trial's treatment effect to a target "
            "population by sampling-score weighting, outcome modeling, or "
            "doubly robust estimation, with similarity diagnostics and "
            "sensitivity scenarios."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full analysis from a config file")
    p_run.add_argument("--config", required=True, help="path to the config JSON")
    p_run.add_argument(
        "--threads", type=int, default=1,
        help="worker threads for bootstrap and scenarios (results are "
        "identical for any value)",
    )
    p_run.set_defaults(func=_cmd_run)

    p_sim = sub.add_parser(
        "simulate", help="generate synthetic trial and target data"
    )
    p_sim.add_argument("--spec", required=True, help="path to the generator spec JSON")
    p_sim.add_argument("--seed", type=int, required=True, help="master seed")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.set_defaults(func=_cmd_simulate)

    p_bal = sub.add_parser(
        "check-balance",
        help="compute population similarity diagnostics without estimating",
    )
    p_bal.add_argument("--config", required=True, help="path to the config JSON")
    p_bal.set_defaults(func=_cmd_check_balance)

    p_val = sub.add_parser(
        "validate", help="check a config file and list every problem"
    )
    p_val.add_argument("--config", required=True, help="path to the config JSON")
    p_val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config problem: {p}", file=sys.stderr)
        return 1
    except TrialReachError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
