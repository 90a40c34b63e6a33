"""Command-line interface.

Every subcommand writes a ``*.manifest.json`` next to its primary output with
the parsed arguments, seed, library versions and wall time. Exit codes:
0 success, 1 data error (bad or missing input), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    DataError, _data_lines, infer_schema, load_corpus, load_guide_map, load_schema,
    load_survival, phecode_counts, survival_arrays, write_corpus, write_schema, write_survival,
)
from .evaluate import dynamic_auc_curve, group_split_by_topic, kaplan_meier, log_rank_test, step_grid
from .inference import VARIANTS, TrainConfig, TrainingError, attach_cox, train
from .persist import ModelFormatError, config_hash, load_model, save_model
from .predict import predict_topics
from .prior import EMConfig, PriorModel, binary_prior, compute_prior, load_prior, write_prior
from .repro import quantile_grid, run_design1, run_design2
from .simulate import SimConfig1, SimConfig2, make_design2_inputs, simulate_design1, simulate_design2
from .survival import NoEventsError

log = logging.getLogger("survtopics")


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------

def _versions() -> dict:
    import numba
    import scipy

    return {"survtopics": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def _args_dict(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


def _stamp(args) -> str:
    return f"seed={getattr(args, 'seed', None)} config_hash={config_hash(_args_dict(args))}"


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise DataError("file not found", p)


def _write_manifest(path: Path, args, wall: float, results: dict | None = None) -> None:
    doc = {"subcommand": args.command, "config": _args_dict(args),
           "config_hash": config_hash(_args_dict(args)), "seed": getattr(args, "seed", None),
           "versions": _versions(), "wall_time_s": round(wall, 3)}
    if results:
        doc["results"] = results
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _load_corpus_args(corpus_path, schema_path):
    _require(corpus_path, schema_path)
    vocabs = load_schema(schema_path) if schema_path else infer_schema(corpus_path)
    return load_corpus(corpus_path, vocabs)


def _topic_labels(model) -> list[str]:
    if model.prior_model is not None:
        return list(model.prior_model.phenotype_ids)
    return [str(k) for k in range(model.K)]


def load_predictions(path) -> tuple[list[str], np.ndarray, np.ndarray, list[str]]:
    """Read a predictions TSV: ids, hazard ratios, theta matrix, topic labels."""
    _require(path)
    lines = _data_lines(path)
    head = next(lines, None)
    if head is None or head[1][:2] != ["patient_id", "hazard_ratio"]:
        raise DataError("expected header 'patient_id<TAB>hazard_ratio<TAB>theta_...'", path, head and head[0])
    labels = [h.removeprefix("theta_") for h in head[1][2:]]
    ids, hr, theta = [], [], []
    for lineno, f in lines:
        if len(f) != 2 + len(labels):
            raise DataError(f"expected {2 + len(labels)} fields, got {len(f)}", path, lineno)
        try:
            vals = [float(x) for x in f[1:]]
        except ValueError:
            raise DataError("non-numeric value", path, lineno) from None
        ids.append(f[0])
        hr.append(vals[0])
        theta.append(vals[1:])
    return ids, np.array(hr), np.array(theta).reshape(len(ids), len(labels)), labels


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> tuple[Path, dict]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.design == 1:
        cfg = SimConfig1(V=args.V, K=args.K, P=args.P, tokens_per_patient=args.tokens_per_patient,
                         n_nonzero=args.n_nonzero, w_value=args.w_value, beta_scale=args.beta_scale or 500.0,
                         lambda_baseline=args.lam, censor_rate=args.censor_rate, seed=args.seed)
        ds = simulate_design1(cfg)
    else:
        if args.guide_map is None:
            paths = make_design2_inputs(out / "standin", P=args.P, K=args.K, V=args.V, seed=args.seed)
        else:
            _require(args.guide_map, args.frequencies, args.record_counts)
            paths = {"guide_map": args.guide_map, "frequencies": args.frequencies,
                     "record_counts": args.record_counts}
        cfg = SimConfig2(**paths, beta_scale=args.beta_scale or 3.0, beta_offset=args.beta_offset,
                         nonzero_fraction=args.nonzero_fraction, w_value=args.w_value,
                         lambda_baseline=args.lam, theta_concentration=args.theta_concentration,
                         censor_rate=args.censor_rate, seed=args.seed)
        ds = simulate_design2(cfg)
    stamp = _stamp(args)
    write_schema(ds.corpus.vocabularies, out / "schema.json")
    write_corpus(ds.corpus, out / "corpus.tsv", comment=stamp)
    write_survival(ds.survival, out / "survival.tsv", comment=stamp)
    truth = {"seed": args.seed, "config": asdict(cfg), "w": ds.w.tolist(),
             "patient_ids": list(ds.corpus.patient_ids), "zbar": ds.zbar.tolist()}
    (out / "truth.json").write_text(json.dumps(truth, default=_json_default))
    print(f"wrote {ds.corpus.n_patients} patients to {out}")
    return out / "simulate.manifest.json", {"n_patients": ds.corpus.n_patients}


def cmd_prior(args) -> tuple[Path, dict]:
    _require(args.guide_map)
    corpus = _load_corpus_args(args.corpus, args.schema)
    guide = load_guide_map(args.guide_map)
    U = phecode_counts(corpus, guide, args.guide_modality)
    if args.min_prevalence > 0:
        U = U.filter_prevalence(args.min_prevalence)
    if args.binary:
        pi = binary_prior(U, args.epsilon)
        model = PriorModel("binary", U.phenotype_ids, args.epsilon)
    else:
        pi, model = compute_prior(U, EMConfig(), args.epsilon, return_model=True)
    out = Path(args.out)
    write_prior(pi, corpus.patient_ids, U.phenotype_ids, out, comment=_stamp(args))
    model_path = out.with_suffix(".model.json")
    model_path.write_text(json.dumps(model.to_dict(), indent=1))
    print(f"prior for {len(U.phenotype_ids)} phenotypes written to {out}")
    return out.with_suffix(".manifest.json"), {"n_phenotypes": len(U.phenotype_ids)}


def cmd_train(args) -> tuple[Path, dict]:
    corpus = _load_corpus_args(args.corpus, args.schema)
    variant = args.variant
    guided = variant in ("mixehr_g", "mixehr_surg")
    supervised = variant in ("mixehr_surv", "mixehr_surg")
    survival = prior = prior_model = guide = None
    if supervised and args.survival is None:
        raise UsageError(f"--survival is required for variant {variant}")
    if args.survival is not None:
        _require(args.survival)
        survival = load_survival(args.survival, corpus)
    if guided:
        if args.prior is None or args.guide_map is None:
            raise UsageError(f"--prior and --guide-map are required for variant {variant}")
        _require(args.prior, args.guide_map)
        model_json = Path(args.prior).with_suffix(".model.json")
        _require(model_json)
        prior_model = PriorModel.from_dict(json.loads(model_json.read_text()))
        guide = load_guide_map(args.guide_map)
        prior = load_prior(args.prior, corpus.patient_ids, prior_model.phenotype_ids)
        K = len(prior_model.phenotype_ids)
        if args.K is not None and args.K != K:
            raise UsageError(f"--K {args.K} disagrees with the prior's {K} phenotypes")
    else:
        if args.K is None:
            raise UsageError("--K is required for unguided variants")
        K = args.K
    mode = "sequential"
    if args.threads and args.threads > 1:
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        mode = "parallel"
    config = TrainConfig(K=K, max_sweeps=args.max_sweeps, tol=args.tol, lambda1=args.lambda1,
                         lambda2=args.lambda2, variant=variant, seed=args.seed,
                         cox_refit_every=args.cox_refit_every, mode=mode)
    model = train(corpus, survival, prior, config, prior_model=prior_model,
                  guide_modality=corpus.modality_index(args.guide_modality) if guided else None, guide=guide)
    if not supervised and survival is not None:
        # two-stage pipeline: Cox head on the fitted training topic proportions
        model = attach_cox(model, model.train_gamma_bar, survival_arrays(survival))
    out = save_model(model, args.out, extra={"run": _stamp(args)})
    print(f"trained {variant} (K={K}) in {model.n_sweeps} sweeps; converged={model.converged}")
    return out / "train.manifest.json", {"n_sweeps": model.n_sweeps, "converged": model.converged,
                                        "final_log_marginal": model.history[-1]}


def cmd_predict(args) -> tuple[Path, dict]:
    _require(args.model)
    model = load_model(args.model)
    _require(args.corpus)
    corpus = load_corpus(args.corpus, model.vocabularies)
    prior = None
    if args.prior is not None:
        _require(args.prior)
        if model.prior_model is None:
            raise UsageError("--prior given but the model is not guided")
        prior = load_prior(args.prior, corpus.patient_ids, model.prior_model.phenotype_ids)
    pred = predict_topics(model, corpus, prior)
    labels = _topic_labels(model)
    stamp = _stamp(args)
    hr = pred.hazard_ratio if pred.hazard_ratio is not None else np.full(corpus.n_patients, np.nan)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        fh.write("\t".join(["patient_id", "hazard_ratio"] + [f"theta_{lab}" for lab in labels]) + "\n")
        for j, pid in enumerate(pred.patient_ids):
            fh.write("\t".join([pid, repr(float(hr[j]))] + [repr(float(x)) for x in pred.theta[j]]) + "\n")
    if args.curves:
        if pred.hazard_ratio is None:
            raise UsageError("--curves needs a model with a survival head")
        with open(args.curves, "w", encoding="utf-8") as fh:
            fh.write(f"# {stamp}\npatient_id\ttime\tsurvival\n")
            for j, pid in enumerate(pred.patient_ids):
                c = pred.curve(j)
                for t, s in zip(c.times, c.values):
                    fh.write(f"{pid}\t{float(t)!r}\t{float(s)!r}\n")
    n_flag = int(pred.flagged.sum())
    if n_flag:
        log.warning("%d patients lacked tokens or guide-modality tokens and were flagged", n_flag)
    print(f"predictions for {corpus.n_patients} patients written to {out}")
    return out.with_suffix(".manifest.json"), {"n_flagged": n_flag}


def _grid(args, times):
    if args.grid_quantiles:
        return quantile_grid(times, args.grid_quantiles)
    return step_grid(args.grid_start, args.grid_stop, args.grid_step)


def cmd_evaluate(args) -> tuple[Path, dict]:
    _require(args.survival)
    ids, hr, _, _ = load_predictions(args.predictions)
    surv = load_survival(args.survival, ids)
    time_, _ = survival_arrays(surv)
    curve = dynamic_auc_curve(time_, hr, _grid(args, time_), tie_half=args.tie_half)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(f"# {_stamp(args)}\nt\tauc\n")
        for t, a in zip(curve.times, curve.auc):
            fh.write(f"{float(t)!r}\t{'NA' if np.isnan(a) else repr(float(a))}\n")
    print(f"mean_auc\t{curve.mean_auc:.6f}")
    return out.with_suffix(".manifest.json"), {"mean_auc": curve.mean_auc,
                                               "n_defined": int(curve.defined.sum())}


def cmd_km(args) -> tuple[Path, dict]:
    _require(args.survival)
    ids, _, theta, labels = load_predictions(args.predictions)
    if args.topic not in labels:
        raise UsageError(f"topic {args.topic!r} not among the prediction columns")
    surv = load_survival(args.survival, ids)
    time_, event = survival_arrays(surv)
    high, low = group_split_by_topic(theta, labels.index(args.topic), args.quantile)
    prefix = Path(args.out_prefix)
    stamp = _stamp(args)
    for name, idx in (("high", high), ("low", low)):
        km = kaplan_meier(time_[idx], event[idx])
        with open(f"{prefix}_{name}.tsv", "w", encoding="utf-8") as fh:
            fh.write(f"# {stamp}\ntime\tsurvival\tat_risk\tevents\n")
            for row in zip(km.times, km.survival, km.at_risk, km.events):
                fh.write(f"{float(row[0])!r}\t{float(row[1])!r}\t{row[2]}\t{row[3]}\n")
    lr = log_rank_test(time_[high], event[high], time_[low], event[low])
    print(f"chi_square\t{lr.chi_square:.6g}\np_value\t{lr.p_value:.6g}\np_one_sided\t{lr.p_one_sided:.6g}")
    return Path(f"{prefix}.manifest.json"), {"chi_square": lr.chi_square, "p_value": lr.p_value,
                                             "p_one_sided": lr.p_one_sided,
                                             "n_high": int(high.size), "n_low": int(low.size)}


def cmd_repro_design1(args) -> tuple[Path, dict]:
    overrides = {k: getattr(args, k) for k in ("V", "K", "P", "n_nonzero", "tokens_per_patient")
                 if getattr(args, k) is not None}
    if args.scale <= 0:
        raise UsageError("--scale must be positive")
    try:
        sim = SimConfig1().scaled(args.scale, seed=args.seed, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = TrainConfig(K=sim.K, seed=args.seed, max_sweeps=args.max_sweeps,
                      lambda1=args.lambda1, lambda2=args.lambda2)
    res = run_design1(sim, args.variant, cfg)
    return _report(args, res)


def cmd_repro_design2(args) -> tuple[Path, dict]:
    if args.inputs:
        d = Path(args.inputs)
        paths = {k: str(d / f"{k}.tsv") for k in ("guide_map", "frequencies", "record_counts")}
        _require(*paths.values())
    else:
        paths = make_design2_inputs(Path(args.out) / "standin", P=args.P, K=args.K, V=args.V, seed=args.seed)
    sim = SimConfig2(**paths, seed=args.seed)
    cfg = TrainConfig(K=load_guide_map(paths["guide_map"]).n_topics, seed=args.seed,
                      max_sweeps=args.max_sweeps, lambda1=args.lambda1, lambda2=args.lambda2)
    res = run_design2(sim, args.variant, cfg)
    return _report(args, res)


def _report(args, res) -> tuple[Path, dict]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "auc.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"# {_stamp(args)}\nt\tauc\n")
        for t, a in zip(res.grid, res.auc):
            fh.write(f"{float(t)!r}\t{'NA' if np.isnan(a) else repr(float(a))}\n")
    summary = res.summary()
    print(f"mean_auc\t{summary['mean_auc']:.6f}")
    print(f"coefficient_roc_area\t{summary['coefficient_roc_area']:.6f}")
    print(f"oracle_mean_auc\t{summary['oracle_mean_auc']:.6f}")
    return out / f"{args.command}.manifest.json", summary


# -- parser ---------------------------------------------------------------------

def _add_train_flags(p, variant_default):
    p.add_argument("--variant", choices=VARIANTS, default=variant_default)
    p.add_argument("--max-sweeps", type=int, default=200)
    p.add_argument("--lambda1", type=float, default=1e-3)
    p.add_argument("--lambda2", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survtopics", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic corpus with survival outcomes")
    p.add_argument("--design", type=int, choices=[1, 2], default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--V", type=int, default=1000)
    p.add_argument("--K", type=int, default=500)
    p.add_argument("--P", type=int, default=8000)
    p.add_argument("--tokens-per-patient", type=int, default=100)
    p.add_argument("--n-nonzero", type=int, default=50)
    p.add_argument("--w-value", type=float, default=6.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--censor-rate", type=float, default=0.0)
    p.add_argument("--beta-scale", type=float, default=None,
                   help="Design 1: Gamma scale of beta (500); Design 2: multiplier (3)")
    p.add_argument("--beta-offset", type=float, default=0.6)
    p.add_argument("--nonzero-fraction", type=float, default=0.10)
    p.add_argument("--theta-concentration", type=float, default=None)
    p.add_argument("--guide-map")
    p.add_argument("--frequencies")
    p.add_argument("--record-counts")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("prior", help="compute guide probabilities from phenotype counts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema")
    p.add_argument("--guide-map", required=True)
    p.add_argument("--guide-modality", default=0, type=lambda s: int(s) if s.isdigit() else s)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true", help="use the binary rule instead of mixtures")
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--min-prevalence", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prior)

    p = sub.add_parser("train", help="fit a topic model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema")
    p.add_argument("--survival")
    p.add_argument("--prior", help="prior TSV written by the prior subcommand")
    p.add_argument("--guide-map")
    p.add_argument("--guide-modality", default=0, type=lambda s: int(s) if s.isdigit() else s)
    p.add_argument("--K", type=int)
    _add_train_flags(p, "mixehr_surg")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--cox-refit-every", type=int, default=1)
    p.add_argument("--threads", type=int, default=1, help=">1 selects the parallel E-step")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="held-out topic inference and hazard ratios")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--prior")
    p.add_argument("--out", required=True)
    p.add_argument("--curves", help="optional per-patient survival curve TSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="dynamic AUC curve of predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--survival", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-start", type=float, default=20.0)
    p.add_argument("--grid-stop", type=float, default=755.0)
    p.add_argument("--grid-step", type=float, default=20.0)
    p.add_argument("--grid-quantiles", type=int, default=0,
                   help="use N quantiles of the observed times instead of a fixed step grid")
    p.add_argument("--tie-half", action="store_true", help="score tied hazard ratios 1/2")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("km", help="Kaplan-Meier curves and log-rank test for a topic split")
    p.add_argument("--predictions", required=True)
    p.add_argument("--survival", required=True)
    p.add_argument("--topic", required=True, help="topic label as in the predictions header")
    p.add_argument("--quantile", type=float, default=0.70)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("repro-design1", help="scaled Design-1 simulation study")
    p.add_argument("--scale", type=float, default=0.25,
                   help="multiplies the full-size V, K, P and nonzero count")
    for flag in ("--V", "--K", "--P", "--n-nonzero", "--tokens-per-patient"):
        p.add_argument(flag, type=int, help="override the scaled value")
    _add_train_flags(p, "mixehr_surv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="repro_design1")
    p.set_defaults(func=cmd_repro_design1)

    p = sub.add_parser("repro-design2", help="Design-2 simulation study")
    p.add_argument("--inputs", help="directory with guide_map.tsv, frequencies.tsv, record_counts.tsv")
    p.add_argument("--P", type=int, default=1000)
    p.add_argument("--K", type=int, default=40)
    p.add_argument("--V", type=int, default=200)
    _add_train_flags(p, "mixehr_surg")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="repro_design2")
    p.set_defaults(func=cmd_repro_design2)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        manifest, results = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"survtopics {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ModelFormatError, NoEventsError, TrainingError, FileNotFoundError) as exc:
        print(f"survtopics {args.command}: data error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"survtopics {args.command}: data error: {exc}", file=sys.stderr)
        return 1
    _write_manifest(Path(manifest), args, time.perf_counter() - start, results)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
