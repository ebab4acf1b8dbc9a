"""Command-line pipeline: ``gen-data``, ``train``, ``attack`` and ``evaluate``.

Every command writes its artifacts into an output directory (``--out``, else the
``GRIDSEC_OUT`` environment variable, else ``./gridsec_out``) together with a
``<artifact>.manifest.json`` run manifest. Exit codes: 0 success, 2 usage or
input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .chimera import (
    VARIANTS,
    TrainConfig,
    load_model,
    measure_latency,
    save_model,
    train,
)
from .contingency import count_contingencies
from .dataset import (
    ProfileConfig,
    build_corpus,
    generate_profiles,
    read_corpus,
    split_indices,
    write_corpus,
)
from .errors import (
    DivergenceError,
    GridSecError,
    TrainingDivergedError,
    UnobservableError,
)
from .evaluation import (
    MetricRow,
    attack_errors,
    attack_free_metrics,
    attacked_estimates,
    contingency_errors,
    histograms_to_csv,
    metric_table_csv,
    metric_table_json,
    score_attack_campaign,
)
from .fdia import AttackConfig, results_from_jsonl, results_to_jsonl, run_campaign
from .grid_model import bundled_case, load_case

logger = logging.getLogger("gridsec")

OUT_ENV = "GRIDSEC_OUT"
DEFAULT_OUT = "gridsec_out"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
STAGES = ("gen-data", "train", "attack", "evaluate")


class UsageError(Exception):
    """Bad arguments or missing inputs; maps to exit code 2."""


# ---------------------------------------------------------------- manifest


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def stage_seed(seed: int, stage: str) -> int:
    """Expand the run seed into an independent per-stage seed."""
    ss = np.random.SeedSequence([int(seed), STAGES.index(stage)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    config_hash: str = ""
    versions: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.config_hash = config_hash(self.config)
        self.versions = {
            "gridsec": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        }

    @contextmanager
    def timed(self, stage: str):
        t0 = time.perf_counter()
        yield
        self.timings[stage] = round(time.perf_counter() - t0, 6)

    def add_input(self, path):
        self.inputs[str(path)] = _sha256(path)

    def add_output(self, path):
        self.outputs[str(path)] = _sha256(path)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=str) + "\n")
        return path


# ---------------------------------------------------------------- helpers


def out_dir(arg) -> Path:
    path = Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _existing(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    return path


def resolve_case(arg: str):
    """A case file path, or the name of a bundled fixture (``ieee14`` / ``ieee14.json``)."""
    path = Path(arg)
    if path.is_file():
        return load_case(path), str(path)
    name = path.name[:-5] if path.name.endswith(".json") else path.name
    if path.parent == Path(".") and name in ("ieee14", "toy3"):
        return bundled_case(name), f"bundled:{name}"
    raise UsageError(f"case file not found: {arg}")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(_existing(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def _pick(doc: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    return doc


def _overrides(args, mapping) -> dict:
    """Flags that were given explicitly, renamed to config keys."""
    return {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag) is not None}


def estimated_counts(model, theta):
    bundle = model.bundle
    flows = theta @ (bundle.Y @ bundle.M.T).T
    return count_contingencies(bundle, flows, model.case.f_limit)


def scored_epochs(n_rows: int, window: int, fractions=(0.70, 0.15, 0.15)):
    """Test-split rows with a full history window."""
    _, _, te = split_indices(n_rows, fractions)
    return te[te >= window - 1]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    case, case_src = resolve_case(args.case)
    doc = load_config(args.config)
    build_keys = {"noise_sigma", "power_factor"}
    gen = {k: v for k, v in doc.items() if k in build_keys}
    prof = _pick({k: v for k, v in doc.items() if k not in build_keys}, ProfileConfig)
    prof.update(_overrides(args, {"epochs": "epochs"}))
    gen.update(_overrides(args, {"noise_sigma": "noise_sigma"}))
    seed = stage_seed(args.seed, "gen-data")
    prof["seed"] = seed
    profile_cfg = ProfileConfig(**prof)
    config = {"case": case_src, "profile": asdict(profile_cfg), **gen}
    manifest = RunManifest("gen-data", args.seed, config)
    if not case_src.startswith("bundled:"):
        manifest.add_input(case_src)
    out = out_dir(args.out)
    with manifest.timed("profiles"):
        profile = generate_profiles(profile_cfg)
    with manifest.timed("corpus"):
        corpus = build_corpus(case, profile, seed=seed, **gen)
    csv_path = out / args.name
    with manifest.timed("write"):
        sidecar = write_corpus(corpus, csv_path)
    manifest.add_output(csv_path)
    manifest.add_output(sidecar)
    manifest.notes = {"rows": len(corpus), "dropped": len(corpus.dropped)}
    manifest.write(csv_path.with_suffix(".manifest.json"))
    print(f"corpus: {csv_path} ({len(corpus)} epochs, {len(corpus.dropped)} dropped)")
    print(f"N1 true: mean {corpus.n1.mean():.2f}, nonzero {np.mean(corpus.n1 > 0):.1%}; "
          f"N2 true: mean {corpus.n2.mean():.2f}, max {corpus.n2.max()}")
    return EXIT_OK


def cmd_train(args) -> int:
    corpus_path = _existing(args.corpus)
    doc = dict(load_config(args.config))
    fractions = tuple(doc.pop("fractions", (0.70, 0.15, 0.15)))
    doc = _pick(doc, TrainConfig)
    doc.update(_overrides(args, {"phase1_iters": "phase1_iters", "phase2_iters": "phase2_iters"}))
    seed = stage_seed(args.seed, "train")
    try:
        cfg = TrainConfig(**{**doc, "variant": args.variant, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = RunManifest("train", args.seed, {**cfg.to_dict(), "fractions": list(fractions)})
    manifest.add_input(corpus_path)
    out = out_dir(args.out)
    with manifest.timed("load"):
        corpus = read_corpus(corpus_path)
    with manifest.timed("train"):
        res = train(args.variant, corpus, seed=seed, cfg=cfg, fractions=fractions)
    ckpt = out / f"{args.variant}.ckpt.json"
    log_path = out / f"{args.variant}.log.csv"
    save_model(ckpt, res.model)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(res.log[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(res.log)
    log_path.write_text(buf.getvalue())
    manifest.add_output(ckpt)
    manifest.add_output(log_path)
    manifest.notes = {"best_val_loss": res.best_val_loss, "best_iteration": res.best_iteration,
                      "bdd_scale": res.model.bdd_scale, "latency_ms": res.model.latency_ms}
    manifest.write(out / f"{args.variant}.manifest.json")
    print(f"checkpoint: {ckpt}")
    print(f"{args.variant}: val loss {res.init_val_loss:.4e} -> {res.best_val_loss:.4e} "
          f"(iteration {res.best_iteration}), {res.seconds:.1f}s, latency {res.model.latency_ms:.3f} ms")
    return EXIT_OK


def cmd_attack(args) -> int:
    model_path = _existing(args.model)
    corpus_path = _existing(args.corpus)
    doc = _pick(dict(load_config(args.config)), AttackConfig)
    doc.update(_overrides(args, {"tau": "tau", "lr": "learning_rate", "magnitude_cap": "magnitude_cap",
                                 "max_steps": "max_steps"}))
    model = load_model(model_path)
    if args.fm is not None:
        doc["f_m"] = args.fm / model.case.base_mva
    elif "f_m" not in doc:
        doc["f_m"] = 3.0 / model.case.base_mva
    if "target_meters" in doc:
        doc["target_meters"] = tuple(doc["target_meters"])
    doc["seed"] = stage_seed(args.seed, "attack")
    try:
        cfg = AttackConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = RunManifest("attack", args.seed, {**cfg.to_dict(), "model": str(model_path)})
    manifest.add_input(model_path)
    manifest.add_input(corpus_path)
    out = out_dir(args.out)
    corpus = read_corpus(corpus_path)
    epochs = scored_epochs(len(corpus), model.cfg.window)
    results = []
    with manifest.timed("attack"):
        for s in range(0, len(epochs), args.batch):
            chunk = epochs[s:s + args.batch]
            try:
                results.extend(run_campaign(model, corpus.z, chunk, cfg, batch=args.batch))
            except GridSecError as exc:
                logger.error("epochs %d-%d skipped: %s", chunk[0], chunk[-1], exc)
    path = out / f"{model.variant}.attack.jsonl"
    path.write_text(results_to_jsonl(results))
    manifest.add_output(path)
    att = [r for r in results if r.attempted]
    stealthy = float(np.mean([r.stealthy for r in att])) if att else float("nan")
    mean_a = float(np.mean([np.abs(r.a[list(cfg.target_meters)]).mean() for r in att])) if att else float("nan")
    manifest.notes = {"epochs": len(results), "attacked": len(att), "stealthy_fraction": stealthy,
                      "mean_abs_a": mean_a}
    manifest.write(out / f"{model.variant}.attack.manifest.json")
    print(f"campaign: {path} ({len(att)} of {len(results)} epochs attacked)")
    print(f"stealthy fraction {stealthy:.3f}, mean |a| per targeted meter {mean_a:.4f} p.u.")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    corpus_path = _existing(args.corpus)
    model_paths = [_existing(p) for p in args.model]
    campaign_paths = [_existing(p) for p in (args.campaign or [])]
    if campaign_paths and len(campaign_paths) != len(model_paths):
        raise UsageError("give one --campaign per --model (same order), or none")
    manifest = RunManifest("evaluate", args.seed, {"models": [str(p) for p in model_paths],
                                                   "campaigns": [str(p) for p in campaign_paths]})
    for p in [corpus_path, *model_paths, *campaign_paths]:
        manifest.add_input(p)
    out = out_dir(args.out)
    corpus = read_corpus(corpus_path)
    ref = corpus.case.ref
    rows, hist, latency = [], {}, {}
    for k, mp in enumerate(model_paths):
        model = load_model(mp)
        name = model.variant
        latency[name] = measure_latency(model, corpus.z)
        with manifest.timed(f"{name}:attack_free"):
            te = scored_epochs(len(corpus), model.cfg.window)
            th, v = model.estimate_series(corpus.z, te)
            n_est = estimated_counts(model, th)
            n_true = (corpus.n1[te], corpus.n2[te])
            row = attack_free_metrics(name, (corpus.theta[te], corpus.v[te]), (th, v), n_true, n_est, ref=ref)
            e1, e2 = contingency_errors(n_est, n_true)
            hist[name] = {"eps1": e1, "eps2": e2}
        if campaign_paths:
            with manifest.timed(f"{name}:attack"):
                results = results_from_jsonl(campaign_paths[k].read_text())
                idx = np.array([r.epoch for r in results], dtype=int)
                if not np.all(np.isin(idx, te)):
                    raise UsageError(f"{campaign_paths[k]}: campaign epochs fall outside the test split")
                if not len(idx):
                    raise UsageError(f"{campaign_paths[k]}: campaign is empty")
                clean = model.estimate_series(corpus.z, idx)
                attacked = attacked_estimates(results, clean, ref)
                row.merge(score_attack_campaign(results, clean, attacked, name, ref=ref))
                a1, a2 = attack_errors(results)
                hist[name].update({"eps1_a": a1, "eps2_a": a2})
        rows.append(row)
    table_csv = out / "metrics.csv"
    table_json = out / "metrics.json"
    hist_csv = out / "histograms.csv"
    table_csv.write_text(metric_table_csv(rows))
    table_json.write_text(metric_table_json(rows))
    hist_csv.write_text(histograms_to_csv(hist))
    for p in (table_csv, table_json, hist_csv):
        manifest.add_output(p)
    manifest.notes = {"latency_ms": latency}
    manifest.write(out / "metrics.manifest.json")
    _print_rows(rows)
    return EXIT_OK


def _print_rows(rows: list[MetricRow]):
    cols = ["mape_total", "frac_eps1_zero", "eps2", "eps2_a", "frac_eps2a_zero", "frac_eps2a_lt5"]
    print("model".ljust(10) + "".join(c.rjust(16) for c in cols))
    for r in rows:
        print(r.model.ljust(10) + "".join(f"{getattr(r, c):16.4f}" for c in cols))


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridsec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0, help="run seed (expanded per stage)")
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--config", default=None, help="JSON config file; explicit flags win")

    g = sub.add_parser("gen-data", help="generate the synthetic measurement corpus")
    g.add_argument("--case", default="ieee14", help="case JSON file or bundled fixture name")
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    g.add_argument("--name", default="corpus.csv", help="corpus file name inside the output directory")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one estimator variant")
    t.add_argument("--variant", required=True, choices=VARIANTS)
    t.add_argument("--corpus", required=True)
    t.add_argument("--phase1-iters", dest="phase1_iters", type=int, default=None)
    t.add_argument("--phase2-iters", dest="phase2_iters", type=int, default=None)
    common(t)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="attack every test-split epoch against a trained model")
    a.add_argument("--model", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--tau", type=float, default=None)
    a.add_argument("--fm", type=float, default=None, help="safety margin in MW (default 3)")
    a.add_argument("--lr", type=float, default=None)
    a.add_argument("--magnitude-cap", dest="magnitude_cap", type=float, default=None, help="per-meter cap, p.u.")
    a.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    a.add_argument("--batch", type=int, default=256)
    common(a)
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("evaluate", help="metric tables and histograms on the test split")
    e.add_argument("--corpus", required=True)
    e.add_argument("--model", required=True, action="append", help="checkpoint; repeat per variant")
    e.add_argument("--campaign", action="append", help="campaign JSONL, one per --model in order")
    common(e)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gridsec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"gridsec {args.command}: numerical failure at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DivergenceError, UnobservableError, FloatingPointError) as exc:
        print(f"gridsec {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GridSecError, ValueError, OSError) as exc:
        print(f"gridsec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
