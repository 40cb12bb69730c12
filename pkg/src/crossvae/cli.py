"""Command-line entry point: ``crossvae <command> [options]``.

Every command that takes a ``--config`` file reads flat ``key = value``
lines (keys match the long option names); explicit flags win over the file.
Exit codes: 0 success, 1 verification or run failure, 2 usage or data error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from . import checkpoint, data, gradcheck
from .evaluation import (DEFAULT_NS, RANK_OVER, MetricError, MetricsReport, config_fingerprint,
                         evaluate, write_reports_csv, write_reports_json)
from .model import ATTENTION_MODES, LATENT_INPUTS, Hyperparams
from .plots import line_chart_svg
from .train import TrainingError, default_batch_size, fit, split_rmse

log = logging.getLogger("crossvae")

VARIANTS = (
    ("full", {}),
    ("no-attention", {"attention": "off"}),
    ("no-cross-feedback", {"cross_feedback": False}),
    ("no-data-input", {"data_input": False}),
)
SPARSITY_FRACTIONS = (0.01, 0.02, 0.03, 0.05, 0.10)
_HP = {f.name: f.default for f in fields(Hyperparams)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config file


def read_config(path) -> dict:
    """Flat ``key = value`` pairs; ``#`` starts a comment. Keys use - or _."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value.strip("\"'")
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _convert(action: argparse.Action, text: str):
    if isinstance(action, (argparse.BooleanOptionalAction, argparse._StoreTrueAction)):
        return _parse_bool(text)
    conv = action.type or str
    if action.nargs in ("+", "*"):
        values = [conv(tok) for tok in text.replace(",", " ").split()]
        bad = [v for v in values if action.choices and v not in action.choices]
    else:
        values = conv(text)
        bad = [values] if action.choices and values not in action.choices else []
    if bad:
        raise UsageError(f"invalid value {bad[0]!r} for {action.dest}; choose from {list(action.choices)}")
    return values


def apply_config(sub: argparse.ArgumentParser, config: dict) -> None:
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    converted = {}
    for key, text in config.items():
        if key not in actions or key == "config":
            raise UsageError(f"unknown config key {key!r} for this command")
        try:
            converted[key] = _convert(actions[key], text)
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from None
        # a value from the file satisfies a required flag
        actions[key].required = False
    sub.set_defaults(**converted)


# ---------------------------------------------------------------- parser


def _add_data_options(p, required=True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--dataset", required=required, help="rating file" + ("" if required else " (see command help)"))
    g.add_argument("--format", default="double_colon", choices=data.FORMATS, help="rating file layout")
    g.add_argument("--min-ratings", type=int, default=1,
                   help="drop users/items with fewer ratings (applied to a fixed point)")
    g.add_argument("--split-seed", type=int, default=0, help="seed of the train/val/test permutation")


def _add_model_options(p) -> None:
    g = p.add_argument_group("model and training")
    g.add_argument("--seed", type=int, default=_HP["seed"], help="seed for init, batches and noise")
    g.add_argument("--k", type=int, default=_HP["k"], help="embedding width K")
    g.add_argument("--k-prime", type=int, default=_HP["k_prime"], help="path output width K'")
    g.add_argument("--layers", type=int, default=_HP["layers"], help="hidden layers in the fusion heads (L)")
    g.add_argument("--layers-prime", type=int, default=_HP["layers_prime"],
                   help="hidden layers in the observed and latent paths (L')")
    g.add_argument("--widths", type=int, nargs="+", default=list(_HP["widths"]),
                   help="hidden widths: one value for all layers, or L'+L values")
    g.add_argument("--beta-u", type=float, default=_HP["beta_u"], help="user KL weight")
    g.add_argument("--beta-v", type=float, default=_HP["beta_v"], help="item KL weight")
    g.add_argument("--batch-users", type=int, default=None,
                   help="user batch size (auto: 100, or 1000 when both sides exceed 10000)")
    g.add_argument("--batch-items", type=int, default=None, help="item batch size (auto as above)")
    g.add_argument("--attention", default=_HP["attention"], choices=ATTENTION_MODES, help="attention candidates")
    g.add_argument("--attention-softmax", action=argparse.BooleanOptionalAction,
                   default=_HP["attention_softmax"],
                   help="softmax-normalize attention scores (off: divide by their sum)")
    g.add_argument("--cross-feedback", action=argparse.BooleanOptionalAction, default=_HP["cross_feedback"],
                   help="feed counterpart embeddings into the latent path")
    g.add_argument("--data-input", action=argparse.BooleanOptionalAction, default=_HP["data_input"],
                   help="feed raw rating rows into the observed path")
    g.add_argument("--latent-input", default=_HP["latent_input"], choices=LATENT_INPUTS,
                   help="latent path input: masked concatenation or mean of rated embeddings")
    g.add_argument("--sequential", action="store_true", default=_HP["sequential"],
                   help="alternate user and item phases instead of nested batch blocks")
    g.add_argument("--lr", type=float, default=_HP["lr"], help="Adam learning rate")
    g.add_argument("--init-mu", type=float, default=_HP["init_mu"], help="mean of the initial tables")
    g.add_argument("--init-sigma", type=float, default=_HP["init_sigma"], help="std of the initial tables")
    g.add_argument("--max-iterations", type=int, default=_HP["max_iterations"], help="outer iteration cap")
    g.add_argument("--patience", type=int, default=_HP["patience"],
                   help="stop after this many iterations without a validation gain")


def _add_eval_options(p) -> None:
    g = p.add_argument_group("evaluation")
    g.add_argument("--rank-over", default="test", choices=RANK_OVER,
                   help="ranking candidates: the user's held-out items, or every item not seen elsewhere")
    g.add_argument("--relevance-threshold", type=float, default=3.0,
                   help="held-out ratings above this count as relevant")


def _add_common(p, out_default: Optional[str] = "runs") -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v progress, -vv debug")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="crossvae", formatter_class=fmt,
                                     description="Cross-fed VAE matrix factorization for rating data.")
    cmds = parser.add_subparsers(dest="command", required=True, metavar="command")
    subs = {}

    p = subs["train"] = cmds.add_parser("train", formatter_class=fmt, help="train one model and report metrics")
    _add_data_options(p, required=False)
    _add_model_options(p)
    _add_eval_options(p)
    _add_common(p)
    p.add_argument("--resume", help="continue from this checkpoint (hyperparameters come from it)")
    p.add_argument("--svg", action="store_true", help="also write a convergence chart")
    p.set_defaults(func=cmd_train)

    p = subs["evaluate"] = cmds.add_parser("evaluate", formatter_class=fmt,
                                           help="score a checkpoint on its split")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--manifest", help="split manifest CSV (default: rebuild from the checkpoint's dataset)")
    p.add_argument("--weights", default="best", choices=("best", "last"),
                   help="best-validation snapshot or final weights")
    _add_data_options(p, required=False)
    _add_eval_options(p)
    _add_common(p, out_default=None)
    p.set_defaults(func=cmd_evaluate)

    p = subs["ablate"] = cmds.add_parser("ablate", formatter_class=fmt,
                                         help="train the four component-removal variants")
    _add_data_options(p)
    _add_model_options(p)
    _add_eval_options(p)
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="variants trained concurrently")
    p.add_argument("--svg", action="store_true", help="also write the test-RMSE curves chart")
    p.set_defaults(func=cmd_ablate)

    p = subs["sparsity"] = cmds.add_parser("sparsity", formatter_class=fmt,
                                           help="train on shrinking training fractions")
    _add_data_options(p)
    _add_model_options(p)
    _add_eval_options(p)
    _add_common(p)
    p.add_argument("--fractions", type=float, nargs="+", default=list(SPARSITY_FRACTIONS),
                   help="training fractions; the rest splits evenly into val/test")
    p.add_argument("--jobs", type=int, default=1, help="fractions trained concurrently")
    p.add_argument("--svg", action="store_true", help="also write an RMSE-vs-fraction chart")
    p.set_defaults(func=cmd_sparsity)

    p = subs["gradcheck"] = cmds.add_parser("gradcheck", formatter_class=fmt,
                                            help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0, help="seed of the random instances")
    p.add_argument("--instances", type=int, default=100, help="random instances per op")
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v progress, -vv debug")
    p.set_defaults(func=cmd_gradcheck)

    p = subs["split"] = cmds.add_parser("split", formatter_class=fmt,
                                        help="write the 70/15/15 split manifest and id maps")
    _add_data_options(p)
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = subs["subsample"] = cmds.add_parser("subsample", formatter_class=fmt,
                                            help="write a sparse-regime split manifest")
    _add_data_options(p)
    _add_common(p)
    p.add_argument("--fraction", type=float, required=True, help="training fraction in (0, 1)")
    p.set_defaults(func=cmd_subsample)

    p = subs["synthetic"] = cmds.add_parser("synthetic", formatter_class=fmt,
                                            help="write a low-rank synthetic rating file (csv format)")
    p.add_argument("--n-users", type=int, default=200, help="rows")
    p.add_argument("--n-items", type=int, default=300, help="columns")
    p.add_argument("--rank", type=int, default=5, help="true rank")
    p.add_argument("--density", type=float, default=0.2, help="observed fraction")
    p.add_argument("--noise", type=float, default=0.1, help="rating noise std")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    _add_common(p)
    p.set_defaults(func=cmd_synthetic)
    return parser, subs


def _config_path(argv) -> Optional[str]:
    for pos, tok in enumerate(argv):
        if tok == "--config" and pos + 1 < len(argv):
            return argv[pos + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv) -> argparse.Namespace:
    parser, subs = build_parser()
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    config = _config_path(argv)
    if config and command in subs:
        apply_config(subs[command], read_config(config))
    return parser.parse_args(argv)


# ---------------------------------------------------------------- helpers


@dataclass
class Prepared:
    matrix: data.SparseRatingMatrix
    split: data.DataSplit
    hp: Hyperparams
    fingerprint: str
    source: dict


def hyperparams_from_args(args, n_users: int, n_items: int, **overrides) -> Hyperparams:
    auto = default_batch_size(n_users, n_items)
    values = {name: getattr(args, name) for name in _HP if hasattr(args, name)}
    values["widths"] = tuple(args.widths)
    values["batch_users"] = args.batch_users or auto
    values["batch_items"] = args.batch_items or auto
    values.update(overrides)
    try:
        return Hyperparams(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_dataset(args) -> data.SparseRatingMatrix:
    m = data.load_ratings(args.dataset, args.format)
    return data.filter_min_ratings(m, args.min_ratings)


def source_info(args) -> dict:
    return {"dataset": str(args.dataset), "format": args.format, "min_ratings": args.min_ratings,
            "split_seed": args.split_seed}


def prepare(args) -> Prepared:
    m = load_dataset(args)
    s = data.split(m, args.split_seed)
    hp = hyperparams_from_args(args, m.n_users, m.n_items)
    src = source_info(args)
    fp = config_fingerprint({"hyperparams": hp.to_dict(), **src})
    return Prepared(m, s, hp, fp, src)


def out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_id_maps(m: data.SparseRatingMatrix, out: Path) -> None:
    data.write_id_map(m.user_ids or list(range(m.n_users)), out / "user_ids.csv")
    data.write_id_map(m.item_ids or list(range(m.n_items)), out / "item_ids.csv")


def best_reports(state, split, args, fingerprint, parts=("train", "val", "test")):
    """Metrics at the best-validation weights; the state is left untouched."""
    last = state.snapshot()
    if state.best is not None:
        state.restore(state.best)
    try:
        return evaluate(state, split, DEFAULT_NS, args.rank_over, args.relevance_threshold, parts, fingerprint)
    finally:
        state.restore(last)


def print_reports(reports) -> None:
    print(",".join(MetricsReport.CSV_HEADER))
    for r in reports:
        print(",".join(r.csv_row()))


def _fmt(x: float) -> str:
    return "nan" if x is None or math.isnan(x) else f"{x:.6f}"


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    out = out_dir(args)
    if args.resume:
        state = checkpoint.load(args.resume)
        src = checkpoint.extra(args.resume).get("source", source_info(args))
        args.dataset, args.format = src["dataset"], src["format"]
        args.min_ratings, args.split_seed = src["min_ratings"], src["split_seed"]
        m = load_dataset(args)
        s = data.split(m, args.split_seed)
        hp = state.hp.updated(max_iterations=args.max_iterations, patience=args.patience)
        state.hp = hp
        prep = Prepared(m, s, hp, config_fingerprint({"hyperparams": hp.to_dict(), **src}), src)
    else:
        if not args.dataset:
            raise UsageError("--dataset is required unless --resume is given")
        prep = prepare(args)
        state = None
    write_id_maps(prep.matrix, out)
    data.write_split_manifest(prep.split, out / "split.csv")
    log.info("train %d / val %d / test %d ratings, %d users x %d items", len(prep.split.train),
             len(prep.split.validation), len(prep.split.test), prep.matrix.n_users, prep.matrix.n_items)
    state = fit(prep.split, prep.hp, state, log_path=out / "train_log.csv")
    checkpoint.save(state, out / "checkpoint.ckpt",
                    extra={"source": prep.source, "fingerprint": prep.fingerprint})
    reports = best_reports(state, prep.split, args, prep.fingerprint)
    write_reports_csv(reports, out / "metrics.csv")
    write_reports_json(reports, out / "metrics.json")
    if args.svg:
        curve = [(i, v) for i, _, v in state.history]
        (out / "convergence.svg").write_text(line_chart_svg({"validation": curve}, "validation RMSE"))
    print(f"stopped after {state.iteration} iterations; best validation RMSE "
          f"{state.best_val_rmse:.6f} at iteration {state.best_iteration}")
    print_reports(reports)
    return 0


def cmd_evaluate(args) -> int:
    state = checkpoint.load(args.checkpoint)
    meta = checkpoint.extra(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        s = data.read_split_manifest(args.manifest, state.model.n_users, state.model.n_items)
    else:
        src = meta.get("source")
        if args.dataset:
            src = source_info(args)
        if src is None:
            raise UsageError("checkpoint has no dataset record; pass --dataset or --manifest")
        args.dataset, args.format = src["dataset"], src["format"]
        args.min_ratings, args.split_seed = src["min_ratings"], src["split_seed"]
        s = data.split(load_dataset(args), args.split_seed)
    if (s.train.n_users, s.train.n_items) != (state.model.n_users, state.model.n_items):
        raise data.DataError("split and checkpoint disagree on the number of users/items")
    fingerprint = meta.get("fingerprint", "")
    if args.weights == "best" and state.best is not None:
        state.restore(state.best)
    reports = evaluate(state, s, DEFAULT_NS, args.rank_over, args.relevance_threshold,
                       fingerprint=fingerprint)
    write_reports_csv(reports, out / "eval_metrics.csv")
    write_reports_json(reports, out / "eval_metrics.json")
    print_reports(reports)
    return 0


def train_variant(payload):
    """Train one configuration and collect its test curve (process-pool friendly)."""
    label, s, hp, eval_args, fingerprint = payload
    curve = []

    def track(state, means):
        curve.append((state.iteration, state.history[-1][1], state.history[-1][2],
                      split_rmse(state, s.train, s.test, means)))

    state = fit(s, hp, on_iteration=track)
    report = best_reports(state, s, eval_args, fingerprint, parts=("test",))[0]
    return label, report, state.best_iteration, state.iteration, curve


def _run_all(payloads, jobs: int):
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(payloads))) as pool:
            return list(pool.map(train_variant, payloads))
    return [train_variant(p) for p in payloads]


def _eval_args(args) -> argparse.Namespace:
    return argparse.Namespace(rank_over=args.rank_over, relevance_threshold=args.relevance_threshold)


RESULT_COLUMNS = ["rmse", "ndcg@20", "ndcg@50", "recall@20", "recall@50", "n_users", "best_iteration",
                  "iterations"]


def _result_cells(report: MetricsReport, best_it: int, iterations: int) -> list:
    return report.csv_row()[1:] + [best_it, iterations]


def cmd_ablate(args) -> int:
    out = out_dir(args)
    m = load_dataset(args)
    s = data.split(m, args.split_seed)
    base = hyperparams_from_args(args, m.n_users, m.n_items)
    payloads = []
    for label, change in VARIANTS:
        hp = hyperparams_from_args(args, m.n_users, m.n_items, **change)
        fp = config_fingerprint({"hyperparams": hp.to_dict(), **source_info(args)})
        payloads.append((label, s, hp, _eval_args(args), fp))
    log.info("ablation over %s with base config %s", [p[0] for p in payloads], base)
    results = _run_all(payloads, args.jobs)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + RESULT_COLUMNS)
        for label, report, best_it, iters, _ in results:
            w.writerow([label] + _result_cells(report, best_it, iters))
    with open(out / "ablation_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "iteration", "train_loss", "val_rmse", "test_rmse"])
        for label, _, _, _, curve in results:
            for it, loss, val, test in curve:
                w.writerow([label, it, f"{loss:.10g}", f"{val:.10g}", f"{test:.10g}"])
    if args.svg:
        series = {label: [(it, test) for it, _, _, test in curve] for label, _, _, _, curve in results}
        (out / "ablation_curves.svg").write_text(line_chart_svg(series, "test RMSE by variant"))
    print("variant," + ",".join(RESULT_COLUMNS))
    for label, report, best_it, iters, _ in results:
        print(",".join(str(c) for c in [label] + _result_cells(report, best_it, iters)))
    return 0


def cmd_sparsity(args) -> int:
    fractions = sorted(set(args.fractions))
    if any(not 0.0 < f < 1.0 for f in fractions):
        raise UsageError("fractions must lie in (0, 1)")
    out = out_dir(args)
    m = load_dataset(args)
    payloads = []
    for f in fractions:
        s = data.split_sparse(m, f, args.split_seed)
        hp = hyperparams_from_args(args, m.n_users, m.n_items)
        fp = config_fingerprint({"hyperparams": hp.to_dict(), "fraction": f, **source_info(args)})
        payloads.append((f, s, hp, _eval_args(args), fp))
    results = _run_all(payloads, args.jobs)
    header = ["fraction", "n_train"] + RESULT_COLUMNS
    rows = [[f"{f:g}", len(p[1].train)] + _result_cells(report, best_it, iters)
            for p, (f, report, best_it, iters, _) in zip(payloads, results)]
    with open(out / "sparsity.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    if args.svg:
        pts = [(f, report.rmse) for f, report, *_ in results]
        (out / "sparsity.svg").write_text(line_chart_svg({"test RMSE": pts}, "test RMSE by training fraction",
                                                         xlabel="training fraction"))
    print(",".join(header))
    for row in rows:
        print(",".join(str(c) for c in row))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.seed, args.instances)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  max_rel_err  tolerance  status")
    for r in results:
        print(f"{r.name:<{width}}  {r.max_rel_err:11.3e}  {r.tolerance:9.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAILED: {r.name} (max relative error {r.max_rel_err:.3e} > {r.tolerance:.0e})",
                  file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def cmd_split(args) -> int:
    out = out_dir(args)
    m = load_dataset(args)
    s = data.split(m, args.split_seed)
    write_id_maps(m, out)
    data.write_split_manifest(s, out / "split.csv")
    print(f"train {len(s.train)}, val {len(s.validation)}, test {len(s.test)} -> {out / 'split.csv'}")
    return 0


def cmd_subsample(args) -> int:
    out = out_dir(args)
    m = load_dataset(args)
    s = data.split_sparse(m, args.fraction, args.split_seed)
    write_id_maps(m, out)
    target = out / f"split_{args.fraction:g}.csv"
    data.write_split_manifest(s, target)
    print(f"train {len(s.train)}, val {len(s.validation)}, test {len(s.test)} -> {target}")
    return 0


def cmd_synthetic(args) -> int:
    out = out_dir(args)
    m = data.synthetic_low_rank(args.n_users, args.n_items, args.rank, args.density, args.noise, args.seed)
    target = out / "ratings.csv"
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["userId", "movieId", "rating", "timestamp"])
        for u, i, r in zip(m.users, m.items, m.ratings):
            w.writerow([int(u), int(i), repr(float(r)), 0])
    print(f"{len(m)} ratings ({m.n_users} x {m.n_items}) -> {target}")
    return 0


# ---------------------------------------------------------------- entry point


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"crossvae: error: {exc}", file=sys.stderr)
        return 2
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg = str(exc)
        print(f"crossvae: error: {msg if 'not found' in msg else 'file not found: ' + msg}", file=sys.stderr)
        return 2
    except (UsageError, data.DataError, checkpoint.CheckpointError, MetricError) as exc:
        print(f"crossvae: error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"crossvae: training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
