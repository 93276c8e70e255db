"""Command-line entry point: ``sucm {train,evaluate,recommend,synth,validate,gradcheck}``.

File formats
------------
taxonomy TSV   ``node_id<TAB>parent_id<TAB>kind<TAB>name``; the root has parent ``-``,
               kind is ``internal`` or ``app``.  App ids follow line order.
adoption TSV   ``user_id<TAB>app_id[<TAB>rating]``; a missing rating counts as adopted,
               ``app_id`` refers to an app ``node_id``.  Lines starting with ``#`` are skipped.
model file     binary, versioned and checksummed; see ``sucm.dataio``.
config file    JSON object whose keys are long flag names with dashes replaced by
               underscores (``{"dim": 8, "lr": 0.05}``).  Explicit flags win over the
               file, the file wins over built-in defaults.

Every failure prints one line ``error: <Kind>: <message>`` to stderr and exits
nonzero (2 for bad usage, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import baselines as bl
from . import dataio, evaluation, gradcheck
from .errors import SucmError, UnknownUser
from .model import ModelParams, log_prob_matrix, rank_apps
from .taxonomy import load_taxonomy, save_taxonomy
from .training import TrainConfig, train

MODELS = ("sucm",) + bl.MODELS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a number > 0, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a number >= 0, got {text}")
    return v


def _int_list(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _fraction(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1), got {text}")
    return v


def _data_flags(p):
    p.add_argument("--taxonomy", required=True, help="taxonomy TSV")
    p.add_argument("--adoptions", required=True, help="adoption TSV")
    p.add_argument("--rating-threshold", type=float, default=3.0, help="keep records rated at least this (default 3)")
    p.add_argument("--min-adoptions", type=int, default=40, help="drop users with fewer adoptions (default 40)")


def _split_flags(p, default_frac=0.8, default_seed=0):
    p.add_argument("--split-seed", type=int, default=default_seed, help="seed of the per-user holdout split")
    p.add_argument("--train-frac", type=_fraction, default=default_frac, help="per-user training fraction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sucm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model on the training split and write a model file")
    p.add_argument("--config", help="JSON file with flag defaults")
    _data_flags(p)
    _split_flags(p)
    p.add_argument("--no-split", action="store_true", help="train on every adoption instead of the training split")
    p.add_argument("--model", choices=MODELS, default="sucm")
    p.add_argument("--dim", type=_positive_int, default=20, help="latent dimension K (default 20)")
    p.add_argument("--lr", type=_positive_float, default=None, help="initial learning rate")
    p.add_argument("--nu", type=_positive_float, default=50.0, help="annealing constant")
    p.add_argument("--epochs", type=_positive_int, default=50, help="maximum epochs (>= 1)")
    p.add_argument("--sigma", type=_positive_float, default=1.0, help="tree-prior standard deviation")
    p.add_argument("--prior-weight", type=_nonneg_float, default=1.0, help="multiplier on the tree-prior pull")
    p.add_argument("--l2-user", type=_nonneg_float, default=0.0)
    p.add_argument("--l2-hs", type=_nonneg_float, default=0.0)
    p.add_argument("--init-std", type=_nonneg_float, default=0.1)
    p.add_argument("--tol", type=_nonneg_float, default=1e-5, help="relative objective change to stop at")
    p.add_argument("--hs", choices=("balanced", "huffman"), default="balanced", help="binary-tree shape")
    p.add_argument("--lambda-u", type=_nonneg_float, default=0.01, help="baseline user L2")
    p.add_argument("--lambda-i", type=_nonneg_float, default=0.01, help="baseline item L2")
    p.add_argument("--lambda-b", type=_nonneg_float, default=0.01, help="baseline bias L2")
    p.add_argument("--neg-per-pos", type=_positive_int, default=5, help="baseline negatives per positive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank apps for held-out users and write a metric report")
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--model-file", required=True)
    _data_flags(p)
    _split_flags(p, default_frac=None, default_seed=None)
    p.add_argument("--cutoffs", type=_int_list, default=list(evaluation.DEFAULT_CUTOFFS), help="e.g. 1,3,5,10")
    p.add_argument("--beta", type=_positive_float, default=evaluation.DEFAULT_BETA)
    p.add_argument("--out", help="write OUT.tsv and OUT.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="print the top-n apps for one user")
    p.add_argument("--model-file", required=True)
    p.add_argument("--user", required=True, help="user id as in the adoption file")
    p.add_argument("--n", type=_positive_int, default=10)
    p.add_argument("--exclude-train", action="store_true", help="drop the user's training adoptions (needs --adoptions)")
    p.add_argument("--adoptions", help="adoption TSV, for --exclude-train")
    p.add_argument("--rating-threshold", type=float, default=3.0)
    p.add_argument("--min-adoptions", type=int, default=40)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("synth", help="generate a planted-model dataset")
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--users", type=_positive_int, default=1000)
    p.add_argument("--fanouts", type=_int_list, default=[4, 3, 3], help="children per internal node by depth")
    p.add_argument("--apps-per-subcategory", type=_positive_int, default=14)
    p.add_argument("--adoptions-per-user", type=_positive_int, default=40)
    p.add_argument("--dim", type=_positive_int, default=8)
    p.add_argument("--scale", type=_nonneg_float, default=1.0, help="user-vector scale")
    p.add_argument("--node-spread", type=_nonneg_float, default=1.0, help="category child-parent spread")
    p.add_argument("--bias-scale", type=_nonneg_float, default=0.5)
    p.add_argument("--hs", choices=("balanced", "huffman"), default="balanced")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True, help="writes PREFIX.taxonomy.tsv, PREFIX.adoptions.tsv, PREFIX.planted.model")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check input files and print dataset statistics")
    p.add_argument("--taxonomy")
    p.add_argument("--adoptions")
    p.add_argument("--rating-threshold", type=float, default=3.0)
    p.add_argument("--min-adoptions", type=int, default=40)
    p.add_argument("--counts", type=_int_list, help="USERS,APPS,OBSERVATIONS: print statistics for raw counts")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=_positive_int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _apply_config(parser, argv):
    """Re-parse with the JSON file's values as defaults so explicit flags still win."""
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    with open(path, encoding="utf-8") as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    known = set(vars(args))
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    # run file values through the flag converters so they get the same validation
    converted = {}
    for action in subparser._actions:
        if action.dest in values:
            v = values[action.dest]
            if action.type is not None and not isinstance(v, bool):
                v = action.type(",".join(map(str, v)) if isinstance(v, list) else str(v))
            if action.choices is not None and v not in action.choices:
                raise UsageError(f"{path}: {action.dest} must be one of {list(action.choices)}")
            converted[action.dest] = v
    subparser.set_defaults(**converted)
    return parser.parse_args(argv)


# -- helpers ---------------------------------------------------------------------------------

def _load_data(args):
    tree = load_taxonomy(args.taxonomy)
    data = dataio.load_adoptions(args.adoptions, tree, args.rating_threshold, args.min_adoptions)
    return tree, data


def _scorer(params):
    if isinstance(params, ModelParams):
        return lambda users: log_prob_matrix(params, users)
    return params.scores


def _user_rows(header, data):
    """Model row of every dataset user, matched by label."""
    labels = header.get("users")
    if labels is None:
        if data.num_users != header["counts"]["users"]:
            raise UnknownUser("model has no user labels and the user count differs")
        return np.arange(data.num_users)
    index = {lab: k for k, lab in enumerate(labels)}
    missing = [lab for lab in data.user_labels if lab not in index]
    if missing:
        raise UnknownUser(f"{len(missing)} users unknown to the model, e.g. {missing[0]!r}")
    return np.asarray([index[lab] for lab in data.user_labels], dtype=np.int64)


def _check_tree(header, tree):
    if header["tree"] != tree:
        raise ValueError("the taxonomy differs from the one the model was trained on")


# -- subcommands -------------------------------------------------------------------------------

def cmd_train(args) -> int:
    tree, data = _load_data(args)
    if args.no_split:
        train_set, split_info = data, None
    else:
        train_set, _ = evaluation.split(data, evaluation.SplitSpec(args.train_frac, args.split_seed))
        split_info = {"seed": args.split_seed, "train_frac": args.train_frac}
    say = (lambda *a: None) if args.quiet else print
    if args.model == "sucm":
        cfg = TrainConfig(K=args.dim, lr=args.lr if args.lr is not None else TrainConfig.lr, nu=args.nu,
                          max_iter=args.epochs, sigma=args.sigma, seed=args.seed, init_std=args.init_std,
                          l2_user=args.l2_user, l2_hs=args.l2_hs, prior_weight=args.prior_weight,
                          convergence_tol=args.tol, hs_strategy=args.hs)
        params, report = train(train_set, tree, cfg,
                               callback=lambda e, obj, _: say(f"epoch\t{e}\tobjective\t{obj:.6f}"))
        say(f"initial_objective\t{report.initial_objective:.6f}\tfinal_objective\t{report.final_objective:.6f}")
    else:
        cfg = bl.BaselineConfig(K=args.dim, lr=args.lr if args.lr is not None else bl.BaselineConfig.lr,
                                nu=args.nu, max_iter=args.epochs, seed=args.seed, init_std=args.init_std,
                                lambda_u=args.lambda_u, lambda_i=args.lambda_i, lambda_b=args.lambda_b,
                                neg_per_pos=args.neg_per_pos)
        params = bl.TRAINERS[args.model](train_set, cfg)
        for e, obj in enumerate(params.meta.get("history", []), start=1):
            say(f"epoch\t{e}\tloss\t{obj:.6f}")
    extra = {"split": split_info, "rating_threshold": args.rating_threshold, "min_adoptions": args.min_adoptions}
    dataio.save_model(params, args.out, tree=tree, user_labels=data.user_labels, extra=extra)
    say(f"wrote\t{args.out}")
    return 0


def cmd_evaluate(args) -> int:
    params, header = dataio.read_model(args.model_file)
    tree, data = _load_data(args)
    _check_tree(header, tree)
    stored = (header.get("extra") or {}).get("split") or {}
    seed = args.split_seed if args.split_seed is not None else stored.get("seed", 0)
    frac = args.train_frac if args.train_frac is not None else stored.get("train_frac", 0.8)
    train_set, test_set = evaluation.split(data, evaluation.SplitSpec(frac, seed))
    rows = _user_rows(header, data)
    score = _scorer(params)
    config = {"model_file_kind": header["kind"], "split_seed": seed, "train_frac": frac,
              "cutoffs": list(args.cutoffs), "beta": args.beta}
    report = evaluation.evaluate(lambda users: score(rows[users]), train_set, test_set,
                                 args.cutoffs, args.beta, config=config)
    sys.stdout.write(report.table())
    print(f"users_evaluated\t{report.n_evaluated}\tusers_skipped\t{report.n_skipped}")
    if args.out:
        with open(args.out + ".tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_tsv())
        with open(args.out + ".json", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json())
    return 0


def cmd_recommend(args) -> int:
    params, header = dataio.read_model(args.model_file)
    tree = header["tree"]
    labels = header.get("users") or [str(u) for u in range(header["counts"]["users"])]
    try:
        u = labels.index(args.user)
    except ValueError:
        raise UnknownUser(f"unknown user {args.user!r}") from None
    exclude = None
    if args.exclude_train:
        if not args.adoptions:
            raise UsageError("--exclude-train needs --adoptions")
        extra = header.get("extra") or {}
        data = dataio.load_adoptions(args.adoptions, tree, extra.get("rating_threshold", args.rating_threshold),
                                     extra.get("min_adoptions", args.min_adoptions))
        if args.user not in data.user_labels:
            raise UnknownUser(f"user {args.user!r} not in the adoption data")
        split = extra.get("split")
        train_set = (data if split is None else
                     evaluation.split(data, evaluation.SplitSpec(split["train_frac"], split["seed"]))[0])
        exclude = train_set.items(data.user_labels.index(args.user)).tolist()
    scores = _scorer(params)(np.asarray([u]))[0]
    for i in rank_apps(scores, exclude)[:args.n].tolist():
        print(f"{tree.app_label(i)}\t{scores[i]:.6f}")
    return 0


def cmd_synth(args) -> int:
    spec = dataio.SynthSpec(num_users=args.users, fanouts=tuple(args.fanouts),
                            apps_per_subcategory=args.apps_per_subcategory,
                            adoptions_per_user=args.adoptions_per_user, K=args.dim, seed=args.seed,
                            scale=args.scale, node_spread=args.node_spread, bias_scale=args.bias_scale,
                            hs_strategy=args.hs)
    tree, data, planted = dataio.generate_synthetic(spec)
    prefix = args.out_prefix
    save_taxonomy(tree, prefix + ".taxonomy.tsv")
    data.to_tsv(prefix + ".adoptions.tsv")
    dataio.save_model(planted, prefix + ".planted.model", user_labels=data.user_labels,
                      extra={"synth_spec": spec.to_dict()})
    print(f"apps\t{tree.num_apps}\tusers\t{data.num_users}\tadoptions\t{len(data)}")
    return 0


def cmd_validate(args) -> int:
    if args.counts is not None:
        if len(args.counts) != 3:
            raise UsageError("--counts takes USERS,APPS,OBSERVATIONS")
        print(dataio.format_stats(dataio.stats_from_counts(*args.counts)))
        return 0
    if not args.taxonomy:
        raise UsageError("validate needs --taxonomy (and optionally --adoptions) or --counts")
    tree = load_taxonomy(args.taxonomy)
    depth = max(tree.choice_path(i).M for i in range(tree.num_apps))
    print(f"taxonomy\tnodes\t{len(tree.nodes)}\tcategories\t{tree.num_internal}\tapps\t{tree.num_apps}"
          f"\tsubcategories\t{len(tree.leaf_parents)}\tcategory_levels\t{depth}")
    if args.adoptions:
        data = dataio.load_adoptions(args.adoptions, tree, args.rating_threshold, args.min_adoptions)
        print(dataio.format_stats(dataio.stats(data)))
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    report = gradcheck.run(args.seed, args.probes)
    print(report.summary())
    print(f"elapsed_seconds\t{time.perf_counter() - t0:.2f}")
    if not report.passed():
        print(f"error: GradientMismatch: max relative error {report.max_error:.3e} >= {gradcheck.TOL:g}",
              file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except (SucmError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
