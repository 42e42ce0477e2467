"""Command-line harness: ``ingest``, ``train``, ``audit`` and ``verify``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 backend or
transport error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .ccshap import aggregate, audit_batch, summary_table, write_reports
from .config import BACKENDS, ESTIMATORS, EXPLANATION_SCORERS, AuditConfig
from .corpus import LABELS, Corpus, Origin
from .errors import (
    BackendError,
    CcShapError,
    ConfigError,
    DataError,
    TrainingError,
    VerificationError,
)
from .fixtures import standard_suite
from .remote_client import RemoteBackend, RemoteClient, RemoteEndpoint
from .scoring import ConstantExplanationBackend, ScoreCache, SelfConsistentBackend
from .shapley import exact_shapley, mc_shapley
from .toy_models import (
    LinearTextModel,
    ToyBackend,
    TrainConfig,
    train_bce,
    train_contrastive,
    train_dpo,
    write_metrics_csv,
)

log = logging.getLogger("ccshap_audit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND, EXIT_VERIFY = 0, 1, 2, 3, 4
AUTH_ENV = "CCSHAP_AUTH_TOKEN"
OBJECTIVES = ("bce", "contrastive", "dpo")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# ingest


def cmd_ingest(args) -> int:
    sources = [(p, Origin.PHISHING_SOURCE) for p in args.phishing]
    sources += [(p, Origin.HAM_SOURCE) for p in args.ham]
    sources += [(p, Origin.UNLABELED) for p in args.labeled]
    if not sources:
        raise ConfigError("no inputs: pass --phishing, --ham or --labeled")

    records, skips = [], []
    for path, origin in sources:
        raws, load_skips = corpus_mod.load_corpus(path, args.format, origin)
        clean, prep_skips = corpus_mod.prepare(raws, args.language_threshold, args.min_words)
        records += clean
        skips += load_skips + prep_skips
    before = len(records)
    records = corpus_mod.deduplicate(records)
    full = Corpus(records)
    counts = full.class_counts
    per_class = args.per_class or min(counts.values())
    if per_class < 1:
        raise DataError(
            "a class is empty after cleaning: "
            + " ".join(f"{l.short}={c}" for l, c in counts.items())
        )
    balanced = corpus_mod.balance(full, per_class, args.seed)
    train, val = corpus_mod.split(balanced, args.train_fraction, args.seed)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_corpus(train, out / "train.jsonl")
    corpus_mod.write_corpus(val, out / "val.jsonl")
    corpus_mod.write_skip_report(skips, out / "skipped.jsonl")
    bc = balanced.class_counts
    print(f"phishing={bc[corpus_mod.Label.PHISHING]} ham={bc[corpus_mod.Label.LEGITIMATE]}")
    print(
        f"train={len(train)} val={len(val)} skipped={len(skips)} "
        f"duplicates_removed={before - len(records)}"
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    train = corpus_mod.read_corpus(args.train)
    val = corpus_mod.read_corpus(args.val) if args.val else train
    config = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        dim=args.dim,
        hash_seed=args.hash_seed,
        margin=args.margin,
        beta=args.beta,
        max_tokens=args.max_tokens,
        **({"template": args.template} if args.template else {}),
    )
    if args.objective == "bce":
        model, metrics = train_bce(train, val, config)
    elif args.objective == "contrastive":
        model, metrics = train_contrastive(train, val, config)
    else:
        reference = LinearTextModel.load(args.reference) if args.reference else None
        if reference is not None and (reference.dim != config.dim or reference.hash_seed != config.hash_seed):
            raise ConfigError("reference checkpoint dim/hash_seed differ from the training config")
        model, metrics = train_dpo(train, val, reference, config)
    model.save(args.out)
    metrics_path = args.metrics or str(Path(args.out).with_suffix(".metrics.csv"))
    write_metrics_csv(metrics, metrics_path)
    last = metrics[-1]
    print(
        f"objective={args.objective} epochs={last.epoch} train_loss={last.train_loss:.4f} "
        f"val_loss={last.val_loss:.4f} train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f}"
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# audit

_AUDIT_OVERRIDES = {
    "corpus": "corpus_paths",
    "backend": "backend",
    "checkpoint": "checkpoint",
    "remote_url": "remote_url",
    "remote_model": "remote_model",
    "remote_timeout": "remote_timeout",
    "remote_max_retries": "remote_max_retries",
    "remote_max_in_flight": "remote_max_in_flight",
    "model_name": "model_name",
    "n_samples": "n_samples",
    "exact_limit": "exact_limit",
    "estimator": "estimator",
    "antithetic": "antithetic",
    "seed": "seed",
    "max_tokens": "max_tokens",
    "k_top": "k_top",
    "explain_k": "explain_k",
    "per_class": "per_class_eval_count",
    "out_dir": "output_dir",
    "explanation_prompt": "explanation_prompt",
    "explanation_scorer": "explanation_scorer",
    "attribute_template": "attribute_template",
    "template": "template",
    "cache": "cache_path",
    "n_jobs": "n_jobs",
}


def resolve_config(args) -> AuditConfig:
    """Config file values, overridden by any flag given on the command line."""
    base = AuditConfig.load(args.config).to_dict() if args.config else AuditConfig().to_dict()
    for flag, key in _AUDIT_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    return AuditConfig.from_dict(base)


def build_backend(config: AuditConfig):
    if config.backend == "toy":
        if not config.checkpoint:
            raise ConfigError("toy backend needs a checkpoint (--checkpoint)")
        if not Path(config.checkpoint).exists():
            raise DataError(f"checkpoint not found: {config.checkpoint}")
        model = LinearTextModel.load(config.checkpoint)
        backend = ToyBackend(model, explain_k=config.explain_k)
    else:
        if not (config.remote_url and config.remote_model):
            raise ConfigError("remote backend needs --remote-url and --remote-model")
        endpoint = RemoteEndpoint(
            config.remote_url,
            config.remote_model,
            timeout=config.remote_timeout,
            max_retries=config.remote_max_retries,
            max_in_flight=config.remote_max_in_flight,
            auth_token=os.environ.get(AUTH_ENV),
        )
        backend = RemoteBackend(RemoteClient(endpoint), config.explanation_prompt)
    if config.explanation_scorer == "classifier":
        backend = SelfConsistentBackend(backend)
    elif config.explanation_scorer == "constant":
        backend = ConstantExplanationBackend(backend)
    return backend


def select_emails(full: Corpus, per_class: int, seed: int, ids: list[str] | None):
    """Seeded per-class sample (or an explicit id list), returned in corpus order."""
    records = list(full)
    if ids:
        wanted = set(ids)
        chosen = [r for r in records if r.content_hash in wanted]
        missing = wanted - {r.content_hash for r in chosen}
        if missing:
            raise DataError(f"unknown email id(s): {', '.join(sorted(missing))}")
        return chosen
    rng = np.random.default_rng(seed)
    keep = set()
    for label in LABELS:
        idx = [i for i, r in enumerate(records) if r.label is label]
        take = min(per_class, len(idx))
        if take < per_class:
            log.warning("only %d %s emails available (wanted %d)", len(idx), label.short, per_class)
        keep.update(idx[j] for j in rng.choice(len(idx), size=take, replace=False))
    return [r for i, r in enumerate(records) if i in keep]


def _read_ids(value: str | None) -> list[str] | None:
    if not value:
        return None
    if value.startswith("@"):
        text = Path(value[1:]).read_text(encoding="utf-8")
        return [t.strip() for t in text.replace(",", "\n").splitlines() if t.strip()]
    return [t.strip() for t in value.split(",") if t.strip()]


def cmd_audit(args) -> int:
    config = resolve_config(args)
    if not config.corpus_paths:
        raise ConfigError("no corpus given (--corpus or corpus_paths in the config file)")
    records = []
    for path in config.corpus_paths:
        records += list(corpus_mod.read_corpus(path))
    emails = select_emails(Corpus(corpus_mod.deduplicate(records)), config.per_class_eval_count,
                           config.seed, _read_ids(args.ids))
    if not emails:
        raise DataError("no emails selected for audit")
    backend = build_backend(config)
    cache = ScoreCache(config.cache_path) if config.cache_path else None
    reports, failures = audit_batch(emails, backend, config, cache=cache, n_jobs=config.n_jobs)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    corpus_mod.write_jsonl((f.to_dict() for f in failures), out / "failures.jsonl")
    if not reports:
        print(f"audited=0 failed={len(failures)}", file=sys.stderr)
        return EXIT_BACKEND
    write_reports(reports, out)
    sys.stdout.write(summary_table(aggregate(reports)))
    print(f"audited={len(reports)} failed={len(failures)} config_digest={config.digest()}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    failing = []
    for fx in standard_suite():
        exact = exact_shapley(fx.scorer, fx.n_players)
        mc = mc_shapley(fx.scorer, fx.n_players, args.n_samples, args.seed, antithetic=not args.no_antithetic)
        dev = float(np.max(np.abs(mc.values - exact.values)))
        ok = dev <= args.tolerance
        print(f"{fx.name:<24} max_abs_dev={dev:.6f} tol={args.tolerance} {'PASS' if ok else 'FAIL'}")
        if not ok:
            failing.append(fx.name)
    if failing:
        raise VerificationError(f"tolerance exceeded on: {', '.join(failing)}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccshap-audit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="clean, deduplicate, balance and split email corpora")
    p.add_argument("--phishing", action="append", default=[], metavar="PATH")
    p.add_argument("--ham", action="append", default=[], metavar="PATH")
    p.add_argument("--labeled", action="append", default=[], metavar="PATH",
                   help="JSONL/CSV file whose rows carry a label field")
    p.add_argument("--format", choices=corpus_mod.FORMATS, default=None)
    p.add_argument("--per-class", type=int, default=None,
                   help="records per class after balancing (default: size of the smaller class)")
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--language-threshold", type=float, default=0.02)
    p.add_argument("--min-words", type=int, default=8)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the built-in linear model")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--objective", choices=OBJECTIVES, default="bce")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics CSV path (default: next to the checkpoint)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=2**16)
    p.add_argument("--hash-seed", type=int, default=0)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--reference", help="frozen reference checkpoint for dpo")
    p.add_argument("--template")
    p.add_argument("--max-tokens", type=int, default=256)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="compute CC-SHAP reports for a sample of emails")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--save-config", help="write the resolved config here and exit")
    p.add_argument("--corpus", action="append", default=None, metavar="JSONL")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--checkpoint")
    p.add_argument("--remote-url")
    p.add_argument("--remote-model")
    p.add_argument("--remote-timeout", type=float)
    p.add_argument("--remote-max-retries", type=int)
    p.add_argument("--remote-max-in-flight", type=int)
    p.add_argument("--model-name")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--exact-limit", type=int)
    p.add_argument("--estimator", choices=ESTIMATORS)
    p.add_argument("--antithetic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--k-top", type=int)
    p.add_argument("--explain-k", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--explanation-prompt")
    p.add_argument("--explanation-scorer", choices=EXPLANATION_SCORERS)
    p.add_argument("--attribute-template", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--template")
    p.add_argument("--cache", help="append-only score cache file")
    p.add_argument("--n-jobs", type=int)
    p.add_argument("--ids", help="comma-separated email ids, or @file with one id per line")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify", help="compare Monte Carlo and exact Shapley values on fixtures")
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--no-antithetic", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, VerificationError):
        return EXIT_VERIFY
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    if isinstance(exc, (DataError, TrainingError)):
        return EXIT_DATA
    return EXIT_USAGE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "audit" and args.save_config:
            resolve_config(args).save(args.save_config)
            return EXIT_OK
        return args.func(args)
    except CcShapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
