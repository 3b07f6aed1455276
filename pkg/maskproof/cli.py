"""maskproof command line: trainer, owner and auditor front door.

Every subcommand prints a short text report, or one JSON object with --json.
Exit codes: 0 ok, 1 verification failure, 2 usage, 3 data error, 4 internal.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from .circuits import DEFAULT_FAD_SLOTS, fad_scaling, step_scaling
from .config import Settings
from .errors import DimMismatch, MaskProofError, TranscriptFormatError
from .fixed_point import to_fixed
from .forgery_lab import (attack_neighbor_replacement, attack_random_sampling, detect_replicas, forging_advantage,
                          search_space_sizes, write_draw_report)
from .ingestion import load_csv, load_mask, synthetic_classification, synthetic_regression
from .masking import MaskKind
from .protocol import DataOwner, Trainer, Transcript, model_shape, open_backend, verify_transcript
from .schemas import VerificationReport
from .storage import TranscriptStore
from .training import FixedDataset, ModelParams, ModelShape

logger = logging.getLogger("maskproof")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 4


def _indices(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated row indices, got {text!r}")


def _to_json_value(value: Any) -> Any:
    if value is None or isinstance(value, (str, bool, int, float)):
        return value
    if isinstance(value, Mapping):
        return {str(k): _to_json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_json_value(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return str(value)


def _emit(args: argparse.Namespace, payload: Mapping[str, Any]) -> None:
    if args.json:
        print(json.dumps(_to_json_value(payload), sort_keys=True, separators=(",", ":")))
        return
    for key, value in payload.items():
        print(f"{key}: {value}")


# ---------------------------------------------------------------------------
# settings and sessions

def _base_settings(args: argparse.Namespace, **overrides) -> Settings:
    return Settings.from_env(workdir=args.workdir, seed=args.seed, n_jobs=args.jobs, **overrides)


def _session_settings(args: argparse.Namespace) -> Settings:
    """Settings of the session found in the working directory (the header wins)"""
    base = _base_settings(args)
    header = TranscriptStore(base.resolved_transcript_dir).read_header()
    values = dict(header.settings)
    values.update(workdir=base.workdir, transcript_dir=base.transcript_dir, database_url=base.database_url,
                  vault_secret=base.vault_secret, n_jobs=base.n_jobs)
    return Settings(**values)


def _owners_of(dataset: FixedDataset, owner_secret: bytes) -> List[DataOwner]:
    return [DataOwner(entry.owner_id, dataset.rows(entry.start, entry.stop), owner_secret)
            for entry in dataset.owners]


def _owner_secret(args: argparse.Namespace) -> bytes:
    return (args.owner_secret or f"owners:{args.seed or 0}").encode()


def _model_overrides(dataset: FixedDataset, args: argparse.Namespace) -> dict:
    overrides = {"features": dataset.n_features, "model": args.model, "granularity": args.granularity,
                 "hidden": args.hidden}
    if args.model == "nn":
        overrides["classes"] = dataset.n_labels
    return overrides


# ---------------------------------------------------------------------------
# commands

def cmd_commit_dataset(args: argparse.Namespace) -> int:
    env = _base_settings(args)
    task = "classification" if args.model == "nn" else args.task
    dataset = load_csv(args.csv, task, args.owners, env.fixed)
    settings = _base_settings(args, **_model_overrides(dataset, args))
    trainer = Trainer(settings)
    session = trainer.init_session(_owners_of(dataset, _owner_secret(args)))
    out = settings.workdir / "dataset-commitment.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"session_id": session.session_id, **session.dataset.to_dict()}, indent=2))
    _emit(args, {"session_id": session.session_id, "rows": dataset.n_rows, "owners": len(dataset.owners),
                 "dataset_commitment": hex(session.dataset.root), "transcript": str(settings.resolved_transcript_dir),
                 "commitment_file": str(out)})
    return EXIT_OK


def cmd_request_unlearn(args: argparse.Namespace) -> int:
    if len(args.kind) != len(args.mask):
        raise DimMismatch("every --kind needs exactly one --mask")
    settings = _session_settings(args)
    trainer = Trainer.resume(settings)
    entry = trainer.session.layout.owner(args.owner)
    round = trainer.session.round + 1
    masks = {MaskKind(kind): load_mask(path, kind, round) for kind, path in zip(args.kind, args.mask)}
    owner = DataOwner(entry.owner_id, trainer.dataset.rows(entry.start, entry.stop), _owner_secret(args))
    request = owner.request(trainer.session.session_id, round, masks, settings)
    trainer.submit_request(request)
    payload = {"owner_id": request.owner_id, "round": round, "kinds": sorted(k.value for k in masks),
               "commitment": hex(request.commitment.root), "signature": request.signature.hex()}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    _emit(args, payload)
    return EXIT_OK


def cmd_retrain(args: argparse.Namespace) -> int:
    trainer = Trainer.resume(_session_settings(args))
    rt = trainer.run_round(args.optimizer, args.epochs, args.learning_rate, args.xi)
    flagged = sum(sum(f.flags) for f in rt.fads)
    _emit(args, {"round": rt.record.round, "optimizer": rt.record.optimizer, "epochs": rt.record.epochs,
                 "steps": rt.record.steps, "fad_proofs": len(rt.fads), "flagged_replicas": flagged,
                 "state": rt.record.state, "model": rt.record.models[-1] if rt.record.models else None})
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        transcript = Transcript.load(args.transcript)
        base = _base_settings(args)
        settings = Settings(**{**transcript.header.settings, "workdir": base.workdir,
                               "database_url": base.database_url, "vault_secret": base.vault_secret})
    except (TranscriptFormatError, ValidationError) as e:
        report = VerificationReport(ok=False).fail(str(args.transcript), f"unreadable transcript: {e}")
        _emit(args, report.model_dump())
        return EXIT_VERIFY
    public = {k: v for k, v in (("dataset", args.dataset_commitment), ("model", args.model_commitment)) if v}
    ok, report = verify_transcript(transcript, open_backend(settings, transcript.header.session_id), public)
    _emit(args, {"session_id": transcript.header.session_id, **report.model_dump()})
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_fad(args: argparse.Namespace) -> int:
    trainer = Trainer.resume(_session_settings(args))
    flags = detect_replicas(trainer.dataset, args.minibatch, args.unlearned, args.xi, trainer.params,
                            trainer.state, args.representation)
    _emit(args, {"unlearned": args.unlearned, "minibatch": args.minibatch, "xi": args.xi,
                 "representation": args.representation, "flags": flags, "replicas": sum(flags)})
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    settings = _base_settings(args)
    task = "classification" if args.model == "nn" else args.task
    dataset = load_csv(args.csv, task, 1, settings.fixed)
    settings = _base_settings(args, **_model_overrides(dataset, args))
    rng = np.random.default_rng(settings.seed)
    params = ModelParams.random(model_shape(settings), rng)
    if args.method == "random":
        instance = attack_random_sampling(dataset, args.unlearned, args.target, args.batch_size or len(args.target),
                                          args.budget or settings.attack_budget, rng, params, settings.n_jobs)
    else:
        instance = attack_neighbor_replacement(dataset, args.unlearned, args.target, params)
    if args.report:
        write_draw_report(instance, args.report)
    _emit(args, {"method": args.method, **instance.to_dict()})
    return EXIT_OK


def cmd_spaces(args: argparse.Namespace) -> int:
    report = search_space_sizes(args.D, args.U, args.batch)
    payload = {"dataset_size": report.dataset_size, "unlearned": report.unlearned, "batch_size": report.batch_size,
               "forging": report.forging_sci, "target": report.target_sci, "vrf_restricted": report.reduced}
    if args.p is not None:
        payload.update(forging_advantage(args.p, args.D, args.U, args.batch))
    _emit(args, payload)
    return EXIT_OK


def cmd_circuit_size(args: argparse.Namespace) -> int:
    """Constraint counts over batch sizes and their linear fit"""
    if args.model == "nn":
        model = ModelShape("nn", args.features, args.hidden, args.classes)
    else:
        model = ModelShape("lr", args.features)
    if max(args.batches) > args.rows:
        raise DimMismatch(f"batch sizes {args.batches} exceed the {args.rows} dataset rows")
    if args.circuit == "fad":
        report = fad_scaling(model, args.batches, args.rows, to_fixed(args.xi), args.slots, args.granularity,
                             args.class_masked)
    else:
        report = step_scaling(model, args.batches, args.rows, args.granularity, args.class_masked)
    _emit(args, {"circuit": args.circuit, "rows": args.rows, **report.to_dict()})
    return EXIT_OK


def cmd_demo(args: argparse.Namespace) -> int:
    """Synthetic session: commit, one sample-removal request, one proven round, verification"""
    env = _base_settings(args)
    if args.model == "nn":
        dataset = synthetic_classification(args.rows, args.features, args.classes, env.seed, args.owners, env.fixed)
    else:
        dataset = synthetic_regression(args.rows, args.features, env.seed, n_owners=args.owners, cfg=env.fixed)
    settings = _base_settings(args, **_model_overrides(dataset, args), batch_size=args.batch_size,
                              optimizer=args.optimizer)
    trainer = Trainer(settings)
    session = trainer.init_session(_owners_of(dataset, _owner_secret(args)))
    entry = session.layout.owners[0]
    owner = DataOwner(entry.owner_id, dataset.rows(entry.start, entry.stop), _owner_secret(args))
    bits = np.ones((entry.n_rows, 1), dtype=np.uint8)
    bits[0] = 0
    trainer.submit_request(owner.request(session.session_id, 1, {MaskKind.SAMPLE: bits}, settings))
    rt = trainer.run_round()
    ok, report = verify_transcript(trainer.transcript, trainer.backend)
    _emit(args, {"session_id": session.session_id, "rows": dataset.n_rows, "steps": rt.record.steps,
                 "fad_proofs": len(rt.fads), "transcript": str(settings.resolved_transcript_dir), "ok": ok,
                 "locus": report.locus})
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# parser

def _model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", choices=("lr", "nn"), default="lr", help="Linear regression or 1-hidden-layer net.")
    parser.add_argument("--hidden", type=int, default=4, help="Hidden width of the network.")
    parser.add_argument("--granularity", choices=("feature", "sample"), default="feature",
                        help="Removal mask granularity.")
    parser.add_argument("--task", choices=("regression", "classification"), default="regression")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", type=Path, default=None, help="Session working directory.")
    common.add_argument("--seed", type=int, default=None, help="Seed for synthetic data and initial weights.")
    common.add_argument("--jobs", type=int, default=None, help="Parallel workers.")
    common.add_argument("--owner-secret", default=None, help="Secret the simulated owners derive keys from.")
    common.add_argument("--json", action="store_true", help="Emit machine-readable JSON output.")
    common.add_argument("-v", "--verbose", action="store_true", help="Log progress to stderr.")

    parser = argparse.ArgumentParser(prog="maskproof", description="Verifiable machine unlearning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("commit-dataset", parents=[common], help="Commit a CSV dataset and open a session.")
    p.add_argument("csv", type=Path)
    p.add_argument("--owners", type=int, default=1, help="Number of data owners sharing the rows.")
    _model_args(p)
    p.set_defaults(func=cmd_commit_dataset)

    p = sub.add_parser("request-unlearn", parents=[common], help="Sign and submit an owner's unlearning request.")
    p.add_argument("--owner", default="owner-0")
    p.add_argument("--kind", action="append", choices=[k.value for k in MaskKind], required=True)
    p.add_argument("--mask", action="append", type=Path, required=True, help="0/1 CSV or .npy mask file.")
    p.add_argument("--out", type=Path, default=None, help="Write the public request record here.")
    p.set_defaults(func=cmd_request_unlearn)

    p = sub.add_parser("retrain", parents=[common], help="Run one proven training round.")
    p.add_argument("--optimizer", choices=("bgd", "sgd", "msgd"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--xi", type=float, default=None, help="Replica detection threshold.")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("verify", parents=[common], help="Verify a transcript directory.")
    p.add_argument("transcript", type=Path)
    p.add_argument("--dataset-commitment", default=None, help="Expected dataset root (hex).")
    p.add_argument("--model-commitment", default=None, help="Expected final model commitment (hex).")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fad", parents=[common], help="Flag gradient replicas of an unlearned sample.")
    p.add_argument("--xi", type=float, required=True)
    p.add_argument("--unlearned", type=int, required=True)
    p.add_argument("--minibatch", type=_indices, required=True)
    p.add_argument("--representation", choices=("fixed", "float"), default="fixed")
    p.set_defaults(func=cmd_fad)

    p = sub.add_parser("attack", parents=[common], help="Run a forging attack on a CSV dataset.")
    p.add_argument("method", choices=("random", "neighbor"))
    p.add_argument("csv", type=Path)
    p.add_argument("--unlearned", type=_indices, required=True)
    p.add_argument("--target", type=_indices, required=True, help="Target minibatch holding an unlearned row.")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--report", type=Path, default=None, help="CSV of per-draw distances.")
    _model_args(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("spaces", parents=[common], help="Forging and target search-space sizes.")
    p.add_argument("--D", type=int, required=True, help="Dataset size.")
    p.add_argument("--U", type=int, required=True, help="Unlearned samples.")
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--p", type=float, default=None, help="Per-trial collision probability.")
    p.set_defaults(func=cmd_spaces)

    p = sub.add_parser("circuit-size", parents=[common], help="Constraint counts and their growth in the batch size.")
    p.add_argument("--circuit", choices=("step", "fad"), default="step")
    p.add_argument("--model", choices=("lr", "nn"), default="lr")
    p.add_argument("--features", type=int, default=4)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--granularity", choices=("feature", "sample"), default="feature")
    p.add_argument("--class-masked", action="store_true", help="Add class masks (network only).")
    p.add_argument("--batches", type=_indices, default=[20, 30, 40, 50], help="Comma separated batch sizes.")
    p.add_argument("--rows", type=int, default=64, help="Dataset size the circuits are built for.")
    p.add_argument("--slots", type=int, default=DEFAULT_FAD_SLOTS, help="Unlearned-row capacity of FAD circuits.")
    p.add_argument("--xi", type=float, default=0.0)
    p.set_defaults(func=cmd_circuit_size)

    p = sub.add_parser("demo", parents=[common], help="End-to-end synthetic session.")
    p.add_argument("--rows", type=int, default=16)
    p.add_argument("--features", type=int, default=3)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--owners", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--optimizer", choices=("bgd", "sgd", "msgd"), default="msgd")
    _model_args(p)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MaskProofError as exc:
        logger.debug("command failed", exc_info=True)
        error = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        if args.json:
            print(json.dumps(error, sort_keys=True))
        else:
            print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        if args.json:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": EXIT_INTERNAL}))
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
