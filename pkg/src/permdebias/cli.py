"""Command-line entry point: ``permdebias <command> ...``.

Exit status is 0 on success, 1 for invalid input and 2 for internal errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .blackbox import RecordTeacher, SampleRecord, draw_sample_arrays, hierarchical_sample
from .core import MAX_OPTIONS, Permutation
from .debias import POLICIES, PriorWeights, apply_debias_policy
from .errors import EmptySampleSet, PermDebiasError, ValidationError
from .jsonl import (
    read_dataset,
    read_json,
    read_records,
    read_samples,
    write_dataset,
    write_json,
    write_records,
    write_samples,
)
from .metrics import DIVERGENCES
from .rng import derive_seed, substream
from .simulate import (
    PERMUTATION_POLICIES,
    SimulatedTeacher,
    TeacherSpec,
    emit_recordset,
    generate_dataset,
    read_spec_config,
)
from .student import MODES, StudentData, StudentModel, TrainConfig, evaluate_student, train

log = logging.getLogger("permdebias")

HISTORY_FIELDS = ("epoch", "step", "loss", "val_acc")
SWEEP_FIELDS = ("kind", "grid_point", "seed", "accuracy", "ps")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise ValidationError(f"input file not found: {p}")


def _prepare_out(path, directory: bool) -> None:
    target = path if directory else os.path.dirname(os.path.abspath(path))
    if directory:
        os.makedirs(target, exist_ok=True)
    elif not os.path.isdir(target):
        raise ValidationError(f"output directory does not exist: {target}")


def _emit(obj, out) -> None:
    if out is None:
        sys.stdout.write(json.dumps(obj, indent=2, allow_nan=False) + "\n")
    else:
        write_json(out, obj)


def _provenance(args, **resolved) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    config.update(resolved)
    return {"version": __version__, "config": config}


def parse_loss(text: str) -> tuple:
    """'whitebox' -> ('whitebox', None); 'mc:N' -> ('mc', N); bare 'mc' -> ('mc', None)."""
    if text == "whitebox":
        return "whitebox", None
    if text == "mc":
        return "mc", None
    if text.startswith("mc:"):
        try:
            n = int(text[3:])
        except ValueError:
            n = 0
        if n >= 1:
            return "mc", n
    raise ValidationError(f"--loss must be 'whitebox' or 'mc:N' with N >= 1, got {text!r}")


def parse_grid(text: str) -> list:
    try:
        grid = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"--grid must be comma separated integers, got {text!r}") from None
    if not grid or any(g < 1 for g in grid):
        raise ValidationError("--grid must hold at least one positive integer")
    return grid


def answer_matrix(teacher, example_ids, n: int, seed: int) -> np.ndarray:
    """(n_examples, n) canonical answers of black-box draws, one stream per example.

    Prefixes are nested: the first m columns are exactly what a run asking for
    m samples would draw.
    """
    out = np.empty((len(example_ids), n), dtype=np.int64)
    for i, eid in enumerate(example_ids):
        perms, labels = draw_sample_arrays(teacher, eid, n, substream(seed, "sample", eid))
        out[i] = perms[np.arange(n), labels]
    return out


def _counts(answers: np.ndarray, k: int) -> np.ndarray:
    offsets = answers + k * np.arange(answers.shape[0])[:, None]
    return np.bincount(offsets.ravel(), minlength=k * answers.shape[0]).reshape(-1, k).astype(np.float64)


def _draw_records(teacher, example_ids, n: int, seed: int) -> list:
    out = []
    for eid in example_ids:
        rng = substream(seed, "sample", eid)
        if teacher.num_options(eid) > MAX_OPTIONS:
            out.extend(hierarchical_sample(teacher, eid, rng) for _ in range(n))
            continue
        perms, labels = draw_sample_arrays(teacher, eid, n, rng)
        out.extend(SampleRecord(eid, Permutation(tuple(p)), int(l)) for p, l in zip(perms, labels))
    return out


# --------------------------------------------------------------------------- commands

def cmd_metrics(args) -> int:
    _require_files(args.records)
    if args.out:
        _prepare_out(args.out, directory=False)
    records = read_records(args.records)
    policies = args.policy or ["baseline"]
    reports = {}
    for policy in policies:
        reports[policy] = apply_debias_policy(records, policy, args.divergence,
                                              allow_partial=args.allow_partial).report.to_json()
    out = _provenance(args, policy=policies)
    out["reports"] = reports
    _emit(out, args.out)
    return 0


def cmd_debias(args) -> int:
    _require_files(args.records)
    _prepare_out(args.out, directory=True)
    records = read_records(args.records)
    result = apply_debias_policy(records, args.policy, args.divergence, allow_partial=args.allow_partial)
    write_records(os.path.join(args.out, "debiased.jsonl"), result.records)
    report = _provenance(args)
    report["report"] = result.report.to_json()
    write_json(os.path.join(args.out, "report.json"), report)
    if isinstance(result.weights, PriorWeights):
        write_json(os.path.join(args.out, "prior.json"), result.weights.to_json())
    elif result.weights is not None:
        write_json(os.path.join(args.out, "prior.json"),
                   {eid: w.to_json() for eid, w in result.weights.items()})
    return 0


def _load_spec(args) -> tuple:
    spec_kw, data_kw = ({}, {}) if args.config is None else read_spec_config(args.config)
    spec_kw.setdefault("seed", args.seed)
    k = spec_kw.get("num_options", 4)
    if "position_bias" not in spec_kw and k != 4:
        spec_kw["position_bias"] = (0.0,) * k
    if args.n_examples is not None:
        data_kw["n_examples"] = args.n_examples
    data_kw.setdefault("n_examples", 5000)
    return TeacherSpec(**spec_kw), data_kw


def cmd_simulate(args) -> int:
    _require_files(args.config)
    _prepare_out(args.out, directory=True)
    spec, data_kw = _load_spec(args)
    n = data_kw.pop("n_examples")
    dataset = generate_dataset(spec, n, args.seed, **data_kw)
    write_dataset(os.path.join(args.out, "dataset.jsonl"), dataset)
    if args.permutations != "none":
        write_records(os.path.join(args.out, "records.jsonl"), emit_recordset(spec, dataset, args.permutations))
    teacher = _provenance(args, n_examples=n, **{k: v for k, v in data_kw.items()})
    teacher["spec"] = spec.to_json()
    write_json(os.path.join(args.out, "teacher.json"), teacher)
    if args.samples:
        samples = _draw_records(SimulatedTeacher(spec, dataset),
                                [ex.example_id for ex in dataset.examples], args.samples, args.seed)
        write_samples(os.path.join(args.out, "samples.jsonl"), samples)
    return 0


def cmd_sample(args) -> int:
    if (args.records is None) == (args.teacher is None):
        raise ValidationError("give exactly one of --records or --teacher (with --dataset)")
    if args.teacher is not None and args.dataset is None:
        raise ValidationError("--teacher needs --dataset")
    _require_files(args.records, args.teacher, args.dataset)
    _prepare_out(args.out, directory=False)
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    if args.records is not None:
        teacher = RecordTeacher(read_records(args.records))
        ids = teacher.records.example_ids
    else:
        spec = TeacherSpec.from_json(read_json(args.teacher)["spec"])
        dataset = read_dataset(args.dataset)
        teacher = SimulatedTeacher(spec, dataset)
        ids = [ex.example_id for ex in dataset.examples]
    write_samples(args.out, _draw_records(teacher, ids, args.n, args.seed))
    return 0


def _split_ids(dataset, split: str, limit=None) -> list:
    ids = [ex.example_id for ex in dataset.split(split)]
    if limit is not None:
        if limit > len(ids):
            raise ValidationError(f"asked for {limit} {split} examples, only {len(ids)} available")
        ids = ids[:limit]
    if not ids:
        raise ValidationError(f"no examples in split {split!r}")
    return ids


def _student_inputs(args):
    _require_files(args.dataset, args.records)
    dataset = read_dataset(args.dataset)
    records = read_records(args.records)
    feats = {ex.example_id: ex.features for ex in dataset.examples}
    missing = [eid for eid in feats if eid not in records]
    if missing:
        raise ValidationError(f"{len(missing)} dataset examples have no records, e.g. {missing[0]}")
    return dataset, records, feats


def _train_config(args, loss: str, seed: int) -> TrainConfig:
    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=seed,
                       eval_every=args.eval_every, loss=loss)


def _valid_data(dataset, records, feats):
    ids = [ex.example_id for ex in dataset.split("valid")]
    return StudentData.from_records(records, feats, ids) if ids else None


def _sample_counts_from_file(path, ids, k: int, n) -> np.ndarray:
    by_id = {eid: [] for eid in ids}
    for s in read_samples(path):
        if s.example_id in by_id:
            by_id[s.example_id].append(s.answer)
    counts = np.zeros((len(ids), k))
    for i, eid in enumerate(ids):
        answers = by_id[eid] if n is None else by_id[eid][:n]
        if not answers or (n is not None and len(answers) < n):
            raise EmptySampleSet(f"example {eid}: fewer samples than requested")
        counts[i] = np.bincount(answers, minlength=k)
    return counts


def cmd_train(args) -> int:
    loss, n_samples = parse_loss(args.loss)
    if loss == "mc" and n_samples is None and args.samples is None:
        raise ValidationError("--loss mc needs a sample count (mc:N) or --samples")
    _require_files(args.samples)
    _prepare_out(args.out, directory=True)
    dataset, records, feats = _student_inputs(args)
    ids = _split_ids(dataset, "train", args.n_train)
    data = StudentData.from_records(records, feats, ids)
    if loss == "mc":
        if args.samples is not None:
            counts = _sample_counts_from_file(args.samples, ids, data.num_options, n_samples)
        else:
            counts = _counts(answer_matrix(RecordTeacher(records), ids, n_samples, args.seed), data.num_options)
        data = data.with_counts(counts)
    config = _train_config(args, loss, derive_seed(args.seed, "train"))
    model = StudentModel.zeros(data.feature_dim, data.num_options, args.mode, args.temperature)
    best, history = train(model, data, config, valid=_valid_data(dataset, records, feats))
    checkpoint = _provenance(args, train_seed=config.seed, n_train=len(ids))
    checkpoint["model"] = best.to_json()
    write_json(os.path.join(args.out, "checkpoint.json"), checkpoint)
    with open(os.path.join(args.out, "history.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(float(v)) if k in ("loss", "val_acc") else v for k, v in row.items()})
    return 0


def cmd_eval(args) -> int:
    _require_files(args.checkpoint)
    if args.out:
        _prepare_out(args.out, directory=False)
    obj = read_json(args.checkpoint)
    if "model" not in obj:
        raise ValidationError(f"{args.checkpoint}: not a checkpoint (no 'model' key)")
    model = StudentModel.from_json(obj["model"])
    dataset, records, feats = _student_inputs(args)
    data = StudentData.from_records(records, feats, _split_ids(dataset, args.split))
    out = _provenance(args)
    out.update(evaluate_student(model, data, args.divergence))
    _emit(out, args.out)
    return 0


def run_sweep(kind: str, grid: list, seeds: list, dataset, records, feats, mode: str, make_config,
              loss: str = "whitebox", n_samples=None, reference: bool = False,
              divergence: str = "tv", temperature: float = 1.0) -> list:
    """Rows of (kind, grid_point, seed, accuracy, ps) plus a mean row per grid point.

    ``samples``: train on black-box counts from the first N draws per example.
    ``datasize``: train on the first n training examples with ``loss``.
    Draws and training seeds depend only on the replicate seed, so grid
    points share their randomness and differ only in the swept quantity.
    """
    if kind not in ("samples", "datasize"):
        raise ValidationError(f"unknown sweep kind {kind!r}")
    if not grid or not seeds:
        raise ValidationError("sweep needs a nonempty grid and at least one seed")
    train_ids = _split_ids(dataset, "train")
    eval_data = StudentData.from_records(records, feats, _split_ids(dataset, "eval"))
    valid = _valid_data(dataset, records, feats)
    teacher = RecordTeacher(records)
    full = StudentData.from_records(records, feats, train_ids)
    k = full.num_options
    if kind == "datasize" and max(grid) > len(train_ids):
        raise ValidationError(f"grid point {max(grid)} exceeds the {len(train_ids)} training examples")
    if kind == "samples" or loss == "mc":
        if loss == "mc" and n_samples is None:
            raise ValidationError("mc loss in a datasize sweep needs mc:N")
        depth = max(grid) if kind == "samples" else n_samples

    points = list(grid) + (["whitebox"] if reference else [])
    results = {p: [] for p in points}
    for seed in seeds:
        answers = None
        if kind == "samples" or loss == "mc":
            answers = answer_matrix(teacher, train_ids, depth, seed)
        config_seed = derive_seed(seed, "train")
        for point in points:
            if point == "whitebox":
                data, point_loss = full, "whitebox"
            elif kind == "samples":
                data, point_loss = full.with_counts(_counts(answers[:, :point], k)), "mc"
            else:
                idx = np.arange(point)
                data, point_loss = full.subset(idx), loss
                if loss == "mc":
                    data = data.with_counts(_counts(answers[idx], k))
            model = StudentModel.zeros(full.feature_dim, k, mode, temperature)
            best, _ = train(model, data, make_config(point_loss, config_seed), valid=valid)
            scores = evaluate_student(best, eval_data, divergence)
            log.info("%s %s seed=%s acc=%.4f", kind, point, seed, scores["accuracy"])
            results[point].append((seed, scores["accuracy"], scores["ps"]))
    rows = []
    for point in points:
        for seed, acc, ps in results[point]:
            rows.append({"kind": kind, "grid_point": point, "seed": seed, "accuracy": acc, "ps": ps})
        accs = np.array([r[1] for r in results[point]])
        pss = np.array([r[2] for r in results[point]])
        rows.append({"kind": kind, "grid_point": point, "seed": "mean",
                     "accuracy": float(accs.mean()), "ps": float(pss.mean())})
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "accuracy": repr(float(row["accuracy"])), "ps": repr(float(row["ps"]))})


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    loss, n_samples = parse_loss(args.loss)
    if args.replicates < 1:
        raise ValidationError("--replicates must be >= 1")
    _prepare_out(args.out, directory=False)
    dataset, records, feats = _student_inputs(args)
    seeds = [args.seed + r for r in range(args.replicates)]
    rows = run_sweep(args.kind, grid, seeds, dataset, records, feats, args.mode,
                     lambda l, s: _train_config(args, l, s), loss, n_samples,
                     args.reference, args.divergence, args.temperature)
    write_sweep_csv(args.out, rows)
    return 0


# --------------------------------------------------------------------------- parser

def _add_train_flags(p) -> None:
    p.add_argument("--mode", choices=MODES, default="distill")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--eval-every", type=int, default=1000, help="validation interval in examples")
    p.add_argument("--temperature", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="permdebias", description="Measure and remove option-order bias in multiple-choice predictions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("metrics", help="bias report for a record file")
    p.add_argument("records")
    p.add_argument("--policy", action="append", choices=POLICIES,
                   help="policy to report on; repeatable (default: baseline)")
    p.add_argument("--divergence", choices=sorted(DIVERGENCES), default="tv")
    p.add_argument("--allow-partial", action="store_true")
    p.add_argument("--out", help="JSON report path (default: stdout)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("debias", help="apply a debiasing policy to a record file")
    p.add_argument("records")
    p.add_argument("--policy", choices=POLICIES, required=True)
    p.add_argument("--divergence", choices=sorted(DIVERGENCES), default="tv")
    p.add_argument("--allow-partial", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_debias)

    p = sub.add_parser("simulate", help="synthetic dataset and biased teacher outputs")
    p.add_argument("--config", help="flat key = value teacher spec file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-examples", type=int)
    p.add_argument("--permutations", choices=PERMUTATION_POLICIES + ("none",), default="all")
    p.add_argument("--samples", type=int, default=0, help="black-box samples per example (0: none)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sample", help="hierarchical black-box samples")
    p.add_argument("--records")
    p.add_argument("--teacher", help="teacher.json written by simulate")
    p.add_argument("--dataset")
    p.add_argument("--n", type=int, required=True, help="samples per example")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a student on teacher outputs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--samples", help="samples.jsonl to use for mc loss instead of fresh draws")
    p.add_argument("--loss", default="whitebox", help="whitebox | mc:N")
    p.add_argument("--n-train", type=int, help="use only the first n training examples")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a student checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--split", choices=("train", "valid", "eval"), default="eval")
    p.add_argument("--divergence", choices=sorted(DIVERGENCES), default="tv")
    p.add_argument("--out", help="JSON path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sample-count or training-size sweep, CSV out")
    p.add_argument("--kind", choices=("samples", "datasize"), required=True)
    p.add_argument("--grid", required=True, help="comma separated grid, e.g. 1,2,4,8")
    p.add_argument("--dataset", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--loss", default="whitebox", help="datasize sweeps: whitebox | mc:N")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--replicates", type=int, default=1, help="seeds seed, seed+1, ...")
    p.add_argument("--reference", action="store_true", help="add a white-box-trained reference row")
    p.add_argument("--divergence", choices=sorted(DIVERGENCES), default="tv")
    p.add_argument("--out", required=True, help="CSV path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PermDebiasError, json.JSONDecodeError, OSError, UnicodeDecodeError) as exc:
        print(f"permdebias: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"permdebias: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
