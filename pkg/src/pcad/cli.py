"""Command-line entry point: ``pcad gen|pretrain|distill|score|eval|ablate``.

Every option is also a flat dotted config key (``pretrain.epochs``,
``distill.n_samples``, ...; ``seed`` is shared).  Values resolve as built-in
default < ``--config`` JSON file < explicit flag, and every command writes the
resolved values to a ``run.json`` that can be passed back as ``--config`` to
repeat the run.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

log = logging.getLogger("pcad")


def _int_or_none(text):
    return None if str(text).lower() in ("none", "null") else int(text)


def _mid(text):
    t = str(text).lower()
    if t == "same":
        return "same"
    return None if t in ("none", "null") else int(text)


def _csv_list(text):
    return text if isinstance(text, list) else [s for s in str(text).split(",") if s]


# (flag name, type, default, help); a default of REQUIRED must come from a flag or the config
REQUIRED = object()

OPTIONS = {
    "gen": [
        ("out", str, REQUIRED, "output directory"),
        ("seed", int, 7, "global seed"),
        ("categories", int, 6, "number of shape categories"),
        ("train", int, 20, "training clouds per category"),
        ("test", int, 30, "test clouds per category"),
        ("points", int, 512, "points per cloud"),
        ("jitter", float, 0.01, "per-point Gaussian noise sigma"),
    ],
    "pretrain": [
        ("manifest", str, REQUIRED, "dataset manifest"),
        ("out", str, REQUIRED, "teacher checkpoint to write"),
        ("seed", int, 0, "global seed"),
        ("epochs", int, 60, "training epochs (251 for the full-scale recipe)"),
        ("batch_size", int, 16, "clouds per step"),
        ("lr0", float, 1e-3, "initial learning rate"),
        ("decay", float, 0.98, "per-epoch learning-rate factor"),
        ("ortho_weight", float, 1e-3, "feature-transform orthogonality weight"),
        ("points", _int_or_none, 256, "points resampled per cloud each epoch ('none' keeps all)"),
        ("log", str, None, "per-epoch CSV log (default <out>.log.csv)"),
    ],
    "distill": [
        ("teacher", str, REQUIRED, "teacher checkpoint"),
        ("manifest", str, REQUIRED, "dataset manifest"),
        ("category", str, REQUIRED, "normal category (name or id)"),
        ("out", str, REQUIRED, "student checkpoint to write"),
        ("seed", int, 0, "global seed (sample choice and student init)"),
        ("n_samples", int, 5, "normal training samples"),
        ("epochs", int, 20, "training epochs"),
        ("lr0", float, 1e-3, "initial learning rate"),
        ("decay", float, 0.98, "per-epoch learning-rate factor"),
        ("eps", float, 1e-8, "cosine-loss stability constant"),
        ("student_mid", _mid, "same", "student middle tap width: 'same', an integer, or 'none'"),
        ("points", _int_or_none, None, "resample training clouds to this many points"),
        ("log", str, None, "per-epoch CSV log (default <out>.log.csv)"),
    ],
    "score": [
        ("teacher", str, REQUIRED, "teacher checkpoint"),
        ("student", str, REQUIRED, "student checkpoint"),
        ("input", str, None, "one XYZ[L] cloud to score"),
        ("manifest", str, None, "score every test cloud listed here instead"),
        ("out", str, None, "CSV output for manifest mode (default stdout)"),
        ("scale", str, "final", "final | multi"),
        ("metric", str, "cos", "cos | l2"),
        ("points", _int_or_none, None, "resample clouds to this many points"),
        ("seed", int, 0, "global seed (resampling)"),
        ("youden", str, None, "manifest mode: treat this category as normal and print the Youden-J threshold"),
    ],
    "eval": [
        ("manifest", str, REQUIRED, "dataset manifest"),
        ("teacher", str, REQUIRED, "teacher checkpoint"),
        ("out", str, REQUIRED, "report directory"),
        ("categories", _csv_list, "all", "'all' or comma-separated category names"),
        ("n_samples", int, 5, "normal training samples per run"),
        ("n_runs", int, 10, "runs per category"),
        ("seed", int, 0, "global seed; run r uses seed + r"),
        ("scale", str, "final", "final | multi"),
        ("metric", str, "cos", "cos | l2"),
        ("points", _int_or_none, None, "resample every cloud to this many points"),
        ("epochs", int, 20, "student training epochs"),
        ("lr0", float, 1e-3, "student initial learning rate"),
        ("decay", float, 0.98, "student per-epoch learning-rate factor"),
        ("student_mid", _mid, "same", "student middle tap width"),
    ],
    "ablate": [
        ("manifest", str, REQUIRED, "dataset manifest"),
        ("teacher", str, REQUIRED, "teacher checkpoint"),
        ("out", str, REQUIRED, "output directory (one CSV per axis)"),
        ("axes", _csv_list, "scale,metric,points,student", "comma-separated subset of the four sweeps"),
        ("categories", _csv_list, "all", "'all' or comma-separated category names"),
        ("n_samples", int, 5, "normal training samples per run"),
        ("n_runs", int, 3, "runs per category and setting"),
        ("seed", int, 0, "global seed; run r uses seed + r"),
        ("epochs", int, 20, "student training epochs"),
        ("point_counts", _csv_list, "512,1024,2048", "settings of the points sweep"),
    ],
}

HELP = {
    "gen": "generate the synthetic benchmark",
    "pretrain": "pretrain the teacher on part segmentation",
    "distill": "distill a student on a few normal samples",
    "score": "anomaly scores for one cloud or a manifest",
    "eval": "AUC over categories and repeated runs",
    "ablate": "scoring, point-count and student-width sweeps",
}


def _key(cmd, name):
    return "seed" if name == "seed" else f"{cmd}.{name}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcad", description="Few-shot point-cloud anomaly detection by distillation.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd], formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", help="JSON file of flat dotted keys", default=None)
        for name, typ, default, text in opts:
            shown = "required" if default is REQUIRED else default
            p.add_argument(
                "--" + name.replace("_", "-"),
                dest=name,
                type=typ,
                default=argparse.SUPPRESS,
                help=f"{text} (key {_key(cmd, name)}; default: {shown})",
            )
    return parser


def resolve(cmd: str, args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge defaults, the config file and flags into ``{name: value}``."""
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        file_values = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(file_values, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    # one file may configure several commands; keys for the others are ignored
    known = {"command"} | {_key(c, name) for c, opts in OPTIONS.items() for name, *_ in opts}
    foreign = [k for k in file_values if k not in known]
    if foreign:
        raise ValueError(f"unknown config keys: {', '.join(sorted(foreign))}")
    out = {}
    for name, typ, default, _ in OPTIONS[cmd]:
        key = _key(cmd, name)
        if hasattr(args, name):
            value = getattr(args, name)
        elif key in file_values:
            value = file_values[key]
            value = None if value is None else typ(value)
        elif default is REQUIRED:
            parser.error(f"{cmd}: --{name.replace('_', '-')} is required")
        else:
            value = typ(default) if isinstance(default, str) else default
        out[name] = value
    return out


def write_run_json(cmd: str, values: dict, path) -> None:
    doc = {"command": cmd}
    doc.update({_key(cmd, k): v for k, v in values.items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class _CsvLog:
    def __init__(self, path, columns):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w", newline="")
        self.columns = columns
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(columns)

    def __call__(self, row):
        self.writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.columns])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _category_key(text):
    return int(text) if str(text).isdigit() else text


# commands --------------------------------------------------------------------


def cmd_gen(v):
    from .synthgen import KINDS, ShapeSpec, generate_dataset, self_test

    if not 1 <= v["categories"] <= len(KINDS):
        raise ValueError(f"--categories must be between 1 and {len(KINDS)}")
    specs = [ShapeSpec(k, jitter_sigma=v["jitter"]) for k in KINDS[: v["categories"]]]
    out = Path(v["out"])
    ds = generate_dataset(specs, v["train"], v["test"], v["points"], v["seed"], out_dir=out)
    write_run_json("gen", v, out / "run.json")
    log.info("wrote %d categories to %s", len(ds), out)
    if len(specs) > 1:
        log.info("separability ratio %.3f", self_test(specs, seed=v["seed"])["ratio"])


def cmd_pretrain(v):
    from .backbone import save_checkpoint
    from .geometry import load_manifest
    from .pretrain import PretrainConfig, pretrain_teacher

    ds = load_manifest(v["manifest"])
    cfg = PretrainConfig(
        epochs=v["epochs"],
        batch_size=v["batch_size"],
        lr0=v["lr0"],
        decay=v["decay"],
        ortho_weight=v["ortho_weight"],
        points=v["points"],
        seed=v["seed"],
    )
    out = Path(v["out"])
    csv_log = _CsvLog(v["log"] or f"{out}.log.csv", ["epoch", "loss", "accuracy", "lr"])
    try:
        teacher = pretrain_teacher(ds, cfg, on_epoch=csv_log)
    finally:
        csv_log.close()
    save_checkpoint(teacher, out)
    write_run_json("pretrain", v, f"{out}.run.json")
    log.info("teacher written to %s", out)


def cmd_distill(v):
    from .backbone import load_checkpoint, save_checkpoint
    from .distill import DistillConfig, student_config, train_student
    from .evaluation import choose_samples
    from .geometry import load_manifest

    teacher = load_checkpoint(v["teacher"])
    ds = load_manifest(v["manifest"])
    cat = ds.category(_category_key(v["category"]))
    idx, samples = choose_samples(ds, cat.id, v["n_samples"], v["seed"], v["points"])
    cfg = DistillConfig(
        normal_category=cat.id,
        n_samples=v["n_samples"],
        epochs=v["epochs"],
        lr0=v["lr0"],
        decay=v["decay"],
        seed=v["seed"],
        eps=v["eps"],
    )
    frozen = teacher.without_seg_head() if teacher.has_seg_head else teacher
    arch = None if v["student_mid"] == "same" else student_config(frozen.config, v["student_mid"])
    out = Path(v["out"])
    csv_log = _CsvLog(v["log"] or f"{out}.log.csv", ["epoch", "loss", "lr"])
    try:
        student = train_student(frozen, samples, cfg, arch, on_epoch=csv_log)
    finally:
        csv_log.close()
    student.meta.update({"category": cat.name, "train_indices": idx})
    save_checkpoint(student, out)
    write_run_json("distill", v, f"{out}.run.json")
    log.info("student for %s written to %s (final loss %.5f)", cat.name, out, student.meta["final_eval_loss"])


def cmd_score(v):
    from .backbone import load_checkpoint
    from .detect import anomaly_score, score_batch, youden_threshold
    from .evaluation import prepare_test
    from .geometry import load_cloud, load_manifest, preprocess

    if (v["input"] is None) == (v["manifest"] is None):
        raise ValueError("give exactly one of --input or --manifest")
    teacher = load_checkpoint(v["teacher"])
    student = load_checkpoint(v["student"])
    if v["input"] is not None:
        cloud = preprocess(load_cloud(v["input"]), v["points"], [v["seed"]])
        s = anomaly_score(teacher, student, cloud, v["scale"], v["metric"])
        print(f"score={s.value!r}")
        return
    ds = load_manifest(v["manifest"])
    batch, cats, paths = prepare_test(ds, v["points"], v["seed"])
    scores = score_batch(teacher, student, batch, v["scale"], v["metric"])
    rows = [(p, ds.categories[c].name, repr(float(s))) for p, c, s in zip(paths, cats, scores)]
    with (open(v["out"], "w", newline="") if v["out"] else contextlib.nullcontext(sys.stdout)) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "category", "score"])
        w.writerows(rows)
    if v["out"]:
        write_run_json("score", v, f"{v['out']}.run.json")
    if v["youden"] is not None:
        normal = ds.category(_category_key(v["youden"])).id
        tau = youden_threshold(scores, (cats != normal).astype(int))
        print(f"tau={tau!r}")


def _protocol(v, **extra):
    from .evaluation import Protocol

    n_runs = v["n_runs"]
    return Protocol(
        categories="all" if v["categories"] == ["all"] else tuple(_category_key(c) for c in v["categories"]),
        n_samples=v["n_samples"],
        n_runs=n_runs,
        seeds=tuple(v["seed"] + r for r in range(n_runs)),
        epochs=v["epochs"],
        sample_seed=v["seed"],
        **extra,
    )


def cmd_eval(v):
    from .backbone import load_checkpoint
    from .evaluation import run_experiment
    from .geometry import load_manifest

    protocol = _protocol(
        v,
        scale_mode=v["scale"],
        metric=v["metric"],
        points=v["points"],
        lr0=v["lr0"],
        decay=v["decay"],
        student_mid=v["student_mid"],
    )
    report = run_experiment(load_manifest(v["manifest"]), load_checkpoint(v["teacher"]), protocol)
    out = report.write(v["out"])
    write_run_json("eval", v, out / "run.json")
    log.info("average AUC %.4f; report in %s", report.overall_auc, out)


def cmd_ablate(v):
    from .backbone import load_checkpoint
    from .evaluation import ablation_rows, run_ablations
    from .geometry import load_manifest

    axes = v["axes"]
    bad = set(axes) - {"scale", "metric", "points", "student"}
    if bad:
        raise ValueError(f"unknown ablation axes: {', '.join(sorted(bad))}")
    counts = [int(c) for c in v["point_counts"]]
    results = run_ablations(
        load_manifest(v["manifest"]), load_checkpoint(v["teacher"]), _protocol(v), axes=axes, point_counts=counts
    )
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    for axis, reports in results.items():
        rows = ablation_rows(reports, axis)
        with open(out / f"ablate_{axis}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(x) if isinstance(x, float) and not math.isnan(x) else x for k, x in row.items()})
    write_run_json("ablate", v, out / "run.json")


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _thread_limit():
    raw = os.environ.get("PCAD_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    n = int(raw)
    if n < 1:
        raise ValueError("PCAD_THREADS must be a positive integer")
    return threadpool_limits(limits=n)


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(args.command, args, parser)
        with _thread_limit():
            COMMANDS[args.command](values)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"pcad {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
