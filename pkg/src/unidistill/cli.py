"""Command-line entry point: the pipeline as composable, idempotent stages.

    unidistill gen-data        --out runs/a
    unidistill train-teachers  --out runs/a --jobs 3
    unidistill train-universal --out runs/a
    unidistill train-groups    --out runs/a
    unidistill eval-mtl        --out runs/a
    unidistill eval-fewshot    --out runs/a
    unidistill eval-retrieval  --out runs/a
    unidistill report          --out runs/a

Each command materializes its config (defaults <- file <- flags), snapshots
it into the run directory, and fails with a named-stage error when an
upstream artifact is missing. Exit code 0 means the command's post-conditions
hold; otherwise a machine-readable error line goes to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as cfgmod
from . import reporting, trainer
from .data import export_suite, load_suite, suite_digest, unseen_domains
from .errors import ConfigurationError, DependencyError, UnidistillError
from .fewshot import evaluate_episodes, recall_at_k
from .trainer import TaskGroup, TrainOutcome

OUT_ENV = "UNIDISTILL_OUT"

_EXIT_CODES = {
    "config": 2,
    "iteration": 2,
    "sampling": 2,
    "dependency": 3,
    "numerical": 4,
    "integrity": 5,
    "shape": 6,
}


def _run_dir(args, cfg: dict) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV, "runs")
    return Path(root) / f"run-s{cfg['seed']}"


def _materialize(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfgmod.load_config(args.config, overrides)
    run = _run_dir(args, cfg)
    return cfg, run


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing artifact {path}; run `{stage}` first")
    return path


def _load_run_suite(run: Path):
    return load_suite(_need(run / "suite" / "manifest.json", "gen-data").parent)


def _load_teachers(run: Path, suite) -> dict:
    teachers = {}
    for t in suite.tasks:
        path = _need(run / "teachers" / t.id / "checkpoint", "train-teachers")
        teachers[t.id] = ckpt.load_model(path)
    return teachers


def _expected_checksums(run: Path) -> dict:
    path = _need(run / "teachers" / "checksums.json", "train-teachers")
    return {k: int(v) for k, v in json.loads(path.read_text()).items()}


def _encode_features(encoder, images: np.ndarray, batch: int = 128) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            x = torch.as_tensor(images[i : i + batch], dtype=torch.float32)
            outs.append(encoder(x).numpy())
    return np.concatenate(outs, axis=0)


def _metric_block(results: dict, tasks: dict) -> dict:
    return {
        tid: {
            "metric": tasks[tid].metric,
            "value": float(r.value),
            "lower_is_better": bool(r.lower_is_better),
        }
        for tid, r in results.items()
    }


# --------------------------------------------------------------------------
# parallel sub-job workers (module level so they pickle)
# --------------------------------------------------------------------------


def _worker_setup(run_dir: str):
    torch.set_num_threads(1)
    run = Path(run_dir)
    cfg = cfgmod.load_config(run / "config.json")
    suite = load_suite(run / "suite")
    rc = cfgmod.build_run_config(cfg, suite, out_dir=run)
    return cfg, suite, rc


def _teacher_worker(run_dir: str, task_id: str):
    _, _, rc = _worker_setup(run_dir)
    outcome = trainer.train_single_teacher(rc, task_id)
    return task_id, outcome.extras["checksum"]


def _group_worker(run_dir: str, gid: str, members: list) -> str:
    _, suite, rc = _worker_setup(run_dir)
    teachers = _load_teachers(Path(run_dir), suite)
    trainer.verify_teachers(teachers, _expected_checksums(Path(run_dir)))
    trainer.train_group(rc, teachers, TaskGroup(gid, list(members)))
    return gid


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg, run = _materialize(args)
    suite = cfgmod.build_suite(cfg)
    cfgmod.snapshot(cfg, run)
    out = run / "suite"
    export_suite(suite, out)
    print(f"suite: {out}  mode={suite.mode}  tasks={len(suite.tasks)}")
    print(f"digest: {suite_digest(suite)}")
    return 0


def cmd_train_teachers(args) -> int:
    cfg, run = _materialize(args)
    suite = _load_run_suite(run)
    cfgmod.snapshot(cfg, run)
    rc = cfgmod.build_run_config(cfg, suite, out_dir=run)

    if args.jobs and args.jobs > 1:
        checksums = {}
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(_teacher_worker, str(run), t.id) for t in suite.tasks
            ]
            for fut in futures:
                tid, checksum = fut.result()
                checksums[tid] = checksum
        (run / "teachers").mkdir(parents=True, exist_ok=True)
        (run / "teachers" / "checksums.json").write_text(
            json.dumps({k: checksums[k] for k in sorted(checksums)}, indent=2)
        )
    else:
        outcomes = trainer.train_teachers(rc)
        checksums = {tid: o.extras["checksum"] for tid, o in outcomes.items()}
    for tid in sorted(checksums):
        print(f"teacher {tid}: checksum={checksums[tid]}")
    return 0


def cmd_train_universal(args) -> int:
    cfg, run = _materialize(args)
    suite = _load_run_suite(run)
    cfgmod.snapshot(cfg, run)
    rc = cfgmod.build_run_config(cfg, suite, out_dir=run)
    teachers = _load_teachers(run, suite)
    trainer.verify_teachers(teachers, _expected_checksums(run))

    resume = None
    state = run / "universal" / "train_state.pt"
    if args.resume:
        resume = _need(state, "train-universal")
    outcome = trainer.train_universal(rc, teachers, resume_from=resume)
    print(f"universal: {outcome.out_dir}  final loss={outcome.trace[-1]:.6f}")
    return 0


def cmd_train_groups(args) -> int:
    cfg, run = _materialize(args)
    suite = _load_run_suite(run)
    cfgmod.snapshot(cfg, run)
    rc = cfgmod.build_run_config(cfg, suite, out_dir=run)
    teachers = _load_teachers(run, suite)
    trainer.verify_teachers(teachers, _expected_checksums(run))

    groups = trainer.plan_groups(
        suite.task_ids, cfg["groups"]["n_groups"], cfg["seed"], cfg["groups"]["anchor"]
    )
    (run / "groups").mkdir(parents=True, exist_ok=True)
    (run / "groups" / "plan.json").write_text(
        json.dumps({g.id: list(g.members) for g in groups}, indent=2, sort_keys=True)
    )

    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(_group_worker, str(run), g.id, list(g.members))
                for g in groups
            ]
            for fut in futures:
                fut.result()
        # assemble the trained group models into per-task teacher views
        views = {}
        for g in groups:
            model = ckpt.load_model(run / "groups" / g.id / "checkpoints" / "final")
            outcome = TrainOutcome(model=model, trace=[])
            views.update(
                trainer.group_teacher_views(outcome, [suite.task(t) for t in g.members])
            )
        final = trainer.train_final_from_views(rc, views)
    else:
        final = trainer.train_grouped(rc, teachers, groups)
    print(f"groups: {[list(g.members) for g in groups]}")
    print(f"final: {final.out_dir}  final loss={final.trace[-1]:.6f}")
    return 0


def cmd_eval_mtl(args) -> int:
    cfg, run = _materialize(args)
    suite = _load_run_suite(run)
    split = cfg["eval"]["split"]
    tasks = {t.id: t for t in suite.tasks}

    teachers = _load_teachers(run, suite)
    baseline = {}
    for tid, model in teachers.items():
        baseline.update(trainer.evaluate_model(model, suite, split))

    methods = {}
    uni_path = run / "universal" / "checkpoints" / "final"
    if not uni_path.exists() and not (run / "groups_final").exists():
        raise DependencyError(
            f"missing artifact {uni_path}; run `train-universal` (or `train-groups`) first"
        )
    if uni_path.exists():
        methods["universal"] = trainer.evaluate_model(ckpt.load_model(uni_path), suite, split)
    grp_path = run / "groups_final" / "checkpoints" / "final"
    if grp_path.exists():
        methods["grouped"] = trainer.evaluate_model(ckpt.load_model(grp_path), suite, split)

    doc = {
        "split": split,
        "baseline": _metric_block(baseline, tasks),
        "methods": {name: _metric_block(res, tasks) for name, res in methods.items()},
    }
    out = run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "mtl.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(reporting.render_mtl_report(doc))
    return 0


def cmd_eval_fewshot(args) -> int:
    cfg, run = _materialize(args)
    suite = _load_run_suite(run)
    if suite.mode != "mdl":
        raise ConfigurationError("few-shot evaluation needs a multi-domain suite")
    model = ckpt.load_model(_need(run / "universal" / "checkpoints" / "final", "train-universal"))
    e = cfg["eval"]
    domains = e["fewshot_domains"] or unseen_domains(suite)
    if not domains:
        raise ConfigurationError("no held-out domain to evaluate")

    doc = {}
    for domain in domains:
        r = evaluate_episodes(
            lambda imgs: _encode_features(model.encoder, imgs),
            suite,
            domain,
            e["ways"],
            e["shots"],
            e["query_per_class"],
            e["episodes"],
            cfg["seed"],
            adapt_steps=e["adapt_steps"],
            adapt_lr=e["adapt_lr"],
            temperature=e["temperature"],
            optimizer=e["adapt_optimizer"],
        )
        doc[domain] = r
    out = run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "fewshot.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(reporting.render_fewshot_report(doc))
    return 0


def cmd_eval_retrieval(args) -> int:
    cfg, run = _materialize(args)
    suite = _load_run_suite(run)
    if suite.mode != "mdl":
        raise ConfigurationError("retrieval evaluation needs a multi-domain suite")
    model = ckpt.load_model(_need(run / "universal" / "checkpoints" / "final", "train-universal"))
    split = cfg["eval"]["split"]
    samples = suite.splits.get(split, [])
    if not samples:
        raise ConfigurationError(f"split {split!r} is empty")
    images = np.stack([s.image for s in samples])
    # one global label per sample: class ids are disjoint across domains
    labels = np.asarray([int(next(iter(s.labels.values()))) for s in samples])
    feats = _encode_features(model.encoder, images)
    ks = cfg["eval"]["recall_ks"]
    rec = recall_at_k(feats, labels, ks)

    doc = {
        "split": split,
        "n": int(labels.size),
        "ks": [int(k) for k in ks],
        "recall": {str(k): v for k, v in rec.items()},
    }
    out = run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "retrieval.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(reporting.render_retrieval_report(doc))
    return 0


def cmd_report(args) -> int:
    if args.results:
        doc = json.loads(Path(args.results).read_text())
        out_dir = Path(args.out) / "report" if args.out else None
        print(reporting.render_mtl_report(doc, out_dir))
        return 0

    cfg, run = _materialize(args)
    report_dir = run / "report"
    rendered = False

    mtl_path = run / "eval" / "mtl.json"
    if mtl_path.exists():
        doc = json.loads(mtl_path.read_text())
        print(reporting.render_mtl_report(doc, report_dir))
        print()
        rendered = True
    fs_path = run / "eval" / "fewshot.json"
    if fs_path.exists():
        print(reporting.render_fewshot_report(json.loads(fs_path.read_text()), report_dir))
        print()
        rendered = True
    rt_path = run / "eval" / "retrieval.json"
    if rt_path.exists():
        print(reporting.render_retrieval_report(json.loads(rt_path.read_text()), report_dir))
        print()
        rendered = True

    for name in ("universal", "groups_final"):
        log = run / name / "log.jsonl"
        if log.exists():
            reporting.plot_loss_curves(log, report_dir / f"{name}_loss.png")
            rendered = True

    if not rendered:
        raise DependencyError(
            f"nothing to report under {run}; run an eval-* command first"
        )
    print(f"report: {report_dir}")
    return 0


# --------------------------------------------------------------------------
# argument plumbing
# --------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, jobs: bool = False):
    p.add_argument("--config", default=None, help="YAML or JSON config file")
    p.add_argument("--out", default=None, help=f"run directory (default ${OUT_ENV}/run-s<seed>)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="parallel sub-jobs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unidistill",
        description="Distill task- and domain-specific networks into one universal model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and export a dataset suite")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-teachers", help="fit one frozen teacher per task")
    _add_common(p, jobs=True)
    p.set_defaults(fn=cmd_train_teachers)

    p = sub.add_parser("train-universal", help="distill all teachers into one student")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from train_state.pt")
    p.set_defaults(fn=cmd_train_universal)

    p = sub.add_parser("train-groups", help="two-round grouped distillation")
    _add_common(p, jobs=True)
    p.set_defaults(fn=cmd_train_groups)

    p = sub.add_parser("eval-mtl", help="per-task metrics and multi-task gain")
    _add_common(p)
    p.set_defaults(fn=cmd_eval_mtl)

    p = sub.add_parser("eval-fewshot", help="episodic evaluation on held-out domains")
    _add_common(p)
    p.set_defaults(fn=cmd_eval_fewshot)

    p = sub.add_parser("eval-retrieval", help="nearest-neighbor recall on frozen features")
    _add_common(p)
    p.set_defaults(fn=cmd_eval_retrieval)

    p = sub.add_parser("report", help="render logs and results into tables and plots")
    _add_common(p)
    p.add_argument("--results", default=None, help="render a results JSON instead of a run dir")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.fn(args)
    except UnidistillError as e:
        line = {"error": {"category": e.category, "message": str(e)}}
        print(json.dumps(line), file=sys.stderr)
        return _EXIT_CODES.get(e.category, 1)
    except NotImplementedError as e:
        print(json.dumps({"error": {"category": "unimplemented", "message": str(e)}}),
              file=sys.stderr)
        return 2
    except ZeroDivisionError as e:
        print(json.dumps({"error": {"category": "numerical", "message": str(e)}}),
              file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
