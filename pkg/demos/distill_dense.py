"""End-to-end dense-prediction run, small enough for a coffee break.

Trains three single-task teachers (segmentation, depth, normals), then two
students on the same budget: one distilled from the teachers through
adapters, one trained on raw labels alone. Prints the per-task metrics and
the aggregate gain of each student over the teachers.

    python3 demos/distill_dense.py --out demos_out/dense
"""
import argparse
from pathlib import Path

from unidistill.data import generate_dense_suite
from unidistill.losses import DistillationConfig, TermWeights
from unidistill.reporting import plot_loss_curves, render_mtl_report
from unidistill.trainer import RunConfig, evaluate_model, train_teachers, train_universal


def metric_block(results, tasks):
    return {
        tid: {
            "metric": tasks[tid].metric,
            "value": float(r.value),
            "lower_is_better": bool(r.lower_is_better),
        }
        for tid, r in results.items()
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demos_out/dense")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--images", type=int, default=120)
    ap.add_argument("--teacher-iterations", type=int, default=200)
    ap.add_argument("--iterations", type=int, default=300)
    args = ap.parse_args()
    out = Path(args.out)

    suite = generate_dense_suite(args.seed, args.images, 32)
    tasks = {t.id: t for t in suite.tasks}
    print(f"suite: {args.images} images, tasks {sorted(tasks)}")

    cfg = RunConfig(
        suite=suite,
        iterations=args.iterations,
        teacher_iterations=args.teacher_iterations,
        seed=args.seed,
        batch_size=16,
        channels=16,
        out_dir=out,
    )
    teachers = train_teachers(cfg)
    baseline = {}
    for tid, o in teachers.items():
        baseline.update(evaluate_model(o.model, suite, "test"))
        print(f"teacher {tid}: final loss {o.trace[-1]:.4f}")

    distilled = train_universal(cfg, teachers)
    print(f"distilled student: final objective {distilled.trace[-1]:.4f}")

    vanilla_cfg = RunConfig(
        suite=suite,
        iterations=args.iterations,
        teacher_iterations=args.teacher_iterations,
        seed=args.seed,
        batch_size=16,
        channels=16,
        distill=DistillationConfig(
            weights={t.id: TermWeights(task=1.0) for t in suite.tasks}
        ),
    )
    vanilla = train_universal(vanilla_cfg, teachers)
    print(f"vanilla student:   final objective {vanilla.trace[-1]:.4f}")

    doc = {
        "split": "test",
        "baseline": metric_block(baseline, tasks),
        "methods": {
            "distilled": metric_block(evaluate_model(distilled.model, suite, "test"), tasks),
            "vanilla": metric_block(evaluate_model(vanilla.model, suite, "test"), tasks),
        },
    }
    print()
    print(render_mtl_report(doc, out / "report"))
    plot_loss_curves(out / "universal" / "log.jsonl", out / "report" / "distilled_loss.png")
    print(f"artifacts under {out / 'report'}")


if __name__ == "__main__":
    main()
