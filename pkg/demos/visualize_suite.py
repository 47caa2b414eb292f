"""Render a few samples from both synthetic suites.

Dense suite: one row per image with the RGB render, the segmentation map,
the depth map, and the normals encoded as RGB. Domains suite: one row per
domain showing a handful of class exemplars.

    python3 demos/visualize_suite.py --out demos_out/suite
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from unidistill.data import generate_dense_suite, generate_domain_suite


def show_dense(suite, out_dir: Path, rows: int = 4):
    samples = suite.splits["train"][:rows]
    fig, axes = plt.subplots(rows, 4, figsize=(9, 2.3 * rows))
    for r, s in enumerate(samples):
        axes[r, 0].imshow(np.transpose(s.image, (1, 2, 0)))
        axes[r, 1].imshow(s.labels["seg"], cmap="tab10", interpolation="nearest")
        axes[r, 2].imshow(np.squeeze(s.labels["depth"]), cmap="viridis")
        # map unit normals from [-1, 1] into RGB
        axes[r, 3].imshow(np.transpose((s.labels["normals"] + 1.0) / 2.0, (1, 2, 0)))
        for ax in axes[r]:
            ax.set_xticks([])
            ax.set_yticks([])
    for ax, title in zip(axes[0], ("image", "segmentation", "depth", "normals")):
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    path = out_dir / "dense_samples.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    print(f"wrote {path}")


def show_domains(suite, out_dir: Path, per_domain: int = 6):
    domains = sorted({d for s in suite.splits["train"] for d in s.labels})
    fig, axes = plt.subplots(len(domains), per_domain, figsize=(1.6 * per_domain, 1.7 * len(domains)))
    for r, d in enumerate(domains):
        rows = [s for s in suite.splits["train"] if d in s.labels][:per_domain]
        for c, s in enumerate(rows):
            axes[r, c].imshow(np.transpose(s.image, (1, 2, 0)))
            axes[r, c].set_xticks([])
            axes[r, c].set_yticks([])
            axes[r, c].set_xlabel(f"class {s.labels[d]}", fontsize=7)
        axes[r, 0].set_ylabel(d, fontsize=10)
    fig.tight_layout()
    path = out_dir / "domain_samples.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    print(f"wrote {path}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demos_out/suite")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    dense = generate_dense_suite(args.seed, 32, 32)
    print("dense tasks:", [t.id for t in dense.tasks])
    show_dense(dense, out_dir)

    domains = generate_domain_suite(args.seed, 3, 8, 12, hw=32)
    print("domain tasks:", [t.id for t in domains.tasks])
    show_domains(domains, out_dir)


if __name__ == "__main__":
    main()
