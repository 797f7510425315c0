"""Matplotlib report figures written alongside the delimited outputs."""

from __future__ import annotations

import math


def _plt():
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    return plt


def loss_curve_figure(runlog: list[dict], out_png) -> None:
    """Total and per-term loss curves over training steps."""
    plt = _plt()
    steps = [r["step"] for r in runlog]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["total"] for r in runlog], label="total", lw=1.5)
    ax.plot(steps, [r["l_bbox"] for r in runlog], label="bbox", lw=0.8)
    ax.plot(steps, [r["l_pos_conf"] for r in runlog], label="pos conf", lw=0.8)
    ax.plot(steps, [r["l_neg_conf"] for r in runlog], label="neg conf", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def gridsearch_figure(rows, out_png) -> None:
    """Final loss and matched IoU per learning rate."""
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    lrs = [r.lr for r in rows]
    losses = [r.final_loss if math.isfinite(r.final_loss) else 0.0 for r in rows]
    ious = [r.final_mean_iou if math.isfinite(r.final_mean_iou) else 0.0 for r in rows]
    labels = [f"{r.lr:g}\n({r.status})" for r in rows]
    xs = range(len(lrs))
    ax1.bar(xs, losses, color="#4878d0")
    ax1.set_xticks(list(xs), labels)
    ax1.set_ylabel("final loss")
    ax2.bar(xs, ious, color="#6acc64")
    ax2.set_xticks(list(xs), labels)
    ax2.set_ylabel("final mean matched IoU")
    ax2.set_ylim(0, 1)
    for ax in (ax1, ax2):
        ax.set_xlabel("learning rate")
    fig.suptitle("learning-rate grid search")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def eval_figure(report, out_png) -> None:
    """Bar summary of one evaluation report."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = ["precision", "recall", "mean IoU"]
    values = [report.precision, report.recall, report.mean_iou]
    ax.bar(names, values, color=["#4878d0", "#6acc64", "#d65f5f"])
    ax.set_ylim(0, 1)
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=9)
    ax.set_title(
        f"{report.n_matched}/{report.n_gt} gts matched, "
        f"{report.n_pred} predictions, conf>{report.conf_threshold:g}"
    )
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
