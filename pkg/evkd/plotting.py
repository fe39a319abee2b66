import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from evkd.events import render_event_image

CURVE_LABELS = {
    "success": ("Overlap threshold", "Success rate", "SR"),
    "precision": ("Location error threshold (px)", "Precision", "PR"),
    "norm_precision": ("Normalized location error threshold", "Normalized precision", "NPR"),
}


def plot_curve(curve, name, ax=None, label=None):
    if ax is None:
        fig, ax = plt.subplots()
    else:
        fig = ax.figure
    xlabel, ylabel, score_name = CURVE_LABELS[name]
    label = label or "tracker"
    ax.plot(curve.thresholds, curve.values, label=f"{label} [{score_name} {curve.score:.1f}]")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set(xlim=(curve.thresholds[0], curve.thresholds[-1]), ylim=(0, 1.02))
    ax.legend(loc="lower left" if name == "success" else "lower right")
    return fig, ax


def plot_curves(reports, labels=None):
    """Success, precision and normalized precision side by side for one or more reports."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    labels = labels or [f"tracker {i}" for i in range(len(reports))]
    fig, ax = plt.subplots(1, 3, figsize=(15, 4.5))
    for report, label in zip(reports, labels):
        for i, name in enumerate(CURVE_LABELS):
            plot_curve(report.curves[name], name, ax=ax[i], label=label)
    plt.tight_layout()
    return fig, ax


def plot_attribute_sr(breakdown):
    data = breakdown.dropna(subset=["SR"])
    fig, ax = plt.subplots()
    ax.bar(data["attribute"], data["SR"], color="tab:blue")
    for x, (sr, n) in enumerate(zip(data["SR"], data["n_videos"])):
        ax.text(x, sr + 1, f"{sr:.1f}\n({n})", ha="center", fontsize=7)
    ax.set_ylabel("SR")
    ax.set(ylim=(0, 100))
    plt.tight_layout()
    return fig, ax


def plot_event_frame(frame, ax=None):
    if ax is None:
        fig, ax = plt.subplots()
    else:
        fig = ax.figure
    ax.imshow(render_event_image(frame))
    ax.set_title(f"{frame.total} events in [{frame.window[0]:.0f}, {frame.window[1]:.0f}) us")
    ax.axis("off")
    return fig, ax


def plot_ttt_log(log):
    fig, ax = plt.subplots()
    ax.plot(log["epoch"], log["tracking_loss"], "o-", label="tracking")
    ax1 = ax.twinx()
    ax1.plot(log["epoch"], log["consistency_loss"], "s--", color="tab:orange", label="consistency")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Tracking loss")
    ax1.set_ylabel("Consistency loss")
    ax.set_xticks(np.asarray(log["epoch"]))
    fig.legend()
    plt.tight_layout()
    return fig, ax


def save_figure(fig, path):
    fig.savefig(path)
    plt.close(fig)
