"""Figures written next to the CSV/JSON reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (8, 3.2)
RC = {"font.size": 9, "axes.grid": True, "grid.alpha": 0.3}


def plot_training_curves(records, path):
    """Loss (train/val) and validation error curves, one point per epoch."""
    with plt.rc_context(RC):
        fig, (ax_loss, ax_err) = plt.subplots(1, 2, figsize=FIGSIZE)
        epochs = [r.epoch for r in records]
        ax_loss.plot(epochs, [r.train_loss for r in records], "o-", label="train")
        ax_loss.plot(epochs, [r.val_loss for r in records], "s-", label="val")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("cross-entropy")
        ax_loss.legend()
        ax_err.plot(epochs, [100 * r.top1_err for r in records], "o-", label="top-1")
        ax_err.plot(epochs, [100 * r.top5_err for r in records], "s-", label="top-5")
        ax_err.set_xlabel("epoch")
        ax_err.set_ylabel("val error (%)")
        ax_err.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def plot_model_summary(rows, path, title=None):
    """Side-by-side bars of per-stage parameters and FLOPs.

    ``rows`` is a list of ``(name, params, flops)``.
    """
    names = [r[0] for r in rows]
    with plt.rc_context(RC):
        fig, (ax_p, ax_f) = plt.subplots(1, 2, figsize=FIGSIZE)
        ax_p.bar(names, [r[1] / 1e3 for r in rows], color="tab:blue")
        ax_p.set_ylabel("params (K)")
        ax_f.bar(names, [r[2] / 1e6 for r in rows], color="tab:orange")
        ax_f.set_ylabel("FLOPs (M)")
        for ax in (ax_p, ax_f):
            ax.tick_params(axis="x", labelrotation=45)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
