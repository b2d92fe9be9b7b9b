"""Report figures rendered to files with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_series(path, ts, values, ylabel, title, markers=(), hline=None):
    """Line plot of ``values`` against age, optional vertical markers at ``markers``."""
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.plot(ts, values, "-o", ms=3, lw=1.2)
    for m in markers:
        ax.axvline(m, color="0.6", lw=0.8, ls=":")
    if hline is not None:
        ax.axhline(hline, color="tab:red", lw=0.8, ls="--")
    ax.set_xlabel("age")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_slices(path, images, titles):
    """Row of middle z slices, one panel per image."""
    fig, axes = plt.subplots(1, len(images), figsize=(2.2 * len(images), 2.4), dpi=100,
                             squeeze=False)
    for ax, img, title in zip(axes[0], images, titles):
        z = img.data.shape[2] // 2
        ax.imshow(img.data[:, :, z].T, cmap="gray", origin="lower")
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
