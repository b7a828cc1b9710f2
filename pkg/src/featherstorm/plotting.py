"""Figures rendered next to CSV reports and image dumps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keeps the PNG bytes free of version strings
_META = {"Software": None}


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def report_figure(report, path) -> None:
    """Grouped bars of ASR per variant, one bar per target."""
    variants = sorted({r.variant for r in report.rows})
    targets = sorted({r.target for r in report.rows})
    width = 0.8 / max(len(targets), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(variants) + 1), 3.2))
    xs = np.arange(len(variants))
    for k, t in enumerate(targets):
        vals = []
        for v in variants:
            try:
                vals.append(report.row(v, t).asr)
            except KeyError:
                vals.append(np.nan)
        star = "*" if any(r.white_box for r in report.rows if r.target == t) else ""
        ax.bar(xs + k * width - 0.4 + width / 2, vals, width, label=t + star)
    ax.set_xticks(xs)
    ax.set_xticklabels(variants, rotation=30, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("ASR")
    ax.set_title(f"surrogate {report.surrogate}, seed {report.seed}", fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def image_panel(panels, path, title: str = "") -> None:
    """``panels`` is a list of (caption, HxWxC array); high-band images are rescaled for display."""
    fig, axes = plt.subplots(1, len(panels), figsize=(1.8 * len(panels), 2.1), squeeze=False)
    for ax, (caption, img) in zip(axes[0], panels):
        img = np.asarray(img, dtype=np.float64)
        if img.min() < 0 or img.max() > 1:
            span = np.abs(img).max() or 1.0
            img = 0.5 + 0.5 * img / span
        ax.imshow(img[..., 0] if img.shape[-1] == 1 else img, cmap="gray" if img.shape[-1] == 1 else None,
                  vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(caption, fontsize=7)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
