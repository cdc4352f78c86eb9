"""Figure rendering for the report path: every plot goes to a PNG file.

Rendering is strictly file-based (Agg backend, no interactive windows) and
deterministic: fixed size, dpi, and metadata, so repeated runs with the same
config and seed produce byte-identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import FULL

_STAMP = {"Software": "sbmexit"}


def set_stamp(config_hash: str, seed: int) -> None:
    """Embed run provenance in every figure's PNG metadata."""
    _STAMP["Description"] = f"config={config_hash} seed={seed}"


def _new_axes(title: str):
    fig, ax = plt.subplots(figsize=(5.2, 4.2))
    ax.set_title(title, fontsize=10)
    return fig, ax


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130, metadata=dict(_STAMP))
    plt.close(fig)


def _domain_outline(ax, chain):
    theta = np.linspace(0.0, 2.0 * np.pi, 257)
    for k in list(range(1, chain.depth + 1)) + [FULL]:
        shape = chain.region(k)
        if hasattr(shape, "radius"):
            ax.plot(shape.cx + shape.radius * np.cos(theta),
                    shape.cy + shape.radius * np.sin(theta),
                    lw=0.6, color="0.4" if k != FULL else "k")
        else:
            xs = [shape.xmin, shape.xmax, shape.xmax, shape.xmin, shape.xmin]
            ys = [shape.ymin, shape.ymin, shape.ymax, shape.ymax, shape.ymin]
            ax.plot(xs, ys, lw=0.6, color="0.4" if k != FULL else "k")
    ax.set_aspect("equal")


def field_heatmap(field, chain, path, title="field"):
    x0, x1, y0, y1 = chain.shape.area_bbox()
    n = 220
    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y0, y1, n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    vals = field.interp(pts).reshape(n, n)
    inside = chain.shape.contains(pts).reshape(n, n)
    vals = np.where(inside, vals, np.nan)
    fig, ax = _new_axes(title)
    im = ax.imshow(vals.T, origin="lower", extent=(x0, x1, y0, y1),
                   cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85)
    _domain_outline(ax, chain)
    _finish(fig, path)


def exit_atoms(measures, chain, path, title="exit measures"):
    fig, ax = _new_axes(title)
    _domain_outline(ax, chain)
    cmap = plt.get_cmap("tab10")
    for i, em in enumerate(measures):
        if len(em.points) == 0:
            continue
        ax.scatter(em.points[:, 0], em.points[:, 1], s=6,
                   color=cmap(i % 10), label=f"boundary {em.k}", alpha=0.7)
    ax.legend(fontsize=7, loc="upper right")
    _finish(fig, path)


def tree_plot(tree, chain, path, title="backbone tree"):
    fig, ax = _new_axes(title)
    _domain_outline(ax, chain)
    cmap = plt.get_cmap("tab10")
    for node in tree.nodes:
        if node.points is None or len(node.points) < 2:
            continue
        ax.plot(node.points[:, 0], node.points[:, 1], lw=0.7,
                color=cmap(node.tag % 10))
        if node.terminal == "exited":
            ax.plot(node.points[-1, 0], node.points[-1, 1], "k.", ms=4)
    _finish(fig, path)


def gamma_hists(hists, labels, path, title="exit-line counts"):
    fig, ax = _new_axes(title)
    width = 0.8 / max(len(hists), 1)
    for i, (h, lab) in enumerate(zip(hists, labels)):
        h = np.asarray(h, dtype=float)
        h = h / max(h.sum(), 1.0)
        ax.bar(np.arange(len(h)) + i * width, h, width=width, label=lab)
    ax.set_xlabel("lines reaching the target boundary")
    ax.set_ylabel("frequency")
    ax.legend(fontsize=8)
    _finish(fig, path)


def estimate_vs_target(labels, means, ses, targets, path, n_se=3.0,
                       title="estimates vs deterministic values"):
    fig, ax = _new_axes(title)
    xs = np.arange(len(labels))
    ax.errorbar(xs, means, yerr=n_se * np.asarray(ses), fmt="o", capsize=4,
                label=f"MC +- {n_se:g} se")
    ax.plot(xs, targets, "k_", ms=18, label="deterministic")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, fontsize=8, rotation=20)
    ax.legend(fontsize=8)
    _finish(fig, path)


def annulus_trend(series, labels, path, title="branch events per region"):
    fig, ax = _new_axes(title)
    for (means, ses), lab in zip(series, labels):
        xs = np.arange(1, len(means) + 1)
        ax.errorbar(xs, means, yerr=np.asarray(ses), marker="o", ms=3,
                    capsize=3, label=lab)
    ax.set_xlabel("chain level")
    ax.set_ylabel("mean branch events")
    ax.legend(fontsize=8)
    _finish(fig, path)


def calibration_curve(curve, beta, target, path, title="branch-rate calibration"):
    fig, ax = _new_axes(title)
    bs = [b for b, _ in curve]
    gs = [g for _, g in curve]
    ax.plot(bs, gs, "o-", ms=4)
    ax.axhline(0.0, color="k", lw=0.7)
    ax.axvline(beta, color="r", lw=0.7, label=f"calibrated {beta:.3f}")
    ax.set_xlabel("branch-rate constant")
    ax.set_ylabel("exponent gap at the start point")
    ax.legend(fontsize=8)
    _finish(fig, path)
