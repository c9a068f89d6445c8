#!/usr/bin/env python3
"""Render koopman-rff CSV exports as figures.

Four plot kinds, one per export format of the main package:

  heatmap       eigenfunction-field CSV (x0,x1,re_psi_J,im_psi_J,...)
  scatter       trajectory CSV (t,particle_id,x0,x1), particles at one time
                colored by their initial x0
  trajectories  trajectory CSVs: truth plus any number of --overlay
                reconstructions, drawn per particle in the x0-x1 plane
  error_bars    eigenfunction-error CSV (dictionary,eigen_index,...,e_f,...)

The tool is read-only over its inputs and does no numerics beyond axis
scaling; schema violations exit nonzero naming the missing column.

    python plots/render.py --kind heatmap --in field.csv --out fig.png
"""

import argparse
import os
import sys

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


class SchemaError(Exception):
    pass


def read_table(path):
    """CSV with a header row -> (column names, float matrix)."""
    with open(path) as fh:
        header = fh.readline().strip()
    if not header:
        raise SchemaError(f"{path}: empty file")
    names = header.split(",")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2,
                          dtype=str if "dictionary" in names else float)
    except ValueError as exc:
        raise SchemaError(f"{path}: no data rows ({exc})") from exc
    if data.size and data.shape[1] != len(names):
        raise SchemaError(f"{path}: {data.shape[1]} columns, header names {len(names)}")
    return names, data


def require(names, needed, path):
    missing = [c for c in needed if c not in names]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")


def column(names, data, name):
    return data[:, names.index(name)]


# ---------------------------------------------------------------------------
# plot kinds
# ---------------------------------------------------------------------------

def render_heatmap(args):
    names, data = read_table(args.infile)
    re_col = f"re_psi_{args.mode}"
    require(names, ["x0", "x1", re_col], args.infile)
    x0 = column(names, data, "x0")
    x1 = column(names, data, "x1")
    z = column(names, data, re_col)
    xs = np.unique(x0)
    ys = np.unique(x1)
    if len(xs) * len(ys) != len(z):
        raise SchemaError(f"{args.infile}: rows do not form a full "
                          f"{len(xs)}x{len(ys)} grid")
    # exported grids are row-major with x0 fastest
    Z = z.reshape(len(ys), len(xs))

    fig, ax = plt.subplots(figsize=(7, 4))
    vmax = np.abs(Z).max() or 1.0
    mesh = ax.pcolormesh(xs, ys, Z, cmap="RdBu_r", vmin=-vmax, vmax=vmax,
                         shading="nearest")
    fig.colorbar(mesh, ax=ax, label=f"Re psi_{args.mode}")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(args.title or f"eigenfunction {args.mode}")
    return fig


def load_trajectories(path):
    names, data = read_table(path)
    require(names, ["t", "particle_id", "x0", "x1"], path)
    if data.shape[0] == 0:
        raise SchemaError(f"{path}: no trajectory rows")
    return (column(names, data, "t"), column(names, data, "particle_id").astype(int),
            column(names, data, "x0"), column(names, data, "x1"))


def render_scatter(args):
    t, pid, x0, x1 = load_trajectories(args.infile)
    times = np.unique(t)
    when = times[-1] if args.time is None else times[np.argmin(np.abs(times - args.time))]
    first = t == times[0]
    order = np.argsort(pid[first])
    initial_x = x0[first][order]
    now = t == when
    order_now = np.argsort(pid[now])

    fig, ax = plt.subplots(figsize=(7, 4))
    sc = ax.scatter(x0[now][order_now], x1[now][order_now], c=initial_x,
                    cmap="viridis", s=6, linewidths=0)
    fig.colorbar(sc, ax=ax, label="initial x")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(args.title or f"particles at t = {when:g}")
    return fig


def render_trajectories(args):
    fig, ax = plt.subplots(figsize=(7, 4))
    t, pid, x0, x1 = load_trajectories(args.infile)
    for p in np.unique(pid):
        sel = pid == p
        ax.plot(x0[sel], x1[sel], "-", color="black", lw=1.5,
                label="truth" if p == pid.min() else None)
    styles = ["--", "-.", ":"]
    colors = ["tab:red", "tab:blue", "tab:green", "tab:orange"]
    for i, overlay in enumerate(args.overlay or []):
        label = os.path.splitext(os.path.basename(overlay))[0]
        t, pid, x0, x1 = load_trajectories(overlay)
        for p in np.unique(pid):
            sel = pid == p
            ax.plot(x0[sel], x1[sel], styles[i % len(styles)],
                    color=colors[i % len(colors)], lw=1.0,
                    label=label if p == pid.min() else None)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(loc="best", fontsize=8)
    ax.set_title(args.title or "trajectories: truth vs reconstruction")
    return fig


def render_error_bars(args):
    names, data = read_table(args.infile)
    require(names, ["dictionary", "eigen_index", "e_f"], args.infile)
    if data.shape[0] == 0:
        raise SchemaError(f"{args.infile}: no error rows")
    dicts = column(names, data, "dictionary")
    index = column(names, data, "eigen_index").astype(float).astype(int)
    e_f = column(names, data, "e_f").astype(float)

    fig, ax = plt.subplots(figsize=(7, 4))
    labels = list(dict.fromkeys(dicts))
    width = 0.8 / len(labels)
    for i, label in enumerate(labels):
        sel = dicts == label
        ax.bar(index[sel] + i * width, e_f[sel], width=width, label=label)
    ax.set_xlabel("eigenfunction index")
    ax.set_ylabel("invariance error")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title(args.title or "eigenfunction approximation error")
    return fig


RENDERERS = {
    "heatmap": render_heatmap,
    "scatter": render_scatter,
    "trajectories": render_trajectories,
    "error_bars": render_error_bars,
}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--kind", required=True, choices=sorted(RENDERERS))
    parser.add_argument("--in", dest="infile", required=True, help="input CSV")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--title", default=None)
    parser.add_argument("--mode", type=int, default=1,
                        help="heatmap: which psi column to draw")
    parser.add_argument("--time", type=float, default=None,
                        help="scatter: snapshot time (default: last)")
    parser.add_argument("--overlay", action="append", default=None,
                        help="trajectories: reconstruction CSV (repeatable)")
    args = parser.parse_args(argv)

    try:
        fig = RENDERERS[args.kind](args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    fig.savefig(args.out, dpi=150, bbox_inches="tight")
    plt.close(fig)
    print(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
