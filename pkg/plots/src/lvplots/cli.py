"""Console entry points: `plot_<kind> <input> <out.png>`."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass

from . import figures, readers
from .readers import PlotSchemaError

KINDS = ("theory-curves", "scatter", "heatmap", "hmm-graph")


@dataclass(frozen=True)
class FigureSpec:
    input_path: str
    kind: str
    output_path: str
    xlabel: str = ""
    ylabel: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotSchemaError(f"unknown figure kind {self.kind!r}")


def render(spec: FigureSpec) -> str:
    """Read the input file, build the figure, write the image."""
    if spec.kind == "theory-curves":
        fig = figures.theory_figure(readers.read_theory_csv(spec.input_path))
    elif spec.kind == "scatter":
        fig = figures.summary_figure(readers.read_metrics_csv(spec.input_path))
    elif spec.kind == "heatmap":
        ids, matrix = readers.read_crossdecode_csv(spec.input_path)
        fig = figures.heatmap_figure(ids, matrix)
    else:
        nodes, edges = readers.read_dot(spec.input_path)
        fig = figures.hmm_graph_figure(nodes, edges)
    if spec.xlabel or spec.ylabel:
        ax = fig.axes[0]
        if spec.xlabel:
            ax.set_xlabel(spec.xlabel)
        if spec.ylabel:
            ax.set_ylabel(spec.ylabel)
    fig.savefig(spec.output_path, dpi=150)
    return spec.output_path


def _main(kind: str, prog: str, argv) -> int:
    parser = argparse.ArgumentParser(prog=prog)
    parser.add_argument("input")
    parser.add_argument("output")
    parser.add_argument("--xlabel", default="")
    parser.add_argument("--ylabel", default="")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        render(FigureSpec(input_path=args.input, kind=kind, output_path=args.output,
                          xlabel=args.xlabel, ylabel=args.ylabel))
        return 0
    except PlotSchemaError as exc:
        print(f"{prog}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{prog}: {exc}", file=sys.stderr)
        return 1


def main_theory(argv=None) -> int:
    return _main("theory-curves", "plot_theory", argv)


def main_summary(argv=None) -> int:
    return _main("scatter", "plot_summary", argv)


def main_heatmap(argv=None) -> int:
    return _main("heatmap", "plot_heatmap", argv)


def main_hmm_graph(argv=None) -> int:
    return _main("hmm-graph", "plot_hmm_graph", argv)


if __name__ == "__main__":
    sys.exit(main_theory())
