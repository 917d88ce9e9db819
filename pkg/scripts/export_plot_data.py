"""Simulate a small surface of each model and export plot-ready CSV files.

Usage: python3 scripts/export_plot_data.py [--out-dir plots] [--paths 2000]
"""
import argparse
from pathlib import Path

from dden.cli import run


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out-dir", default="plots")
    p.add_argument("--paths", type=int, default=2000)
    args = p.parse_args()
    base = Path(args.out_dir)
    common = ["--set", "grid.N=200", "--set", f"run.n_paths={args.paths}"]
    for model in ("hjm_mult", "cox", "constant", "hjm_add"):
        d = base / model
        surface = d / "surface.bin"
        extra = ["--set", "model.cox.m=8"] if model == "cox" else []
        if run(["simulate", *common, *extra, "--set", f"model.id={model}", "--out", str(surface)]):
            raise SystemExit(f"simulation of {model} failed")
        if run(["export", *common, "--surface", str(surface), "--out-dir", str(d)]):
            raise SystemExit(f"export of {model} failed")


if __name__ == "__main__":
    main()
