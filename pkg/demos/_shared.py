"""Shared driver for the demo scripts: oracle first, then an EINN run, then a comparison."""

import argparse
from pathlib import Path

import numpy as np

from einn import net, oracle
from einn.inverse import (compare_diagrams, detect_thresholds, diagram_csv, predict_branch, sample_candidates,
                          save_map, train)


def arguments(description, epochs=200_000):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--epochs", type=int, default=epochs, help=f"epoch cap (default {epochs}; the CLI uses 1e6)")
    p.add_argument("--samples", type=int, default=301)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="demo_output", help="directory for the map, diagram and sweep files")
    return p.parse_args()


def show(title, thresholds):
    print(title)
    for t in thresholds:
        print(f"  {t.kind:9s}  u* = {t.u_star:.5f}  lambda = {t.lam:.5f}")


def run(entry, args, lambda_grid, window=None):
    """Oracle sweep and thresholds, EINN training, then thresholds and diagram agreement."""
    spec = entry.spec
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    window = window or spec.candidate_window

    diagram = oracle.sweep(spec, lambda_grid)
    (out / f"{spec.id}.sweep.csv").write_text(diagram.to_csv())
    print(f"{spec.id}: equilibrium counts along {spec.bifurcation_param} follow {diagram.count_pattern()}")
    show("oracle thresholds", oracle.threshold_oracle(entry, window))

    grid = sample_candidates(window, args.samples, coordinate=spec.candidate_coordinate)
    m = train(spec, grid, net.TrainConfig(max_epochs=args.epochs, rng_seed=args.seed))
    save_map(m, out / f"{spec.id}.map.json")
    print(f"trained {m.epochs} epochs, best mse {m.final_mse:.3e} at epoch {m.best_epoch} ({m.stop_reason})")
    show("EINN thresholds", detect_thresholds(m).thresholds)

    lo, hi = window
    pad = 0.02 * (hi - lo)
    us = np.linspace(lo + pad, hi - pad, 500)
    pts = predict_branch(m, us)
    (out / f"{spec.id}.diagram.csv").write_text(diagram_csv(spec, pts))
    r = compare_diagrams(pts, oracle.closed_form_points(entry, us))
    print(f"EINN vs closed form on [{us[0]:.3f}, {us[-1]:.3f}]: max |d lambda| {r.max_abs:.2e}, "
          f"mean {r.mean_abs:.2e}")
    return m
