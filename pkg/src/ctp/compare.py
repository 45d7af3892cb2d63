"""Train every loss variant on identical data and seeds and tabulate accuracy."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .dataset import SynthConfig, generate_synthetic
from .losses import LOSS_TAGS
from .training import TrainConfig, train
from .zeroshot import MODE_TITLES, MODES, evaluate_modes

ROW_NAMES = {"ctp_mask": "CTP", "ctp_nm": "CTP-nm", "ctp_cosine": "CTP (cosine)", "pairwise": "Pairwise"}


def run_comparison(synth: SynthConfig, base: TrainConfig, seeds=(0, 1, 2), losses=LOSS_TAGS,
                   callback=None) -> dict:
    """accuracies[loss][mode] -> list of per-seed micro accuracies (percent).

    Seed s generates the dataset with ``synth.seed + s`` and initializes the
    encoders with ``base.seed + s``; every loss sees the same pairs.
    """
    acc = {loss: {m: [] for m in MODES} for loss in losses}
    for s in seeds:
        data = generate_synthetic(replace(synth, seed=synth.seed + s))
        for loss in losses:
            cfg = replace(base, loss=loss, seed=base.seed + s,
                          coefficients=base.coefficients if loss == base.loss else None)
            ckpt, _ = train(cfg, data.train, data.classes)
            reports = evaluate_modes(ckpt, data.test, data.prototypes)
            for m in MODES:
                acc[loss][m].append(reports[m].avg_accuracy)
            if callback is not None:
                callback(loss, s, reports)
    return acc


def format_comparison(acc: dict) -> str:
    """Rows are loss variants, columns the three evaluation modes.

    Standard deviations are shown only when there is more than one seed.
    """
    n_seeds = len(next(iter(next(iter(acc.values())).values())))
    show_std = n_seeds > 1
    cell = 17 if show_std else 10
    head = f"{'Method':<14}" + "".join(f"{MODE_TITLES[m]:>{cell}}" for m in MODES)
    lines = [head, "-" * len(head)]
    for loss, by_mode in acc.items():
        row = f"{ROW_NAMES.get(loss, loss):<14}"
        for m in MODES:
            v = np.asarray(by_mode[m], dtype=np.float64)
            txt = f"{v.mean():.2f} ± {v.std(ddof=1):.2f}" if show_std else f"{v.mean():.2f}"
            row += f"{txt:>{cell}}"
        lines.append(row)
    lines.append(f"({n_seeds} seed{'s' if n_seeds != 1 else ''})")
    return "\n".join(lines)


def summarize(acc: dict) -> dict:
    out = {}
    for loss, by_mode in acc.items():
        out[loss] = {}
        for m, vals in by_mode.items():
            v = np.asarray(vals, dtype=np.float64)
            entry = {"mean": float(v.mean()), "values": [float(x) for x in v]}
            if v.size > 1:
                entry["std"] = float(v.std(ddof=1))
            out[loss][m] = entry
    return out
