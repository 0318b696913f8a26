"""Experiment recipes shared by the command line and the acceptance suite."""

from __future__ import annotations

import copy
import csv
import io
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .config import ExperimentConfig, from_dict
from .data import PairedSample, derive_seed, generate_corpus, inject_noise
from .retrieval import evaluate_model
from .trainer import run_training


def make_corpora(cfg: ExperimentConfig, noise_rate: float | None = None) -> tuple[list[PairedSample], list[PairedSample]]:
    """Training corpus (noise applied) and a clean held-out split from an independent stream."""
    rate = cfg.corpus.noise_rate if noise_rate is None else noise_rate
    train = generate_corpus(cfg.corpus)
    if rate > 0:
        train = inject_noise(train, rate, derive_seed(cfg.seed, "noise"))
    heldout = generate_corpus(cfg.corpus, cfg.eval.heldout_pairs, stream="heldout")
    return train, heldout


@dataclass(frozen=True)
class AblationRow:
    name: str
    w_inst: float
    w_cmvm: float
    w_cmlm: float
    w_task: float
    amf: bool


# The six configurations, in table order.
ABLATION_ROWS = (
    AblationRow("L_inst", 1, 0, 0, 0, False),
    AblationRow("L_inst + L_CMLM", 1, 0, 1, 0, False),
    AblationRow("L_inst + L_token", 1, 1, 1, 0, False),
    AblationRow("L_inst + L_token + L_task", 1, 1, 1, 1, False),
    AblationRow("L_inst (w/ AMF)", 1, 0, 0, 0, True),
    AblationRow("Full COTS", 1, 1, 1, 1, True),
)
ROWS_BY_NAME = {r.name: r for r in ABLATION_ROWS}


def configure_row(
    cfg: ExperimentConfig, row: AblationRow, seed: int, noise_rate: float, epochs: int | None = None
) -> ExperimentConfig:
    """Copy of ``cfg`` set up for one ablation cell; ``epochs=None`` keeps ``cfg.train.epochs``."""
    out = copy.deepcopy(cfg)
    out.seed = seed
    out.corpus.noise_rate = noise_rate
    if epochs is not None:
        out.train.epochs = epochs
    t = out.train
    t.w_inst, t.w_cmvm, t.w_cmlm, t.w_task, t.amf_enabled = row.w_inst, row.w_cmvm, row.w_cmlm, row.w_task, row.amf
    return out.resolve()


@dataclass
class CellResult:
    """One (row, seed) training run evaluated on the held-out split."""

    row: str
    seed: int
    i2t: dict[int, float]
    t2i: dict[int, float]
    i2t_median_rank: float
    t2i_median_rank: float
    dropped_per_epoch: list[int] = field(default_factory=list)
    noisy_dropped_per_epoch: list[int] = field(default_factory=list)
    noise_rate: float = 0.0
    skipped_steps: int = 0

    def noise_fraction_after_first_epoch(self) -> float | None:
        """Share of planted mismatches among samples dropped in epochs 2..E (None if nothing dropped)."""
        dropped = sum(self.dropped_per_epoch[1:])
        if dropped == 0:
            return None
        return sum(self.noisy_dropped_per_epoch[1:]) / dropped


def run_cell(cfg: ExperimentConfig, out_dir=None) -> CellResult:
    """Train with ``cfg`` on its own corpus and evaluate I2T/T2I on the held-out split."""
    train, heldout = make_corpora(cfg)
    res = run_training(cfg.train, train, cfg.model, out_dir)
    reports = evaluate_model(res.trainer.model, heldout, cfg.eval.ks)
    t = cfg.train
    name = next(
        (r.name for r in ABLATION_ROWS if (r.w_inst, r.w_cmvm, r.w_cmlm, r.w_task, r.amf)
         == (t.w_inst, t.w_cmvm, t.w_cmlm, t.w_task, t.amf_enabled)),
        "custom",
    )
    return CellResult(
        row=name,
        seed=cfg.seed,
        i2t=reports["I2T"].r_at,
        t2i=reports["T2I"].r_at,
        i2t_median_rank=reports["I2T"].median_rank,
        t2i_median_rank=reports["T2I"].median_rank,
        dropped_per_epoch=[len(d) for d in res.dropped],
        noisy_dropped_per_epoch=[sum(train[i].is_noise for i in d) for d in res.dropped],
        noise_rate=cfg.corpus.noise_rate,
        skipped_steps=res.skipped_steps,
    )


def _run_cell_from_dict(payload: tuple[dict, str | None]) -> CellResult:
    cfg_dict, out_dir = payload
    return run_cell(from_dict(cfg_dict).resolve(), out_dir)


@dataclass
class AblationResult:
    cells: list[CellResult]
    ks: Sequence[int]

    def rows(self) -> list[str]:
        seen = [c.row for c in self.cells]
        return [r.name for r in ABLATION_ROWS if r.name in seen]

    def median(self, row: str, direction: str, k: int) -> float:
        vals = [(c.i2t if direction == "I2T" else c.t2i)[k] for c in self.cells if c.row == row]
        return statistics.median(vals)

    def format(self) -> str:
        head = f"{'Method':<28}" + "".join(f"{d} R@{k:<3}" for d in ("I2T", "T2I") for k in self.ks)
        lines = [head]
        for row in self.rows():
            vals = [self.median(row, d, k) for d in ("I2T", "T2I") for k in self.ks]
            lines.append(f"{row:<28}" + "".join(f"{100 * v:>8.1f}" for v in vals))
        seeds = sorted({c.seed for c in self.cells})
        lines.append(f"(median over seeds {seeds}; R@k in percent)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "seed"] + [f"{d}_R@{k}" for d in ("I2T", "T2I") for k in self.ks])
        for c in self.cells:
            w.writerow([c.row, c.seed] + [repr(c.i2t[k]) for k in self.ks] + [repr(c.t2i[k]) for k in self.ks])
        return buf.getvalue()

    def to_json(self) -> str:
        cells = []
        for c in self.cells:
            d = asdict(c)
            d["i2t"] = {str(k): v for k, v in c.i2t.items()}
            d["t2i"] = {str(k): v for k, v in c.t2i.items()}
            cells.append(d)
        medians = {
            row: {f"{d}_R@{k}": self.median(row, d, k) for d in ("I2T", "T2I") for k in self.ks} for row in self.rows()
        }
        return json.dumps({"cells": cells, "medians": medians}, indent=2, sort_keys=True)


def run_ablation(
    cfg: ExperimentConfig,
    rows: Sequence[AblationRow] = ABLATION_ROWS,
    seeds: Sequence[int] | None = None,
    workers: int | None = None,
    out_dir=None,
) -> AblationResult:
    """Train every (row, seed) combination on the noisy corpus; seeds are shared across rows.

    Cells train for ``cfg.ablation.epochs`` epochs rather than ``cfg.train.epochs``.

    With ``workers > 1`` the cells run in separate processes, each writing into
    its own ``<out_dir>/<row>/seed<k>`` directory.
    """
    seeds = list(cfg.ablation.seeds if seeds is None else seeds)
    workers = cfg.ablation.workers if workers is None else workers
    jobs = []
    for row in rows:
        for seed in seeds:
            cell_cfg = configure_row(cfg, row, seed, cfg.ablation.noise_rate, cfg.ablation.epochs)
            cell_dir = None
            if out_dir is not None:
                slug = row.name.replace(" ", "").replace("(", "_").replace(")", "").replace("/", "").replace("+", "_")
                cell_dir = str(Path(out_dir) / slug / f"seed{seed}")
            jobs.append((cell_cfg.to_dict(), cell_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell_from_dict, jobs))
    else:
        cells = [_run_cell_from_dict(j) for j in jobs]
    return AblationResult(cells, list(cfg.eval.ks))
