"""Seeded repetitions over a fixed topology."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from ..graphgen import CsbmParams, TaskLayout, connectivity_index, make_layout, phi_index, sample_data
from .history import ExperimentSummary, TrainingHistory

STREAM_DATA = 1


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    params: CsbmParams
    per_client: int
    split: tuple[float, float, float]
    noise: str = "sqrt_p"
    topology_seed: int = 0

    def layout(self) -> TaskLayout:
        return make_layout(self.kind, self.params, self.per_client, self.split, np.random.default_rng(self.topology_seed))

    def echo(self) -> dict:
        out = asdict(self)
        prm = out.pop("params")
        out.update({f"csbm_{k}": v for k, v in prm.items()})
        out["split"] = "/".join(f"{v:g}" for v in self.split)
        return out


def data_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, STREAM_DATA]))


def layout_diagnostics(layout: TaskLayout, dataset=None) -> dict:
    """phi and the connectivity index of the labeled subgraph."""
    out = {"phi": phi_index(layout.params)}
    labeled = [k for k, s in enumerate(layout.row_splits) if np.any(s == 0)]
    sub = layout.graph.subgraph(labeled)
    out["connectivity_index"] = connectivity_index(sub) if sub.n and sub.is_connected() else float("nan")
    return out


def repeat_experiment(
    task: TaskSpec,
    cfg,
    seeds: Sequence[int],
    trainer: Callable | None = None,
    on_history: Callable[[int, TrainingHistory], None] | None = None,
) -> ExperimentSummary:
    """Train once per seed on fresh features over one fixed topology.

    ``cfg`` is a TrainingConfig; its seed is replaced by each entry of
    ``seeds``, which also drives the feature draw.
    """
    from ..fedruntime import run_training

    if not seeds:
        raise ValueError("repeat_experiment needs at least one seed")
    trainer = trainer or run_training
    layout = task.layout()
    accs = []
    for s in seeds:
        data = sample_data(layout, data_rng(s), task.noise)
        hist = trainer(cfg.replace(seed=s), layout.graph, data)
        if on_history is not None:
            on_history(s, hist)
        accs.append(hist.test_acc)
    echo = {**task.echo(), **cfg.echo(), **layout_diagnostics(layout)}
    echo.pop("seed", None)
    return ExperimentSummary(list(seeds), accs, echo)
