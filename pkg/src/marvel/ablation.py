"""Ablation grids: fusion strategy, caption/feature removal and module freezing,
each reported as Text/Image/Multi retrieval tables."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

from marvel.data import Query
from marvel.encoder import MarvelModel
from marvel.metrics import MetricReport
from marvel.retrieval import evaluate_by_modality
from marvel.text import Vocab
from marvel.training import TrainConfig, TrainData, train

logger = logging.getLogger(__name__)

MODALITIES = ("Text", "Image", "Multi")
METRICS = (("mrr10", "MRR@10"), ("ndcg10", "NDCG@10"))

GRIDS: dict[str, list[tuple[str, dict]]] = {
    "fusion": [
        ("plugin", {"fusion": "plugin"}),
        ("sum", {"fusion": "sum"}),
        ("concat", {"fusion": "concat"}),
    ],
    "caption": [
        ("full", {}),
        ("w/o caption", {"drop_caption": True}),
        ("w/o feature", {"drop_features": True}),
    ],
    "freeze": [
        ("train both", {"freeze": "both"}),
        ("train LM only", {"freeze": "lm"}),
        ("train vision only", {"freeze": "vision"}),
        ("train none", {"freeze": "none"}),
    ],
}


@dataclass
class Schedule:
    """Training phases run for every cell; ``pretrain`` is skipped when None."""
    dpr: TrainConfig
    ance: TrainConfig | None = None
    pretrain: TrainConfig | None = None


def desk_schedule(pretrain: bool = True) -> Schedule:
    """Settings that fit the synthetic corpus in well under a minute per cell."""
    dpr = TrainConfig(phase="finetune", stage="dpr", lr=3e-3, tau=0.1, max_steps=300, eval_every=25)
    ance = dataclasses.replace(dpr, stage="ance", lr=1e-3)
    pre = TrainConfig(phase="pretrain", lr=1e-3, tau=0.1, batch_size=16, max_steps=150, eval_every=25)
    return Schedule(dpr, ance, pre if pretrain else None)


@dataclass
class CellResult:
    label: str
    seed: int
    reports: dict[str, dict[str, MetricReport]]

    def value(self, modality: str, metric: str = "mrr10") -> float:
        return self.reports[modality][metric].mean


@dataclass
class AblationTable:
    grid: str
    cells: list[CellResult] = field(default_factory=list)

    def labels(self) -> list[str]:
        return list(dict.fromkeys(c.label for c in self.cells))

    def seeds(self) -> list[int]:
        return list(dict.fromkeys(c.seed for c in self.cells))

    def cell(self, label: str, seed: int) -> CellResult:
        return next(c for c in self.cells if c.label == label and c.seed == seed)

    def mean(self, label: str, modality: str, metric: str = "mrr10") -> float:
        vals = [c.value(modality, metric) for c in self.cells if c.label == label]
        return sum(vals) / len(vals)


class Harness:
    """Runs grid cells over seeds, sharing one pretraining run per seed."""

    def __init__(self, data: TrainData, vocab: Vocab, schedule: Schedule,
                 eval_queries: list[Query] | None = None, base: dict | None = None):
        self.data = data
        self.vocab = vocab
        self.schedule = schedule
        self.eval_queries = eval_queries if eval_queries is not None else data.dev_queries
        self.base = dict(base or {})
        self._pretrained: dict[int, dict] = {}
        self._done: dict[tuple, CellResult] = {}

    def _start(self, seed: int) -> MarvelModel:
        model = MarvelModel.create(self.vocab, seed)
        pre = self.schedule.pretrain
        if pre is None or not self.data.pairs:
            return model
        if seed not in self._pretrained:
            logger.info("pretraining seed %d", seed)
            train(model, self.data, dataclasses.replace(pre, seed=seed))
            self._pretrained[seed] = model.params.state()
        model.params.load_state(self._pretrained[seed])
        return model

    def run_cell(self, label: str, overrides: dict, seed: int) -> CellResult:
        settings = {**self.base, **overrides}
        key = (tuple(sorted(settings.items())), seed)
        if key in self._done:
            return dataclasses.replace(self._done[key], label=label)
        model = self._start(seed)
        cfg = None
        for phase in (self.schedule.dpr, self.schedule.ance):
            if phase is None:
                continue
            cfg = dataclasses.replace(phase, seed=seed, **settings)
            logger.info("cell %r seed %d stage %s", label, seed, cfg.stage)
            train(model, self.data, cfg)
        reports = evaluate_by_modality(model, self.eval_queries, self.data.corpus, self.data.qrels,
                                       cfg.fusion, cfg.ablation)
        result = CellResult(label, seed, reports)
        self._done[key] = result
        return result

    def run_grid(self, grid: str, seeds: list[int]) -> AblationTable:
        if grid not in GRIDS:
            raise ValueError(f"unknown grid {grid!r}; expected one of {sorted(GRIDS)}")
        table = AblationTable(grid)
        for seed in seeds:
            for label, overrides in GRIDS[grid]:
                table.cells.append(self.run_cell(label, overrides, seed))
        return table


def degrades_on_every_seed(table: AblationTable, worse: str, better: str, modality: str = "Image") -> bool:
    """True when ``worse`` scores strictly below ``better`` (MRR@10) on every seed."""
    return all(table.cell(worse, s).value(modality) < table.cell(better, s).value(modality)
               for s in table.seeds())


def format_table(table: AblationTable, fmt: str = "text") -> str:
    seeds = table.seeds()
    if fmt == "tsv":
        rows = ["grid\tcell\tseed\tmodality\tmetric\tvalue\n"]
        for c in table.cells:
            for m in MODALITIES:
                rows += [f"{table.grid}\t{c.label}\t{c.seed}\t{m}\t{name}\t{c.value(m, key):.6f}\n"
                         for key, name in METRICS]
        return "".join(rows)
    width = max(len(lab) for lab in table.labels()) + 2
    head = f"{'model':<{width}}{'seed':>6}" + "".join(f"{m + ' ' + name:>17}" for m in MODALITIES
                                                      for _, name in METRICS)
    out = [f"ablation: {table.grid}\n", head + "\n"]
    for c in table.cells:
        out.append(f"{c.label:<{width}}{c.seed:>6}" + "".join(f"{c.value(m, k):>17.4f}" for m in MODALITIES
                                                            for k, _ in METRICS) + "\n")
    if len(seeds) > 1:
        for lab in table.labels():
            out.append(f"{lab:<{width}}{'mean':>6}" + "".join(f"{table.mean(lab, m, k):>17.4f}" for m in MODALITIES
                                                              for k, _ in METRICS) + "\n")
    return "".join(out)


__all__ = [
    "AblationTable",
    "CellResult",
    "GRIDS",
    "Harness",
    "Schedule",
    "degrades_on_every_seed",
    "desk_schedule",
    "format_table",
]
