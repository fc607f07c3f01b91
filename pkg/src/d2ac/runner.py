"""End-to-end runs: training with metrics and checkpoints, evaluation, ablation tables."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .engine import Agent, Trainer, coverage_metrics, evaluate, input_dim
from .envs import make_env
from .errors import ConfigError, D2ACError

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoint"
CELL_SEED_STRIDE = 10_000
COVERAGE_ENVS = ("point_mass_dense", "point_mass_goal", "predator_prey")


def _clean(value):
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


class MetricsSink:
    """Append-only JSON-lines file; each record is flushed as it is written."""

    def __init__(self, path: str | None):
        self.path = path
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        record = {k: _clean(v) for k, v in record.items()}
        if self.records and record["step"] < self.records[-1]["step"]:
            raise ValueError("metric steps must be non-decreasing")
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path: str) -> list[dict]:
    """Parse a metrics file, ignoring a truncated final line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return out


@dataclass
class TrainResult:
    status: int
    records: list[dict] = field(default_factory=list)
    env_steps: int = 0
    error: str | None = None

    @property
    def final(self) -> dict | None:
        evals = [r for r in self.records if "episode_return" in r]
        return evals[-1] if evals else None


def _eval_record(trainer: Trainer, cfg: RunConfig, index: int) -> dict:
    m = trainer.evaluate(cfg.eval_episodes, index)
    d = trainer.last_diag
    rec = {
        "step": trainer.env_steps,
        "episode_return": m.mean_return,
        "success_rate": m.success_rate,
        "survival_rate": m.survival_rate,
        "critic_loss": d.critic_loss if d else None,
        "actor_loss": d.actor_loss if d else None,
        "alpha": d.alpha if d else trainer.agent.actor.temperature.alpha,
        "mean_q": d.mean_q if d else None,
        "train_return": float(np.mean(trainer.recent_returns)) if trainer.recent_returns else None,
    }
    if cfg.env in COVERAGE_ENVS:
        cov = coverage_metrics(trainer.visit_grid, (1, 10))
        rec["visit_coverage"] = cov[1]
        rec["main_coverage"] = cov[10]
    return rec


def run_train(cfg: RunConfig, out_dir: str | None = None, resume: bool = False, echo=None) -> TrainResult:
    """Train per ``cfg``; with ``out_dir`` write metrics and checkpoints there.

    Returns status 0 on success and 1 after a numerical failure, in which
    case a final record with an ``error`` field is written.
    """
    cfg.validate()
    trainer = Trainer(cfg, cfg.env)
    sink = MetricsSink(None)
    evals = 0
    ckpt_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        sink = MetricsSink(os.path.join(out_dir, METRICS_FILE))
        ckpt_dir = os.path.join(out_dir, CHECKPOINT_DIR)
        if resume and os.path.exists(os.path.join(ckpt_dir, "manifest.txt")):
            meta = load_checkpoint(ckpt_dir, trainer.agent)
            trainer.env_steps = int(meta["env_steps"])
            evals = int(meta.get("evals", 0))
            trainer.reseed(trainer.env_steps)
        elif not resume:
            open(sink.path, "w", encoding="utf-8").close()

    def checkpoint():
        if ckpt_dir:
            save_checkpoint(ckpt_dir, trainer.agent,
                            {"env": cfg.env, "env_steps": trainer.env_steps, "evals": evals, "seed": cfg.seed})

    try:
        trainer.warmup()
        interval = cfg.eval_interval
        next_eval = (trainer.env_steps // interval + 1) * interval
        while trainer.env_steps < cfg.total_steps:
            trainer.run_round()
            if trainer.env_steps >= next_eval or trainer.env_steps >= cfg.total_steps:
                rec = _eval_record(trainer, cfg, evals)
                sink.write(rec)
                evals += 1
                if echo:
                    echo(rec)
                while next_eval <= trainer.env_steps:
                    next_eval += interval
                if evals % cfg.checkpoint_every == 0:
                    checkpoint()
    except (D2ACError, FloatingPointError) as exc:
        sink.write({"step": trainer.env_steps, "error": f"{type(exc).__name__}: {exc}"})
        return TrainResult(1, sink.records, trainer.env_steps, str(exc))
    checkpoint()
    return TrainResult(0, sink.records, trainer.env_steps)


def build_agent(cfg: RunConfig) -> Agent:
    spec = make_env(cfg.env, 0).spec
    return Agent(input_dim(spec), spec.action_dim, cfg, np.random.default_rng(cfg.seed))


def run_eval(cfg: RunConfig, checkpoint_dir: str, episodes: int | None = None) -> dict:
    agent = build_agent(cfg)
    load_checkpoint(checkpoint_dir, agent)
    rng = np.random.default_rng([cfg.seed, 7])
    m = evaluate(agent, make_env(cfg.env, cfg.seed), episodes or cfg.eval_episodes, rng)
    return {"mean_return": m.mean_return, "success_rate": m.success_rate, "survival_rate": m.survival_rate,
            "episodes": len(m.returns)}


def parse_cell(text: str) -> tuple[str, dict]:
    """``"full"`` or ``"full@k_train=2,k=2"`` -> (ablation, overrides)."""
    name, _, rest = text.strip().partition("@")
    overrides = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep or key.strip() not in ("k", "k_train"):
            raise ConfigError(f"bad cell override {item!r}; only k and k_train may vary")
        overrides[key.strip()] = int(value)
    return name, overrides


def split_cells(text: str) -> list[str]:
    """Split a comma list of cells; ``key=value`` pieces stay with the preceding cell."""
    out: list[str] = []
    for piece in filter(None, (s.strip() for s in text.split(","))):
        if "=" in piece and "@" not in piece and out and "@" in out[-1]:
            out[-1] += "," + piece
        else:
            out.append(piece)
    return out


def ablation_cells(cfg: RunConfig, cells: list[str] | None = None) -> list[str]:
    out = list(cells) if cells else split_cells(cfg.cells)
    for pair in filter(None, (s.strip() for s in cfg.k_grid.split(","))):
        k_train, _, k = pair.partition(":")
        out.append(f"full@k_train={int(k_train)},k={int(k)}")
    return out


@dataclass
class AblationRow:
    cell: str
    finals: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.finals))

    @property
    def std(self) -> float:
        return float(np.std(self.finals))


def cell_config(cfg: RunConfig, cell: str, cell_index: int, seed_index: int) -> RunConfig:
    name, overrides = parse_cell(cell)
    sub = replace(cfg, ablation=name, seed=cfg.seed + cell_index * CELL_SEED_STRIDE + seed_index, **overrides)
    sub.validate()
    return sub


def run_ablate(cfg: RunConfig, cells: list[str] | None = None, seeds: int | None = None,
               out_dir: str | None = None, echo=None) -> list[AblationRow]:
    cells = ablation_cells(cfg, cells)
    if len(cells) < 2:
        raise ConfigError("an ablation needs at least two cells")
    seeds = cfg.seeds if seeds is None else seeds
    rows = []
    for c, cell in enumerate(cells):
        finals = []
        for s in range(seeds):
            sub = cell_config(cfg, cell, c, s)
            sub_dir = os.path.join(out_dir, cell.replace("@", "_").replace(",", "_"), f"seed{s}") if out_dir else None
            result = run_train(sub, sub_dir)
            if result.status != 0 or result.final is None:
                finals.append(float("nan"))
            else:
                finals.append(result.final["episode_return"])
            if echo:
                echo(f"{cell} seed={sub.seed} final={finals[-1]:.3f}")
        rows.append(AblationRow(cell, finals))
    return rows


def format_table(rows: list[AblationRow]) -> str:
    width = max(len("cell"), *(len(r.cell) for r in rows))
    lines = [f"{'cell':<{width}}  {'mean':>10}  {'std':>8}  seeds"]
    for r in rows:
        lines.append(f"{r.cell:<{width}}  {r.mean:>10.3f}  {r.std:>8.3f}  {len(r.finals)}")
    return "\n".join(lines)
