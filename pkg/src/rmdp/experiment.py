"""Seeded runs, k-sweeps and their CSV artifacts.

A run configuration is a flat ``key = value`` text file; every key is listed in
``CONFIG_SCHEMA``.  Every CSV written here starts with a ``# config_hash=...``
comment line so results can be traced back to the exact configuration.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .algorithms import Trainer, default_assignment
from .assign import format_assignment_csv
from .baselines import clustering_pipeline
from .core import InvalidArgument, RMdpError
from .envs import ResourceGatheringConfig, VelocityTrackConfig, rg_optimal_oracle, vt_partition_oracle
from .nn import save_checkpoint
from .ppo import PpoConfig

log = logging.getLogger(__name__)

RUN_ALGORITHMS = ("em", "end_to_end", "clustering", "random")
ENVIRONMENTS = ("resource_gathering", "velocity")
DESK_BUDGET = {"resource_gathering": 200_000, "velocity": 500_000}
FULL_BUDGET = {"resource_gathering": 1_000_000, "velocity": 2_000_000}


class ConfigError(RMdpError, ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "em"
    env: str = "resource_gathering"
    n: int = 25
    k: int = 3
    seed: int = 0
    transitions_per_policy: int = 0  # 0 selects the desk-scale (or full) default
    full_budget: bool = False
    velocity_bound: float = 4.0
    num_envs: int = 8
    eval_every: int = 10
    eval_episodes: int = 10
    feature_episodes: int = 20
    q_mixing: float = 0.05
    psi_lr: float = 0.002
    lr_start: float = 3e-4
    lr_end: float = 1e-4
    entropy_coef: float = 0.001
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    batch_size: int = 2048
    minibatch_size: int = 64
    epochs: int = 10
    grad_clip_norm: float = 0.5
    gamma: float = 0.99
    checkpoint: bool = True

    def __post_init__(self):
        if self.algorithm not in RUN_ALGORITHMS:
            raise ConfigError(f"algorithm: expected one of {RUN_ALGORITHMS}, got {self.algorithm!r}")
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"env: expected one of {ENVIRONMENTS}, got {self.env!r}")
        if self.env == "resource_gathering" and self.n != 25:
            raise ConfigError("n: the 5x5 Resource Gathering grid has exactly 25 agents")
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"k: need 1 <= k <= n={self.n}, got {self.k}")
        for key in ("transitions_per_policy", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be non-negative")
        for key in ("num_envs", "eval_every", "eval_episodes", "feature_episodes", "batch_size",
                    "minibatch_size", "epochs"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be positive")
        if self.velocity_bound <= 0:
            raise ConfigError("velocity_bound: must be positive")
        try:
            self.ppo_config()
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def budget(self) -> int:
        if self.transitions_per_policy:
            return self.transitions_per_policy
        return (FULL_BUDGET if self.full_budget else DESK_BUDGET)[self.env]

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(lr_start=self.lr_start, lr_end=self.lr_end, entropy_coef=self.entropy_coef,
                         gae_lambda=self.gae_lambda, clip_eps=self.clip_eps, batch_size=self.batch_size,
                         minibatch_size=self.minibatch_size, epochs=self.epochs,
                         grad_clip_norm=self.grad_clip_norm, gamma=self.gamma)

    def env_config(self):
        if self.env == "resource_gathering":
            return ResourceGatheringConfig()
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x7A]))
        return VelocityTrackConfig.sample(self.n, self.velocity_bound, rng)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        kwargs = {}
        for key, raw in values.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            conv = CONFIG_SCHEMA[key]
            try:
                kwargs[key] = conv(raw) if isinstance(raw, str) else conv(str(raw))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for config key {key!r}: {exc}") from exc
        return cls(**kwargs)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _int(text) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


CONFIG_SCHEMA = {
    f.name: {"int": _int, "float": float, "bool": _bool, "str": str}[f.type]
    for f in dataclasses.fields(RunConfig)
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Config file (optional) with ``key=value`` overrides applied on top."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    values.update(parse_config_text("\n".join(overrides), "<command line>"))
    return RunConfig.from_mapping(values)


# -- single run ---------------------------------------------------------------

PROGRESS_COLUMNS = ("step", "transitions_per_policy", "algo", "env", "n", "k", "seed", "social_welfare", "rep_counts")


@dataclass
class RunOutcome:
    config: RunConfig
    directory: Path | None
    final_sw: float
    alpha: np.ndarray
    rows: list  # progress rows, one tuple per evaluation


def _header(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.config_hash} seed={cfg.seed}\n"


def _trainer_kwargs(cfg: RunConfig) -> dict:
    return dict(ppo=cfg.ppo_config(), num_envs=cfg.num_envs, eval_every=cfg.eval_every,
                eval_episodes=cfg.eval_episodes, q_mixing=cfg.q_mixing, psi_lr=cfg.psi_lr)


def train(cfg: RunConfig) -> tuple[Trainer, list]:
    """Train according to ``cfg``; returns the final trainer and its evaluation records."""
    env_config = cfg.env_config()
    records = []
    if cfg.algorithm == "clustering":
        _, trainer = clustering_pipeline(env_config, cfg.k, cfg.seed, cfg.budget, cfg.feature_episodes,
                                         on_eval=records.append, **_trainer_kwargs(cfg))
        return trainer, records
    trainer = Trainer(env_config, cfg.k, cfg.algorithm, cfg.seed, transitions_per_policy=cfg.budget,
                      **_trainer_kwargs(cfg))
    trainer.run(records.append)
    return trainer, records


def progress_rows(cfg: RunConfig, records) -> list:
    return [(r.round, r.transitions_per_policy, cfg.algorithm, cfg.env, cfg.n, cfg.k, cfg.seed,
             f"{r.social_welfare:.6f}", ";".join(str(c) for c in r.counts)) for r in records]


def format_progress_csv(cfg: RunConfig, rows) -> str:
    buf = io.StringIO()
    buf.write(_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROGRESS_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def write_run_directory(out_dir, cfg: RunConfig, rows, alpha, trainer: Trainer | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(_header(cfg) + cfg.to_text())
    (out / "progress.csv").write_text(format_progress_csv(cfg, rows))
    (out / "assignment.csv").write_text(
        format_assignment_csv(alpha, header_comment=f"config_hash={cfg.config_hash} seed={cfg.seed}"))
    if cfg.env == "velocity":
        targets = cfg.env_config().target_array()
        (out / "targets.csv").write_text(_header(cfg) + "agent,target\n"
                                         + "".join(f"{i},{t:.9g}\n" for i, t in enumerate(targets)))
    if trainer is not None and cfg.checkpoint:
        save_checkpoint(out / "checkpoint.rmdp", trainer.model.state_dict())
    return out


def run(cfg: RunConfig, out_dir=None) -> RunOutcome:
    """Train one configuration and (optionally) write its run directory."""
    trainer, records = train(cfg)
    rows = progress_rows(cfg, records)
    alpha = trainer.alpha.copy()
    directory = write_run_directory(out_dir, cfg, rows, alpha, trainer) if out_dir is not None else None
    return RunOutcome(cfg, directory, records[-1].social_welfare, alpha, rows)


# -- sweeps ---------------------------------------------------------------------

AGGREGATE_COLUMNS = ("algo", "env", "n", "k", "seeds", "mean_sw", "se_sw", "oracle_sw", "failures")


def mean_and_se(values) -> tuple[float, float]:
    """Sample mean and standard error (sample std with ddof=1 over sqrt(count); 0 for one value)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgument("no values to aggregate")
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def oracle_value(cfg: RunConfig) -> float | None:
    """Exact reference welfare for the configuration (None when none is available)."""
    if cfg.env == "resource_gathering":
        return rg_optimal_oracle()[1] if cfg.k == cfg.n else None
    targets = cfg.env_config().target_array()
    return vt_partition_oracle(targets, cfg.k, cfg.velocity_bound)[0]


def _shared_key(cfg: RunConfig):
    # at k = 1 and k = n every algorithm trains the default assignment on the same code path
    if cfg.k in (1, cfg.n):
        return (cfg.env, cfg.k, cfg.seed)
    return None


@dataclass
class SweepCell:
    algo: str
    k: int
    values: list
    oracles: list
    failures: list


def sweep(template: RunConfig, algorithms, k_values, seeds, out_dir=None, runner=None, progress=None) -> list:
    """Run the cross product ``algorithms x k_values x seeds``; returns aggregate rows.

    A failing run is recorded and the sweep moves on.  ``runner`` defaults to
    ``run`` and exists so tests can substitute a cheap stand-in.
    """
    runner = runner or run
    out = Path(out_dir) if out_dir is not None else None
    shared: dict = {}
    cells = []
    for algo in algorithms:
        for k in k_values:
            cell = SweepCell(algo, k, [], [], [])
            for seed in seeds:
                cfg = template.replace(algorithm=algo, k=k, seed=seed)
                run_dir = out / "runs" / f"{algo}_k{k}_s{seed}" if out is not None else None
                try:
                    key = _shared_key(cfg)
                    if key is not None and key in shared:
                        base = shared[key]
                        rows = [(r[0], r[1], algo) + tuple(r[3:]) for r in base.rows]
                        outcome = RunOutcome(cfg, None, base.final_sw, base.alpha, rows)
                        if run_dir is not None:
                            outcome.directory = write_run_directory(run_dir, cfg, rows, base.alpha)
                    else:
                        outcome = runner(cfg, run_dir)
                        if key is not None:
                            shared[key] = outcome
                    cell.values.append(outcome.final_sw)
                    cell.oracles.append(oracle_value(cfg))
                    if progress:
                        progress(cfg, outcome.final_sw)
                except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the sweep
                    log.warning("run %s k=%d seed=%d failed: %s", algo, k, seed, exc)
                    cell.failures.append((seed, f"{type(exc).__name__}: {exc}"))
            cells.append(cell)
    rows = [aggregate_row(template, c) for c in cells]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "aggregate.csv").write_text(format_aggregate_csv(template, rows))
        failures = [(c.algo, c.k, s, msg) for c in cells for s, msg in c.failures]
        if failures:
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerows([("algo", "k", "seed", "error")] + failures)
            (out / "failures.csv").write_text(buf.getvalue())
    return rows


def aggregate_row(template: RunConfig, cell: SweepCell) -> dict:
    if cell.values:
        mean, se = mean_and_se(cell.values)
    else:
        mean, se = float("nan"), float("nan")
    oracles = [o for o in cell.oracles if o is not None]
    return {"algo": cell.algo, "env": template.env, "n": template.n, "k": cell.k, "seeds": len(cell.values),
            "mean_sw": mean, "se_sw": se, "oracle_sw": float(np.mean(oracles)) if oracles else float("nan"),
            "failures": len(cell.failures)}


def format_aggregate_csv(template: RunConfig, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={template.config_hash} seed={template.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for r in rows:
        w.writerow([r["algo"], r["env"], r["n"], r["k"], r["seeds"], f"{r['mean_sw']:.9g}",
                    f"{r['se_sw']:.9g}", f"{r['oracle_sw']:.9g}", r["failures"]])
    return buf.getvalue()


# -- CSV readers ---------------------------------------------------------------

class CsvFormatError(RMdpError, ValueError):
    pass


def _read_table(text: str, columns, source: str):
    lines = [(no, line) for no, line in enumerate(text.splitlines(), start=1)
             if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        raise CsvFormatError(f"{source}: empty file")
    head_no, head = lines[0]
    header = next(csv.reader([head]))
    missing = [c for c in columns if c not in header]
    if missing:
        raise CsvFormatError(f"{source}:{head_no}: missing columns {missing}")
    rows = []
    for no, line in lines[1:]:
        fields = next(csv.reader([line]))
        if len(fields) != len(header):
            raise CsvFormatError(f"{source}:{no}: expected {len(header)} fields, got {len(fields)}")
        rows.append((no, dict(zip(header, fields))))
    return rows


def _num(row, key, conv, source, no):
    try:
        return conv(row[key])
    except ValueError as exc:
        raise CsvFormatError(f"{source}:{no}: bad {key} value {row[key]!r}") from exc


def read_aggregate_csv(path_or_text, source: str | None = None) -> list:
    text, source = _text_and_source(path_or_text, source)
    out = []
    for no, row in _read_table(text, AGGREGATE_COLUMNS, source):
        out.append({"algo": row["algo"], "env": row["env"], "n": _num(row, "n", int, source, no),
                    "k": _num(row, "k", int, source, no), "seeds": _num(row, "seeds", int, source, no),
                    "mean_sw": _num(row, "mean_sw", float, source, no),
                    "se_sw": _num(row, "se_sw", float, source, no),
                    "oracle_sw": _num(row, "oracle_sw", float, source, no),
                    "failures": _num(row, "failures", int, source, no)})
    return out


def read_progress_csv(path_or_text, source: str | None = None) -> list:
    text, source = _text_and_source(path_or_text, source)
    out = []
    for no, row in _read_table(text, PROGRESS_COLUMNS, source):
        counts = row["rep_counts"]
        out.append({"step": _num(row, "step", int, source, no),
                    "transitions_per_policy": _num(row, "transitions_per_policy", int, source, no),
                    "algo": row["algo"], "env": row["env"], "n": _num(row, "n", int, source, no),
                    "k": _num(row, "k", int, source, no), "seed": _num(row, "seed", int, source, no),
                    "social_welfare": _num(row, "social_welfare", float, source, no),
                    "rep_counts": [int(c) for c in counts.split(";")] if counts else []})
    return out


def _text_and_source(path_or_text, source):
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        path = Path(path_or_text)
        return path.read_text(), source or str(path)
    return path_or_text, source or "<string>"
