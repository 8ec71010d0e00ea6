"""Experiment grids over PSNR, beta and codebook shape, with CSV and SVG output.

Every experiment row carries ``seed``, ``repeats`` and ``config_hash`` columns:
the row is reproduced by training ``config`` (with ``seed`` replaced) once per
seed in ``seed, seed + 1, ..., seed + repeats - 1``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .engine import (Checkpoint, TrainConfig, encoder_distributions, evaluate, load_checkpoint,
                     load_datasets, save_checkpoint, train)
from .errors import DtJsccError, FormatError, SpecError, StructuralError
from .modem import capacity_circulant, psnr_to_sigma2, transition_matrix
from .objective import estimate_i_z_zhat

log = logging.getLogger(__name__)

CACHE_ENV = "DTJSCC_CACHE_DIR"
MATCHED_PSNRS = (4.0, 8.0, 12.0, 16.0, 20.0)
STRING_COLUMNS = frozenset({"config_hash", "dataset"})


@dataclass(frozen=True)
class ExperimentGrid:
    psnr_train: tuple[float, ...] = MATCHED_PSNRS
    psnr_test: tuple[float, ...] = MATCHED_PSNRS
    beta: tuple[float, ...] = (1e-3,)
    K: tuple[int, ...] = (16,)
    d: tuple[int, ...] = (16,)
    repeats: int = 3
    base: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        for name in ("psnr_train", "psnr_test", "beta", "K", "d"):
            if len(getattr(self, name)) == 0:
                raise SpecError(f"grid list {name!r} is empty")
        if self.repeats < 1:
            raise SpecError("repeats must be at least 1")

    def seeds(self) -> list[int]:
        return [self.base.seed + r for r in range(self.repeats)]


class CsvTable:
    """Rectangular table of numeric and identifier fields."""

    def __init__(self, header, rows=()):
        self.header = tuple(str(h) for h in header)
        if len(set(self.header)) != len(self.header):
            raise StructuralError(f"duplicate column names in {self.header}")
        self.rows: list[tuple] = []
        for row in rows:
            self.append(row)

    def append(self, row):
        row = tuple(row)
        if len(row) != len(self.header):
            raise StructuralError(f"row has {len(row)} fields, header has {len(self.header)}")
        for v in row:
            _format_field(v)
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return (isinstance(other, CsvTable) and self.header == other.header
                and self.rows == other.rows)

    def column(self, name: str) -> list:
        i = self.header.index(name)
        return [r[i] for r in self.rows]

    def where(self, **match) -> list[dict]:
        out = []
        for r in self.rows:
            rec = dict(zip(self.header, r))
            if all(rec[k] == v for k, v in match.items()):
                out.append(rec)
        return out

    def to_text(self) -> str:
        lines = [",".join(self.header)]
        lines += [",".join(_format_field(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"


def _format_field(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    s = str(v)
    if any(c in s for c in ",\n\r\""):
        raise StructuralError(f"field {s!r} would need quoting")
    return s


def _parse_field(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_csv(text: str) -> CsvTable:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty CSV", section="header")
    header = lines[0].split(",")
    table = CsvTable(header)
    for lineno, line in enumerate(lines[1:], 2):
        fields = line.split(",")
        if len(fields) != len(header):
            raise FormatError(f"line {lineno}: {len(fields)} fields, expected {len(header)}",
                              section=f"line {lineno}")
        table.append(f if h in STRING_COLUMNS else _parse_field(f)
                     for h, f in zip(header, fields))
    return table


def emit_csv(table: CsvTable, path) -> None:
    path = Path(path)
    try:
        path.write_text(table.to_text(), encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write CSV to {path}: {exc.strerror}", str(path)) from exc


def emit_plot(table: CsvTable, path, x: str | None = None, y: str | None = None,
              series: str | None = None) -> None:
    """SVG line chart of column ``y`` against ``x``, one line per value of ``series``."""
    if not table.rows:
        raise StructuralError("refusing to plot a table with no data rows")
    x = x or table.header[0]
    y = y or ("accuracy" if "accuracy" in table.header else table.header[1])
    for name in (x, y) + ((series,) if series else ()):
        if name not in table.header:
            raise StructuralError(f"no column {name!r} in {table.header}")
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups = {}
    for rec in (dict(zip(table.header, r)) for r in table.rows):
        groups.setdefault(rec[series] if series else None, []).append((rec[x], rec[y]))
    for key, pts in groups.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=None if key is None else f"{series}={key}")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    if series:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    try:
        fig.savefig(path, format="svg")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write plot to {path}: {exc.strerror}", str(path)) from exc
    finally:
        plt.close(fig)


class CheckpointCache:
    """Trained checkpoints keyed by config hash.

    Always kept in memory for the session; additionally persisted as files when
    ``directory`` is given (default: the ``DTJSCC_CACHE_DIR`` environment variable).
    """

    def __init__(self, directory=None):
        directory = directory if directory is not None else os.environ.get(CACHE_ENV)
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, Checkpoint] = {}
        self._data: dict[tuple, tuple[Dataset, Dataset]] = {}
        self.trained = 0

    def datasets(self, config: TrainConfig) -> tuple[Dataset, Dataset]:
        key = (config.dataset, config.data_dir, config.synthetic_classes, config.synthetic_width,
               config.synthetic_noise_std, config.synthetic_per_class, config.synthetic_seed)
        if key not in self._data:
            self._data[key] = load_datasets(config)
        return self._data[key]

    def checkpoint(self, config: TrainConfig) -> Checkpoint:
        key = config.config_hash()
        if key in self._memory:
            return self._memory[key]
        path = self.directory / f"{key}.dtj" if self.directory else None
        ckpt = None
        if path is not None and path.exists():
            try:
                ckpt = load_checkpoint(path)
            except DtJsccError as exc:
                log.warning("ignoring unreadable cached checkpoint %s: %s", path, exc)
        if ckpt is None:
            log.info("training %s (beta=%g, psnr_train=%g, seed=%d)", key, config.beta,
                     config.psnr_train_db, config.seed)
            ckpt, _ = train(config, self.datasets(config)[0])
            self.trained += 1
            if path is not None:
                save_checkpoint(ckpt, path)
        self._memory[key] = ckpt
        return ckpt


_session_cache: CheckpointCache | None = None


def session_cache() -> CheckpointCache:
    global _session_cache
    if _session_cache is None:
        _session_cache = CheckpointCache()
    return _session_cache


def _mean_std(values: list[float], fallback_std: float) -> tuple[float, float]:
    if len(values) > 1:
        return float(np.mean(values)), float(np.std(values, ddof=1))
    return float(values[0]), fallback_std


def _provenance(grid: ExperimentGrid, config: TrainConfig) -> tuple:
    return grid.base.seed, grid.repeats, config.replace(seed=grid.base.seed).config_hash()


def _accuracy(cache: CheckpointCache, config: TrainConfig, seeds, psnr_test: float) -> tuple:
    _, test = cache.datasets(config)
    accs, stds = [], []
    for s in seeds:
        r = evaluate(cache.checkpoint(config.replace(seed=s)), test, psnr_test,
                     trials=config.eval_trials, seed=s)
        accs.append(r.accuracy)
        stds.append(r.std)
    return _mean_std(accs, stds[0])


def run_matched_psnr(grid: ExperimentGrid, cache: CheckpointCache | None = None) -> CsvTable:
    """Train and test at the same PSNR; with several betas the best mean is kept."""
    cache = cache or session_cache()
    table = CsvTable(("psnr_db", "beta", "accuracy", "std", "seed", "repeats", "config_hash"))
    for psnr in sorted(grid.psnr_train):
        best = None
        for beta in grid.beta:
            cfg = grid.base.replace(psnr_train_db=float(psnr), beta=float(beta))
            acc, std = _accuracy(cache, cfg, grid.seeds(), psnr)
            if best is None or acc > best[1]:
                best = (beta, acc, std, cfg)
        beta, acc, std, cfg = best
        table.append((float(psnr), float(beta), acc, std) + _provenance(grid, cfg))
    return table


def run_mismatch_sweep(grid: ExperimentGrid, cache: CheckpointCache | None = None) -> CsvTable:
    """Train once per psnr_train (first beta of the grid) and test at every psnr_test."""
    cache = cache or session_cache()
    table = CsvTable(("psnr_train", "psnr_test", "accuracy", "std", "seed", "repeats",
                      "config_hash"))
    for pt in sorted(grid.psnr_train):
        cfg = grid.base.replace(psnr_train_db=float(pt), beta=float(grid.beta[0]))
        for ps in sorted(grid.psnr_test):
            acc, std = _accuracy(cache, cfg, grid.seeds(), ps)
            table.append((float(pt), float(ps), acc, std) + _provenance(grid, cfg))
    return table


def mean_encoder_entropy(checkpoint: Checkpoint, dataset: Dataset) -> float:
    """Mean over samples and dimensions of H(Z_j|x) in nats."""
    total = count = 0.0
    for dist in encoder_distributions(checkpoint, dataset):
        total += float(dist.entropies.sum())
        count += dist.entropies.size
    return total / count


def run_beta_ablation(grid: ExperimentGrid, cache: CheckpointCache | None = None) -> CsvTable:
    """One training per (psnr_train, beta); accuracy, encoder entropy and I(Z;Zhat) per psnr_test.

    ``i_z_zhat_bits`` and ``capacity_total_bits`` refer to the channel at psnr_test.
    """
    if 0 not in grid.beta:
        raise SpecError("beta ablation needs beta = 0 as its reference")
    cache = cache or session_cache()
    table = CsvTable(("psnr_train", "beta", "psnr_test", "accuracy", "std", "encoder_entropy",
                      "i_z_zhat_bits", "capacity_total_bits", "seed", "repeats", "config_hash"))
    channels = {ps: transition_matrix(grid.base.K, psnr_to_sigma2(ps)) for ps in grid.psnr_test}
    for pt in sorted(grid.psnr_train):
        for beta in sorted(grid.beta):
            cfg = grid.base.replace(psnr_train_db=float(pt), beta=float(beta))
            _, test = cache.datasets(cfg)
            ckpts = [cache.checkpoint(cfg.replace(seed=s)) for s in grid.seeds()]
            entropy = float(np.mean([mean_encoder_entropy(c, test) for c in ckpts]))
            for ps in sorted(grid.psnr_test):
                acc, std = _accuracy(cache, cfg, grid.seeds(), ps)
                T = channels[ps]
                info = [estimate_i_z_zhat(encoder_distributions(c, test), T) for c in ckpts]
                i_bits = float(np.mean([e.i_z_zhat_bits for e in info]))
                cap = cfg.d * capacity_circulant(T)
                table.append((float(pt), float(beta), float(ps), acc, std, entropy, i_bits, cap)
                             + _provenance(grid, cfg))
    return table


def run_codebook_ablation(grid: ExperimentGrid, cache: CheckpointCache | None = None) -> CsvTable:
    """Vary (K, d) at fixed feature width d*D, trained and tested at the first psnr_train."""
    cache = cache or session_cache()
    width = grid.base.feature_width
    psnr = float(grid.psnr_train[0])
    table = CsvTable(("K", "d", "D", "codebook_parameter_count", "accuracy", "std", "seed",
                      "repeats", "config_hash"))
    for K in grid.K:
        for d in grid.d:
            if width % d:
                raise SpecError(f"d={d} does not divide the feature width {width}")
            D = width // d
            cfg = grid.base.replace(K=int(K), d=int(d), D=D, psnr_train_db=psnr,
                                    beta=float(grid.beta[0]))
            acc, std = _accuracy(cache, cfg, grid.seeds(), psnr)
            table.append((int(K), int(d), D, D * int(K), acc, std) + _provenance(grid, cfg))
    return table


def channel_table(K: int, psnrs, mc_samples: int = 0, seed: int = 0) -> CsvTable:
    """SER and capacity of the K-PSK extended channel per PSNR, optionally with MC columns."""
    from .modem import ser, transition_matrix_mc

    header = ["psnr", "ser", "capacity_bits"]
    if mc_samples:
        header += ["mc_ser", "max_abs_deviation"]
    table = CsvTable(header)
    for i, psnr in enumerate(psnrs):
        T = transition_matrix(K, psnr_to_sigma2(psnr))
        row = [float(psnr), ser(T), capacity_circulant(T)]
        if mc_samples:
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            mc = transition_matrix_mc(K, psnr_to_sigma2(psnr), mc_samples, rng)
            row += [ser(mc), float(np.max(np.abs(mc.entries - T.entries)))]
        table.append(row)
    return table

