"""Run configuration, the training loop, and the (w, tau) sweep."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as dat
from . import evaluation as ev
from . import model as mdl
from .bank import MemoryBank
from .errors import BadConfig, NonFiniteSimilarity, NotNormalized, NumericalError, ZeroNormRow
from .losses import KINDS, MASKCON, ObjectiveConfig, objective
from .numerics import OptimState, sgd_step

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "loss", "lr", "recall@1", "recall@2", "recall@5", "recall@10", "dz_sup", "dz_mask")
CHECKPOINT_NAME = "checkpoint.mkcn"
METRICS_NAME = "metrics.csv"
TIMING_NAME = "timing.csv"


def parse_tau(text) -> float:
    """``"0"`` and ``"inf"`` select the symbolic limits; other values must be > 0."""
    t = str(text).strip().lower()
    if t in ("inf", "infinity", "+inf"):
        return math.inf
    try:
        tau = float(t)
    except ValueError:
        raise BadConfig(f"tau must be a number, 0 or inf; got {text!r}") from None
    if math.isnan(tau) or tau < 0:
        raise BadConfig(f"tau must be >= 0, got {text!r}")
    return tau


def format_tau(tau: float) -> str:
    if math.isinf(tau):
        return "inf"
    if tau == 0:
        return "0"
    return repr(float(tau))


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise BadConfig(f"not a boolean: {text!r}")


def _parse_ints(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)


@dataclass(frozen=True)
class RunConfig:
    # objective
    objective: str = MASKCON
    w: float = 1.0
    tau: float = 0.05
    tau0: float = 0.1
    adaptive_w: bool = False
    # model
    hidden_dims: tuple = (256,)
    feat_dim: int = 128
    proj_hidden: tuple = (512,)
    proj_dim: int = 128
    # optimiser
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_bias: bool = True
    epochs: int = 60
    batch_size: int = 64
    bank_size: int = 1024
    ema: float = 0.99
    # data: "synthetic", "vds:<dir>" or "cifar"
    data: str = "synthetic"
    m_coarse: int = 4
    fine_per_coarse: int = 3
    n_per_fine: int = 150
    dim: int = 100
    coarse_sep: float = 20.0
    fine_sep: float = 4.0
    noise: float = 1.0
    test_frac: float = 1.0 / 3.0
    cifar_train: str = ""
    cifar_test: str = ""
    coarse_map: str = ""
    drop_unmapped: bool = False
    # augmentation
    # weak key view, query noise 7x stronger; calibrated on the synthetic hierarchy
    noise_sigma: float = 0.1
    scale_jitter: float = 0.0
    mask_frac: float = 0.0
    strong: bool = True
    strong_factor: float = 7.0
    # run
    seed: int = 0
    out: str = ""
    eval_every: int = 5
    ks: tuple = (1, 2, 5, 10)
    space: str = ev.FEATURES
    dz_sample: int = 200
    dz_tau: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.objective not in KINDS:
            raise BadConfig(f"objective must be one of {KINDS}, got {self.objective!r}")
        if not 0.0 <= self.w <= 1.0:
            raise BadConfig(f"w must lie in [0, 1], got {self.w}")
        if not (math.isfinite(self.tau0) and self.tau0 > 0):
            raise BadConfig(f"tau0 must be > 0, got {self.tau0}")
        if math.isnan(self.tau) or self.tau < 0:
            raise BadConfig(f"tau must be >= 0 or inf, got {self.tau}")
        if self.epochs < 1:
            raise BadConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise BadConfig("batch_size must be >= 1")
        if self.bank_size < self.batch_size:
            raise BadConfig(f"bank_size ({self.bank_size}) must be >= batch_size ({self.batch_size})")
        if not 0.0 <= self.ema <= 1.0:
            raise BadConfig("ema must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise BadConfig("momentum must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise BadConfig("lr must be > 0 and weight_decay >= 0")
        if self.eval_every < 1:
            raise BadConfig("eval_every must be >= 1")
        if self.space not in (ev.FEATURES, ev.PROJECTIONS):
            raise BadConfig(f"space must be features or projections, got {self.space!r}")
        if not self.ks or min(self.ks) < 1:
            raise BadConfig("ks must be positive integers")

    @property
    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.objective, self.w, self.tau, self.tau0, self.adaptive_w)

    @property
    def augment_policy(self) -> dat.AugmentPolicy:
        return dat.AugmentPolicy(self.noise_sigma, self.scale_jitter, self.mask_frac, self.strong, self.strong_factor)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in fields:
                raise BadConfig(f"unknown config key {key!r}")
            default = fields[name].default
            try:
                if name in ("tau", "dz_tau"):
                    kwargs[name] = parse_tau(raw)
                elif isinstance(default, bool):
                    kwargs[name] = _parse_bool(raw)
                elif isinstance(default, tuple):
                    kwargs[name] = _parse_ints(raw)
                elif isinstance(default, int):
                    kwargs[name] = int(raw)
                elif isinstance(default, float):
                    kwargs[name] = float(raw)
                else:
                    kwargs[name] = str(raw)
            except ValueError as exc:
                raise BadConfig(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return RunConfig.from_mapping(values)


def load_datasets(cfg: RunConfig):
    if cfg.data == "synthetic":
        return dat.gen_hierarchical_gaussian(
            cfg.m_coarse, cfg.fine_per_coarse, cfg.n_per_fine, cfg.dim,
            cfg.coarse_sep, cfg.fine_sep, cfg.noise, seed=cfg.seed, test_frac=cfg.test_frac,
        )
    if cfg.data.startswith("vds:"):
        root = Path(cfg.data[4:])
        return dat.load_vds(root / "train.vds", dat.TRAIN), dat.load_vds(root / "test.vds", dat.TEST)
    if cfg.data == "cifar":
        cmap = cfg.coarse_map or None
        train = dat.load_cifar_binary(cfg.cifar_train, cmap, split=dat.TRAIN, drop_unmapped=cfg.drop_unmapped)
        test = dat.load_cifar_binary(
            cfg.cifar_test, cmap, split=dat.TEST, stats=train.meta["stats"], drop_unmapped=cfg.drop_unmapped
        )
        return train, test
    raise BadConfig(f"unknown data source {cfg.data!r}")


@dataclass
class MetricsRow:
    epoch: int
    loss: float
    lr: float
    recall_1: Optional[float] = None
    recall_2: Optional[float] = None
    recall_5: Optional[float] = None
    recall_10: Optional[float] = None
    dz_sup: Optional[float] = None
    dz_mask: Optional[float] = None
    wall_seconds: Optional[float] = None

    def csv_values(self):
        vals = [self.epoch, self.loss, self.lr, self.recall_1, self.recall_2, self.recall_5,
                self.recall_10, self.dz_sup, self.dz_mask]
        return ["" if v is None else (str(v) if isinstance(v, int) else repr(float(v))) for v in vals]

    @classmethod
    def from_csv(cls, record: dict) -> "MetricsRow":
        def f(key):
            v = record[key]
            return None if v == "" else float(v)

        return cls(int(record["epoch"]), f("loss"), f("lr"), f("recall@1"), f("recall@2"),
                   f("recall@5"), f("recall@10"), f("dz_sup"), f("dz_mask"))


def write_metrics(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for r in rows:
            w.writerow(r.csv_values())
    return path


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as f:
        return [MetricsRow.from_csv(r) for r in csv.DictReader(f)]


@dataclass
class TrainResult:
    params: mdl.ModelParams
    metrics: list
    report: ev.RecallReport
    train: dat.Dataset
    test: dat.Dataset


def _recall_fields(report: ev.RecallReport):
    d = report.as_dict()
    return {f"recall_{k}": d.get(k) for k in (1, 2, 5, 10)}


def _seed(cfg, *tags):
    return np.random.SeedSequence([cfg.seed, *tags])


def init_model(cfg: RunConfig, train: dat.Dataset) -> mdl.ModelParams:
    return mdl.init_params(
        train.input_dim, max(train.n_coarse, 1), cfg.hidden_dims, cfg.feat_dim,
        cfg.proj_hidden, cfg.proj_dim, rng=np.random.default_rng(_seed(cfg, 0)),
    )


def fill_bank(params, bank: MemoryBank, train: dat.Dataset, cfg: RunConfig):
    """Gradient-free pass over the training set pushing key projections."""
    for batch in dat.batches(train, cfg.batch_size, cfg.augment_policy, _seed(cfg, 1)):
        bank.push(mdl.key_project(params, batch.key_views), batch.coarse_labels, batch.ids)


def evaluate_epoch(params, test: dat.Dataset, cfg: RunConfig):
    report = ev.evaluate(params, test, cfg.ks, cfg.space)
    dz_rows = ev.dz_report(params, test, (cfg.dz_tau,), cfg.dz_sample, seed=_seed(cfg, 3))
    return report, dz_rows[0].value, dz_rows[1].value


def train(cfg: RunConfig, datasets=None, out_dir=None) -> TrainResult:
    """Warm-up bank fill, then ``cfg.epochs`` epochs of SGD with EMA keys.

    When ``out_dir`` is given, writes the metrics CSV, a timing CSV and the
    final checkpoint there.
    """
    train_ds, test_ds = datasets if datasets is not None else load_datasets(cfg)
    params = init_model(cfg, train_ds)
    obj = cfg.objective_config
    policy = cfg.augment_policy
    no_decay = frozenset() if cfg.decay_bias else frozenset(k for k in params.trainable() if k.endswith(".bias"))
    state = OptimState.zeros_like(
        params.trainable(), base_lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        total_epochs=cfg.epochs, no_decay=no_decay,
    )
    bank = MemoryBank(cfg.bank_size, params.proj_dim)
    fill_bank(params, bank, train_ds, cfg)

    rows = []
    report = None
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        state = state.at_epoch(epoch)
        losses = []
        for bi, batch in enumerate(dat.batches(train_ds, cfg.batch_size, policy, _seed(cfg, 2, epoch))):
            params = mdl.momentum_update(params, cfg.ema)
            where = f"epoch {epoch}, batch {bi}"
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out = objective(batch, params, bank.snapshot(), obj)
            except (NonFiniteSimilarity, ZeroNormRow, NotNormalized) as exc:
                raise NumericalError(f"diverged at {where}: {exc}", epoch=epoch, batch=bi) from exc
            if not math.isfinite(out.value) or not all(np.all(np.isfinite(g)) for g in out.grads.values()):
                raise NumericalError(f"non-finite loss at {where}", epoch=epoch, batch=bi)
            new, state = sgd_step(params.trainable(), out.grads, state)
            params = params.replace(new)
            bank.push(out.key_projections, batch.coarse_labels, batch.ids)
            losses.append(out.value)
        row = MetricsRow(epoch, float(np.mean(losses)), state.lr)
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            report, row.dz_sup, row.dz_mask = evaluate_epoch(params, test_ds, cfg)
            for k, v in _recall_fields(report).items():
                setattr(row, k, v)
        row.wall_seconds = time.perf_counter() - start
        rows.append(row)
        log.info("epoch %d loss %.4f lr %.5f recall@1 %s", epoch, row.loss, row.lr, row.recall_1)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(rows, out / METRICS_NAME)
        with open(out / TIMING_NAME, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "wall_seconds"])
            for r in rows:
                w.writerow([r.epoch, f"{r.wall_seconds:.3f}"])
        mdl.save_checkpoint(params, out / CHECKPOINT_NAME)
        dat.save_vds(train_ds, out / "train.vds")
        dat.save_vds(test_ds, out / "test.vds")
    return TrainResult(params, rows, report, train_ds, test_ds)


def sweep(cfg: RunConfig, w_list, tau_list, out_dir=None, datasets=None):
    """Train MaskCon for every (w, tau) cell with a shared seed.

    Returns a list of ``(w, tau, RecallReport)``; writes ``sweep.csv`` into
    ``out_dir`` when given.
    """
    if not w_list or not tau_list:
        raise BadConfig("sweep needs at least one w and one tau")
    datasets = datasets if datasets is not None else load_datasets(cfg)
    results = []
    for w in w_list:
        for tau in tau_list:
            cell = cfg.replace(objective=MASKCON, w=float(w), tau=parse_tau(tau))
            cell_dir = None if out_dir is None else Path(out_dir) / f"w{w}_tau{format_tau(cell.tau)}"
            res = train(cell, datasets, cell_dir)
            results.append((cell.w, cell.tau, res.report))
            log.info("sweep w=%s tau=%s recall@1=%.4f", w, format_tau(cell.tau), res.report.scores[0])
    if out_dir is not None:
        write_sweep(results, Path(out_dir) / "sweep.csv")
    return results


def write_sweep(results, path) -> Path:
    ks = results[0][2].ks
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["w", "tau", *[f"recall@{k}" for k in ks]])
        for wv, tau, rep in results:
            w.writerow([repr(wv), format_tau(tau), *[repr(s) for s in rep.scores]])
    return Path(path)
