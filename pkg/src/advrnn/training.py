"""Training loop, checkpoints and reverse-validation lambda selection."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .adversarial import (
    AdversarialConfig,
    AdversarialModel,
    ClassifierHead,
    LossBreakdown,
    ModelConfig,
    Optimizer,
)
from .data import CrossViewDataset, split_train_val
from .evaluation import cross_view_kl, rank1
from .numerics import ParamStore, cross_entropy_batch, make_rng
from .serialization import Reader, Writer, read_framed, write_framed
from .vrnn import VrnnConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VACK"
CKPT_VERSION = 1
REPORT_COLUMNS = ["epoch", "L_V", "L_y", "L_d", "L_C", "L_R", "E_train", "E_val", "kl_val",
                  "rank1_val"]


def default_lambda_grid() -> list[float]:
    return [10.0 ** (-2 + k / 4) for k in range(9)]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    patience: int = 10
    batch_size: int = 8
    lam: float = 0.6
    fusion: str = "early"
    seed: int = 0
    optimizer: str = "adam"
    train_fraction: float = 0.9
    feat_dim: int = 32
    hidden_dim: int = 32
    cell_dim: int = 64
    proj_dim: int = 16
    latent_dim: int = 16
    num_layers: int = 3
    head_hidden: int = 32
    early_stop: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, patience and batch_size >= 1")
        if self.epochs and self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        AdversarialConfig(self.lam, self.fusion, self.lr, self.optimizer)

    @property
    def adversarial(self) -> AdversarialConfig:
        return AdversarialConfig(self.lam, self.fusion, self.lr, self.optimizer)

    def model_config(self, frame_dim: int, num_identities: int) -> ModelConfig:
        vc = VrnnConfig(frame_dim, self.feat_dim, self.hidden_dim, self.cell_dim,
                        self.proj_dim, self.latent_dim, self.num_layers)
        return ModelConfig(vc, num_identities, self.head_hidden)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    E_val: float
    kl_val: float
    rank1_val: float
    kl_heldout: float = float("nan")
    rank1_heldout: float = float("nan")

    def csv_row(self) -> list:
        t = self.train
        return [self.epoch, t.L_V, t.L_y, t.L_d, t.L_C, t.L_R, t.E, self.E_val, self.kl_val,
                self.rank1_val]


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0

    def column(self, name: str) -> np.ndarray:
        if name == "E_train":
            return np.array([r.train.E for r in self.epochs])
        if name in LossBreakdown.__dataclass_fields__:
            return np.array([getattr(r.train, name) for r in self.epochs])
        return np.array([getattr(r, name) for r in self.epochs])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        recs = [EpochRecord(**{**r, "train": LossBreakdown(**r["train"])}) for r in d["epochs"]]
        return cls(recs, d["stopped_epoch"], d["best_epoch"], d["wall_time"])


def _fmt(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def write_report_csv(report: TrainReport, path):
    lines = [",".join(REPORT_COLUMNS)]
    lines += [",".join(_fmt(v) for v in rec.csv_row()) for rec in report.epochs]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# --- the loop ---------------------------------------------------------------------

def _units_to_rows(units):
    return [row for unit in units for row in unit]


class Trainer:
    """Resumable epoch loop.

    Training units are tuples of sequences (an identity pair, or a single
    sequence). ``monitor`` pairs are embedded each epoch for the cross-view KL
    and rank-1 columns; ``heldout`` pairs (optional) get the same treatment in
    separate fields.
    """

    def __init__(self, train_units, val_units, model_config: ModelConfig, config: TrainConfig,
                 monitor=None, heldout=None):
        self.config = config
        self.adv = config.adversarial
        self.train_units = list(train_units)
        self.val_units = list(val_units)
        if not self.train_units:
            raise ValueError("no training data")
        self.monitor = list(monitor) if monitor is not None else [
            u for u in self.val_units if len(u) == 2]
        self.heldout = list(heldout) if heldout is not None else None
        self.model = AdversarialModel(model_config, seed=config.seed)
        self.optimizer = Optimizer(self.model.store, config.optimizer, config.lr)
        self.rng = make_rng([config.seed, 1])
        self.epoch = 0
        self.best_score = math.inf
        self.best_epoch = 0
        self.since_best = 0
        self.best_params = self.model.store.copy_values()
        self.report = TrainReport()
        self.stopped = False

    def _pair_metrics(self, pairs):
        if len(pairs) < 2:
            return float("nan"), float("nan")
        probes = [p for p, _ in pairs]
        galleries = [g for _, g in pairs]
        zp, zg = self.model.embed(probes), self.model.embed(galleries)
        return cross_view_kl(zp, zg).kl, rank1(self.model, probes, galleries)

    def run_epoch(self) -> EpochRecord:
        cfg = self.config
        order = self.rng.permutation(len(self.train_units))
        totals = np.zeros(6)
        weight = 0.0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            units = [self.train_units[i] for i in order[start:start + cfg.batch_size]]
            rows = _units_to_rows(units)
            bd = self.model.loss_and_grad(rows, self.adv, self.rng)
            if not np.isfinite(bd.E):
                raise FloatingPointError(f"non-finite loss at epoch {self.epoch + 1}, batch {bi}")
            self.optimizer.step()
            w = len(rows) / 2.0
            totals += w * np.array(bd.as_row())
            weight += w
        train_bd = LossBreakdown(*(totals / weight))
        if self.val_units:
            val_rows = _units_to_rows(self.val_units)
            val_bd = self.model.forward(val_rows, self.adv.lam, self.adv.fusion,
                                        make_rng([cfg.seed, 2]), keep_cache=False).breakdown
            E_val = val_bd.E
        else:
            E_val = float("nan")
        kl_val, r1_val = self._pair_metrics(self.monitor)
        rec = EpochRecord(self.epoch + 1, train_bd, E_val, kl_val, r1_val)
        if self.heldout is not None:
            rec.kl_heldout, rec.rank1_heldout = self._pair_metrics(self.heldout)
        self.epoch += 1
        self.report.epochs.append(rec)

        score = E_val if self.val_units else train_bd.E
        if score < self.best_score:
            self.best_score = score
            self.best_epoch = self.epoch
            self.since_best = 0
            self.best_params = self.model.store.copy_values()
        else:
            self.since_best += 1
            if cfg.early_stop and self.since_best >= cfg.patience:
                self.stopped = True
        log.debug("epoch %d E_train=%.4f E_val=%.4f kl=%.4f", rec.epoch, train_bd.E, E_val, kl_val)
        return rec

    def done(self) -> bool:
        return self.stopped or self.epoch >= self.config.epochs

    def run(self, until: int | None = None):
        t0 = time.perf_counter()
        limit = self.config.epochs if until is None else min(until, self.config.epochs)
        while not self.stopped and self.epoch < limit:
            self.run_epoch()
        self.report.wall_time += time.perf_counter() - t0
        self.report.stopped_epoch = self.epoch
        self.report.best_epoch = self.best_epoch
        return self

    def best_model(self) -> AdversarialModel:
        """Best-score parameters, or the final ones when early stopping is off."""
        if self.epoch > 0 and self.config.early_stop:
            self.model.store.load_values(self.best_params)
        return self.model

    # -- persistence ---------------------------------------------------------

    def state_meta(self) -> dict:
        return {
            "train_config": asdict(self.config),
            "model_config": self.model.config.to_dict(),
            "epoch": self.epoch,
            "best_score": self.best_score,
            "best_epoch": self.best_epoch,
            "since_best": self.since_best,
            "stopped": self.stopped,
            "rng_state": self.rng.bit_generator.state,
            "report": self.report.to_dict(),
        }

    def save(self, path):
        extra = {f"best/{k}": v for k, v in self.best_params.items()}
        save_checkpoint(path, self.model.store, self.optimizer, meta=self.state_meta(), extra=extra)

    def restore(self, ckpt: "Checkpoint"):
        meta = ckpt.meta
        if meta["train_config"] != asdict(self.config):
            raise ValueError("checkpoint was written with a different TrainConfig")
        self.model.store.load_values(ckpt.params)
        ckpt.apply_optimizer(self.optimizer)
        self.rng.bit_generator.state = meta["rng_state"]
        self.epoch = meta["epoch"]
        self.best_score = meta["best_score"]
        self.best_epoch = meta["best_epoch"]
        self.since_best = meta["since_best"]
        self.stopped = meta["stopped"]
        self.best_params = {k[len("best/"):]: v for k, v in ckpt.extra.items() if k.startswith("best/")}
        self.report = TrainReport.from_dict(meta["report"])


def make_trainer(dataset: CrossViewDataset, config: TrainConfig, heldout=None) -> Trainer:
    train_pairs, val_pairs = split_train_val(dataset, config.train_fraction, config.seed)
    mc = config.model_config(dataset.dim, dataset.num_identities)
    held = heldout.pairs() if isinstance(heldout, CrossViewDataset) else heldout
    return Trainer(train_pairs, val_pairs, mc, config, heldout=held)


def train(dataset: CrossViewDataset, config: TrainConfig, heldout=None):
    """Train on ``dataset`` per ``config``; returns (best model, report)."""
    trainer = make_trainer(dataset, config, heldout).run()
    return trainer.best_model(), trainer.report


# --- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    optimizer: dict
    extra: dict
    meta: dict

    def apply_optimizer(self, opt: Optimizer):
        o = self.optimizer
        opt.kind, opt.lr, opt.t = o["kind"], o["lr"], o["t"]
        for k in opt.m:
            opt.m[k][...] = o["m"][k]
            opt.v[k][...] = o["v"][k]

    def model(self) -> AdversarialModel:
        m = AdversarialModel(ModelConfig.from_dict(self.meta["model_config"]), seed=None)
        m.store.load_values(self.params)
        return m

    def selected_model(self) -> AdversarialModel:
        """The parameters ``train`` would return: best-score ones under early
        stopping, otherwise the latest."""
        m = self.model()
        best = {k[len("best/"):]: v for k, v in self.extra.items() if k.startswith("best/")}
        cfg = self.meta.get("train_config", {})
        if best and cfg.get("early_stop", True) and self.meta.get("epoch", 0) > 0:
            m.store.load_values(best)
        return m


def _write_tensor(w: Writer, name: str, arr: np.ndarray):
    w.raw(name.encode())
    w.pack("B", arr.ndim)
    for d in arr.shape:
        w.pack("I", d)
    w.floats(arr)


def save_checkpoint(path, store: ParamStore, optimizer: Optimizer | None = None,
                    meta: dict | None = None, extra: dict | None = None):
    meta = dict(meta or {})
    tensors = [(f"param/{k}", v) for k, v in store.params.items()]
    if optimizer is not None:
        meta["optimizer"] = {"kind": optimizer.kind, "lr": optimizer.lr, "t": optimizer.t}
        tensors += [(f"adam_m/{k}", v) for k, v in optimizer.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in optimizer.v.items()]
    tensors += [(f"extra/{k}", v) for k, v in (extra or {}).items()]
    w = Writer()
    w.raw(json.dumps(meta, sort_keys=True).encode())
    w.pack("I", len(tensors))
    for name, arr in tensors:
        _write_tensor(w, name, arr)
    write_framed(path, CKPT_MAGIC, CKPT_VERSION, w.getvalue())


def load_checkpoint(path) -> Checkpoint:
    r = Reader(read_framed(path, CKPT_MAGIC, CKPT_VERSION))
    meta = json.loads(r.raw().decode())
    params, m, v, extra = {}, {}, {}, {}
    for _ in range(r.unpack("I")):
        name = r.raw().decode()
        ndim = r.unpack("B")
        shape = tuple(r.unpack("I") for _ in range(ndim))
        arr = r.floats(shape)
        kind, key = name.split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v, "extra": extra}[kind][key] = arr
    opt = dict(meta.pop("optimizer", {}), m=m, v=v)
    return Checkpoint(params, opt, extra, meta)


def resume_trainer(dataset: CrossViewDataset, path, heldout=None) -> Trainer:
    ckpt = load_checkpoint(path)
    config = TrainConfig(**ckpt.meta["train_config"])
    trainer = make_trainer(dataset, config, heldout)
    trainer.restore(ckpt)
    return trainer


# --- reverse validation -------------------------------------------------------------

@dataclass
class LambdaSelection:
    best: float
    grid: list[float]
    risks: list[float]


def _fit_head(store: ParamStore, head: ClassifierHead, feats, labels, epochs, batch, lr, rng):
    opt = Optimizer(store, "adam", lr)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            store.zero_grad()
            logits, cache = head.forward(feats[idx])
            _, dlog = cross_entropy_batch(logits, labels[idx], np.full(len(idx), 1.0 / len(idx)))
            head.backward(dlog, cache)
            opt.step()


def reverse_validation_risk(dataset: CrossViewDataset, config: TrainConfig,
                            reverse_epochs: int = 20) -> float:
    """Reverse-validation risk of one configuration.

    Probe and gallery sets are split 90/10 independently. A forward model is
    trained on the training portions; its heads pseudo-label the training
    embeddings of both views; a fresh reverse head is fit to those pseudo-labels
    and its error on the held-out probes is the risk.
    """
    L = dataset.num_identities
    n_train = math.ceil(round(config.train_fraction * L, 9))
    p_order = make_rng([config.seed, 11]).permutation(L)
    g_order = make_rng([config.seed, 12]).permutation(L)
    p_train, p_val = set(p_order[:n_train].tolist()), sorted(p_order[n_train:].tolist())
    g_train, g_val = set(g_order[:n_train].tolist()), sorted(g_order[n_train:].tolist())
    if not p_val or not g_val:
        raise ValueError("degenerate split: empty validation portion")

    units = []
    for i in range(L):
        unit = tuple(s for s, keep in ((dataset.probe[i], i in p_train),
                                       (dataset.gallery[i], i in g_train)) if keep)
        if unit:
            units.append(unit)
    val_units = [(dataset.gallery[i],) for i in g_val]
    mc = config.model_config(dataset.dim, L)
    trainer = Trainer(units, val_units, mc, config, monitor=[]).run()
    model = trainer.best_model()

    probes_tr = [dataset.probe[i] for i in sorted(p_train)]
    gallery_tr = [dataset.gallery[i] for i in sorted(g_train)]
    zp, zg = model.embed(probes_tr), model.embed(gallery_tr)
    pseudo = np.concatenate([model.head_y(zp).argmax(axis=1), model.head_d(zg).argmax(axis=1)])
    feats = np.concatenate([zp, zg])

    store = ParamStore()
    rng = make_rng([config.seed, 13])
    head = ClassifierHead(store, "head_y", mc.vrnn.latent_dim, mc.head_hidden, L, rng)
    _fit_head(store, head, feats, pseudo, reverse_epochs, config.batch_size, config.lr, rng)

    z_val = model.embed([dataset.probe[i] for i in p_val])
    pred = head(z_val).argmax(axis=1)
    return float(np.mean(pred != np.array([dataset.probe[i].label for i in p_val])))


def select_lambda(dataset: CrossViewDataset, grid=None, config: TrainConfig | None = None,
                  reverse_epochs: int = 20) -> LambdaSelection:
    grid = default_lambda_grid() if grid is None else [float(g) for g in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    config = config or TrainConfig()
    risks = []
    for lam in grid:
        risks.append(reverse_validation_risk(dataset, replace(config, lam=lam), reverse_epochs))
        log.info("lambda=%.5f risk=%.4f", lam, risks[-1])
    best = grid[int(np.argmin(risks))]
    return LambdaSelection(best, grid, risks)
