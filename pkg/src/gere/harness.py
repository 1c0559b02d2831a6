"""Sequential-task training, multi-task upper bound and evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .distill import HiddenTargetArchive, ReplayPool, Thresholds, archive_states, distill, pad_sequences
from .losses import (
    LossBundle,
    WeightStrategy,
    ce_loss,
    combine_losses,
    kl_logit_loss,
    l1_feature_loss,
    l2_feature_loss,
    lm_targets,
    tm_loss,
)
from .model import LoraConfig, TinyDecoder, save_checkpoint
from .optim import AdamW, warmup_cosine
from .scheduler import BatchPlan, Source, plan_bi, plan_task_only, plan_vanilla_mix
from .synth import TaskData

log = logging.getLogger(__name__)

METHODS = ("baseline", "baseline_r", "baseline_r_kl", "baseline_r_l1", "baseline_r_l2", "baseline_r_tm")
AUX_KIND = {"baseline_r_kl": "kl", "baseline_r_l1": "l1", "baseline_r_l2": "l2", "baseline_r_tm": "tm"}

DEFAULT_LR_FULL = 3e-4
DEFAULT_LR_LORA = 1e-3


@dataclass
class TrainConfig:
    method: str = "baseline"
    weight: WeightStrategy = field(default_factory=lambda: WeightStrategy.fixed(1.0))
    bi: float | None = None
    lr: float | None = None
    epochs: int = 3
    batch_size: int = 64
    lora: LoraConfig | None = None
    seed: int = 0
    tasks: tuple[str, ...] = ()
    ce_scope: str = "all"  # "all" positions in the batch, or "task" rows only
    kl_temperature: float = 2.0
    warmup_frac: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.ce_scope not in ("all", "task"):
            raise ValueError("ce_scope must be 'all' or 'task'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.bi is not None and not 0.0 < self.bi < 1.0:
            raise ValueError("BI ratio must lie in (0, 1)")

    @property
    def uses_replay(self) -> bool:
        return self.method != "baseline"

    @property
    def aux_kind(self) -> str | None:
        return AUX_KIND.get(self.method)

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return DEFAULT_LR_LORA if self.lora is not None else DEFAULT_LR_FULL

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight"] = str(self.weight)
        d["tasks"] = list(self.tasks)
        if self.lora is not None:
            d["lora"]["targets"] = list(self.lora.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("weight"), str):
            d["weight"] = WeightStrategy.parse(d["weight"])
        if isinstance(d.get("lora"), dict):
            lora = dict(d["lora"])
            lora["targets"] = tuple(lora.get("targets", ("q", "k")))
            d["lora"] = LoraConfig(**lora)
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ReplayAssets:
    """Fixed general replay pool plus its distilled targets.

    ``pool=None`` stands for an empty pool.
    """

    pool: ReplayPool | None
    archive: HiddenTargetArchive | None = None
    thresholds: Thresholds | None = None
    lm_head: np.ndarray | None = None
    states: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.archive is not None and self.pool is not None:
            if len(self.archive) != len(self.pool):
                raise ValueError(f"archive has {len(self.archive)} samples, pool has {len(self.pool)}")
            for i, (s, t) in enumerate(zip(self.pool.sequences, self.archive.targets)):
                if len(s) != len(t):
                    raise ValueError(f"archive sample {i} covers {len(t)} tokens, pool sample has {len(s)}")
        if self.states is None and self.archive is not None and self.thresholds is not None:
            self.states = archive_states(self.archive, self.thresholds)

    @property
    def size(self) -> int:
        return 0 if self.pool is None else len(self.pool)

    @classmethod
    def build(cls, base: TinyDecoder, pool: ReplayPool) -> ReplayAssets:
        from .distill import compute_stats, thresholds

        archive = distill(base, pool)
        thr = thresholds(compute_stats(archive))
        return cls(pool, archive, thr, base.params["lm_head.weight"].data.copy())

    def state_targets(self, ids: Sequence[int], length: int) -> np.ndarray:
        out = np.zeros((len(ids), length, self.archive.n_dims), dtype=np.uint8)
        for row, i in enumerate(ids):
            s = self.states[i]
            out[row, : len(s)] = s
        return out


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    task_rows: np.ndarray
    replay_rows: np.ndarray
    replay_ids: list[int]


def task_loss_mask(tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Score only the answer: the last valid token, predicted from the position before it."""
    lm = np.zeros_like(mask)
    lengths = mask.sum(axis=1)
    lm[np.arange(len(tokens)), lengths - 2] = True
    return lm


def assemble_batch(entries, task_rows: np.ndarray, pool: ReplayPool | None) -> Batch:
    seqs, t_rows, r_rows, r_ids = [], [], [], []
    for row, (src, i) in enumerate(entries):
        if src == Source.TASK:
            seqs.append(task_rows[i])
            t_rows.append(row)
        else:
            seqs.append(pool.sequences[i])
            r_rows.append(row)
            r_ids.append(i)
    tokens, mask = pad_sequences(seqs)
    targets, loss_mask = lm_targets(tokens, mask)
    t_rows_a = np.asarray(t_rows, dtype=np.int64)
    if len(t_rows_a):
        loss_mask[t_rows_a] = task_loss_mask(tokens[t_rows_a], mask[t_rows_a])
    return Batch(tokens, mask, targets, loss_mask, t_rows_a, np.asarray(r_rows, dtype=np.int64), r_ids)


def make_plan(cfg: TrainConfig, task_size: int, pool_size: int, seed: int) -> BatchPlan:
    if not cfg.uses_replay:
        return plan_task_only(task_size, cfg.batch_size, seed, cfg.epochs)
    if cfg.bi is not None:
        return plan_bi(task_size, pool_size, cfg.batch_size, cfg.bi, seed, cfg.epochs)
    return plan_vanilla_mix(task_size, pool_size, cfg.batch_size, seed, cfg.epochs)


def batch_losses(model: TinyDecoder, batch: Batch, cfg: TrainConfig, assets: ReplayAssets | None) -> LossBundle:
    out = model(batch.tokens, batch.mask)
    loss_mask = batch.loss_mask
    if cfg.ce_scope == "task" and len(batch.replay_rows):
        loss_mask = loss_mask.copy()
        loss_mask[batch.replay_rows] = False
    if loss_mask.any():
        ce = ce_loss(out.logits, batch.targets, loss_mask)
    else:
        ce = T.Tensor(np.zeros((), dtype=out.logits.dtype))

    aux = None
    kind = cfg.aux_kind
    if kind is not None and len(batch.replay_rows):
        rows, ids = batch.replay_rows, batch.replay_ids
        Tn = batch.tokens.shape[1]
        rmask = batch.mask[rows]
        if kind == "tm":
            aux = tm_loss(out.last_hidden[rows], assets.state_targets(ids, Tn), assets.thresholds, rmask)
        elif kind == "kl":
            target, _ = assets.archive.padded(ids, Tn)
            aux = kl_logit_loss(out.logits[rows], target, assets.lm_head, cfg.kl_temperature, rmask)
        else:
            target, _ = assets.archive.padded(ids, Tn)
            fn = l1_feature_loss if kind == "l1" else l2_feature_loss
            aux = fn(out.last_hidden[rows], target, rmask)
    return combine_losses(ce, aux, cfg.weight)


# --------------------------------------------------------------- training


@dataclass
class TaskLog:
    ce: list[float] = field(default_factory=list)
    aux: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    weight: list[float] = field(default_factory=list)


def _check_assets(cfg: TrainConfig, assets: ReplayAssets | None) -> None:
    if not cfg.uses_replay:
        return
    if assets is None:
        raise ValueError(f"method {cfg.method} needs replay assets")
    kind = cfg.aux_kind
    if kind is None or assets.size == 0:
        return
    if assets.archive is None:
        raise ValueError(f"method {cfg.method} needs a hidden-target archive")
    if kind == "tm" and (assets.thresholds is None or assets.states is None):
        raise ValueError("method baseline_r_tm needs thresholds")
    if kind == "kl" and assets.lm_head is None:
        raise ValueError("method baseline_r_kl needs the base lm_head")


def train_task(
    model: TinyDecoder,
    task_rows: np.ndarray,
    assets: ReplayAssets | None,
    cfg: TrainConfig,
    task_index: int = 0,
) -> TaskLog:
    """Train ``model`` in place on one task's rows for ``cfg.epochs`` epochs."""
    _check_assets(cfg, assets)
    pool_size = assets.size if (assets is not None and cfg.uses_replay) else 0
    plan = make_plan(cfg, len(task_rows), pool_size, seed=cfg.seed * 1000 + task_index)
    params = model.trainable_params()
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    pool = assets.pool if assets is not None else None
    logbook = TaskLog()
    model.train()
    for step, entries in enumerate(plan.batches):
        batch = assemble_batch(entries, task_rows, pool)
        bundle = batch_losses(model, batch, cfg, assets)
        opt.zero_grad()
        if bundle.total._backward is not None:
            T.backward(bundle.total)
            opt.step(warmup_cosine(step, len(plan), cfg.learning_rate, cfg.warmup_frac))
        logbook.ce.append(float(bundle.ce.data))
        logbook.aux.append(float("nan") if bundle.aux is None else float(bundle.aux.data))
        logbook.total.append(float(bundle.total.data))
        logbook.weight.append(bundle.weight_used)
    model.eval()
    return logbook


def pretrain_lm(
    model: TinyDecoder,
    sequences: np.ndarray,
    epochs: int = 8,
    lr: float = 3e-3,
    batch_size: int = 64,
    seed: int = 0,
    warmup_frac: float = 0.05,
) -> list[float]:
    """Plain next-token training on general text (builds the base model)."""
    plan = plan_task_only(len(sequences), batch_size, seed, epochs)
    opt = AdamW(model.trainable_params(), lr=lr)
    losses = []
    model.train()
    for step, entries in enumerate(plan.batches):
        idx = [i for _, i in entries]
        tokens, mask = pad_sequences([sequences[i] for i in idx])
        targets, loss_mask = lm_targets(tokens, mask)
        loss = ce_loss(model(tokens, mask).logits, targets, loss_mask)
        opt.zero_grad()
        T.backward(loss)
        opt.step(warmup_cosine(step, len(plan), lr, warmup_frac))
        losses.append(float(loss.data))
    model.eval()
    return losses


# ------------------------------------------------------------- evaluation


def _eval_batches(n: int, size: int):
    for start in range(0, n, size):
        yield range(start, min(start + size, n))


def evaluate_general(model: TinyDecoder, heldout: Sequence[np.ndarray], batch_size: int = 100) -> float:
    """Greedy next-token accuracy over every position of the held-out corpus."""
    if len(heldout) == 0:
        raise ValueError("empty held-out corpus")
    correct = total = 0
    model.eval()
    with T.no_grad():
        for idx in _eval_batches(len(heldout), batch_size):
            tokens, mask = pad_sequences([heldout[i] for i in idx])
            targets, loss_mask = lm_targets(tokens, mask)
            pred = model(tokens, mask).logits.data.argmax(axis=-1)
            correct += int(((pred == targets) & loss_mask).sum())
            total += int(loss_mask.sum())
    return correct / total


def replay_ce(model: TinyDecoder, pool: ReplayPool, batch_size: int = 100) -> float:
    """Token-mean LM cross-entropy on the replay pool."""
    nll_sum, count = 0.0, 0
    model.eval()
    with T.no_grad():
        for idx in _eval_batches(len(pool), batch_size):
            tokens, mask = pool.padded(idx)
            targets, loss_mask = lm_targets(tokens, mask)
            logp = T.log_softmax(model(tokens, mask).logits).data
            nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
            nll_sum += float(nll[loss_mask].astype(np.float64).sum())
            count += int(loss_mask.sum())
    return nll_sum / count


def task_accuracy(model: TinyDecoder, rows: np.ndarray, batch_size: int = 250) -> float:
    """Exact-match accuracy of the greedy answer token."""
    correct = 0
    model.eval()
    with T.no_grad():
        for idx in _eval_batches(len(rows), batch_size):
            tokens = rows[idx.start : idx.stop]
            prompt = tokens[:, :-1]
            logits = model(prompt).logits.data[:, -1]
            correct += int((logits.argmax(axis=-1) == tokens[:, -1]).sum())
    return correct / len(rows)


def evaluate_tasks(model: TinyDecoder, tasks: Sequence[TaskData]) -> tuple[dict[str, float], float]:
    accs = {t.task_id: task_accuracy(model, t.test) for t in tasks}
    ap = float(np.mean(list(accs.values()))) if accs else 0.0
    return accs, ap


def f1_avg(general: float, ap: float) -> float:
    """Harmonic mean of the general score and AP (same units in, same units out)."""
    if general + ap == 0:
        raise ValueError("f1_avg undefined when both scores are zero")
    return 2.0 * general * ap / (general + ap)


@dataclass
class Metrics:
    general: float  # percent
    ap: float  # percent
    f1: float  # percent

    @classmethod
    def of(cls, general_frac: float, ap_frac: float) -> Metrics:
        g, a = 100.0 * general_frac, 100.0 * ap_frac
        return cls(g, a, f1_avg(g, a) if g + a > 0 else 0.0)


# ----------------------------------------------------------------- records


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    task_ids: list[str]
    orig_general: float | None = None
    mode: str = "continual"
    rows: list[dict] = field(default_factory=list)
    final_model: TinyDecoder | None = field(default=None, repr=False, compare=False)
    logs: list[TaskLog] = field(default_factory=list, repr=False, compare=False)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "task_id", "f1", "general", "ap", *self.task_ids])
        for r in self.rows:
            accs = [("%.4f" % r["task_acc"][t]) if t in r["task_acc"] else "" for t in self.task_ids]
            w.writerow([r["step"], r["task_id"], "%.4f" % r["f1"], "%.4f" % r["general"], "%.4f" % r["ap"], *accs])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "record.jsonl").write_text(self.to_jsonl())
        (out / "record.csv").write_text(self.to_csv())
        meta = {
            "config": self.config,
            "config_hash": self.config_hash,
            "task_ids": self.task_ids,
            "orig_general": self.orig_general,
            "mode": self.mode,
        }
        (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _row(step, task_id, model, seen, heldout, cfg_hash, start, ckpt) -> dict:
    accs, ap = evaluate_tasks(model, seen)
    m = Metrics.of(evaluate_general(model, heldout), ap)
    return {
        "step": step,
        "task_id": task_id,
        "general": m.general,
        "ap": m.ap,
        "f1": m.f1,
        "task_acc": {k: 100.0 * v for k, v in accs.items()},
        "checkpoint": ckpt,
        "wall_time": round(time.perf_counter() - start, 3),
        "config_hash": cfg_hash,
    }


def _prepare(base: TinyDecoder, cfg: TrainConfig) -> TinyDecoder:
    model = base.clone()
    if cfg.lora is not None and model.lora is None:
        model.attach_lora(cfg.lora)
    return model


def _select(tasks: Sequence[TaskData], cfg: TrainConfig) -> list[TaskData]:
    if not cfg.tasks:
        return list(tasks)
    by_id = {t.task_id: t for t in tasks}
    missing = [t for t in cfg.tasks if t not in by_id]
    if missing:
        raise ValueError(f"unknown task ids {missing}")
    return [by_id[t] for t in cfg.tasks]


def run_continual(
    base: TinyDecoder,
    tasks: Sequence[TaskData],
    cfg: TrainConfig,
    assets: ReplayAssets | None,
    heldout: Sequence[np.ndarray],
    out_dir: Path | None = None,
    save_checkpoints: bool = False,
) -> RunRecord:
    tasks = _select(tasks, cfg)
    if not tasks:
        raise ValueError("need at least one task")
    _check_assets(cfg, assets)
    if not cfg.uses_replay and assets is not None:
        assets = None
    model = _prepare(base, cfg)
    record = RunRecord(cfg.to_dict(), cfg.digest(), [t.task_id for t in tasks], evaluate_general(base, heldout) * 100.0)
    start = time.perf_counter()
    for k, task in enumerate(tasks):
        log.info("task %d/%d %s (%s)", k + 1, len(tasks), task.task_id, cfg.method)
        record.logs.append(train_task(model, task.train, assets, cfg, task_index=k))
        ckpt = None
        if save_checkpoints and out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            ckpt = f"step{k + 1:02d}.ckpt"
            save_checkpoint(model, Path(out_dir) / ckpt)
        record.append(_row(k + 1, task.task_id, model, tasks[: k + 1], heldout, record.config_hash, start, ckpt))
    record.final_model = model
    if out_dir is not None:
        record.write(out_dir)
    return record


def run_mtl(
    base: TinyDecoder,
    tasks: Sequence[TaskData],
    cfg: TrainConfig,
    assets: ReplayAssets | None,
    heldout: Sequence[np.ndarray],
    out_dir: Path | None = None,
    save_checkpoints: bool = False,
) -> RunRecord:
    """Joint training on the union of all task data; one record row."""
    tasks = _select(tasks, cfg)
    _check_assets(cfg, assets)
    if not cfg.uses_replay:
        assets = None
    combined = combine_tasks(tasks)
    model = _prepare(base, cfg)
    record = RunRecord(cfg.to_dict(), cfg.digest(), [t.task_id for t in tasks], evaluate_general(base, heldout) * 100.0, mode="mtl")
    start = time.perf_counter()
    record.logs.append(train_task(model, combined, assets, cfg, task_index=0))
    ckpt = None
    if save_checkpoints and out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ckpt = "mtl.ckpt"
        save_checkpoint(model, Path(out_dir) / ckpt)
    record.append(_row(1, "mtl", model, tasks, heldout, record.config_hash, start, ckpt))
    record.final_model = model
    if out_dir is not None:
        record.write(out_dir)
    return record


def combine_tasks(tasks: Sequence[TaskData]) -> np.ndarray:
    """Stack task training rows (all tasks share one sequence length)."""
    lengths = {t.train.shape[1] for t in tasks}
    if len(lengths) != 1:
        raise ValueError(f"tasks have different sequence lengths {sorted(lengths)}")
    return np.concatenate([t.train for t in tasks], axis=0)
