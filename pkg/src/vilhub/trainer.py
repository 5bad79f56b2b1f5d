"""Mini-batch gradient-descent training of the dual-head encoder and the
gamma-ablation harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace, asdict
from typing import Sequence

import numpy as np

from . import report
from .data import Dataset, TRAIN, VALID, TEST, SPLIT_NAMES
from .embed import EmbeddingTable
from .encoder import EncoderDims, EncoderOutput, EncoderParams, backward, forward, init_params
from .losses import LossConfig, cross_entropy_with_grad, loss_and_grad, softmax_rows
from .metrics import ConfusionAccumulator, ShapePrediction, miou, pointwise_accuracy

log = logging.getLogger(__name__)

PRECISIONS = {"train32": np.float32, "check64": np.float64}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_shapes: int = 8
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.7
    lr_decay_every: int = 20
    tau: float = 0.07
    gamma: float = 1.0
    use_prior: bool = False
    seed: int = 0
    precision: str = "train32"
    h1: int = 64
    h2: int = 128
    head_hidden: int = 32
    prior_dim: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_shapes < 1:
            raise ValueError("batch_shapes must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        LossConfig(self.tau, self.gamma)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.tau, self.gamma)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def lr_at(self, epoch: int) -> float:
        """Step schedule; ``epoch`` counts from 0."""
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class EpochRecord:
    epoch: int
    vl_part: float
    hub_part: float
    vl_mat: float
    hub_mat: float
    shape_ce: float
    total: float
    val_miou_part: float | None
    val_miou_mat: float | None
    pref_var_part: float | None
    pref_var_mat: float | None
    lr: float
    val_acc_part: float | None = None
    val_acc_mat: float | None = None

    HISTORY_KEYS = ("epoch", "vl_part", "hub_part", "vl_mat", "hub_mat", "shape_ce", "total",
                    "val_miou_part", "val_miou_mat", "pref_var_part", "pref_var_mat", "lr")

    def as_json(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.HISTORY_KEYS}


@dataclass
class TrainHistory:
    epochs: list

    def to_jsonl(self) -> str:
        return "".join(report.dumps(r.as_json()) + "\n" for r in self.epochs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def make_dims(dataset: Dataset, part_table: EmbeddingTable, cfg: TrainConfig) -> EncoderDims:
    return EncoderDims(n_shape=len(dataset.shape_vocab), d=part_table.dim, h1=cfg.h1, h2=cfg.h2,
                       head_hidden=cfg.head_hidden, prior_dim=cfg.prior_dim,
                       n_part=len(dataset.part_vocab), n_mat=len(dataset.material_vocab))


def check_tables(dataset: Dataset, part_table: EmbeddingTable, mat_table: EmbeddingTable) -> None:
    if part_table.names != dataset.part_vocab:
        raise ValueError("part embedding vocabulary does not match the dataset")
    if mat_table.names != dataset.material_vocab:
        raise ValueError("material embedding vocabulary does not match the dataset")
    if part_table.dim != mat_table.dim:
        raise ValueError("part and material embeddings differ in dimension")


def batch_objective(params: EncoderParams, batch: Sequence, tables: dict, loss_cfg: LossConfig,
                    use_prior: bool):
    """Forward + summed loss over both heads and the shape head, and its gradients."""
    out, cache = forward(params, batch, use_prior)
    part_y = np.concatenate([s.part_labels for s in batch])
    mat_y = np.concatenate([s.material_labels for s in batch])
    part_bd, _, d_part = loss_and_grad(out.part_features, tables["part"], part_y, loss_cfg)
    mat_bd, _, d_mat = loss_and_grad(out.material_features, tables["mat"], mat_y, loss_cfg)
    ce, d_logits = cross_entropy_with_grad(out.shape_logits, [s.shape_class for s in batch])
    grads = backward(params, cache, EncoderOutput(d_part, d_mat, d_logits))
    total = part_bd.total + mat_bd.total + ce
    return total, (part_bd, mat_bd, ce), grads


def predict(params: EncoderParams, shapes: Sequence, tables: dict, tau: float,
            use_prior: bool = False, batch_shapes: int = 32):
    """Argmax predictions per shape plus the pooled class preference per head."""
    preds = []
    pref_sum = {h: np.zeros(len(tables[h])) for h in ("part", "mat")}
    n_points = 0
    for start in range(0, len(shapes), batch_shapes):
        batch = shapes[start:start + batch_shapes]
        out, _ = forward(params, batch, use_prior)
        labels = {}
        for h, feats in (("part", out.part_features), ("mat", out.material_features)):
            t = tables[h].vectors.astype(feats.dtype) if hasattr(tables[h], "vectors") else tables[h]
            z = feats @ t.T / feats.dtype.type(tau)
            labels[h] = z.argmax(axis=1)
            pref_sum[h] += softmax_rows(z).sum(axis=0, dtype=np.float64)
        n_points += len(out.part_features)
        classes = out.shape_logits.argmax(axis=1)
        for b in range(len(batch)):
            sl = out.shape_slice(b)
            preds.append(ShapePrediction(int(classes[b]), labels["part"][sl], labels["mat"][sl]))
    prefs = {h: v / max(n_points, 1) for h, v in pref_sum.items()}
    return preds, prefs


def segmentation_scores(preds: Sequence[ShapePrediction], shapes: Sequence, n_part: int,
                        n_mat: int) -> dict:
    part_acc, mat_acc = ConfusionAccumulator(n_part), ConfusionAccumulator(n_mat)
    for p, s in zip(preds, shapes):
        part_acc.add(p.part_labels, s.part_labels)
        mat_acc.add(p.material_labels, s.material_labels)
    pp = np.concatenate([p.part_labels for p in preds])
    pm = np.concatenate([p.material_labels for p in preds])
    gp = np.concatenate([s.part_labels for s in shapes])
    gm = np.concatenate([s.material_labels for s in shapes])
    return {
        "part_acc": pointwise_accuracy(pp, gp),
        "mat_acc": pointwise_accuracy(pm, gm),
        "part_iou": miou(part_acc),
        "mat_iou": miou(mat_acc),
        "part_confusion": part_acc,
    }


def _table_arrays(tables: dict, dtype) -> dict:
    return {h: np.array(t.vectors, dtype=dtype) for h, t in tables.items()}


def train(dataset: Dataset, embeddings: dict, cfg: TrainConfig, params: EncoderParams | None = None):
    """Train from scratch (or from ``params``); returns ``(params, TrainHistory)``.

    ``embeddings`` maps ``"part"`` and ``"mat"`` to frozen EmbeddingTables.
    """
    check_tables(dataset, embeddings["part"], embeddings["mat"])
    train_shapes = dataset.subset(TRAIN)
    if not train_shapes:
        raise ValueError("dataset has no training shapes")
    valid_shapes = dataset.subset(VALID)
    dtype = cfg.dtype
    if params is None:
        params = init_params(make_dims(dataset, embeddings["part"], cfg), cfg.seed).astype(dtype)
    tables = _table_arrays(embeddings, dtype)
    loss_cfg = cfg.loss
    order_rng = np.random.default_rng([cfg.seed, 11])
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = order_rng.permutation(len(train_shapes))
        sums = np.zeros(6)
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_shapes)):
            batch = [train_shapes[i] for i in order[start:start + cfg.batch_shapes]]
            total, (part_bd, mat_bd, ce), grads = batch_objective(
                params, batch, tables, loss_cfg, cfg.use_prior)
            if not np.isfinite(total):
                raise TrainingDiverged(epoch + 1, b + 1)
            sums += (part_bd.vl, part_bd.hub, mat_bd.vl, mat_bd.hub, ce, total)
            n_batches += 1
            if lr > 0:
                params.step(grads, lr)
        means = sums / n_batches
        val = {"val_miou_part": None, "val_miou_mat": None, "pref_var_part": None,
               "pref_var_mat": None, "val_acc_part": None, "val_acc_mat": None}
        if valid_shapes:
            preds, prefs = predict(params, valid_shapes, tables, cfg.tau, cfg.use_prior)
            scores = segmentation_scores(preds, valid_shapes, len(dataset.part_vocab),
                                         len(dataset.material_vocab))
            val = {"val_miou_part": scores["part_iou"][1], "val_miou_mat": scores["mat_iou"][1],
                   "pref_var_part": float(np.var(prefs["part"])),
                   "pref_var_mat": float(np.var(prefs["mat"])),
                   "val_acc_part": scores["part_acc"], "val_acc_mat": scores["mat_acc"]}
        rec = EpochRecord(epoch + 1, *map(float, means), lr=lr, **val)
        history.append(rec)
        log.info("epoch %d total %.4f vl_part %.4f val_miou_part %s", rec.epoch, rec.total,
                 rec.vl_part, rec.val_miou_part)
    return params, TrainHistory(history)


def frequency_terciles(dataset: Dataset, n_classes: int, attr: str = "part_labels"):
    """Head and tail class ids by training-split point frequency.

    Only classes seen in training are ranked; ties rank the lower id first.
    """
    freq = np.zeros(n_classes, dtype=np.int64)
    for s in dataset.subset(TRAIN):
        freq += np.bincount(getattr(s, attr), minlength=n_classes)
    seen = np.flatnonzero(freq > 0)
    ranked = seen[np.lexsort((seen, -freq[seen]))]
    groups = np.array_split(ranked, 3)
    return groups[0], groups[-1]


def _mean_defined(values: np.ndarray):
    v = values[~np.isnan(values)]
    return float(v.mean()) if len(v) else None


def ablate_gamma(dataset: Dataset, embeddings: dict, base_cfg: TrainConfig,
                 gammas: Sequence[float], eval_split: int = TEST, keep_params: bool = False):
    """Train one model per gamma (all else fixed) and compare head/tail part mIoU.

    Returns the report dict, or ``(report, [params per gamma])`` with ``keep_params``.
    """
    if not gammas:
        raise ValueError("need at least one gamma")
    eval_shapes = dataset.subset(eval_split)
    if not eval_shapes:
        raise ValueError(f"split {SPLIT_NAMES[eval_split]!r} is empty")
    n_part, n_mat = len(dataset.part_vocab), len(dataset.material_vocab)
    head, tail = frequency_terciles(dataset, n_part)
    rows, models = [], []
    for gamma in gammas:
        cfg = replace(base_cfg, gamma=float(gamma))
        params, history = train(dataset, embeddings, cfg)
        if keep_params:
            models.append(params)
        tables = _table_arrays(embeddings, cfg.dtype)
        preds, prefs = predict(params, eval_shapes, tables, cfg.tau, cfg.use_prior)
        scores = segmentation_scores(preds, eval_shapes, n_part, n_mat)
        per_class, overall = scores["part_iou"]
        rows.append({
            "gamma": float(gamma),
            "overall_miou_part": overall,
            "head_miou_part": _mean_defined(per_class[head]),
            "tail_miou_part": _mean_defined(per_class[tail]),
            "pref_var_part": float(np.var(prefs["part"])),
            "overall_miou_mat": scores["mat_iou"][1],
            "pref_var_mat": float(np.var(prefs["mat"])),
            "final_total_loss": history.epochs[-1].total,
        })
    report = {"eval_split": SPLIT_NAMES[eval_split], "head_classes": [int(c) for c in head],
              "tail_classes": [int(c) for c in tail], "rows": rows}
    if len(rows) > 1:
        base = rows[0]
        report["deltas"] = [
            {k: (None if r[k] is None or base[k] is None else r[k] - base[k])
             for k in ("gamma", "overall_miou_part", "head_miou_part", "tail_miou_part",
                       "pref_var_part")}
            for r in rows[1:]
        ]
    return (report, models) if keep_params else report
