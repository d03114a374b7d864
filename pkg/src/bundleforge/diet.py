"""Popularity-free teacher (PCD), multimodal student (UBT) and their training.

The teacher scores a partial bundle from trainable item embeddings alone, so
it never sees user-item data or content.  The student fuses content,
user-feedback and bundle-level embeddings; a separate content-only scoring path
(own bundle attention stack, no feedback, no item embedding) is pulled toward
the teacher's softened distribution.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import BundleTable, ConfigError, ItemCorpus, Scenario, Split, build_eval_cases, make_training_case
from .encoder import (
    FUSION_ROWS,
    AttentionStack,
    FusionParams,
    content_feature,
    encode_bundles,
    encode_items,
    fuse_items,
    score_all,
)
from .evaluation import evaluate
from .numerics import (
    AdamState,
    ParamTable,
    SplitMix64,
    Tensor,
    adam_step,
    backward,
    cosine_rows,
    derive_seed,
    exp,
    kl_div_rows,
    log_softmax_rows,
    no_grad,
    sum_all,
    sum_squares,
    xavier_init,
)

log = logging.getLogger(__name__)


class DistillMode(str, enum.Enum):
    LOGITS = "logits"
    FEATURE = "feature"
    BOTH = "both"
    NONE = "none"


class Variant(str, enum.Enum):
    FULL = "full"
    WO_UI = "wo_ui"
    WO_MM = "wo_mm"
    WO_BI = "wo_bi"


_DROPPED_ROW = {Variant.WO_UI: "feedback", Variant.WO_MM: "content", Variant.WO_BI: "bundle"}

KD_DIRECTIONS = ("standard", "literal")
SIMILARITIES = ("cosine", "dot", "euclidean")


@dataclass
class TrainConfig:
    d: int = 64
    item_layers: int = 1
    bundle_layers: int = 1
    temperature: float = 2.0
    distill_weight: float = 1.0
    l2: float = 1e-5
    lr: float = 5e-3
    batch_size: int = 256
    epochs: int = 60
    patience: int = 20
    seed: int = 0
    distill: DistillMode = DistillMode.LOGITS
    kd_direction: str = "standard"
    feature_similarity: str = "cosine"
    teacher_epochs: int = 60
    teacher_lr: float = 5e-3

    def __post_init__(self):
        self.distill = DistillMode(self.distill)
        self.validate()

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.d < 1 or self.item_layers < 0 or self.bundle_layers < 0:
            raise ConfigError("d must be >= 1 and layer counts >= 0")
        if self.distill_weight < 0 or self.l2 < 0:
            raise ConfigError("distill_weight and l2 must be >= 0")
        if self.lr <= 0 or self.teacher_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.teacher_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1, epochs >= 0")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ConfigError(f"kd_direction must be one of {KD_DIRECTIONS}")
        if self.feature_similarity not in SIMILARITIES:
            raise ConfigError(f"feature_similarity must be one of {SIMILARITIES}")


# -- models ----------------------------------------------------------------

class Teacher:
    """PCD: bundle attention over trainable item embeddings, scored by inner product."""

    def __init__(self, n_items: int, d: int = 64, layers: int = 1, seed: int = 0):
        self.params = ParamTable()
        self.embedding = self.params.add(
            "teacher.item_embedding", xavier_init(n_items, d, derive_seed(seed, "teacher.item_embedding"))
        )
        self.stack = AttentionStack.create(self.params, "teacher.bundle", d, layers, seed)
        self.frozen = False
        self.meta = {"kind": "teacher", "n_items": n_items, "d": d, "bundle_layers": layers}

    @property
    def n_items(self) -> int:
        return self.embedding.shape[0]

    def bundle_repr(self, queries) -> Tensor:
        return encode_bundles(self.embedding, queries, self.stack)

    def logits(self, queries) -> Tensor:
        return score_all(self.bundle_repr(queries), self.embedding)

    def score(self, queries) -> np.ndarray:
        with no_grad():
            return self.logits(queries).data

    def freeze(self) -> "Teacher":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
            p.data.setflags(write=False)
        self.frozen = True
        return self


class Student:
    """UBT: fused item encoder + bundle encoder, plus the content-only path."""

    def __init__(
        self,
        corpus: ItemCorpus,
        feedback: np.ndarray,
        d: int = 64,
        item_layers: int = 1,
        bundle_layers: int = 1,
        seed: int = 0,
        variant: Variant | str = Variant.FULL,
        content_path: bool = True,
    ):
        self.variant = Variant(variant)
        self.rows = tuple(r for r in FUSION_ROWS if r != _DROPPED_ROW.get(self.variant))
        self.text = Tensor(corpus.text)
        self.media = Tensor(corpus.media)
        self.n_items = corpus.n
        self.feedback = self._check_feedback(feedback)
        self.content_path = content_path
        self.meta = {
            "kind": "student", "n_items": corpus.n, "d": d, "item_layers": item_layers,
            "bundle_layers": bundle_layers, "variant": self.variant.value, "content_path": content_path,
            "feedback_dim": self.feedback.shape[1],
        }

        p = self.params = ParamTable()
        init = lambda name, r, c: p.add(name, xavier_init(r, c, derive_seed(seed, name)))  # noqa: E731
        uses_content = "content" in self.rows or content_path
        self.map_text = init("student.map_text", corpus.d_t, d) if uses_content else None
        self.map_media = init("student.map_media", corpus.d_m, d) if uses_content else None
        self.fusion = FusionParams(
            init("student.w_content", d, d) if "content" in self.rows else None,
            init("student.w_feedback", self.feedback.shape[1], d) if "feedback" in self.rows else None,
            init("student.item_embedding", corpus.n, d) if "bundle" in self.rows else None,
        )
        self.item_stack = AttentionStack.create(p, "student.item", d, item_layers, seed)
        self.bundle_stack = AttentionStack.create(p, "student.bundle", d, bundle_layers, seed)
        self.modality_stack = (
            AttentionStack.create(p, "student.modality_bundle", d, bundle_layers, seed) if content_path else None
        )

    def _check_feedback(self, feedback) -> np.ndarray:
        fb = np.asarray(getattr(feedback, "features", feedback), dtype=np.float32)
        if fb.ndim != 2:
            raise ValueError("feedback features must be a 2-D table")
        if fb.shape[0] < self.n_items:
            raise KeyError(f"no feedback features for item {fb.shape[0]} (table has {fb.shape[0]} rows)")
        bad = np.flatnonzero(~np.isfinite(fb).all(axis=1))
        if len(bad):
            raise ValueError(f"non-finite feedback features for item {int(bad[0])}")
        return fb

    def content(self) -> Tensor:
        return content_feature(self.text, self.media, self.map_text, self.map_media)

    def item_matrix(self, feedback=None, content: Tensor | None = None) -> Tensor:
        fb = self.feedback if feedback is None else self._check_feedback(feedback)
        if "content" in self.rows and content is None:
            content = self.content()
        F = fuse_items(content, Tensor(fb), self.fusion, self.rows)
        return encode_items(F, self.item_stack)

    def forward(self, queries, feedback=None, with_content: bool | None = None):
        """``(main_logits, content_logits, content_bundle_repr)``; the last two may be None."""
        with_content = self.content_path if with_content is None else with_content
        c = self.content() if (with_content or "content" in self.rows) else None
        f = self.item_matrix(feedback, c)
        main = score_all(encode_bundles(f, queries, self.bundle_stack), f)
        if not with_content:
            return main, None, None
        if self.modality_stack is None:
            raise ValueError("this student was built without a content path")
        e_bc = encode_bundles(c, queries, self.modality_stack)
        return main, score_all(e_bc, c), e_bc

    def score(self, queries) -> np.ndarray:
        with no_grad():
            return self.forward(queries, with_content=False)[0].data

    def content_score(self, queries) -> np.ndarray:
        with no_grad():
            return self.forward(queries, with_content=True)[1].data


def pcd_forward(case, teacher: Teacher) -> Tensor:
    if not case.query:
        raise ValueError("empty query")
    return teacher.logits([case.query])


def ubt_forward(case, student: Student, feedback=None):
    main, content, _ = student.forward([case.query], feedback, with_content=True)
    return main, content


# -- losses ----------------------------------------------------------------

def _target_mask(target_sets, n: int, dtype) -> np.ndarray:
    Y = np.zeros((len(target_sets), n), dtype=dtype)
    for b, targets in enumerate(target_sets):
        if not len(targets):
            raise ValueError("every case needs at least one target")
        Y[b, list(targets)] = 1.0
    return Y


def construction_loss(logits: Tensor, target_sets) -> Tensor:
    """Negative log-likelihood of the targets, normalised by batch size times item count."""
    if len(target_sets) == 0:
        raise ValueError("empty batch")
    B, n = logits.shape
    Y = _target_mask(target_sets, n, logits.data.dtype)
    return sum_all(log_softmax_rows(logits) * Y) * (-1.0 / (B * n))


def _softmax_const(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits_distill_loss(
    student_logits: Tensor, teacher_logits, T: float = 2.0, batch_size: int | None = None,
    direction: str = "standard",
) -> Tensor:
    """Soft-target distillation: mean over the batch of ``KL * T^2``.

    ``standard`` is ``sum P_t (ln P_t - ln P_s)``; ``literal`` swaps the roles.
    The teacher side is always a constant.
    """
    if T <= 0:
        raise ConfigError(f"temperature must be > 0, got {T}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t = t.astype(student_logits.data.dtype)
    B = batch_size or student_logits.shape[0]
    log_ps = log_softmax_rows(student_logits * (1.0 / T))
    if direction == "standard":
        per_case = kl_div_rows(log_ps, _softmax_const(t / T))
    elif direction == "literal":
        zt = t / T
        log_pt = zt - zt.max(axis=-1, keepdims=True)
        log_pt = log_pt - np.log(np.exp(log_pt).sum(axis=-1, keepdims=True))
        per_case = sum_all(exp(log_ps) * (log_ps - log_pt))
    else:
        raise ConfigError(f"unknown kd_direction {direction!r}")
    return sum_all(per_case) * (T * T / B)


def feature_distill_loss(teacher_repr, student_repr: Tensor, similarity: str = "cosine") -> Tensor:
    """Mean of ``1 - cosine(e_teacher, e_student)`` over the batch (range [0, 2])."""
    t = teacher_repr.data if isinstance(teacher_repr, Tensor) else np.asarray(teacher_repr)
    target = Tensor(t, dtype=student_repr.data.dtype)
    N = student_repr.shape[0]
    if similarity == "cosine":
        zero = (np.linalg.norm(t, axis=-1) == 0) | (np.linalg.norm(student_repr.data, axis=-1) == 0)
        if zero.any():
            warnings.warn("zero-norm bundle representation; similarity taken as 0", stacklevel=2)
        return (sum_all(cosine_rows(student_repr, target)) * (-1.0 / N)) + 1.0
    if similarity == "dot":
        return sum_all(student_repr * target) * (-1.0 / N)
    if similarity == "euclidean":
        return sum_squares(student_repr - target) * (1.0 / N)
    raise ConfigError(f"unknown similarity {similarity!r}")


def l2_penalty(params) -> Tensor:
    total = None
    for p in params.values():
        term = sum_squares(p)
        total = term if total is None else total + term
    return total


def total_loss(L_b: Tensor, L_d, lam: float, beta: float, params) -> Tensor:
    """``L_b + lam * L_d + beta * sum ||theta||^2``."""
    out = L_b
    if L_d is not None and lam != 0:
        out = out + L_d * lam
    if beta != 0 and params:
        out = out + l2_penalty(params) * beta
    return out


# -- training --------------------------------------------------------------

@dataclass
class History:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_recall: float = float("-inf")

    def to_tsv(self) -> str:
        lines = ["epoch\tL_b\tL_d\tval_recall@20"]
        for epoch, lb, ld, rec in self.rows:
            lines.append(f"{epoch}\t{lb:.9g}\t{ld:.9g}\t{rec:.9g}")
        return "\n".join(lines) + "\n"

    @property
    def loss_trace(self) -> list:
        return [(e, lb, ld) for e, lb, ld, _ in self.rows]


def _ids(split: np.ndarray, which: Split) -> np.ndarray:
    return np.flatnonzero(split == which)


def validation_cases(bundles: BundleTable, split: np.ndarray, seed: int) -> list:
    val = _ids(split, Split.VAL)
    if len(val) == 0:
        val = _ids(split, Split.TRAIN)
    return build_eval_cases(bundles, val, None, [Scenario.OVERALL], seed)[Scenario.OVERALL]


def _val_recall(model, cases) -> float:
    if not cases:
        return 0.0
    return evaluate(model, {Scenario.OVERALL: cases}, ks=(20,))[0].metrics["recall@20"]


def _fit(model, params: ParamTable, batch_loss, bundles, split, epochs, patience, lr, batch_size, seed, stream):
    train_ids = _ids(split, Split.TRAIN)
    if len(train_ids) == 0:
        raise ValueError("training split is empty")
    val_cases = validation_cases(bundles, split, derive_seed(seed, "validation"))
    rng = SplitMix64(derive_seed(seed, stream))
    adam = AdamState(lr=lr)
    history = History()
    best = params.snapshot()
    stale = 0
    for epoch in range(epochs):
        order = train_ids[rng.permutation(len(train_ids))]
        cases = [make_training_case(bundles[b], rng, int(b)) for b in order]
        sums = np.zeros(2)
        for start in range(0, len(cases), batch_size):
            batch = cases[start:start + batch_size]
            loss, lb, ld = batch_loss(batch)
            backward(loss)
            adam_step(params, adam)
            sums += (lb * len(batch), ld * len(batch))
        recall = _val_recall(model, val_cases)
        history.rows.append((epoch, sums[0] / len(cases), sums[1] / len(cases), recall))
        log.info("%s epoch %d L_b %.6g L_d %.6g val R@20 %.4f", stream, epoch, *history.rows[-1][1:])
        if recall > history.best_recall:
            history.best_recall, history.best_epoch = recall, epoch
            best = params.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    if epochs:
        params.restore(best)
    return history


def train_teacher(corpus_or_n, bundles: BundleTable, split: np.ndarray, config: TrainConfig):
    """Fit PCD on its own construction loss, early-stop on validation Recall@20, freeze."""
    n = corpus_or_n if isinstance(corpus_or_n, int) else corpus_or_n.n
    teacher = Teacher(n, config.d, config.bundle_layers, derive_seed(config.seed, "teacher"))

    def batch_loss(batch):
        loss = construction_loss(teacher.logits([c.query for c in batch]), [c.target for c in batch])
        return loss, loss.item(), 0.0

    history = _fit(
        teacher, teacher.params, batch_loss, bundles, split, config.teacher_epochs, config.patience,
        config.teacher_lr, config.batch_size, config.seed, "teacher",
    )
    return teacher.freeze(), history


def _distills(config: TrainConfig) -> bool:
    # a zero weight makes any mode the plain backbone
    return DistillMode(config.distill) is not DistillMode.NONE and config.distill_weight > 0


def build_student(corpus: ItemCorpus, feedback, config: TrainConfig, variant=Variant.FULL) -> Student:
    return Student(
        corpus, feedback, config.d, config.item_layers, config.bundle_layers,
        seed=derive_seed(config.seed, "student"), variant=variant, content_path=_distills(config),
    )


def train_student(
    corpus: ItemCorpus, bundles: BundleTable, split: np.ndarray, feedback, teacher: Teacher | None,
    config: TrainConfig, variant=Variant.FULL,
):
    """Fit UBT with construction loss, distillation per ``config.distill`` and L2."""
    mode = DistillMode(config.distill)
    if mode is not DistillMode.NONE and teacher is None:
        raise ValueError(f"distill mode {mode.value!r} needs a trained teacher")
    student = build_student(corpus, feedback, config, variant)
    distill = _distills(config)
    T, lam, beta = config.temperature, config.distill_weight, config.l2

    def batch_loss(batch):
        queries = [c.query for c in batch]
        main, content_logits, e_bc = student.forward(queries, with_content=distill)
        L_b = construction_loss(main, [c.target for c in batch])
        L_d = None
        if distill and mode in (DistillMode.LOGITS, DistillMode.BOTH):
            L_d = logits_distill_loss(content_logits, teacher.score(queries), T, len(batch), config.kd_direction)
        if distill and mode in (DistillMode.FEATURE, DistillMode.BOTH):
            with no_grad():
                e_t = teacher.bundle_repr(queries).data
            fd = feature_distill_loss(e_t, e_bc, config.feature_similarity)
            L_d = fd if L_d is None else L_d + fd
        loss = total_loss(L_b, L_d, lam, beta, student.params)
        return loss, L_b.item(), 0.0 if L_d is None else L_d.item()

    history = _fit(
        student, student.params, batch_loss, bundles, split, config.epochs, config.patience, config.lr,
        config.batch_size, config.seed, "student",
    )
    return student, history


def ablate_fusion(
    variant, corpus: ItemCorpus, bundles: BundleTable, split: np.ndarray, feedback, config: TrainConfig,
    teacher: Teacher | None = None,
):
    """Train the student with one fusion row removed (distillation only if configured)."""
    try:
        variant = Variant(variant)
    except ValueError:
        raise ConfigError(f"unknown ablation variant {variant!r}") from None
    if variant is Variant.FULL:
        raise ConfigError("ablation needs one of wo_ui, wo_mm, wo_bi")
    return train_student(corpus, bundles, split, feedback, teacher, config, variant)
