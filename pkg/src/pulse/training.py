"""Training stages: joint self-supervised pretraining, privileged knowledge
transfer from a frozen teacher, and frozen-encoder classifier finetuning,
plus the named end-to-end configurations A-E.

Stage functions are deterministic given their StageConfig seed: every random
choice (init, masking, shared/private split, shuffling, validation split)
draws from its own derived stream.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .dataset import FoldArchive
from .errors import InvariantError, NumericsError
from .losses import LossWeights
from .mae import (EmbeddingBundle, MaeConfig, MaeModel, MaskPlan, all_private_split,
                  make_mask_plan, patchify, split_shared_private)
from .metrics import (FoldMetrics, MetricsReport, accuracy_at_threshold, auprc, auroc,
                      best_threshold, macro_multiclass)
from .transfer import FusionLayer, TransferHead, head_trainables

log = logging.getLogger(__name__)

CHEAP_MODALITIES = ("ECG", "BVP", "ACC", "TEMP")
TEACHER_MODALITY = "EDA"
ALL_MODALITIES = CHEAP_MODALITIES + (TEACHER_MODALITY,)

HISTORY_COLUMNS = ("epoch", "loss_total", "loss_align", "loss_rec", "loss_hid",
                   "loss_emb", "loss_perp", "val_auprc", "val_acc")


# ---------------------------------------------------------------------------
# Deterministic RNG streams


def rng_stream(seed: int, *tags) -> np.random.Generator:
    ints = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(ints)))


def child_seed(seed: int, *tags) -> int:
    return int(rng_stream(seed, *tags).integers(2 ** 62))


# ---------------------------------------------------------------------------
# Optimizer and schedule


class Adam:
    """Adaptive-moment optimizer over a name -> Tensor parameter dict."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float32) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float32) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            p.data = p.data - np.float32(lr) * update


def schedule_lr(cfg, epoch: int) -> float:
    if cfg.scheduler == "cosine" and cfg.epochs > 1:
        floor = 0.01 * cfg.learning_rate
        return floor + 0.5 * (cfg.learning_rate - floor) * (
            1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    return cfg.learning_rate


# ---------------------------------------------------------------------------
# Stage configuration


@dataclass
class StageConfig:
    stage: str  # pretrain | distill | finetune
    epochs: int
    batch_size: int = 128
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scheduler: str = "none"  # none | cosine
    seed: int = 0
    modalities: tuple = CHEAP_MODALITIES
    teacher: str = TEACHER_MODALITY
    matched_layers: object = "all"  # "all" | "final" | tuple of 1-based layers
    weights: LossWeights = field(default_factory=LossWeights)
    val_fraction: float = 0.1
    subsample_factor: int = 40
    align_mode: str = "hinge"  # hinge | anchored
    anchor: str = "ECG"
    eda_joint: bool = False  # symmetric setup: EDA joins the aligned set
    train_teacher: bool = False  # reconstruction-only teacher pretraining
    fusion_frozen: bool = False
    unfreeze_epoch: int | None = None
    fusion_mode: str = "average"  # average | concat (finetune feature fusion)
    task: str = "binary"  # binary | 3-class
    hidden_dim: int = 4

    def validate(self) -> None:
        if self.stage not in ("pretrain", "distill", "finetune"):
            raise InvariantError(f"unknown stage {self.stage!r}")
        if self.epochs < 0:
            raise InvariantError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise InvariantError("learning rate must be > 0")
        if self.batch_size < 1:
            raise InvariantError("batch size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise InvariantError("val_fraction must be in (0, 1)")
        if self.subsample_factor < 1:
            raise InvariantError("subsample factor must be >= 1")
        if self.align_mode not in ("hinge", "anchored"):
            raise InvariantError(f"unknown align mode {self.align_mode!r}")
        if self.task not in ("binary", "3-class"):
            raise InvariantError(f"unknown task {self.task!r}")
        self.weights.validate()


def paper_stage_config(stage: str, **overrides) -> StageConfig:
    """Published defaults: 300-epoch pretrain/finetune, 100-epoch transfer."""
    base = {
        "pretrain": dict(stage="pretrain", epochs=300, batch_size=128, learning_rate=1e-4),
        "distill": dict(stage="distill", epochs=100, batch_size=128, learning_rate=1e-4),
        "finetune": dict(stage="finetune", epochs=300, batch_size=128, learning_rate=1e-3,
                         scheduler="cosine"),
    }[stage]
    base.update(overrides)
    return StageConfig(**base)


# ---------------------------------------------------------------------------
# Data plumbing


def fold_modality_windows(fold: FoldArchive, split: str) -> dict:
    """Per-modality window arrays from a fold ('train' or 'test')."""
    x = fold.x_train if split == "train" else fold.x_test
    y = fold.y_train if split == "train" else fold.y_test
    order = {ch: i for i, ch in enumerate(fold.channels)}
    return {
        "ECG": x[:, order["ECG"]],
        "BVP": x[:, order["BVP"]],
        "TEMP": x[:, order["TEMP"]],
        "ACC": x[:, order["ACC_net"]],
        "EDA": y,
    }


def fold_labels(fold: FoldArchive, split: str) -> np.ndarray:
    return fold.l_train if split == "train" else fold.l_test


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [c for c in chunks if len(c) >= 2]  # a single item has no in-batch pairs


def _snapshot(models: dict) -> dict:
    return {m: {k: p.data.copy() for k, p in model.params.items()}
            for m, model in models.items()}


def _restore(models: dict, snap: dict) -> None:
    for m, model in models.items():
        for k, p in model.params.items():
            p.data = snap[m][k]


def _full_plan(n_patches: int) -> MaskPlan:
    return MaskPlan(n_patches=n_patches,
                    masked_idx=np.empty(0, dtype=np.int64),
                    visible_idx=np.arange(n_patches, dtype=np.int64))


def _shared_tokens(bundle: EmbeddingBundle, layer: int) -> Tensor:
    return ad.gather(bundle.patch_tokens(layer), bundle.shared_idx, axis=1)


def _private_tokens(bundle: EmbeddingBundle, layer: int) -> Tensor:
    return ad.gather(bundle.patch_tokens(layer), bundle.private_idx, axis=1)


# ---------------------------------------------------------------------------
# Stage 1: joint self-supervised pretraining


def pretrain(windows_by_modality: dict, model_cfg: MaeConfig, cfg: StageConfig):
    """Pretrain the jointly-aligned modalities, plus the teacher separately.

    Returns (models, history). The joint set is ``cfg.modalities`` (plus the
    teacher when ``cfg.eda_joint``); with ``cfg.train_teacher`` the teacher
    modality gets its own reconstruction-only pass.
    """
    cfg.validate()
    model_cfg.validate()
    joint = list(cfg.modalities)
    if cfg.eda_joint and cfg.teacher not in joint:
        joint.append(cfg.teacher)
    for m in joint:
        if m not in windows_by_modality:
            raise InvariantError(f"pretraining needs windows for modality {m}")

    models = {m: MaeModel(model_cfg, seed=child_seed(cfg.seed, "init", m)) for m in joint}
    history = []
    if joint:
        history += _pretrain_group(models, {m: windows_by_modality[m] for m in joint},
                                   model_cfg, cfg, align=len(joint) >= 2, tag="joint")
    if cfg.train_teacher and not cfg.eda_joint:
        if cfg.teacher not in windows_by_modality:
            raise InvariantError(f"teacher pretraining needs windows for {cfg.teacher}")
        teacher = {cfg.teacher: MaeModel(model_cfg, seed=child_seed(cfg.seed, "init", cfg.teacher))}
        history += _pretrain_group(teacher, {cfg.teacher: windows_by_modality[cfg.teacher]},
                                   model_cfg, cfg, align=False, tag="teacher", all_private=True)
        models.update(teacher)
    return models, history


def _pretrain_group(models: dict, windows: dict, model_cfg: MaeConfig, cfg: StageConfig,
                    align: bool, tag: str, all_private: bool = False) -> list:
    names = sorted(models)
    n = len(next(iter(windows.values())))
    patched = {m: patchify(np.asarray(windows[m], dtype=np.float32), model_cfg.patch_len)
               for m in names}
    params = {}
    for m in names:
        for k, p in models[m].trainable().items():
            params[f"{m}.{k}"] = p
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    history = []
    snap = _snapshot(models)
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg, epoch)
        rng = rng_stream(cfg.seed, tag, "shuffle", epoch)
        sums = {"align": 0.0, "rec": 0.0, "total": 0.0}
        count = 0
        for step, batch in enumerate(_batches(n, cfg.batch_size, rng)):
            plan = make_mask_plan(model_cfg.n_patches, model_cfg.mask_ratio,
                                  child_seed(cfg.seed, tag, "mask", epoch, step))
            ratio = 1.0 if all_private else model_cfg.private_ratio
            split = split_shared_private(len(plan.visible_idx), ratio,
                                         child_seed(cfg.seed, tag, "split", epoch, step))
            bundles = {m: models[m].encode(windows[m][batch], plan, split) for m in names}

            shared = {m: _shared_tokens(bundles[m], -1) for m in names}
            if align and split[0].size:
                pooled = {m: ad.tmean(shared[m], axis=1) for m in names}
                if cfg.align_mode == "hinge":
                    align_loss = L.alignment_hinge(pooled, cfg.weights.margin_alpha)
                else:
                    align_loss = L.anchored_contrastive(pooled, cfg.anchor)
            else:
                align_loss = Tensor(np.float64(0.0))

            if split[0].size and len(names) > 1:
                fused = shared[names[0]]
                for m in names[1:]:
                    fused = ad.add(fused, shared[m])
                fused = ad.mul(fused, 1.0 / len(names))
            else:
                fused = None
            rec_loss = Tensor(np.float64(0.0))
            for m in names:
                fused_m = fused if fused is not None else \
                    (shared[m] if split[0].size else None)
                recon = models[m].decode(fused_m, _private_tokens(bundles[m], -1), plan, split)
                recon_p = ad.reshape(recon, (len(batch), model_cfg.n_patches, model_cfg.patch_len))
                rec_loss = ad.add(rec_loss, L.reconstruction_mse(
                    patched[m][batch], recon_p, plan.masked_idx))
            rec_loss = ad.mul(rec_loss, 1.0 / len(names))

            total = L.pretrain_total(align_loss, rec_loss, cfg.weights)
            if not np.isfinite(total.item()):
                log.warning("%s pretraining diverged at epoch %d; restoring last snapshot", tag, epoch)
                _restore(models, snap)
                history.append({"epoch": epoch, "aborted": 1})
                return history
            opt.zero_grad()
            total.backward()
            opt.step(lr)
            sums["align"] += align_loss.item()
            sums["rec"] += rec_loss.item()
            sums["total"] += total.item()
            count += 1
        snap = _snapshot(models)
        history.append({"epoch": epoch,
                        "loss_total": sums["total"] / max(count, 1),
                        "loss_align": sums["align"] / max(count, 1),
                        "loss_rec": sums["rec"] / max(count, 1)})
    return history


# ---------------------------------------------------------------------------
# Stage 2: privileged knowledge transfer


def resolve_layer_map(matched_layers, student_depth: int, teacher_depth: int) -> list:
    """(student_layer, teacher_layer) 0-based pairs for the matched set.

    "all" maps every student block (proportional rounding when depths
    differ); "final" yields an empty map (hidden supervision off); a tuple
    names 1-based student blocks.
    """
    if matched_layers == "final":
        return []
    if matched_layers == "all":
        student_ids = list(range(student_depth))
    else:
        student_ids = [int(i) - 1 for i in matched_layers]
        for sid in student_ids:
            if not 0 <= sid < student_depth:
                raise InvariantError(f"matched layer {sid + 1} out of range (depth {student_depth})")
    return [(s, int(round((s + 1) * teacher_depth / student_depth)) - 1) for s in student_ids]


def distill(teacher: MaeModel, students: dict, windows_by_modality: dict,
            cfg: StageConfig):
    """Optimize students + transfer heads + fusion against the frozen teacher.

    Returns (students, heads, fusion, history). The teacher is frozen for
    the whole stage (verified by fingerprint); students train on a
    train/validation window split.
    """
    cfg.validate()
    teacher.freeze()
    teacher_fp = teacher.fingerprint()
    names = sorted(students)
    if not names:
        raise InvariantError("distillation needs at least one student")
    if cfg.teacher not in windows_by_modality:
        raise InvariantError(f"teacher modality {cfg.teacher} missing from windows")
    t_cfg = teacher.config
    s_cfg = next(iter(students.values())).config
    if t_cfg.n_patches != s_cfg.n_patches:
        raise InvariantError("teacher/student patch grids differ; token matching undefined")

    heads = {m: TransferHead(students[m].config.enc_dim, t_cfg.enc_dim,
                             seed=child_seed(cfg.seed, "head", m)) for m in names}
    fusion = FusionLayer(len(names), t_cfg.enc_dim, frozen=cfg.fusion_frozen,
                         unfreeze_epoch=cfg.unfreeze_epoch)
    layer_map = resolve_layer_map(cfg.matched_layers, s_cfg.enc_depth, t_cfg.enc_depth)

    n = len(windows_by_modality[cfg.teacher])
    perm = rng_stream(cfg.seed, "valsplit").permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n))) if n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    params = {}
    for m in names:
        for k, p in students[m].trainable().items():
            params[f"student.{m}.{k}"] = p
    params.update(head_trainables(heads))
    params.update({f"fusion.{k}": p for k, p in fusion.params.items()})
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    w = cfg.weights
    mask_ratio = next(iter(students.values())).config.mask_ratio if w.lambda_rec_kd > 0 else 0.0
    patched = {m: patchify(np.asarray(windows_by_modality[m], dtype=np.float32),
                           students[m].config.patch_len) for m in names}
    full_plan = _full_plan(t_cfg.n_patches)

    def kd_losses(batch, plan, split):
        t_bundle = teacher.encode(windows_by_modality[cfg.teacher][batch], full_plan, None)
        shared_patch_ids = plan.visible_idx[split[0]] if split[0].size else np.empty(0, np.int64)
        t_sel = [ad.gather(t_bundle.patch_tokens(i), shared_patch_ids, axis=1)
                 for i in range(t_cfg.enc_depth)]
        bundles = {m: students[m].encode(windows_by_modality[m][batch], plan, split) for m in names}
        shared_layers = {m: [_shared_tokens(bundles[m], i) for i in range(s_cfg.enc_depth)]
                         for m in names}

        zero = Tensor(np.float64(0.0))
        hid = L.hidden_kd(shared_layers, t_sel, layer_map, heads, fusion) \
            if w.lambda_hid > 0 and layer_map and split[0].size else zero
        emb = L.final_embedding_kd({m: shared_layers[m][-1] for m in names},
                                   t_bundle.patch_tokens(-1), heads, fusion) \
            if w.lambda_emb > 0 and split[0].size else zero
        rec = zero
        if w.lambda_rec_kd > 0:
            for m in names:
                tokens = bundles[m].patch_tokens(-1)
                recon = students[m].decode(None, tokens, plan, all_private_split(tokens.shape[1]))
                recon_p = ad.reshape(recon, (len(batch), s_cfg.n_patches, s_cfg.patch_len))
                rec = ad.add(rec, L.reconstruction_mse(patched[m][batch], recon_p, plan.masked_idx))
            rec = ad.mul(rec, 1.0 / len(names))
        perp = zero
        if w.lambda_perp > 0 and split[0].size and split[1].size:
            for m in names:
                perp = ad.add(perp, L.decorrelation(
                    heads[m].project_shared(shared_layers[m][-1]),
                    heads[m].project_private(_private_tokens(bundles[m], -1))))
            perp = ad.mul(perp, 1.0 / len(names))
        return hid, emb, rec, perp

    history = []
    all_models = dict(students)

    def aux_snapshot():
        return {k: p.data.copy() for k, p in list(head_trainables(heads).items())
                + [(f"fusion.{k}", p) for k, p in fusion.params.items()]}

    def aux_restore(aux):
        for k, p in list(head_trainables(heads).items()) \
                + [(f"fusion.{k}", p) for k, p in fusion.params.items()]:
            p.data = aux[k]

    snap = _snapshot(all_models)
    aux = aux_snapshot()
    for epoch in range(cfg.epochs):
        fusion.maybe_unfreeze(epoch)
        for p in fusion.params.values():
            p.requires_grad = not fusion.frozen
        lr = schedule_lr(cfg, epoch)
        rng = rng_stream(cfg.seed, "distill", "shuffle", epoch)
        sums = {"hid": 0.0, "emb": 0.0, "rec": 0.0, "perp": 0.0, "total": 0.0}
        count = 0
        aborted = False
        for step, batch in enumerate(_batches(len(train_idx), cfg.batch_size, rng)):
            batch = train_idx[batch]
            plan = make_mask_plan(s_cfg.n_patches, mask_ratio,
                                  child_seed(cfg.seed, "distill", "mask", epoch, step))
            split = split_shared_private(len(plan.visible_idx), s_cfg.private_ratio,
                                         child_seed(cfg.seed, "distill", "split", epoch, step))
            hid, emb, rec, perp = kd_losses(batch, plan, split)
            total = L.kd_total(hid, emb, rec, perp, w)
            if not np.isfinite(total.item()):
                log.warning("distillation diverged at epoch %d; restoring last snapshot", epoch)
                _restore(all_models, snap)
                aux_restore(aux)
                aborted = True
                break
            opt.zero_grad()
            total.backward()
            opt.step(lr)
            for key, value in (("hid", hid), ("emb", emb), ("rec", rec), ("perp", perp),
                               ("total", total)):
                sums[key] += value.item()
            count += 1
        if aborted:
            history.append({"epoch": epoch, "aborted": 1})
            break
        snap = _snapshot(all_models)
        aux = aux_snapshot()
        row = {"epoch": epoch,
               "loss_total": sums["total"] / max(count, 1),
               "loss_hid": sums["hid"] / max(count, 1),
               "loss_emb": sums["emb"] / max(count, 1),
               "loss_rec": sums["rec"] / max(count, 1),
               "loss_perp": sums["perp"] / max(count, 1)}
        if len(val_idx) >= 2:
            plan = make_mask_plan(s_cfg.n_patches, mask_ratio, child_seed(cfg.seed, "val-mask", epoch))
            split = split_shared_private(len(plan.visible_idx), s_cfg.private_ratio,
                                         child_seed(cfg.seed, "val-split", epoch))
            hid, emb, rec, perp = kd_losses(val_idx, plan, split)
            row["val_total"] = L.kd_total(hid, emb, rec, perp, w).item()
        history.append(row)

    if teacher.fingerprint() != teacher_fp:
        raise InvariantError("teacher parameters changed during distillation")
    return students, heads, fusion, history


# ---------------------------------------------------------------------------
# Stage 3: finetuning


def subsample_uniform(indices, factor: int, seed: int) -> np.ndarray:
    """Every factor-th index (stable order); |out| = ceil(n / factor).

    The stride offset is seed-derived but constrained so the output size is
    exactly ceil(n / factor).
    """
    indices = np.asarray(indices)
    n = len(indices)
    if factor < 1:
        raise InvariantError("subsample factor must be >= 1")
    if factor == 1 or n == 0:
        return indices.copy()
    limit = n % factor if n % factor else factor
    offset = int(rng_stream(seed, "subsample").integers(limit))
    return indices[offset::factor]


def shared_embeddings(models: dict, heads, windows_by_modality: dict, modalities,
                      batch_size: int = 256) -> dict:
    """Pooled per-modality shared embeddings for collapse diagnostics.

    Full-visibility encoding; when transfer heads exist the tokens are
    projected into the shared subspace first, then mean-pooled over time.
    """
    out = {}
    for m in sorted(modalities):
        plan = _full_plan(models[m].config.n_patches)
        n = len(windows_by_modality[m])
        chunks = []
        for lo in range(0, n, batch_size):
            sel = slice(lo, min(lo + batch_size, n))
            tokens = models[m].encode(windows_by_modality[m][sel], plan, None).patch_tokens(-1)
            if heads is not None and m in heads:
                tokens = heads[m].project_shared(tokens)
            chunks.append(ad.tmean(tokens, axis=1).data)
        out[m] = np.concatenate(chunks, axis=0)
    return out


def embed_windows(models: dict, heads, fusion, windows_by_modality: dict,
                  modalities, fusion_mode: str, batch_size: int = 256) -> np.ndarray:
    """Frozen-encoder features: encode, (project,) pool over time, fuse."""
    modalities = sorted(modalities)
    n = len(windows_by_modality[modalities[0]])
    feats = []
    plan = _full_plan(next(iter(models.values())).config.n_patches)
    for lo in range(0, n, batch_size):
        sel = slice(lo, min(lo + batch_size, n))
        pooled_sh, pooled_pr = [], []
        for m in modalities:
            bundle = models[m].encode(windows_by_modality[m][sel], plan, None)
            tokens = bundle.patch_tokens(-1)
            if heads is not None and m in heads:
                sh = heads[m].project_shared(tokens)
                pr = heads[m].project_private(tokens)
            else:
                sh = pr = tokens
            pooled_sh.append(ad.tmean(sh, axis=1))
            pooled_pr.append(ad.tmean(pr, axis=1))
        if fusion_mode == "average":
            if fusion is not None and len(modalities) == fusion.n_modalities:
                fused = fusion.fuse(pooled_sh)
            else:
                fused = pooled_sh[0]
                for t in pooled_sh[1:]:
                    fused = ad.add(fused, t)
                fused = ad.mul(fused, 1.0 / len(pooled_sh))
            feats.append(fused.data)
        elif fusion_mode == "concat":
            parts = []
            for sh, pr in zip(pooled_sh, pooled_pr):
                parts += [sh.data, pr.data]
            feats.append(np.concatenate(parts, axis=-1))
        else:
            raise InvariantError(f"unknown fusion mode {fusion_mode!r}")
    return np.concatenate(feats, axis=0).astype(np.float32)


class MlpHead:
    """Two-layer classifier head (hidden width 4 by default)."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, seed: int):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

        def trunc_normal(*shape):
            return np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04).astype(np.float32)

        self.params = {
            "fc1.w": Tensor(trunc_normal(in_dim, hidden_dim), requires_grad=True),
            "fc1.b": Tensor(np.zeros(hidden_dim, dtype=np.float32), requires_grad=True),
            "fc2.w": Tensor(trunc_normal(hidden_dim, out_dim), requires_grad=True),
            "fc2.b": Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True),
        }

    def logits(self, x) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(ad.as_tensor(x), self.params["fc1.w"]), self.params["fc1.b"]))
        return ad.add(ad.matmul(h, self.params["fc2.w"]), self.params["fc2.b"])

    def state(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load(self, state: dict) -> None:
        for k, p in self.params.items():
            p.data = state[k].copy()


def _binary_bce(logits: Tensor, y: np.ndarray) -> Tensor:
    z = ad.reshape(logits, (logits.shape[0],))
    return ad.tmean(ad.sub(ad.softplus(z), ad.mul(z, y.astype(np.float32))))


def _softmax_ce(logits: Tensor, y: np.ndarray) -> Tensor:
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = ad.sub(logits, shift)
    log_norm = ad.tlog(ad.tsum(ad.texp(z), axis=1, keepdims=True))
    logp = ad.sub(z, log_norm)
    onehot = np.zeros(logits.shape, dtype=np.float32)
    onehot[np.arange(len(y)), y] = 1.0
    return ad.mul(ad.tsum(ad.mul(logp, onehot)), -1.0 / len(y))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z.astype(np.float64)))


def _scores(head: MlpHead, feats: np.ndarray, task: str) -> np.ndarray:
    z = head.logits(feats).data
    if task == "binary":
        return _sigmoid(z[:, 0])
    e = np.exp(z.astype(np.float64) - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _binary_targets(labels: np.ndarray) -> np.ndarray:
    # stress (2) is the positive class; baseline (1) and amusement (3) are negative
    return (np.asarray(labels) == 2).astype(np.int64)


def _selection_metrics(scores, labels, task: str):
    if task == "binary":
        y = _binary_targets(labels)
        if y.min() == y.max():
            return -1.0, float(np.mean((scores >= 0.5) == y)), 0.5
        thr = best_threshold(scores, y)
        return auprc(scores, y), accuracy_at_threshold(scores, y, thr), thr
    classes = np.unique(labels)
    if classes.size < scores.shape[1]:
        # degenerate validation slice: macro metrics undefined, rank by accuracy
        preds = np.array([1, 2, 3])[np.argmax(scores, axis=1)]
        return -1.0, float(np.mean(preds == labels)), float("nan")
    au, ap, acc = macro_multiclass(scores, labels)
    return ap, acc, float("nan")


def finetune(fold: FoldArchive, models: dict, heads, fusion, cfg: StageConfig):
    """Train the small classifier on frozen-encoder features.

    Returns (head, FoldMetrics, history). Model selection keeps the epoch
    with the highest validation AUPRC, ties broken by validation accuracy at
    the accuracy-maximizing validation threshold; no early stopping.
    """
    cfg.validate()
    for m in cfg.modalities:
        if m not in ALL_MODALITIES:
            raise InvariantError(f"unknown modality {m!r} in finetune config")
        if m not in models:
            raise InvariantError(f"fold/models lack configured modality {m!r}")
    fingerprints = {m: models[m].fingerprint() for m in cfg.modalities}
    for m in cfg.modalities:
        models[m].freeze()

    train_windows = fold_modality_windows(fold, "train")
    test_windows = fold_modality_windows(fold, "test")
    feats_train = embed_windows(models, heads, fusion, train_windows, cfg.modalities,
                                cfg.fusion_mode)
    feats_test = embed_windows(models, heads, fusion, test_windows, cfg.modalities,
                               cfg.fusion_mode)
    labels_train = fold_labels(fold, "train")
    labels_test = fold_labels(fold, "test")

    n = len(feats_train)
    perm = rng_stream(cfg.seed, "finetune-valsplit").permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n))) if n > 1 else 0
    val_idx, pool_idx = perm[:n_val], perm[n_val:]
    train_idx = subsample_uniform(pool_idx, cfg.subsample_factor,
                                  child_seed(cfg.seed, "finetune-subsample"))

    n_out = 1 if cfg.task == "binary" else 3
    head = MlpHead(feats_train.shape[1], cfg.hidden_dim, n_out,
                   seed=child_seed(cfg.seed, "finetune-head"))
    opt = Adam(head.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    if cfg.task == "binary":
        y_train = _binary_targets(labels_train)
    else:
        classes = np.array([1, 2, 3])
        y_train = np.searchsorted(classes, labels_train)

    best = (-np.inf, -np.inf)
    best_state = head.state()
    history = []
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg, epoch)
        rng = rng_stream(cfg.seed, "finetune-shuffle", epoch)
        total = 0.0
        count = 0
        for batch in _batches(len(train_idx), cfg.batch_size, rng):
            sel = train_idx[batch]
            logits = head.logits(feats_train[sel])
            loss = _binary_bce(logits, y_train[sel]) if cfg.task == "binary" \
                else _softmax_ce(logits, y_train[sel])
            if not np.isfinite(loss.item()):
                raise NumericsError(f"finetune diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            total += loss.item()
            count += 1
        row = {"epoch": epoch, "loss_total": total / max(count, 1)}
        if len(val_idx):
            val_scores = _scores(head, feats_train[val_idx], cfg.task)
            val_auprc, val_acc, _ = _selection_metrics(val_scores, labels_train[val_idx], cfg.task)
            row.update({"val_auprc": val_auprc, "val_acc": val_acc})
            if (val_auprc, val_acc) > best:
                best = (val_auprc, val_acc)
                best_state = head.state()
        history.append(row)
    head.load(best_state)

    for m in cfg.modalities:
        if models[m].fingerprint() != fingerprints[m]:
            raise InvariantError(f"encoder {m} changed during finetuning")

    test_scores = _scores(head, feats_test, cfg.task)
    if cfg.task == "binary":
        y_test = _binary_targets(labels_test)
        if len(val_idx):
            val_scores = _scores(head, feats_train[val_idx], cfg.task)
            y_val = _binary_targets(labels_train[val_idx])
            thr = best_threshold(val_scores, y_val) if y_val.size else 0.5
        else:
            thr = 0.5
        fm = FoldMetrics(fold_id=fold.fold_id,
                         auroc=auroc(test_scores, y_test),
                         auprc=auprc(test_scores, y_test),
                         accuracy=accuracy_at_threshold(test_scores, y_test, thr),
                         threshold=float(thr), n_test=len(y_test))
    else:
        au, ap, acc = macro_multiclass(test_scores, labels_test)
        fm = FoldMetrics(fold_id=fold.fold_id, auroc=au, auprc=ap, accuracy=acc,
                         threshold=float("nan"), n_test=len(labels_test))
    return head, fm, history


# ---------------------------------------------------------------------------
# Named configurations


@dataclass(frozen=True)
class PresetSpec:
    name: str
    description: str
    eda_joint: bool
    train_teacher: bool
    distill: bool
    finetune_modalities: tuple
    uses_transfer: bool
    pretrain_joint: bool = True


PRESETS = {
    "A": PresetSpec("A", "cheap-sensor baseline, privileged channel never used",
                    eda_joint=False, train_teacher=False, distill=False,
                    finetune_modalities=CHEAP_MODALITIES, uses_transfer=False),
    "B": PresetSpec("B", "symmetric alignment across all channels, tested without the privileged one",
                    eda_joint=True, train_teacher=False, distill=False,
                    finetune_modalities=CHEAP_MODALITIES, uses_transfer=False),
    "C": PresetSpec("C", "privileged transfer: frozen teacher distilled into cheap-sensor students",
                    eda_joint=False, train_teacher=True, distill=True,
                    finetune_modalities=CHEAP_MODALITIES, uses_transfer=True),
    "D": PresetSpec("D", "symmetric alignment, privileged channel also present at test time",
                    eda_joint=True, train_teacher=False, distill=False,
                    finetune_modalities=ALL_MODALITIES, uses_transfer=False),
    "E": PresetSpec("E", "privileged-channel-only baseline (frozen teacher encoder)",
                    eda_joint=False, train_teacher=True, distill=False,
                    finetune_modalities=(TEACHER_MODALITY,), uses_transfer=False,
                    pretrain_joint=False),
}


def run_preset(preset: str, folds: list, model_cfg: MaeConfig, stage_cfgs: dict,
               seed: int = 0):
    """Run one named configuration over every fold.

    ``stage_cfgs`` maps stage name -> StageConfig template; seeds are
    re-derived per fold so folds are independent and reproducible. Returns
    (MetricsReport, artifacts) where artifacts maps fold_id -> stage outputs.
    """
    if preset not in PRESETS:
        raise InvariantError(f"unknown preset {preset!r}; valid presets: {sorted(PRESETS)}")
    spec = PRESETS[preset]
    report = MetricsReport(task=stage_cfgs["finetune"].task)
    artifacts = {}
    for fold in folds:
        artifacts[fold.fold_id] = run_preset_fold(spec, fold, model_cfg, stage_cfgs, seed)
        report.add(artifacts[fold.fold_id]["metrics"])
    return report, artifacts


def run_preset_fold(spec: PresetSpec, fold: FoldArchive, model_cfg: MaeConfig,
                    stage_cfgs: dict, seed: int) -> dict:
    train_windows = fold_modality_windows(fold, "train")

    pre_cfg = replace(stage_cfgs["pretrain"],
                      seed=child_seed(seed, "pretrain", fold.fold_id),
                      eda_joint=spec.eda_joint,
                      train_teacher=spec.train_teacher,
                      modalities=stage_cfgs["pretrain"].modalities if spec.pretrain_joint else ())
    models, pre_hist = pretrain(train_windows, model_cfg, pre_cfg)

    heads = fusion = None
    dist_hist = []
    if spec.distill:
        dist_cfg = replace(stage_cfgs["distill"], seed=child_seed(seed, "distill", fold.fold_id))
        teacher = models.pop(dist_cfg.teacher)
        students = {m: models[m] for m in dist_cfg.modalities}
        students, heads, fusion, dist_hist = distill(teacher, students, train_windows, dist_cfg)
        models.update(students)
        models[dist_cfg.teacher] = teacher

    fin_cfg = replace(stage_cfgs["finetune"],
                      seed=child_seed(seed, "finetune", fold.fold_id),
                      modalities=spec.finetune_modalities)
    head, fm, fin_hist = finetune(fold, models, heads if spec.uses_transfer else None,
                                  fusion if spec.uses_transfer else None, fin_cfg)
    return {"metrics": fm, "models": models, "heads": heads, "fusion": fusion,
            "classifier": head,
            "history": {"pretrain": pre_hist, "distill": dist_hist, "finetune": fin_hist}}


def write_history_csv(rows: list, path) -> None:
    """Per-epoch loss/validation CSV with the standard column set."""
    lines = [",".join(HISTORY_COLUMNS)]
    for row in rows:
        lines.append(",".join("" if row.get(c) is None else repr(row[c])
                              if isinstance(row.get(c), float) else str(row.get(c, ""))
                              for c in HISTORY_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
