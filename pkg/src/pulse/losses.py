"""Training objectives: hinge alignment, masked reconstruction, hidden and
final-embedding knowledge transfer, decorrelation, and the weighted totals.

An anchored-contrastive alignment mode is included only to demonstrate the
collapse failure mode it suffers from; the hinge objective is the default.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvariantError, NumericsError
from .transfer import teacher_normalize


@dataclass
class LossWeights:
    lambda_align: float = 1.0
    lambda_rec_pre: float = 1.0
    lambda_hid: float = 1.0
    lambda_emb: float = 1.0
    lambda_rec_kd: float = 0.1
    lambda_perp: float = 0.0
    margin_alpha: float = 0.2

    def validate(self) -> None:
        for name, value in vars(self).items():
            if value < 0:
                raise InvariantError(f"{name} must be >= 0, got {value}")


def _zero() -> Tensor:
    return Tensor(np.float64(0.0))


def _unit_rows(s: Tensor, what: str) -> Tensor:
    norms = np.linalg.norm(s.data, axis=-1)
    if (norms == 0).any():
        raise NumericsError(f"{what}: zero-vector embedding, cosine undefined")
    return ad.div(s, ad.l2_norm(s, axis=-1, keepdims=True))


def alignment_hinge(shared_by_modality: dict, alpha: float = 0.2) -> Tensor:
    """Margin hinge over in-batch negatives, averaged over all matched pairs.

    For every unordered modality pair and batch instance, each mismatched
    cross-modal similarity must trail the matched one by at least ``alpha``;
    both directions contribute, each averaged over its negatives. Batch
    size 1 has no negatives and contributes a literal zero (with a warning,
    so silent misuse cannot hide).
    """
    names = sorted(shared_by_modality)
    if len(names) < 2:
        raise InvariantError("alignment needs at least two modalities")
    batches = {shared_by_modality[m].shape[0] for m in names}
    if len(batches) != 1:
        raise InvariantError(f"modalities disagree on batch size: {batches}")
    b = batches.pop()
    if b == 1:
        warnings.warn("alignment skipped: batch size 1 has no in-batch negatives")
        return _zero()

    unit = {m: _unit_rows(shared_by_modality[m], f"alignment[{m}]") for m in names}
    dtype = unit[names[0]].data.dtype
    eye = np.eye(b, dtype=dtype)
    off = (np.ones((b, b)) - np.eye(b)).astype(dtype)

    total = _zero()
    n_pairs = 0
    for i, mi in enumerate(names):
        for mj in names[i + 1:]:
            n_pairs += 1
            cos = ad.matmul(unit[mi], ad.transpose(unit[mj], 0, 1))  # [b, b]
            pos = ad.tsum(ad.mul(cos, eye), axis=1, keepdims=True)   # matched scores [b, 1]
            rows = ad.mul(ad.relu(ad.add(ad.sub(cos, pos), alpha)), off)
            cols = ad.mul(ad.relu(ad.add(ad.sub(cos, ad.reshape(pos, (1, b))), alpha)), off)
            total = ad.add(total, ad.mul(ad.add(ad.tsum(rows), ad.tsum(cols)), 1.0 / (b - 1)))
    return ad.mul(total, 1.0 / (n_pairs * b))


def reconstruction_mse(original, reconstructed, masked_idx) -> Tensor:
    """Mean squared error over masked patches, normalized per masked element."""
    masked_idx = np.asarray(masked_idx, dtype=np.int64)
    if masked_idx.size == 0:
        return _zero()
    x = ad.as_tensor(original)
    xhat = ad.as_tensor(reconstructed)
    if x.shape != xhat.shape:
        raise InvariantError(f"patch shape mismatch: {x.shape} vs {xhat.shape}")
    axis = x.ndim - 2
    diff = ad.sub(ad.gather(xhat, masked_idx, axis=axis), ad.gather(x, masked_idx, axis=axis))
    return ad.tmean(ad.square(diff))


def pretrain_total(align: Tensor, rec: Tensor, weights: LossWeights) -> Tensor:
    return ad.add(ad.mul(align, weights.lambda_align), ad.mul(rec, weights.lambda_rec_pre))


def _token_cosine_loss(fused: Tensor, teacher: Tensor, what: str) -> Tensor:
    if fused.shape != teacher.shape:
        raise InvariantError(f"{what}: token shape mismatch {fused.shape} vs {teacher.shape}")
    cos = ad.cosine_similarity(fused, teacher, axis=-1)
    return ad.tmean(ad.sub(1.0, cos))


def hidden_kd(student_layers: dict, teacher_layers: list, layer_map, heads: dict,
              fusion) -> Tensor:
    """Token-wise cosine loss between fused student shared tokens and teacher tokens.

    ``student_layers``: modality -> per-block shared-token tensors [B, S, D_s]
    (CLS already excluded). ``teacher_layers``: normalized-comparable teacher
    tokens at the corresponding positions, [B, S, D_t] per teacher block.
    ``layer_map``: (student_layer, teacher_layer) pairs defining the matched set.
    """
    names = sorted(student_layers)
    if not names:
        raise InvariantError("hidden transfer needs at least one student")
    per_layer = []
    for sl, tl in layer_map:
        if not 0 <= tl < len(teacher_layers):
            raise InvariantError(f"teacher layer {tl} out of range (depth {len(teacher_layers)})")
        projected = []
        for m in names:
            if not 0 <= sl < len(student_layers[m]):
                raise InvariantError(f"student layer {sl} out of range for {m}")
            projected.append(heads[m].project_shared(student_layers[m][sl]))
        fused = fusion.fuse(projected)
        teacher = teacher_normalize(teacher_layers[tl])
        per_layer.append(_token_cosine_loss(fused, teacher, f"hidden layer {sl}->{tl}"))
    total = per_layer[0]
    for term in per_layer[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(per_layer))


def final_embedding_kd(student_final: dict, teacher_final: Tensor, heads: dict,
                       fusion) -> Tensor:
    """1 - cos between time-pooled fused student embedding and pooled teacher."""
    names = sorted(student_final)
    projected = [heads[m].project_shared(student_final[m]) for m in names]
    pooled_student = ad.tmean(fusion.fuse(projected), axis=1)
    pooled_teacher = ad.tmean(teacher_normalize(teacher_final), axis=1)
    for v, what in ((pooled_student, "student"), (pooled_teacher, "teacher")):
        if (np.linalg.norm(v.data, axis=-1) == 0).any():
            raise NumericsError(f"final embedding transfer: zero-vector pooled {what} embedding")
    cos = ad.cosine_similarity(pooled_student, pooled_teacher, axis=-1)
    return ad.tmean(ad.sub(1.0, cos))


def decorrelation(shared_tokens: Tensor, private_tokens: Tensor) -> Tensor:
    """Mean squared entry of the cross-covariance between pooled shared/private."""
    pooled_s = ad.tmean(shared_tokens, axis=1) if shared_tokens.ndim == 3 else shared_tokens
    pooled_p = ad.tmean(private_tokens, axis=1) if private_tokens.ndim == 3 else private_tokens
    b = pooled_s.shape[0]
    if pooled_p.shape[0] != b:
        raise InvariantError("shared/private batch sizes differ")
    if b < 2:
        return _zero()
    cs = ad.sub(pooled_s, ad.tmean(pooled_s, axis=0, keepdims=True))
    cp = ad.sub(pooled_p, ad.tmean(pooled_p, axis=0, keepdims=True))
    cov = ad.mul(ad.matmul(ad.transpose(cs, 0, 1), cp), 1.0 / (b - 1))
    return ad.tmean(ad.square(cov))


def kd_total(hid: Tensor, emb: Tensor, rec: Tensor, perp: Tensor,
             weights: LossWeights) -> Tensor:
    total = ad.add(ad.mul(hid, weights.lambda_hid), ad.mul(emb, weights.lambda_emb))
    total = ad.add(total, ad.mul(rec, weights.lambda_rec_kd))
    return ad.add(total, ad.mul(perp, weights.lambda_perp))


def anchored_contrastive(shared_by_modality: dict, anchor: str) -> Tensor:
    """Mean (1 - cos) of every non-anchor modality against the anchor.

    No negatives, no margin: kept only to reproduce the collapse this
    objective exhibits; not used by default.
    """
    if anchor not in shared_by_modality:
        raise InvariantError(f"anchor modality {anchor!r} not present")
    names = [m for m in sorted(shared_by_modality) if m != anchor]
    if not names:
        raise InvariantError("anchored alignment needs at least one non-anchor modality")
    anchor_unit = _unit_rows(shared_by_modality[anchor], "anchored[anchor]")
    total = _zero()
    for m in names:
        unit = _unit_rows(shared_by_modality[m], f"anchored[{m}]")
        cos = ad.tsum(ad.mul(unit, anchor_unit), axis=-1)
        total = ad.add(total, ad.tmean(ad.sub(1.0, cos)))
    return ad.mul(total, 1.0 / len(names))
