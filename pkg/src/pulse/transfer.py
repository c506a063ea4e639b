"""Transfer heads and the fusion layer used during knowledge transfer.

Each student gets a head: learnable pre-normalization followed by linear
projections into the shared and private subspaces (shared output dim equals
the teacher token dim). The teacher side is normalized only — an affine-free
token standardization, never trained. The fusion layer maps concatenated
per-modality shared tokens to one fused token and starts as the exact
arithmetic mean.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvariantError


class TransferHead:
    """Pre-norm + shared/private projections for one student modality."""

    def __init__(self, student_dim: int, teacher_dim: int, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

        def trunc_normal(*shape):
            return np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04).astype(np.float32)

        self.student_dim = student_dim
        self.teacher_dim = teacher_dim
        self.params = {
            "ln.g": Tensor(np.ones(student_dim, dtype=np.float32), requires_grad=True),
            "ln.b": Tensor(np.zeros(student_dim, dtype=np.float32), requires_grad=True),
            "shared.w": Tensor(trunc_normal(student_dim, teacher_dim), requires_grad=True),
            "shared.b": Tensor(np.zeros(teacher_dim, dtype=np.float32), requires_grad=True),
            "private.w": Tensor(trunc_normal(student_dim, teacher_dim), requires_grad=True),
            "private.b": Tensor(np.zeros(teacher_dim, dtype=np.float32), requires_grad=True),
        }

    def _pre_norm(self, tokens: Tensor) -> Tensor:
        return ad.layer_norm(tokens, self.params["ln.g"], self.params["ln.b"])

    def project_shared(self, tokens: Tensor) -> Tensor:
        h = self._pre_norm(tokens)
        return ad.add(ad.matmul(h, self.params["shared.w"]), self.params["shared.b"])

    def project_private(self, tokens: Tensor) -> Tensor:
        h = self._pre_norm(tokens)
        return ad.add(ad.matmul(h, self.params["private.w"]), self.params["private.b"])


def teacher_normalize(tokens: Tensor) -> Tensor:
    """Affine-free token standardization; the teacher has no projector."""
    return ad.layer_norm(tokens, None, None)


class FusionLayer:
    """Linear combiner of per-modality shared tokens.

    Initialized so the output is the exact arithmetic mean of the inputs;
    may be kept frozen for a warm start and unfrozen at a chosen epoch.
    """

    def __init__(self, n_modalities: int, dim: int, frozen: bool = False,
                 unfreeze_epoch: int | None = None):
        if n_modalities < 1:
            raise InvariantError("fusion needs at least one modality")
        blocks = [np.eye(dim, dtype=np.float32) / n_modalities] * n_modalities
        self.n_modalities = n_modalities
        self.dim = dim
        self.frozen = frozen
        self.unfreeze_epoch = unfreeze_epoch
        self.params = {
            "w": Tensor(np.concatenate(blocks, axis=0), requires_grad=True),
            "b": Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True),
        }

    def fuse(self, tokens_by_modality: list) -> Tensor:
        if len(tokens_by_modality) != self.n_modalities:
            raise InvariantError(
                f"fusion built for {self.n_modalities} modalities, got {len(tokens_by_modality)}")
        stacked = ad.concat(list(tokens_by_modality), axis=-1) \
            if len(tokens_by_modality) > 1 else tokens_by_modality[0]
        return ad.add(ad.matmul(stacked, self.params["w"]), self.params["b"])

    def maybe_unfreeze(self, epoch: int) -> None:
        if self.frozen and self.unfreeze_epoch is not None and epoch >= self.unfreeze_epoch:
            self.frozen = False


def head_trainables(heads: dict) -> dict:
    out = {}
    for modality, head in heads.items():
        for name, p in head.params.items():
            out[f"head.{modality}.{name}"] = p
    return out
