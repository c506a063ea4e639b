"""Per-modality masked autoencoder: patchify, mask, encode, decode.

The encoder is a pre-norm ViT operating on visible patches only; every
block's token matrix is retained so later stages can supervise hidden
layers. Visible tokens are partitioned into a shared set (aligned and fused
across modalities) and a private set (modality-specific, reconstruction
capacity). The privileged channel is encoded with an all-private partition.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import read_container, write_container
from .errors import FormatError, InvariantError, NumericsError

CHECKPOINT_FORMAT = "pulse-ckpt/1"


@dataclass(frozen=True)
class MaeConfig:
    signal_len: int = 3840
    patch_len: int = 96
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    mask_ratio: float = 0.5
    private_ratio: float = 0.5
    use_cls: bool = True
    pos_embed: str = "learned"  # or "sinusoidal"
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if self.signal_len % self.patch_len != 0:
            raise InvariantError(f"signal_len {self.signal_len} not divisible by patch_len {self.patch_len}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise InvariantError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.private_ratio <= 1.0:
            raise InvariantError(f"private_ratio must be in [0, 1], got {self.private_ratio}")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise InvariantError("embedding dims must be divisible by head counts")
        if self.pos_embed not in ("learned", "sinusoidal"):
            raise InvariantError(f"unknown pos_embed mode {self.pos_embed!r}")

    @property
    def n_patches(self) -> int:
        return self.signal_len // self.patch_len


def paper_config(**overrides) -> MaeConfig:
    """Full-scale configuration (embed 1024, depth 8, heads 8; decoder 512/4/8)."""
    base = dict(signal_len=3840, patch_len=96, enc_dim=1024, enc_depth=8, enc_heads=8,
                dec_dim=512, dec_depth=4, dec_heads=8)
    base.update(overrides)
    return MaeConfig(**base)


@dataclass(frozen=True)
class MaskPlan:
    """Partition of patch indices into hidden (masked) and visible sets."""

    n_patches: int
    masked_idx: np.ndarray
    visible_idx: np.ndarray

    def validate(self) -> None:
        union = np.sort(np.concatenate([self.masked_idx, self.visible_idx]))
        if not np.array_equal(union, np.arange(self.n_patches)):
            raise InvariantError("mask plan must partition the patch indices")


@dataclass
class EmbeddingBundle:
    """Per-layer token matrices of one encoder pass plus the token partition.

    ``shared_idx``/``private_idx`` index the non-CLS token axis; they are
    disjoint and cover all visible tokens. For the privileged (teacher)
    modality the shared set is empty.
    """

    layers: list  # per encoder block, Tensor [B, T, D] including CLS slot 0 when present
    visible_idx: np.ndarray  # patch id of each non-CLS token
    shared_idx: np.ndarray
    private_idx: np.ndarray
    has_cls: bool

    @property
    def final(self) -> Tensor:
        return self.layers[-1]

    def patch_tokens(self, layer: int) -> Tensor:
        """Tokens at one layer with the CLS slot removed."""
        t = self.layers[layer]
        if not self.has_cls:
            return t
        return ad.gather(t, np.arange(1, t.shape[1]), axis=1)

    def validate(self) -> None:
        n_vis = len(self.visible_idx)
        union = np.sort(np.concatenate([self.shared_idx, self.private_idx]))
        if not np.array_equal(union, np.arange(n_vis)):
            raise InvariantError("shared/private sets must partition the visible tokens")


def _round_count(ratio: float, n: int) -> int:
    return int(ratio * n + 0.5)


def patchify(signal, patch_len: int) -> np.ndarray:
    """Split [..., L] into [..., L/patch_len, patch_len] non-overlapping patches."""
    x = np.asarray(signal)
    if x.shape[-1] % patch_len != 0:
        raise InvariantError(f"length {x.shape[-1]} not divisible by patch_len {patch_len}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // patch_len, patch_len)


def unpatchify(patches) -> np.ndarray:
    x = np.asarray(patches)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def make_mask_plan(n_patches: int, mask_ratio: float, seed: int) -> MaskPlan:
    """Uniform random masked subset, deterministic per seed."""
    if not 0.0 <= mask_ratio < 1.0:
        raise InvariantError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    n_masked = _round_count(mask_ratio, n_patches)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    perm = rng.permutation(n_patches)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    return MaskPlan(n_patches=n_patches, masked_idx=masked, visible_idx=visible)


def split_shared_private(n_visible: int, private_ratio: float, seed: int):
    """Random (shared_idx, private_idx) partition of the visible-token axis.

    The same split must be reused for every modality within a training step
    so that fusion and alignment act on positionally corresponding tokens;
    the privileged channel is given private_ratio 1.0 (no shared tokens).
    """
    if not 0.0 <= private_ratio <= 1.0:
        raise InvariantError(f"private_ratio must be in [0, 1], got {private_ratio}")
    n_private = _round_count(private_ratio, n_visible)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    perm = rng.permutation(n_visible)
    private = np.sort(perm[:n_private])
    shared = np.sort(perm[n_private:])
    return shared, private


def all_private_split(n_visible: int):
    return np.empty(0, dtype=np.int64), np.arange(n_visible, dtype=np.int64)


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


class MaeModel:
    """Parameters plus encode/decode for one modality."""

    def __init__(self, config: MaeConfig, seed: int = 0, params: dict | None = None):
        config.validate()
        self.config = config
        if params is not None:
            self.params = params
        else:
            self.params = self._init_params(np.random.Generator(
                np.random.PCG64(np.random.SeedSequence(seed))))

    # -- parameters --------------------------------------------------------
    def _init_params(self, rng) -> dict:
        cfg = self.config
        p: dict = {}

        def trunc_normal(*shape):
            w = rng.normal(0.0, 0.02, size=shape)
            return np.clip(w, -0.04, 0.04).astype(np.float32)

        def linear(name, d_in, d_out):
            p[f"{name}.w"] = Tensor(trunc_normal(d_in, d_out), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

        def block(prefix, dim, hidden):
            p[f"{prefix}.ln1.g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
            p[f"{prefix}.ln1.b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
            for proj in ("q", "k", "v", "proj"):
                linear(f"{prefix}.{proj}", dim, dim)
            p[f"{prefix}.ln2.g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
            p[f"{prefix}.ln2.b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
            linear(f"{prefix}.mlp.fc1", dim, hidden)
            linear(f"{prefix}.mlp.fc2", hidden, dim)

        linear("patch_embed", cfg.patch_len, cfg.enc_dim)
        if cfg.pos_embed == "learned":
            p["pos_enc"] = Tensor(trunc_normal(cfg.n_patches + 1, cfg.enc_dim), requires_grad=True)
        if cfg.use_cls:
            p["cls"] = Tensor(trunc_normal(1, 1, cfg.enc_dim), requires_grad=True)
        hidden = int(cfg.enc_dim * cfg.mlp_ratio)
        for i in range(cfg.enc_depth):
            block(f"enc.{i}", cfg.enc_dim, hidden)

        linear("dec_embed", cfg.enc_dim, cfg.dec_dim)
        p["mask_token"] = Tensor(trunc_normal(1, 1, cfg.dec_dim), requires_grad=True)
        if cfg.pos_embed == "learned":
            p["pos_dec"] = Tensor(trunc_normal(cfg.n_patches, cfg.dec_dim), requires_grad=True)
        hidden_dec = int(cfg.dec_dim * cfg.mlp_ratio)
        for i in range(cfg.dec_depth):
            block(f"dec.{i}", cfg.dec_dim, hidden_dec)
        p["dec_norm.g"] = Tensor(np.ones(cfg.dec_dim, dtype=np.float32), requires_grad=True)
        p["dec_norm.b"] = Tensor(np.zeros(cfg.dec_dim, dtype=np.float32), requires_grad=True)
        linear("pred", cfg.dec_dim, cfg.patch_len)
        return p

    def _pos_table(self, which: str) -> Tensor:
        cfg = self.config
        if cfg.pos_embed == "learned":
            return self.params["pos_enc"] if which == "enc" else self.params["pos_dec"]
        if which == "enc":
            return Tensor(sinusoidal_table(cfg.n_patches + 1, cfg.enc_dim))
        return Tensor(sinusoidal_table(cfg.n_patches, cfg.dec_dim))

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def freeze(self) -> None:
        for v in self.params.values():
            v.requires_grad = False

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------
    def _block(self, prefix: str, x: Tensor, heads: int) -> Tensor:
        p = self.params
        b, t, d = x.shape
        dh = d // heads

        def heads_split(h):
            return ad.transpose(ad.reshape(h, (b, t, heads, dh)), 1, 2)

        xn = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        q = heads_split(ad.add(ad.matmul(xn, p[f"{prefix}.q.w"]), p[f"{prefix}.q.b"]))
        k = heads_split(ad.add(ad.matmul(xn, p[f"{prefix}.k.w"]), p[f"{prefix}.k.b"]))
        v = heads_split(ad.add(ad.matmul(xn, p[f"{prefix}.v.w"]), p[f"{prefix}.v.b"]))
        att = ad.reshape(ad.transpose(ad.attention(q, k, v), 1, 2), (b, t, d))
        x = ad.add(x, ad.add(ad.matmul(att, p[f"{prefix}.proj.w"]), p[f"{prefix}.proj.b"]))

        xn = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        h = ad.gelu(ad.add(ad.matmul(xn, p[f"{prefix}.mlp.fc1.w"]), p[f"{prefix}.mlp.fc1.b"]))
        h = ad.add(ad.matmul(h, p[f"{prefix}.mlp.fc2.w"]), p[f"{prefix}.mlp.fc2.b"])
        return ad.add(x, h)

    def encode(self, signals, plan: MaskPlan, split=None) -> EmbeddingBundle:
        """Forward the visible patches; returns every block's token matrix.

        ``split`` is a (shared_idx, private_idx) pair over the visible-token
        axis; None means all-private (the privileged-channel convention).
        The order of plan.visible_idx defines the token order.
        """
        cfg = self.config
        p = self.params
        x = np.asarray(signals, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != cfg.signal_len:
            raise InvariantError(f"expected signal length {cfg.signal_len}, got {x.shape[-1]}")
        batch = x.shape[0]
        patches = patchify(x, cfg.patch_len)[:, plan.visible_idx, :]
        n_vis = len(plan.visible_idx)

        tokens = ad.add(ad.matmul(Tensor(patches), p["patch_embed.w"]), p["patch_embed.b"])
        pos = self._pos_table("enc")
        tokens = ad.add(tokens, ad.gather(pos, plan.visible_idx + 1, axis=0))
        if cfg.use_cls:
            ones = Tensor(np.ones((batch, 1, 1), dtype=np.float32))
            cls = ad.add(ad.mul(ones, p["cls"]), ad.gather(pos, np.array([0]), axis=0))
            tokens = ad.concat([cls, tokens], axis=1)

        layers = []
        for i in range(cfg.enc_depth):
            tokens = self._block(f"enc.{i}", tokens, cfg.enc_heads)
            layers.append(tokens)
        if not np.isfinite(layers[-1].data).all():
            raise NumericsError("encoder produced non-finite activations")

        if split is None:
            shared_idx, private_idx = all_private_split(n_vis)
        else:
            shared_idx, private_idx = (np.asarray(split[0], dtype=np.int64),
                                       np.asarray(split[1], dtype=np.int64))
        bundle = EmbeddingBundle(layers=layers, visible_idx=np.asarray(plan.visible_idx),
                                 shared_idx=shared_idx, private_idx=private_idx,
                                 has_cls=cfg.use_cls)
        bundle.validate()
        return bundle

    def decode(self, shared_tokens, private_tokens, plan: MaskPlan, split) -> Tensor:
        """Reconstruct the full signal from shared/private tokens plus mask tokens.

        ``shared_tokens``/``private_tokens`` are [B, n, enc_dim] tensors whose
        rows sit at split[0]/split[1] of the visible-token axis; masked patch
        positions receive the learned mask token.
        """
        cfg = self.config
        p = self.params
        shared_idx, private_idx = (np.asarray(split[0], dtype=np.int64),
                                   np.asarray(split[1], dtype=np.int64))
        parts, order = [], []
        if shared_idx.size:
            parts.append(shared_tokens)
            order.append(shared_idx)
        if private_idx.size:
            parts.append(private_tokens)
            order.append(private_idx)
        visible = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        order = np.concatenate(order)
        visible = ad.gather(visible, np.argsort(order, kind="stable"), axis=1)

        v = ad.add(ad.matmul(visible, p["dec_embed.w"]), p["dec_embed.b"])
        batch = v.shape[0]
        n_masked = len(plan.masked_idx)
        if n_masked:
            ones = Tensor(np.ones((batch, n_masked, 1), dtype=np.float32))
            masked = ad.mul(ones, p["mask_token"])
            seq = ad.concat([v, masked], axis=1)
            patch_order = np.concatenate([plan.visible_idx, plan.masked_idx])
        else:
            seq = v
            patch_order = np.asarray(plan.visible_idx)
        seq = ad.gather(seq, np.argsort(patch_order, kind="stable"), axis=1)
        seq = ad.add(seq, self._pos_table("dec"))

        for i in range(cfg.dec_depth):
            seq = self._block(f"dec.{i}", seq, cfg.dec_heads)
        seq = ad.layer_norm(seq, p["dec_norm.g"], p["dec_norm.b"])
        patches = ad.add(ad.matmul(seq, p["pred.w"]), p["pred.b"])
        return ad.reshape(patches, (batch, cfg.n_patches * cfg.patch_len))


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: MaeModel, path, extra_meta: dict | None = None) -> None:
    arrays = {f"param/{k}": np.asarray(v.data, dtype=np.float32)
              for k, v in model.params.items()}
    meta = {"config": asdict(model.config), "param_names": sorted(model.params)}
    if extra_meta:
        meta["extra"] = extra_meta
    write_container(path, CHECKPOINT_FORMAT, arrays, meta)


def load_checkpoint(path, trainable: bool = True) -> MaeModel:
    fmt, arrays, meta = read_container(path, expect_format=CHECKPOINT_FORMAT)
    config = MaeConfig(**meta["config"])
    params = {}
    for name in meta["param_names"]:
        key = f"param/{name}"
        if key not in arrays:
            raise FormatError(f"{path}: missing parameter {name}")
        params[name] = Tensor(arrays[key], requires_grad=trainable)
    return MaeModel(config, params=params)
