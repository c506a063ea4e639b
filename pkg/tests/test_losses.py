"""Loss suite vs hand-derived values, brute-force oracles, and grad checks."""

import numpy as np
import pytest

import oracles
from pulse import autodiff as ad
from pulse import losses
from pulse import mae
from pulse.autodiff import Tensor, grad_check
from pulse.errors import InvariantError, NumericsError
from pulse.losses import LossWeights
from pulse.transfer import FusionLayer, TransferHead


def as64(head_or_fusion):
    for p in head_or_fusion.params.values():
        p.data = p.data.astype(np.float64)
    return head_or_fusion


def rand_kd_instance(rng, n_mod=2, n_layers=2, tokens=3, d_student=4, d_teacher=4, batch=3):
    names = [f"m{i}" for i in range(n_mod)]
    student_layers = {m: [rng.standard_normal((batch, tokens, d_student)) for _ in range(n_layers)]
                      for m in names}
    teacher_layers = [rng.standard_normal((batch, tokens, d_teacher)) for _ in range(n_layers)]
    heads = {m: as64(TransferHead(d_student, d_teacher, seed=i)) for i, m in enumerate(names)}
    for m in names:  # break the symmetric init so the oracle sees generic params
        for key in ("shared.w", "private.w", "ln.g"):
            heads[m].params[key].data = heads[m].params[key].data + \
                0.3 * rng.standard_normal(heads[m].params[key].shape)
    fusion = as64(FusionLayer(n_mod, d_teacher))
    fusion.params["w"].data = fusion.params["w"].data + 0.2 * rng.standard_normal((n_mod * d_teacher, d_teacher))
    return names, student_layers, teacher_layers, heads, fusion


# --- alignment (hinge) -------------------------------------------------------

def test_alignment_perfectly_matched_pairs_is_zero():
    shared = {"a": Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])),
              "b": Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))}
    assert losses.alignment_hinge(shared, 0.2).item() == pytest.approx(0.0, abs=1e-9)


def test_alignment_hand_derived_swapped_pairs():
    # Matched pairs orthogonal, mismatched identical: every direction yields
    # max(0, 1 - 0 + 0.2) = 1.2, so each of the two instances contributes 2.4.
    shared = {"a": Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])),
              "b": Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))}
    assert losses.alignment_hinge(shared, 0.2).item() == pytest.approx(2.4, abs=1e-6)


def test_alignment_zero_margin_identical_embeddings():
    shared = {"a": Tensor(np.ones((3, 4))), "b": Tensor(np.ones((3, 4)))}
    assert losses.alignment_hinge(shared, 0.0).item() == pytest.approx(0.0, abs=1e-9)


def test_alignment_batch_one_warns_and_returns_zero():
    shared = {"a": Tensor(np.ones((1, 4))), "b": Tensor(np.ones((1, 4)))}
    with pytest.warns(UserWarning):
        assert losses.alignment_hinge(shared, 0.2).item() == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_alignment_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n_mod, b, d = rng.integers(2, 5), rng.integers(2, 6), rng.integers(3, 8)
    shared = {f"m{i}": rng.standard_normal((b, d)) for i in range(n_mod)}
    got = losses.alignment_hinge({m: Tensor(v) for m, v in shared.items()}, 0.2).item()
    want = oracles.oracle_alignment(shared, 0.2)
    assert got == pytest.approx(want, rel=1e-9)


def test_alignment_scale_invariance():
    rng = np.random.default_rng(7)
    shared = {m: rng.standard_normal((4, 5)) for m in ("a", "b", "c")}
    base = losses.alignment_hinge({m: Tensor(v) for m, v in shared.items()}, 0.2).item()
    scaled = losses.alignment_hinge({m: Tensor(3.0 * v) for m, v in shared.items()}, 0.2).item()
    assert scaled == pytest.approx(base, abs=1e-5)


def test_alignment_modality_permutation_symmetry():
    rng = np.random.default_rng(8)
    vals = [rng.standard_normal((4, 5)) for _ in range(3)]
    a = losses.alignment_hinge({"x": Tensor(vals[0]), "y": Tensor(vals[1]), "z": Tensor(vals[2])}, 0.2)
    b = losses.alignment_hinge({"z": Tensor(vals[0]), "x": Tensor(vals[1]), "y": Tensor(vals[2])}, 0.2)
    # relabeling modalities permutes pair enumeration only
    assert a.item() == pytest.approx(b.item(), rel=1e-9)


def test_alignment_gradient_away_from_kinks():
    rng = np.random.default_rng(9)
    for _ in range(20):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        loss = losses.alignment_hinge({"a": a, "b": b}, 0.2)
        cosm = (a.data / np.linalg.norm(a.data, axis=1, keepdims=True)) @ \
               (b.data / np.linalg.norm(b.data, axis=1, keepdims=True)).T
        margins = cosm - np.diag(cosm)[:, None] + 0.2
        margins2 = cosm - np.diag(cosm)[None, :] + 0.2
        off = ~np.eye(3, dtype=bool)
        if min(np.abs(margins[off]).min(), np.abs(margins2[off]).min()) < 0.05:
            continue  # too close to a hinge kink for finite differences
        err = grad_check(lambda t: losses.alignment_hinge({"a": t[0], "b": t[1]}, 0.2), [a, b])
        assert err < 1e-3
        break
    else:
        pytest.fail("no kink-free instance found")


# --- reconstruction -----------------------------------------------------------

def test_reconstruction_perfect_is_zero():
    x = np.random.default_rng(0).standard_normal((2, 5, 8))
    assert losses.reconstruction_mse(x, x, [0, 2]).item() == 0.0


def test_reconstruction_constant_offset_is_one():
    x = np.random.default_rng(1).standard_normal((2, 5, 8))
    assert losses.reconstruction_mse(x, x + 1.0, [1, 3, 4]).item() == pytest.approx(1.0, rel=1e-6)


def test_reconstruction_empty_mask_is_zero():
    x = np.zeros((2, 5, 8))
    assert losses.reconstruction_mse(x, x + 5.0, []).item() == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 6, 4))
    xhat = rng.standard_normal((3, 6, 4))
    omega = sorted(rng.choice(6, size=3, replace=False).tolist())
    got = losses.reconstruction_mse(x, xhat, omega).item()
    assert got == pytest.approx(oracles.oracle_reconstruction(x, xhat, omega), rel=1e-9)


def test_pretrain_total_arithmetic():
    w = LossWeights()
    cases = [((1.0, 1.0), 1.0), ((2.0, 0.5), 0.95), ((0.0, 1.0), 0.7)]
    for (la, lr), expected in cases:
        w2 = LossWeights(lambda_align=la, lambda_rec_pre=lr)
        got = losses.pretrain_total(Tensor(np.float64(0.3)), Tensor(np.float64(0.7)), w2).item()
        assert got == pytest.approx(expected, rel=1e-12)
    assert losses.pretrain_total(Tensor(np.float64(0.3)), Tensor(np.float64(0.7)), w).item() == pytest.approx(1.0)


# --- hidden / final KD ---------------------------------------------------------

def test_hidden_kd_zero_when_fused_equals_teacher():
    rng = np.random.default_rng(2)
    t = rng.standard_normal((2, 3, 4))

    class IdentityHead:
        def project_shared(self, tokens):
            return tokens

    fusion = FusionLayer(1, 4)
    normalized = losses.teacher_normalize(Tensor(t)).data
    got = losses.hidden_kd({"m": [Tensor(normalized)]}, [Tensor(t)], [(0, 0)],
                           {"m": IdentityHead()}, fusion)
    assert got.item() == pytest.approx(0.0, abs=1e-9)


def test_hidden_kd_two_for_opposed_tokens():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((2, 3, 4))
    normalized = losses.teacher_normalize(Tensor(t)).data

    class NegateHead:
        def project_shared(self, tokens):
            return ad.mul(tokens, -1.0)

    fusion = FusionLayer(1, 4)
    got = losses.hidden_kd({"m": [Tensor(normalized)]}, [Tensor(t)], [(0, 0)],
                           {"m": NegateHead()}, fusion)
    assert got.item() == pytest.approx(2.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_hidden_kd_matches_oracle(seed):
    rng = np.random.default_rng(10 + seed)
    names, sl, tl, heads, fusion = rand_kd_instance(rng)
    got = losses.hidden_kd({m: [Tensor(x) for x in sl[m]] for m in names},
                           [Tensor(x) for x in tl], [(0, 0), (1, 1)], heads, fusion).item()
    want = oracles.oracle_hidden(sl, tl, [(0, 0), (1, 1)], heads, fusion)
    assert got == pytest.approx(want, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_final_kd_matches_oracle(seed):
    rng = np.random.default_rng(20 + seed)
    names, sl, tl, heads, fusion = rand_kd_instance(rng)
    student_final = {m: sl[m][-1] for m in names}
    got = losses.final_embedding_kd({m: Tensor(v) for m, v in student_final.items()},
                                    Tensor(tl[-1]), heads, fusion).item()
    want = oracles.oracle_final(student_final, tl[-1], heads, fusion)
    assert got == pytest.approx(want, rel=1e-9)


def test_final_kd_trivial_cases():
    rng = np.random.default_rng(4)
    t = rng.standard_normal((2, 3, 4))

    class IdentityHead:
        def project_shared(self, tokens):
            return tokens

    fusion = FusionLayer(1, 4)
    pooled_target = losses.teacher_normalize(Tensor(t)).data
    same = losses.final_embedding_kd({"m": Tensor(pooled_target)}, Tensor(t),
                                     {"m": IdentityHead()}, fusion)
    assert same.item() == pytest.approx(0.0, abs=1e-9)


def test_final_kd_orthogonal_is_one():
    class IdentityHead:
        def project_shared(self, tokens):
            return tokens

    fusion = FusionLayer(1, 2)
    student = Tensor(np.array([[[1.0, 0.0]]]))
    teacher_pooled_direction = np.array([[[1.0, -1.0]]])  # LN keeps this direction
    got = losses.final_embedding_kd({"m": student}, Tensor(teacher_pooled_direction),
                                    {"m": IdentityHead()}, fusion)
    # LN of [1, -1] is proportional to [1, -1]; cos([1,0],[1,-1]) = 1/sqrt(2)
    assert got.item() == pytest.approx(1.0 - 1.0 / np.sqrt(2.0), rel=1e-6)


def test_final_kd_rejects_zero_pooled_embedding():
    class ZeroHead:
        def project_shared(self, tokens):
            return ad.mul(tokens, 0.0)

    fusion = FusionLayer(1, 4)
    with pytest.raises(NumericsError):
        losses.final_embedding_kd({"m": Tensor(np.ones((2, 3, 4)))},
                                  Tensor(np.random.default_rng(0).standard_normal((2, 3, 4))),
                                  {"m": ZeroHead()}, fusion)


# --- decorrelation --------------------------------------------------------------

def test_decorrelation_constant_private_is_zero():
    rng = np.random.default_rng(5)
    shared = rng.standard_normal((8, 4))
    private = np.ones((8, 4))
    assert losses.decorrelation(Tensor(shared), Tensor(private)).item() == pytest.approx(0.0, abs=1e-12)


def test_decorrelation_self_coupling_positive():
    rng = np.random.default_rng(6)
    shared = rng.standard_normal((8, 4))
    got = losses.decorrelation(Tensor(shared), Tensor(shared.copy())).item()
    assert got > 0.0


def test_decorrelation_single_sample_is_zero():
    assert losses.decorrelation(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4)))).item() == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_decorrelation_matches_oracle(seed):
    rng = np.random.default_rng(30 + seed)
    shared = rng.standard_normal((8, 4))
    private = rng.standard_normal((8, 4))
    got = losses.decorrelation(Tensor(shared), Tensor(private)).item()
    assert got == pytest.approx(oracles.oracle_decorrelation(shared, private), rel=1e-9)


# --- totals ----------------------------------------------------------------------

def test_kd_total_weighted_sum():
    w = LossWeights()
    parts = [Tensor(np.float64(v)) for v in (0.2, 0.3, 1.0, 0.5)]
    assert losses.kd_total(*parts, w).item() == pytest.approx(0.6, rel=1e-12)
    zero = [Tensor(np.float64(0.0))] * 4
    assert losses.kd_total(*zero, w).item() == 0.0
    w_perp = LossWeights(lambda_perp=1.0)
    assert losses.kd_total(*parts, w_perp).item() == pytest.approx(1.1, rel=1e-12)


def test_loss_weights_validation():
    with pytest.raises(InvariantError):
        LossWeights(lambda_hid=-0.1).validate()
    LossWeights().validate()


# --- anchored contrastive ----------------------------------------------------------

def test_anchored_zero_when_all_equal():
    rng = np.random.default_rng(7)
    v = rng.standard_normal((3, 4))
    shared = {m: Tensor(v.copy()) for m in ("ECG", "BVP", "TEMP")}
    assert losses.anchored_contrastive(shared, "ECG").item() == pytest.approx(0.0, abs=1e-9)


def test_anchored_orthogonal_contributes_one():
    shared = {"ECG": Tensor(np.array([[1.0, 0.0]])), "BVP": Tensor(np.array([[0.0, 1.0]]))}
    assert losses.anchored_contrastive(shared, "ECG").item() == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_anchored_matches_oracle(seed):
    rng = np.random.default_rng(40 + seed)
    shared = {m: rng.standard_normal((4, 5)) for m in ("ECG", "BVP", "ACC")}
    got = losses.anchored_contrastive({m: Tensor(v) for m, v in shared.items()}, "ECG").item()
    assert got == pytest.approx(oracles.oracle_anchored(shared, "ECG"), rel=1e-9)


def test_anchored_missing_anchor():
    with pytest.raises(InvariantError):
        losses.anchored_contrastive({"BVP": Tensor(np.ones((2, 3)))}, "ECG")


# --- gradients through the KD stack -------------------------------------------------

def test_hidden_and_final_kd_gradients():
    rng = np.random.default_rng(50)
    names, sl, tl, heads, fusion = rand_kd_instance(rng)
    tensors = []
    student_tensors = {}
    for m in names:
        student_tensors[m] = [Tensor(x, requires_grad=True) for x in sl[m]]
        tensors.extend(student_tensors[m])
    head_params = [p for h in heads.values() for p in h.params.values()]
    for p in head_params + list(fusion.params.values()):
        p.requires_grad = True
    tensors += head_params + list(fusion.params.values())
    teacher = [Tensor(x) for x in tl]

    def f_hidden(_):
        return losses.hidden_kd(student_tensors, teacher, [(0, 0), (1, 1)], heads, fusion)

    def f_final(_):
        return losses.final_embedding_kd({m: student_tensors[m][-1] for m in names},
                                         teacher[-1], heads, fusion)

    assert grad_check(f_hidden, tensors) < 1e-3
    assert grad_check(f_final, tensors) < 1e-3


def test_decorrelation_gradient():
    rng = np.random.default_rng(51)
    s = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    p = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    assert grad_check(lambda t: losses.decorrelation(t[0], t[1]), [s, p]) < 1e-3


def test_reconstruction_gradient_through_decoder():
    # dim-8 toy: gradient of the masked-reconstruction objective w.r.t. all
    # model parameters, checked against finite differences.
    cfg = mae.MaeConfig(signal_len=128, patch_len=32, enc_dim=8, enc_depth=1, enc_heads=2,
                        dec_dim=8, dec_depth=1, dec_heads=2)
    model = mae.MaeModel(cfg, seed=0)
    rng = np.random.default_rng(52)
    x = rng.standard_normal((2, cfg.signal_len)).astype(np.float32)
    patches = mae.patchify(x, cfg.patch_len)
    plan = mae.make_mask_plan(cfg.n_patches, 0.5, 3)
    split = mae.split_shared_private(len(plan.visible_idx), 0.5, 4)

    params = list(model.trainable().values())

    def f(_):
        bundle = model.encode(x, plan, split)
        tokens = bundle.patch_tokens(-1)
        shared = ad.gather(tokens, bundle.shared_idx, axis=1)
        private = ad.gather(tokens, bundle.private_idx, axis=1)
        recon = model.decode(shared, private, plan, split)
        return losses.reconstruction_mse(patches, mae_patch(recon, cfg), plan.masked_idx)

    def mae_patch(recon, cfg):
        return ad.reshape(recon, (recon.shape[0], cfg.n_patches, cfg.patch_len))

    assert grad_check(f, params) < 1e-2
