import numpy as np
import pytest

from coda import numkit as nk
from coda.codebook import Codebook
from coda.numkit import ContractViolation, Tensor
from coda.quantize import ResidualQuantizer
from coda.vae import (Linear, ToyAutoencoder, attach_lora, discrete_forward, loss_parts,
                      pretrain_continuous, trainable_count)


def subspace_data(p=16, d=4, n=512, seed=0):
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(p, d)))[0]
    return rng.normal(size=(n, d)) @ basis.T


def pca_residual(x, d):
    """Mean squared error of the best rank-d affine reconstruction."""
    centered = x - x.mean(axis=0)
    _, s, _ = np.linalg.svd(centered, full_matrices=False)
    return float((s[d:] ** 2).sum() / x.size)


def test_linear_autoencoder_reaches_subspace_projection():
    x = subspace_data()
    assert pca_residual(x, 4) < 1e-10
    _, mse = pretrain_continuous(x, 4, hidden=(), steps=1000, lr=0.05, seed=0)
    assert mse < 1e-3


def test_linear_autoencoder_matches_pca_with_noise():
    rng = np.random.default_rng(1)
    x = subspace_data(seed=1) + 0.05 * rng.normal(size=(512, 16))
    _, mse = pretrain_continuous(x, 4, hidden=(), steps=2000, lr=0.05, seed=0)
    # PCA is the optimum for any rank-4 affine map; minibatch noise leaves a small gap
    best = pca_residual(x, 4)
    assert best * (1 - 1e-6) <= mse <= 1.1 * best


def test_zero_steps_keeps_initialization():
    x = subspace_data()
    model, _ = pretrain_continuous(x, 4, steps=0, seed=3)
    init = ToyAutoencoder.create(16, 4, seed=3)
    for k, t in init.named_tensors().items():
        assert model.named_tensors()[k].data.tobytes() == t.data.tobytes()


def test_pretraining_is_deterministic():
    x = subspace_data()
    a, _ = pretrain_continuous(x, 4, steps=50, seed=5)
    b, _ = pretrain_continuous(x, 4, steps=50, seed=5)
    for k, t in a.named_tensors().items():
        assert b.named_tensors()[k].data.tobytes() == t.data.tobytes()


def test_empty_dataset_rejected():
    with pytest.raises(ContractViolation):
        pretrain_continuous(np.zeros((0, 4)), 2)


def test_architecture_and_names():
    m = ToyAutoencoder.create(16, 8)
    assert [l.d_out for l in m.encoder] == [64, 32, 8]
    assert [l.d_out for l in m.decoder] == [32, 64, 16]
    assert "encoder.0.weight" in m.named_tensors() and "decoder.2.bias" in m.named_tensors()


def test_lora_identity_at_attach():
    x = Tensor(np.random.default_rng(0).normal(size=(10, 16)))
    base = ToyAutoencoder.create(16, 8, seed=1)
    for where in ("encoder", "decoder", "both"):
        adapted = attach_lora(base, 4, where)
        assert adapted(x).data.tobytes() == base(x).data.tobytes()


def test_lora_none_adds_nothing():
    base = ToyAutoencoder.create(16, 8, seed=1)
    adapted = attach_lora(base, 4, "none")
    assert trainable_count(adapted) == 0
    assert set(adapted.named_tensors()) == set(base.named_tensors())


def test_lora_parameter_count():
    base = ToyAutoencoder.create(16, 8, seed=1)
    r = 4
    adapted = attach_lora(base, r, "both")
    expect = sum(r * (l.d_in + l.d_out) for l in base.encoder + base.decoder)
    assert trainable_count(adapted) == expect
    assert all(not t.requires_grad for t in adapted.base_tensors().values())
    assert "encoder.0.lora.down" in adapted.named_tensors()


def test_lora_rank_checks():
    base = ToyAutoencoder.create(16, 8, seed=1)
    with pytest.raises(ContractViolation):
        attach_lora(base, 9, "both")
    with pytest.raises(ContractViolation):
        attach_lora(base, 0, "both")


def test_full_rank_lora_equals_weight_update():
    rng = np.random.default_rng(2)
    layer = Linear.create(5, 5, rng)
    delta = rng.normal(size=(5, 5))
    model = ToyAutoencoder([layer], [Linear.create(5, 5, rng)])
    adapted = attach_lora(model, 5, "encoder")
    u, s, vt = np.linalg.svd(delta)
    adapted.encoder[0].lora.up.data = (u * s).astype(np.float32)
    adapted.encoder[0].lora.down.data = vt.astype(np.float32)
    x = rng.normal(size=(7, 5))
    expect = x @ (layer.weight.data.astype(np.float64) + delta).T + layer.bias.data
    np.testing.assert_allclose(adapted.encode(Tensor(x)).data, expect, rtol=1e-4, atol=1e-5)


def test_frozen_base_gets_no_gradient():
    base = ToyAutoencoder.create(16, 8, seed=1)
    adapted = attach_lora(base, 2, "both")
    x = Tensor(np.random.default_rng(0).normal(size=(4, 16)))
    nk.mean_squared_error(adapted(x), x).backward()
    assert all(t.grad is None for t in adapted.base_tensors().values())
    # up starts at zero so down has zero gradient; up itself moves
    assert np.any(adapted.encoder[0].lora.up.grad != 0)


def test_discrete_forward_recovers_memorized_point():
    model = ToyAutoencoder.create(16, 4, seed=0)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 16)))
    f = model.encode(x).data
    book = Codebook(Tensor(np.vstack([np.full((1, 4), 5.0), f, np.zeros((1, 4))]), requires_grad=True))
    out = discrete_forward(model, ResidualQuantizer(3, [book]), x)
    assert out.codes[:, 0].tolist() == [1, 2, 2]
    np.testing.assert_allclose(out.x_hat.data, model(x).data, atol=1e-6)


def test_discrete_forward_rejects_zero_levels():
    model = ToyAutoencoder.create(16, 4, seed=0)
    rq = ResidualQuantizer.create(2, 8, 4, kind="vq")
    with pytest.raises(ContractViolation):
        discrete_forward(model, rq, Tensor(np.zeros((1, 16))), levels=0)


@pytest.mark.parametrize("kind", ["vq", "attn"])
def test_recon_gradient_reaches_encoder_through_ste(kind):
    model = ToyAutoencoder.create(16, 4, seed=0)
    rq = ResidualQuantizer.create(2, 8, 4, kind=kind, seed=1)
    x = Tensor(np.random.default_rng(2).normal(size=(6, 16)))
    out = discrete_forward(model, rq, x)
    parts = loss_parts(out, x, beta=0.25)
    assert len(parts.quant) == 2 and len(parts.entropy) == (2 if kind == "attn" else 0)
    parts.rec.backward()
    assert np.any(model.encoder[0].weight.grad != 0)
    # the reconstruction loss alone does not move the codebook
    assert rq.codebook.embeddings.grad is None
