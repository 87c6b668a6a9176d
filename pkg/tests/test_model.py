import numpy as np
import pytest

from lamlab import autodiff as ad
from lamlab import model
from lamlab.autodiff import Tensor
from lamlab.model import LossWeights, ModelConfig, ModelParams, PairBatch, TripleBatch


MICRO = ModelConfig(
    height=16,
    width=16,
    idm_hidden=(8,),
    fdm_hidden=(8,),
    proprio_hidden=(4,),
    codebook_size=4,
    n_tokens=2,
    code_dim=2,
)


def micro_params(seed=0):
    return ModelParams.init(MICRO, seed)


def micro_pair_batch(seed=1, n=2):
    rng = np.random.default_rng(seed)
    obs = MICRO.obs_dim
    return PairBatch(
        o_i=rng.uniform(0, 1, (n, obs)).astype(np.float32),
        o_j=rng.uniform(0, 1, (n, obs)).astype(np.float32),
        s_i=rng.uniform(0, 1, (n, 2)).astype(np.float32),
        s_j=rng.uniform(0, 1, (n, 2)).astype(np.float32),
    )


def micro_triple_batch(seed=2, n=2):
    rng = np.random.default_rng(seed)
    obs = MICRO.obs_dim
    return TripleBatch(
        o_i=rng.uniform(0, 1, (n, obs)).astype(np.float32),
        o_j=rng.uniform(0, 1, (n, obs)).astype(np.float32),
        o_k=rng.uniform(0, 1, (n, obs)).astype(np.float32),
        s_i=rng.uniform(0, 1, (n, 2)).astype(np.float32),
        s_k=rng.uniform(0, 1, (n, 2)).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# forward passes


def test_idm_forward_shape_and_determinism():
    params = micro_params()
    b = micro_pair_batch()
    z1 = model.idm_forward(params, Tensor(b.o_i), Tensor(b.o_j))
    z2 = model.idm_forward(params, Tensor(b.o_i), Tensor(b.o_j))
    assert z1.shape == (2, MICRO.latent_dim)
    np.testing.assert_array_equal(z1.data, z2.data)


def test_default_config_latent_is_16():
    assert ModelConfig().latent_dim == 16


def test_fdm_img_outputs_in_unit_interval():
    params = micro_params()
    b = micro_pair_batch()
    z = Tensor(np.random.default_rng(0).normal(size=(2, MICRO.latent_dim)).astype(np.float32))
    out = model.fdm_img(params, Tensor(b.o_i), z)
    assert out.shape == (2, MICRO.obs_dim)
    assert (out.data >= 0).all() and (out.data <= 1).all()
    out2 = model.fdm_img(params, Tensor(b.o_i), z)
    np.testing.assert_array_equal(out.data, out2.data)


def test_fdm_proprio_shape_and_determinism():
    params = micro_params()
    b = micro_pair_batch()
    z = Tensor(np.zeros((2, MICRO.latent_dim), dtype=np.float32))
    out = model.fdm_proprio(params, Tensor(b.s_i), z)
    assert out.shape == (2, 2)
    np.testing.assert_array_equal(out.data, model.fdm_proprio(params, Tensor(b.s_i), z).data)


# ---------------------------------------------------------------------------
# quantizer


def _params_with_codebook(rows):
    params = micro_params()
    cb = np.zeros((MICRO.codebook_size, MICRO.code_dim), dtype=np.float32)
    cb[: len(rows)] = np.asarray(rows, dtype=np.float32)
    params.tensors["codebook"] = Tensor(cb, requires_grad=True)
    return params


def test_vq_nearest_neighbor_and_tie_break():
    params = _params_with_codebook([[0.0, 0.0], [1.0, 0.0]])
    z_pre = Tensor(np.array([[0.9, 0.1, 0.9, 0.1]], dtype=np.float32), requires_grad=True)
    lat = model.vq_quantize(params, z_pre)
    assert lat.indices.tolist() == [[1, 1]]
    np.testing.assert_array_equal(lat.z.data, [[1.0, 0.0, 1.0, 0.0]])

    tie = Tensor(np.array([[0.5, 0.0, 0.5, 0.0]], dtype=np.float32))
    lat_tie = model.vq_quantize(params, tie)
    assert lat_tie.indices.tolist() == [[0, 0]]  # equidistant -> lowest index


def test_vq_value_equals_selected_codebook_rows():
    params = micro_params(3)
    z_pre = Tensor(np.random.default_rng(5).normal(size=(4, MICRO.latent_dim)).astype(np.float32))
    lat = model.vq_quantize(params, z_pre)
    cb = params.codebook.data
    expect = np.concatenate([cb[lat.indices[:, t]] for t in range(MICRO.n_tokens)], axis=1)
    np.testing.assert_array_equal(lat.z.data, expect)


def test_straight_through_gradient_equals_identity_bottleneck():
    # linear downstream head: the two graphs compute the same gradient exactly
    rng = np.random.default_rng(6)
    weights = Tensor(rng.normal(size=(1, MICRO.latent_dim)).astype(np.float32))
    zv = rng.normal(size=(1, MICRO.latent_dim)).astype(np.float32)
    params = micro_params()

    z_pre_q = Tensor(zv.copy(), requires_grad=True)
    lat = model.vq_quantize(params, z_pre_q)
    ad.backward(ad.sum_all(ad.mul(lat.z, weights)))

    z_pre_id = Tensor(zv.copy(), requires_grad=True)
    ad.backward(ad.sum_all(ad.mul(z_pre_id, weights)))

    assert np.abs(z_pre_q.grad - z_pre_id.grad).max() <= 1e-7


def test_straight_through_passes_downstream_gradient_unchanged():
    # for any downstream loss, grad at z_pre equals the grad arriving at z
    params = micro_params(1)
    z_pre = Tensor(np.random.default_rng(7).normal(size=(3, MICRO.latent_dim)).astype(np.float32), requires_grad=True)
    lat = model.vq_quantize(params, z_pre)
    target = Tensor(np.random.default_rng(8).normal(size=(3, MICRO.latent_dim)).astype(np.float32))
    lat.z.requires_grad = True  # observe the accumulated grad at z
    ad.backward(ad.mse(ad.tanh(lat.z), target))
    assert np.abs(z_pre.grad - lat.z.grad).max() <= 1e-7


def test_codebook_gradient_only_on_selected_rows():
    params = _params_with_codebook([[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [5.0, 5.0]])
    z_pre = Tensor(np.array([[0.9, 0.0, 0.1, 0.0]], dtype=np.float32), requires_grad=True)
    lat = model.vq_quantize(params, z_pre)
    loss = model.loss_vq(lat, LossWeights(), MICRO)
    ad.backward(loss)
    g = params.codebook.grad
    assert lat.indices.tolist() == [[1, 0]]
    assert g[1].any() and g[0].any()
    np.testing.assert_array_equal(g[2], 0.0)
    np.testing.assert_array_equal(g[3], 0.0)


def test_vq_rejects_empty_codebook():
    params = micro_params()
    params.tensors["codebook"] = Tensor(np.zeros((0, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="empty"):
        model.vq_quantize(params, Tensor(np.zeros((1, 4), dtype=np.float32)))


# ---------------------------------------------------------------------------
# losses: hand values


def test_loss_vq_hand_value_per_slice():
    # one slice (1, 0) against code (0, 0): 1 * |diff|^2 + 0.25 * |diff|^2 = 1.25
    cfg = ModelConfig(height=16, width=16, codebook_size=1, n_tokens=1, code_dim=2)
    params = ModelParams.init(cfg, 0)
    params.tensors["codebook"] = Tensor(np.zeros((1, 2), dtype=np.float32), requires_grad=True)
    z_pre = Tensor(np.array([[1.0, 0.0]], dtype=np.float32), requires_grad=True)
    lat = model.vq_quantize(params, z_pre)
    loss = model.loss_vq(lat, LossWeights(), cfg)
    assert loss.item() == pytest.approx(1.25, abs=1e-7)


def test_loss_vq_zero_when_on_code():
    params = _params_with_codebook([[0.5, -0.5]])
    z_pre = Tensor(np.array([[0.5, -0.5, 0.5, -0.5]], dtype=np.float32), requires_grad=True)
    lat = model.vq_quantize(params, z_pre)
    assert model.loss_vq(lat, LossWeights(), MICRO).item() == 0.0


def test_ac_idm_residual_hand_value():
    z_ik = Tensor(np.array([[2.0, 0.0]], dtype=np.float32))
    z_ij = Tensor(np.array([[1.0, 0.0]], dtype=np.float32))
    z_jk = Tensor(np.array([[0.0, 1.0]], dtype=np.float32))
    for variant in ("idm_no_sg", "idm_sg_zik", "idm_sg_sum"):
        out = model.ac_idm_residual(z_ik, z_ij, z_jk, variant)
        assert out.item() == pytest.approx(2.0, abs=1e-7)


def test_ac_idm_residual_zero_for_additive_and_collapsed():
    rng = np.random.default_rng(0)
    z_ij = rng.normal(size=(4, 6)).astype(np.float32)
    z_jk = rng.normal(size=(4, 6)).astype(np.float32)
    exact = Tensor(z_ij + z_jk)
    for variant in ("idm_no_sg", "idm_sg_zik", "idm_sg_sum"):
        assert model.ac_idm_residual(exact, Tensor(z_ij), Tensor(z_jk), variant).item() == pytest.approx(0.0, abs=1e-12)
    zero = Tensor(np.zeros((4, 6), dtype=np.float32))
    assert model.ac_idm_residual(zero, zero, zero, "idm_no_sg").item() == 0.0


def test_ac_idm_unknown_variant_rejected():
    z = Tensor(np.zeros((1, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        model.ac_idm_residual(z, z, z, "bogus")


def test_loss_rec_hand_micro_value():
    # tiny deterministic check of the reconstruction composition:
    # loss_rec image term must equal mse(o_j, fdm(o_i, z)) computed by hand
    params = micro_params(4)
    batch = micro_pair_batch(9, n=3)
    img, prop, lat = model.loss_rec(params, batch)
    pred = model.fdm_img(params, Tensor(batch.o_i), lat.z).data
    expect_img = float(((batch.o_j - pred) ** 2).mean())
    sp = model.fdm_proprio(params, Tensor(batch.s_i), lat.z).data
    expect_prop = float(((batch.s_j - sp) ** 2).mean())
    assert img.item() == pytest.approx(expect_img, rel=1e-6)
    assert prop.item() == pytest.approx(expect_prop, rel=1e-6)
    assert img.item() >= 0 and prop.item() >= 0


def test_loss_ac_fdm_nonnegative_and_hand_value():
    params = micro_params(5)
    batch = micro_triple_batch(10, n=2)
    loss, lats = model.loss_ac_fdm(params, batch, LossWeights(), "post_vq")
    z_ij = model.latent(params, Tensor(batch.o_i), Tensor(batch.o_j))
    z_jk = model.latent(params, Tensor(batch.o_j), Tensor(batch.o_k))
    z_sum = Tensor(z_ij.data + z_jk.data)
    pred = model.fdm_img(params, Tensor(batch.o_i), z_sum).data
    expect = float(((batch.o_k - pred) ** 2).mean())
    sp = model.fdm_proprio(params, Tensor(batch.s_i), z_sum).data
    expect += 1.0 * float(((batch.s_k - sp) ** 2).mean())
    assert loss.item() == pytest.approx(expect, rel=1e-5)
    assert loss.item() >= 0


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_components_sum_to_total():
    params = micro_params(6)
    w = LossWeights(lambda_ac=0.7, w_proprio=0.5)
    bd = model.total_loss(params, micro_pair_batch(), micro_triple_batch(), w, "fdm", "post_vq")
    parts = bd.parts
    recon = parts["loss_rec"] + 0.5 * parts["loss_proprio"] + parts["loss_vq"] + 0.7 * parts["loss_ac"]
    assert parts["loss_total"] == pytest.approx(recon, abs=1e-6)
    assert all(v >= 0 for v in parts.values())


def test_lambda_zero_is_bitwise_baseline():
    params1 = micro_params(7)
    params2 = micro_params(7)
    pair = micro_pair_batch(11)
    triple = micro_triple_batch(12)
    with_ac_zero = model.total_loss(params1, pair, triple, LossWeights(lambda_ac=0.0), "fdm", "post_vq")
    baseline = model.total_loss(params2, pair, None, LossWeights(lambda_ac=0.0), "fdm", "post_vq")
    assert with_ac_zero.parts["loss_ac"] == 0.0
    assert with_ac_zero.parts["loss_total"] == baseline.parts["loss_total"]  # bitwise
    assert with_ac_zero.total.data.tobytes() == baseline.total.data.tobytes()


def test_latent_placements():
    params = micro_params(8)
    b = micro_pair_batch(13)
    z_post = model.latent(params, Tensor(b.o_i), Tensor(b.o_j), "post_vq")
    z_pre = model.latent(params, Tensor(b.o_i), Tensor(b.o_j), "pre_vq")
    raw = model.idm_forward(params, Tensor(b.o_i), Tensor(b.o_j))
    np.testing.assert_array_equal(z_pre.data, raw.data)
    lat = model.vq_quantize(params, raw)
    np.testing.assert_array_equal(z_post.data, lat.z.data)
    assert z_post.shape[-1] == MICRO.latent_dim
    with pytest.raises(ValueError):
        model.latent(params, Tensor(b.o_i), Tensor(b.o_j), "sideways")


# ---------------------------------------------------------------------------
# oracle IDM: additive ground truth realizes the algebraic identities


def test_oracle_latents_zero_ac_residual_and_inverse_identity():
    from lamlab import world

    scene = world.make_scene(3, 1)
    traj = world.gen_trajectory(scene, 21, 30)
    s = traj.states.astype(np.float64)
    # pick clamp-free interior triples
    z_ij = Tensor(s[10] - s[5])
    z_jk = Tensor(s[15] - s[10])
    z_ik = Tensor(s[15] - s[5])
    res = model.ac_idm_residual(
        Tensor(z_ik.data[None]), Tensor(z_ij.data[None]), Tensor(z_jk.data[None]), "idm_no_sg"
    )
    assert res.item() <= 1e-12
    assert np.abs(model.oracle_latent_fn(traj, [4], [4])).max() == 0.0  # z_ii = 0
    fwd = model.oracle_latent_fn(traj, [5], [12])
    bwd = model.oracle_latent_fn(traj, [12], [5])
    np.testing.assert_array_equal(fwd, -bwd)  # z_ji = -z_ij


# ---------------------------------------------------------------------------
# gradient checks through the full objective


def gradcheck_micro_total(ac_form, placement, seed=0, lam=1.0):
    cfg = ModelConfig(
        height=4,
        width=4,
        idm_hidden=(4,),
        fdm_hidden=(4,),
        proprio_hidden=(3,),
        codebook_size=3,
        n_tokens=1,
        code_dim=2,
    )
    params = ModelParams.init(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    obs = cfg.obs_dim
    pair = PairBatch(
        o_i=rng.uniform(0, 1, (2, obs)),
        o_j=rng.uniform(0, 1, (2, obs)),
        s_i=rng.uniform(0, 1, (2, 2)),
        s_j=rng.uniform(0, 1, (2, 2)),
    )
    triple = TripleBatch(
        o_i=rng.uniform(0, 1, (2, obs)),
        o_j=rng.uniform(0, 1, (2, obs)),
        o_k=rng.uniform(0, 1, (2, obs)),
        s_i=rng.uniform(0, 1, (2, 2)),
        s_k=rng.uniform(0, 1, (2, 2)),
    )
    # float64 batches for the check
    for b in (pair, triple):
        for f in b.__dataclass_fields__:
            setattr(b, f, np.asarray(getattr(b, f), dtype=np.float64))
    w = LossWeights(lambda_ac=lam)

    worst = 0.0
    for name in params.tensors:
        def f(t, name=name):
            return model.total_loss(params.with_replaced(name, t), pair, triple, w, ac_form, placement).total

        err = ad.finite_diff_check(ad.freeze_nondiff(f), params.tensors[name], eps=1e-6)
        worst = max(worst, err)
    return worst


@pytest.mark.parametrize("ac_form,placement", [("fdm", "post_vq"), ("fdm", "pre_vq"), ("idm_sg_zik", "post_vq")])
def test_total_loss_gradients_match_finite_differences(ac_form, placement):
    assert gradcheck_micro_total(ac_form, placement) < 1e-6
