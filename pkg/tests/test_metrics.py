import math

import numpy as np
import pytest

from lamlab import data_io, metrics, sampling, world
from lamlab.metrics import DEGENERATE, UNDEFINED


# ---------------------------------------------------------------------------
# brute-force references: naive loops, no shared code with the implementation


def ref_composition(z_ik, z_ij, z_jk):
    num = 0.0
    for a, b, c in zip(z_ik, z_ij, z_jk):
        num += sum((a[d] - b[d] - c[d]) ** 2 for d in range(len(a)))
    num /= len(z_ik)
    den = 0.0
    cnt = 0
    for group in (z_ij, z_jk, z_ik):
        for v in group:
            den += sum(x * x for x in v)
            cnt += 1
    den /= cnt
    return None if den == 0 else num / den


def ref_identity(z_ii, z_pairs):
    num = sum(math.sqrt(sum(x * x for x in v)) for v in z_ii) / len(z_ii)
    den = sum(math.sqrt(sum(x * x for x in v)) for v in z_pairs) / len(z_pairs)
    return None if den == 0 else num / den


def ref_inverse(z_fwd, z_bwd):
    num = 0.0
    for a, b in zip(z_fwd, z_bwd):
        num += math.sqrt(sum((a[d] + b[d]) ** 2 for d in range(len(a))))
    num /= len(z_fwd)
    den = sum(math.sqrt(sum(x * x for x in v)) for v in z_fwd) / len(z_fwd)
    return None if den == 0 else num / den


def ref_cycle(edges):
    num = 0.0
    for cyc in edges:
        total = [0.0] * len(cyc[0])
        for edge in cyc:
            for d, x in enumerate(edge):
                total[d] += x
        num += math.sqrt(sum(x * x for x in total))
    num /= len(edges)
    den = 0.0
    cnt = 0
    for cyc in edges:
        for edge in cyc:
            den += math.sqrt(sum(x * x for x in edge))
            cnt += 1
    den /= cnt
    return None if den == 0 else num / den


def ref_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    if sx == 0 or sy == 0:
        return None
    return cov / (sx / 1.0) / sy


# ---------------------------------------------------------------------------
# core equivalence on random latent sets


@pytest.mark.parametrize("trial_seeds", [range(0, 250)])
def test_cores_match_bruteforce_on_random_latents(trial_seeds):
    for seed in trial_seeds:
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        z_ik = rng.normal(size=(n, d))
        z_ij = rng.normal(size=(n, d))
        z_jk = rng.normal(size=(n, d))
        got = metrics.composition_residual(z_ik, z_ij, z_jk)
        assert got == pytest.approx(ref_composition(z_ik, z_ij, z_jk), abs=1e-6)

        got = metrics.identity_residual(z_ik, z_ij)
        assert got == pytest.approx(ref_identity(z_ik, z_ij), abs=1e-6)

        got = metrics.inverse_residual(z_ij, z_jk)
        assert got == pytest.approx(ref_inverse(z_ij, z_jk), abs=1e-6)

        m = int(rng.integers(3, 6))
        cyc = rng.normal(size=(n, m, d))
        assert metrics.cycle_residual_core(cyc) == pytest.approx(ref_cycle(cyc), abs=1e-6)

        x = rng.normal(size=12)
        y = rng.normal(size=12)
        assert metrics.pearson(x, y) == pytest.approx(ref_pearson(list(x), list(y)), abs=1e-6)


def test_cores_scale_invariant():
    rng = np.random.default_rng(42)
    n, d = 16, 5
    z_ik, z_ij, z_jk = (rng.normal(size=(n, d)) for _ in range(3))
    cyc = rng.normal(size=(n, 4, d))
    x, y = rng.normal(size=20), rng.normal(size=20)
    for c in (0.013, 1.0, 97.0):
        assert metrics.composition_residual(c * z_ik, c * z_ij, c * z_jk) == pytest.approx(
            metrics.composition_residual(z_ik, z_ij, z_jk), abs=1e-6
        )
        assert metrics.identity_residual(c * z_ik, c * z_ij) == pytest.approx(
            metrics.identity_residual(z_ik, z_ij), abs=1e-6
        )
        assert metrics.inverse_residual(c * z_ij, c * z_jk) == pytest.approx(
            metrics.inverse_residual(z_ij, z_jk), abs=1e-6
        )
        assert metrics.cycle_residual_core(c * cyc) == pytest.approx(metrics.cycle_residual_core(cyc), abs=1e-6)
        assert metrics.pearson(c * x, y) == pytest.approx(metrics.pearson(x, y), abs=1e-6)


# ---------------------------------------------------------------------------
# hand values


def test_composition_hand_value():
    assert metrics.composition_residual([[2.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]]) == pytest.approx(1.0)


def test_identity_hand_value():
    # frames z_00 = (1,0), z_11 = (0,0); pair norms average 2
    got = metrics.identity_residual([[1.0, 0.0], [0.0, 0.0]], [[2.0, 0.0], [0.0, 2.0]])
    assert got == pytest.approx(0.25)


def test_identity_unit_ratio():
    z = [[1.0, 0.0], [0.0, 1.0]]
    assert metrics.identity_residual(z, z) == pytest.approx(1.0)


def test_inverse_hand_values():
    assert metrics.inverse_residual([[1.0, 0.0]], [[-1.0, 0.2]]) == pytest.approx(0.2)
    z = np.array([[0.3, 0.4], [1.0, 0.0]])
    assert metrics.inverse_residual(z, z) == pytest.approx(2.0)
    assert metrics.inverse_residual(z, -z) == 0.0


def test_degenerate_latents_flagged():
    zeros = np.zeros((4, 3))
    assert metrics.composition_residual(zeros, zeros, zeros) == DEGENERATE
    assert metrics.identity_residual(zeros, zeros) == DEGENERATE
    assert metrics.inverse_residual(zeros, zeros) == DEGENERATE
    assert metrics.cycle_residual_core(np.zeros((2, 3, 4))) == DEGENERATE
    assert metrics.pearson(np.ones(5), np.arange(5.0)) == UNDEFINED


def test_pearson_perfect_lines():
    x = np.linspace(0.1, 1.0, 20)
    assert metrics.pearson(2 * x, x) == pytest.approx(1.0)
    assert metrics.pearson(3.0 - x, x) == pytest.approx(-1.0)


def test_cycle_matches_inverse_when_only_inverses_break():
    # latents additive in the forward direction but with broken inverses:
    # a 3-cycle (i -> j -> k -> i) residual equals the corresponding
    # inverse-style residual |z_ik + z_ki| / mean-edge-norm construction
    rng = np.random.default_rng(1)
    d = 3
    fwd_ij = rng.normal(size=(8, d))
    fwd_jk = rng.normal(size=(8, d))
    fwd_ik = fwd_ij + fwd_jk
    bwd_ki = -fwd_ik + rng.normal(scale=0.2, size=(8, d))  # broken inverse
    cycles = np.stack([fwd_ij, fwd_jk, bwd_ki], axis=1)
    got = metrics.cycle_residual_core(cycles)
    num = np.sqrt(((fwd_ik + bwd_ki) ** 2).sum(-1)).mean()
    den = np.concatenate([fwd_ij, fwd_jk, bwd_ki])
    den = np.sqrt((den**2).sum(-1)).mean()
    assert got == pytest.approx(num / den, abs=1e-12)


# ---------------------------------------------------------------------------
# dataset-level drivers with oracle latents


@pytest.fixture(scope="module")
def oracle_ds(tmp_path_factory):
    cfg = data_io.DatasetConfig(seed=5, env_count=2, traj_per_env=3, steps=30, height=16, width=16)
    path = tmp_path_factory.mktemp("mds") / "m.aclamds"
    data_io.gen_dataset(cfg, str(path))
    return data_io.load_dataset(str(path))


def rng_for(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))


def oracle_latent_fn(traj, ii, jj):
    s = traj.states.astype(np.float64)
    return s[np.asarray(jj)] - s[np.asarray(ii)]


def test_oracle_latents_realize_the_algebra(oracle_ds):
    spec = sampling.SampleSpec(horizon=8)
    assert metrics.norm_ac(oracle_latent_fn, oracle_ds, spec, 400, rng_for(1)) < 1e-6
    assert metrics.norm_identity(oracle_latent_fn, oracle_ds, 400, rng_for(2), spec) == 0.0
    assert metrics.delta_inv(oracle_latent_fn, oracle_ds, spec, 400, rng_for(3)) == 0.0
    assert metrics.cycle_residual(oracle_latent_fn, oracle_ds, 3, 400, rng_for(4), spec) < 1e-6
    r = metrics.displacement_corr(oracle_latent_fn, oracle_ds, spec, 400, rng_for(5))
    assert r > 0.999


def test_driver_determinism(oracle_ds):
    spec = sampling.SampleSpec(horizon=8)
    a = metrics.norm_ac(oracle_latent_fn, oracle_ds, spec, 100, rng_for(9))
    b = metrics.norm_ac(oracle_latent_fn, oracle_ds, spec, 100, rng_for(9))
    assert a == b


def test_displacement_corr_undefined_on_constant_norms(oracle_ds):
    const_fn = lambda traj, ii, jj: np.ones((len(np.asarray(ii)), 4))
    spec = sampling.SampleSpec(horizon=8)
    assert metrics.displacement_corr(const_fn, oracle_ds, spec, 64, rng_for(6)) == UNDEFINED


# ---------------------------------------------------------------------------
# norm trajectories


def test_norm_trajectory_oracle_matches_displacement(oracle_ds):
    traj = oracle_ds.trajectories[0]
    nt = metrics.norm_trajectory(oracle_latent_fn, traj)
    assert nt.t.size == len(traj) - 1
    np.testing.assert_allclose(nt.z_norm_normalized, nt.ds_norm_normalized, atol=1e-12)
    assert nt.z_norm_normalized.max() == pytest.approx(1.0)
    assert not nt.degenerate


def test_norm_trajectory_degenerate_flag(oracle_ds):
    zero_fn = lambda traj, ii, jj: np.zeros((len(np.asarray(ii)), 4))
    nt = metrics.norm_trajectory(zero_fn, oracle_ds.trajectories[0])
    assert nt.degenerate
    assert nt.z_norm_normalized.max() == 0.0


def test_norm_trajectory_csv_schema(oracle_ds, tmp_path):
    nt = metrics.norm_trajectory(oracle_latent_fn, oracle_ds.trajectories[1])
    path = metrics.write_norm_trajectory_csv(nt, str(tmp_path / "nt.csv"))
    lines = open(path).read().strip().splitlines()
    assert lines[0] == "t,z_norm,z_norm_normalized,ds_norm,ds_norm_normalized"
    assert len(lines) == len(oracle_ds.trajectories[1])  # header + T-1 rows


# ---------------------------------------------------------------------------
# motion transfer + images


def test_motion_transfer_zero_when_latents_compose(oracle_ds):
    traj = oracle_ds.trajectories[0]
    tgt = oracle_ds.trajectories[3].frames[0]

    def decoder(frame, z):
        out = np.zeros_like(frame)
        out[0, 0, 0] = np.clip(np.linalg.norm(z), 0, 1)
        return out

    res = metrics.motion_transfer(oracle_latent_fn, decoder, traj, (2, 5, 9), tgt)
    assert res.mse_between <= 1e-15
    assert res.img_direct.min() >= 0 and res.img_direct.max() <= 1


def test_ppm_writer_bytes(tmp_path):
    img = np.zeros((2, 3, 3), dtype=np.float32)
    img[0, 0] = [1.0, 0.5, 0.0]
    p = metrics.write_ppm(img, str(tmp_path / "img.ppm"))
    raw = open(p, "rb").read()
    assert raw.startswith(b"P6\n3 2\n255\n")
    pixels = raw.split(b"255\n", 1)[1]
    assert len(pixels) == 2 * 3 * 3
    assert pixels[:3] == bytes([255, 128, 0])


def test_raw_f32_writer(tmp_path):
    img = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    p = metrics.write_raw_f32(img, str(tmp_path / "img.f32"))
    back = np.frombuffer(open(p, "rb").read(), dtype="<f4").reshape(2, 2, 3)
    np.testing.assert_array_equal(back, img)


# ---------------------------------------------------------------------------
# report


def _report(**kw):
    base = dict(
        norm_ac=0.1,
        pearson_r=0.5,
        norm_identity=0.2,
        delta_inv=0.3,
        cycle_residual=0.05,
        env_probe_acc=0.25,
        goal_probe_r2=0.01,
        n_instances=128,
        seed=7,
        placement="post_vq",
    )
    base.update(kw)
    return metrics.MetricsReport(**base)


def test_report_roundtrip_byte_identical(tmp_path):
    p1 = tmp_path / "r1.json"
    metrics.build_report(_report(), str(p1))
    parsed = metrics.MetricsReport.from_json(p1.read_text())
    p2 = tmp_path / "r2.json"
    metrics.build_report(parsed, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_report_serializes_sentinels_not_nan(tmp_path):
    p = tmp_path / "r.json"
    metrics.build_report(_report(norm_ac=DEGENERATE, pearson_r=UNDEFINED), str(p))
    text = p.read_text()
    assert "degenerate" in text and "undefined" in text
    assert "NaN" not in text and "nan" not in text.replace("degenerate", "").replace("undefined", "")


def test_report_includes_n_instances_and_seed(tmp_path):
    p = tmp_path / "r.json"
    metrics.build_report(_report(), str(p))
    import json

    d = json.loads(p.read_text())
    assert d["n_instances"] == 128 and d["seed"] == 7
    assert set(d) == set(metrics.REPORT_KEYS)


def test_report_validation_rejects_bad_values():
    with pytest.raises(ValueError):
        _report(norm_ac=-0.5).validate()
    with pytest.raises(ValueError):
        _report(pearson_r=1.5).validate()
    with pytest.raises(ValueError):
        metrics.MetricsReport.from_json('{"norm_ac": 1}')
