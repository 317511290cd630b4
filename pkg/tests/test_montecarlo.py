import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from probpnp import distributions as D
from probpnp import geometry as geo
from probpnp import montecarlo as MC
from probpnp import robust
from probpnp.robust import HuberConfig
from probpnp.solver import PnPSolution, SolverConfig, solve
from probpnp.synth import SceneParams, gen_scene

from conftest import corr_central_diff, max_rel_err


def _batch(scene, cfg=MC.AmisConfig(4, 32), seed=0, huber=HuberConfig()):
    scfg = SolverConfig(scene.pose_type, huber=huber)
    sol = solve(scene.camera, scene.corr, scfg, init=scene.y_gt)
    return sol, MC.amis(scene.camera, scene.corr, cfg, D.proposal_init(sol),
                        np.random.default_rng(seed), huber)


def test_log_integrand_is_negative_cost(noisy_scene):
    sc = noisy_scene
    cfg = HuberConfig()
    val = MC.log_integrand(sc.y_gt, sc.camera, sc.corr, cfg)
    assert val == pytest.approx(-robust.robust_cost(sc.y_gt, sc.camera, sc.corr, cfg), abs=1e-12)


def test_log_integrand_zero_at_ground_truth(clean_scene):
    sc = clean_scene
    assert MC.log_integrand(sc.y_gt, sc.camera, sc.corr) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_log_integrand_decreases_along_rays(pose_type, seed):
    sc = gen_scene(SceneParams(pose_type=pose_type), seed)
    rng = np.random.default_rng(seed)
    d = geo.PARAM_DIM[pose_type]
    for _ in range(5):
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
        steps = np.linspace(0, 0.05, 11)
        Y = geo.canonicalize_vectors(pose_type, sc.y_gt.vector + steps[:, None] * u)
        lp = MC.log_integrands(pose_type, Y, sc.camera, sc.corr)
        assert np.all(np.diff(lp) < 0)


def test_amis_single_round_is_plain_importance_sampling(noisy_scene):
    sc = noisy_scene
    sol, batch = _batch(sc, MC.AmisConfig(1, 64))
    q = D.proposal_init(sol)
    assert np.allclose(batch.log_q, q.log_density(batch.poses), atol=1e-12)
    assert np.allclose(batch.log_v, batch.log_p - batch.log_q)
    assert len(batch.proposals) == 1


def test_amis_mixture_weights_match_oracle(noisy_scene):
    sc = noisy_scene
    _, batch = _batch(sc, MC.AmisConfig(3, 16))
    dens = np.stack([q.log_density(batch.poses) for q in batch.proposals])
    log_Q = logsumexp(dens, axis=0) - np.log(len(batch.proposals))
    assert np.allclose(batch.log_q, log_Q, atol=1e-10)
    assert np.allclose(batch.log_v, batch.log_p - batch.log_q, atol=1e-10)


def test_amis_deterministic(noisy_scene):
    sc = noisy_scene
    a = _batch(sc, seed=3)[1]
    b = _batch(sc, seed=3)[1]
    assert np.array_equal(a.poses, b.poses) and np.array_equal(a.log_v, b.log_v)


@pytest.mark.parametrize("seed", range(100))
def test_amis_weights_finite(seed):
    pose_type = "6dof" if seed % 2 else "4dof"
    sc = gen_scene(SceneParams(pose_type=pose_type, n_points=10, noise_sigma=1.0), seed)
    _, batch = _batch(sc, MC.AmisConfig.for_pose_type(pose_type), seed=seed)
    assert np.all(np.isfinite(batch.log_v))
    assert abs(batch.weights.sum() - 1.0) < 1e-12
    assert batch.K == 4 * MC.PAPER_K_PRIME[pose_type]


def test_amis_adaptation_improves_median_ess():
    gain = []
    for seed in range(50):
        sc = gen_scene(SceneParams(pose_type="4dof", n_points=16, symmetry_order=2,
                                   noise_sigma=1.0, weight=0.3), seed)
        _, batch = _batch(sc, MC.AmisConfig(4, 32), seed=seed)
        gain.append(batch.ess_history[-1] - batch.ess_history[0])
    assert np.median(gain) >= 0


def test_amis_keeps_previous_proposal_on_degenerate_refit(noisy_scene, monkeypatch):
    sc = noisy_scene

    def fail(*a, **k):
        raise D.DegenerateFit("forced")

    monkeypatch.setattr(MC, "proposal_refit", fail)
    _, batch = _batch(sc, MC.AmisConfig(3, 16))
    assert batch.proposals[0] is batch.proposals[1] is batch.proposals[2]
    assert np.all(np.isfinite(batch.log_v))


def test_log_domain_safe_for_huge_energies():
    sc = gen_scene(SceneParams(pose_type="4dof", noise_sigma=30.0, weight=50.0), 2)
    sol, batch = _batch(sc)
    assert batch.log_p.min() < -1e6
    assert np.all(np.isfinite(batch.log_v))
    assert np.isfinite(MC.l_pred(batch))


def _toy_batch(log_z, rng, K=200):
    """A 1D batch whose integrand equals exp(log_z) times its own proposal density."""
    q = D.VonMisesUniformMix(0.3, 2.0)
    y = q.sample(rng, K)
    lq = q.log_pdf(y)
    lp = log_z + lq
    poses = np.column_stack([np.zeros((K, 2)), np.full(K, 3.0), y])
    return MC.SampleBatch("4dof", poses, lp, lq, lp - lq, ())


def test_l_pred_exact_when_integrand_is_proposal(rng):
    assert MC.l_pred(_toy_batch(1.7, rng)) == pytest.approx(1.7, abs=1e-12)


def test_l_pred_permutation_invariant(noisy_scene, rng):
    _, batch = _batch(noisy_scene)
    perm = rng.permutation(batch.K)
    shuffled = MC.SampleBatch(batch.pose_type, batch.poses[perm], batch.log_p[perm],
                              batch.log_q[perm], batch.log_v[perm], batch.proposals)
    assert MC.l_pred(shuffled) == pytest.approx(MC.l_pred(batch), abs=1e-12)


def test_ess_bounds(rng):
    assert MC.effective_sample_size(np.zeros(50)) == pytest.approx(50)
    assert MC.effective_sample_size(np.r_[0.0, np.full(9, -800.0)]) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_frozen_kl_gradient_matches_finite_differences(pose_type, seed):
    sc = gen_scene(SceneParams(pose_type=pose_type, n_points=8, noise_sigma=2.0, weight=0.3), seed)
    _, batch = _batch(sc, MC.AmisConfig(2, 16), seed=seed)
    rep = MC.frozen_kl_loss(sc.camera, sc.corr, sc.y_gt, batch)
    num = corr_central_diff(lambda c: MC.frozen_kl_objective(sc.camera, c, sc.y_gt, batch), sc.corr)
    assert max_rel_err([rep.grad_x3D, rep.grad_x2D, rep.grad_w2D], num) < 1e-4
    assert rep.total == pytest.approx(rep.l_tgt + rep.l_pred)


def test_l_pred_gradient_is_weighted_sample_gradient(noisy_scene):
    sc = noisy_scene
    _, batch = _batch(sc)
    rep = MC.frozen_kl_loss(sc.camera, sc.corr, sc.y_gt, batch)
    per = robust.energy_grads(sc.pose_type, batch.poses, sc.camera, sc.corr, HuberConfig())
    tgt = robust.energy_grads(sc.pose_type, sc.y_gt.vector[None], sc.camera, sc.corr, HuberConfig())
    vbar = batch.weights
    for g, p, t in zip((rep.grad_x3D, rep.grad_x2D, rep.grad_w2D), per, tgt):
        l_pred_grad = -np.einsum("k,kna->na", vbar, p)
        assert np.abs((g - t[0]) - l_pred_grad).max() < 1e-10


def test_weight_gradient_sign_follows_posterior_residuals(noisy_scene):
    sc = noisy_scene
    hcfg = HuberConfig(delta_rel=1e4)  # quadratic branch everywhere
    _, batch = _batch(sc, huber=hcfg)
    rep = MC.frozen_kl_loss(sc.camera, sc.corr, sc.y_gt, batch, hcfg)
    _, r_gt, _, _ = geo.forward(sc.pose_type, sc.y_gt.vector[None], sc.camera, sc.corr.x3d,
                                sc.corr.x2d, sc.corr.w2d, hcfg.z_min)
    _, r_s, _, _ = geo.forward(sc.pose_type, batch.poses, sc.camera, sc.corr.x3d, sc.corr.x2d,
                               sc.corr.w2d, hcfg.z_min)
    post = np.einsum("k,kna->na", batch.weights, r_s ** 2)
    expected = sc.corr.w2d * (post - r_gt[0] ** 2)
    assert np.allclose(-rep.grad_w2D, expected, rtol=1e-9, atol=1e-12)
    assert np.array_equal(np.sign(-rep.grad_w2D), np.sign(expected))


def test_kl_total_decreases_with_weight_scale():
    sc = gen_scene(SceneParams(pose_type="4dof", n_points=16), 4)
    totals = []
    for c in (0.1, 0.3, 1.0, 3.0, 10.0):
        rep = MC.kl_loss(sc.camera, sc.corr.scaled(c), sc.y_gt, SolverConfig("4dof"),
                         MC.AmisConfig(4, 32), rng=np.random.default_rng(0))
        totals.append(rep.total)
    assert all(a > b for a, b in zip(totals, totals[1:]))


def test_kl_loss_report_consistency(noisy_scene):
    sc = noisy_scene
    rep = MC.kl_loss(sc.camera, sc.corr, sc.y_gt, SolverConfig(sc.pose_type), MC.AmisConfig(2, 32),
                     rng=np.random.default_rng(1))
    assert rep.total == pytest.approx(rep.l_tgt + rep.l_pred)
    assert rep.l_pred == pytest.approx(MC.l_pred(rep.batch))
    for g, shape in ((rep.grad_x3D, (sc.corr.n, 3)), (rep.grad_x2D, (sc.corr.n, 2)),
                     (rep.grad_w2D, (sc.corr.n, 2))):
        assert g.shape == shape and np.all(np.isfinite(g))


def test_laplace_matches_gaussian_integral_oracle(rng):
    A = rng.normal(size=(4, 4))
    cov = A @ A.T + 0.1 * np.eye(4)
    sol = PnPSolution(geo.Pose4([0, 0, 3.0], 0.2), cov, 1.3, -1.3, True, 1)
    # log Z of exp(-c - x^T Sigma^-1 x / 2) equals -c minus the log Gaussian density at its mean
    oracle = -1.3 - multivariate_normal(np.zeros(4), cov).logpdf(np.zeros(4))
    assert MC.laplace_l_pred(sol) == pytest.approx(oracle, abs=1e-9)


def test_laplace_quaternion_pseudo_determinant_and_sign(clean_scene):
    sc = clean_scene
    if sc.pose_type != "6dof":
        pytest.skip("quaternion only")
    sol = solve(sc.camera, sc.corr, SolverConfig("6dof"), init=sc.y_gt)
    flipped = PnPSolution(geo.Pose6(sol.pose.t, -sol.pose.l), sol.cov, sol.cost, -sol.cost, True, 0)
    assert MC.laplace_l_pred(flipped) == pytest.approx(MC.laplace_l_pred(sol), abs=1e-12)
    B = geo.tangent_basis("6dof", sol.pose.vector[None])[0]
    logdet = np.linalg.slogdet(B.T @ sol.cov @ B)[1]
    expected = -sol.cost + 3 * np.log(2 * np.pi) + 0.5 * logdet
    assert MC.laplace_l_pred(sol, double_cover=False) == pytest.approx(expected, abs=1e-9)
    assert MC.laplace_l_pred(sol) - MC.laplace_l_pred(sol, False) == pytest.approx(np.log(2))


def test_localization_score_limits():
    assert MC.localization_score(0.0) == 1.0
    assert MC.localization_score(np.exp(2.0)) == pytest.approx(0.0, abs=1e-15)
    assert MC.localization_score(1.0) == 1.0
    assert MC.localization_score(np.exp(1.0)) == pytest.approx(0.5)


def test_mc_localization_score_oracle(noisy_scene):
    sc = noisy_scene
    sol, batch = _batch(sc)
    v = np.exp(batch.log_v - batch.log_v.max())
    total = 0.0
    for j in range(batch.K):
        d = np.hypot(batch.poses[j, 0] - sol.pose.t[0], batch.poses[j, 2] - sol.pose.t[2])
        s = 1.0 if d == 0 else min(1.0, max(0.0, -0.5 * np.log(d) + 1.0))
        total += v[j] * s
    assert MC.mc_localization_score(batch, sol) == pytest.approx(total / v.sum(), abs=1e-12)


def test_mc_localization_score_concentrated_batch(noisy_scene):
    sc = noisy_scene
    sol, batch = _batch(sc)
    K = batch.K
    at_opt = MC.SampleBatch(batch.pose_type, np.tile(sol.pose.vector, (K, 1)), batch.log_p,
                            batch.log_q, batch.log_v, ())
    assert MC.mc_localization_score(at_opt, sol) == 1.0


def test_amis_config_validation():
    with pytest.raises(ValueError):
        MC.AmisConfig(0, 32)
    with pytest.raises(ValueError):
        MC.AmisConfig(4, 1)
    assert MC.AmisConfig.for_pose_type("6dof").K == 512
    assert MC.AmisConfig.for_pose_type("4dof").K == 128
