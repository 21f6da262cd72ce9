"""End-to-end acceptance suite.

Each test verifies one acceptance property of the trained system and prints a
single PASS/FAIL verdict line with the measured quantities and its wall-clock
budget. The expensive flow proxy is trained once per module; its training time
is charged into the budget of every test that consumes it, so each verdict
stands on its own even though the work is shared.
"""

import time
from dataclasses import dataclass, replace

import numpy as np
import pytest

from flowcritic.agent import (
    Agent,
    AgentConfig,
    CriticPair,
    OneStepActor,
    ReplayBuffer,
    actor_loss,
    critic_loss,
    epsilon_threshold,
    penalty_weight,
    train_offline,
    train_online_finetune,
)
from flowcritic.baselines import train_fql
from flowcritic.bc import CvaeBc, DdpmBc, GaussianBc, cvae_loss, ddpm_loss, gaussian_nll_loss
from flowcritic.data import (
    BanditEnv,
    gmm_true_logpdf,
    make_bandit_dataset,
    make_gmm2d_dataset,
)
from flowcritic.flow import (
    VelocityProxy,
    divergence_hutchinson,
    euler_sample,
    flow_matching_loss,
    log_density_exact,
    log_density_hutchinson,
    train_proxy,
)
from flowcritic.nn import analytic_gradients, gradient_check
from flowcritic.runio import RunConfig
from flowcritic.studies import (
    action_grid_2d,
    density_contrast_gaps,
    density_values,
    fit_density_models,
    high_mode_concentration,
    mode_coverage,
    run_bandit_compare,
    tabular_property_suite,
)


def _verdict(name: str, ok: bool, seconds: float, budget: float, detail: str) -> None:
    in_budget = seconds < budget
    tag = "PASS" if ok and in_budget else "FAIL"
    print(f"\n[{tag}] {name}: {detail} | {seconds:.1f}s of {budget:.0f}s budget")
    assert ok, f"{name}: {detail}"
    assert in_budget, f"{name} over budget: {seconds:.1f}s >= {budget:.0f}s"


# -- 1: tabular operator theory ------------------------------------------------


def test_tabular_operator_theory():
    start = time.monotonic()
    suite = tabular_property_suite(seed=0, n_instances=100, alpha=0.5)
    gammas = {row["gamma"] for row in suite["per_instance"]}
    props = suite["properties"]
    detail = "; ".join(
        f"{name} worst={entry['worst']:.3g} (tol {entry['tolerance']:.3g})"
        for name, entry in props.items()
    )
    ok = suite["all_pass"] and gammas == {0.5, 0.9, 0.99}
    _verdict("tabular operator theory", ok, time.monotonic() - start, 60.0, detail)


# -- 2: analytic gradients against central finite differences -------------------


def test_loss_gradients_match_finite_differences():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    n = 6
    states = rng.standard_normal((n, 2))
    actions = rng.uniform(-1.0, 1.0, size=(n, 2))

    cfg = AgentConfig(
        alpha=0.5, lam=0.1, gamma=0.9, steps=1, batch_size=n,
        actor_widths=(12,), critic_widths=(12,), proxy_widths=(12,), proxy_steps=1,
    )
    agent = Agent(
        actor=OneStepActor(2, 2, cfg.actor_widths, rng),
        critics=CriticPair(2, 2, cfg.critic_widths, rng, aggregation=cfg.aggregation),
        config=cfg,
    )
    proxy = VelocityProxy(2, 2, (12,), rng)
    batch = {
        "states": states,
        "actions": actions,
        "rewards": rng.standard_normal(n),
        "next_states": rng.standard_normal((n, 2)),
        "terminals": np.zeros(n),
    }
    log_eps = np.full(n, -1.0)

    gaussian = GaussianBc(2, 2, (12,), rng)
    cvae = CvaeBc(2, 2, (12,), rng)
    ddpm = DdpmBc(2, 2, (12,), rng, n_steps=5)

    # Each closure reseeds its generator so repeated evaluations during the
    # finite-difference sweep see identical draws.
    cases = {
        "flow-matching": (
            lambda: flow_matching_loss(proxy, states, actions, np.random.default_rng(5)),
            proxy.net.params(),
        ),
        "critic": (
            lambda: critic_loss(agent, proxy, batch, log_eps, np.random.default_rng(6))[0],
            agent.critics.params(),
        ),
        "actor": (
            lambda: actor_loss(agent, proxy, batch, np.random.default_rng(7))[0],
            agent.actor.params(),
        ),
        "gaussian-mle": (lambda: gaussian_nll_loss(gaussian, states, actions), gaussian.params()),
        "vae-elbo": (
            lambda: cvae_loss(cvae, states, actions, np.random.default_rng(8)),
            cvae.params(),
        ),
        "ddpm": (
            lambda: ddpm_loss(ddpm, states, actions, np.random.default_rng(9)),
            ddpm.params(),
        ),
    }
    reports = {name: gradient_check(fn, params) for name, (fn, params) in cases.items()}
    detail = "; ".join(f"{k} rel={r.max_rel_error:.2e}" for k, r in reports.items())
    ok = all(r.passed for r in reports.values())
    _verdict("loss gradients vs finite differences", ok, time.monotonic() - start, 60.0, detail)


# -- 7: exact algebra of the penalty machinery ----------------------------------


def test_weight_scheme_and_equivalence_algebra():
    start = time.monotonic()

    weights_exact = (
        penalty_weight(-2.0, -2.0) == 0.0
        and penalty_weight(-2.0 + np.log(0.5), -2.0) == 0.5
        and penalty_weight(-50.0, -3.0) == 1.0
    )

    col = np.array([-1.0, -3.0, -2.0])
    batch = np.array([-1.5, -2.5])
    schemes_exact = (
        np.array_equal(epsilon_threshold("dataset-wide", col, batch), np.full(2, -3.0))
        and np.array_equal(epsilon_threshold("batch-wide", col, batch), np.full(2, -2.5))
        and np.array_equal(epsilon_threshold("batch-adaptive", col, batch), batch)
    )

    ds = make_bandit_dataset(200, np.random.default_rng(3))
    cfg = AgentConfig(
        alpha=0.0, lam=0.1, gamma=0.0, steps=40, batch_size=32,
        actor_widths=(8, 8), critic_widths=(8, 8), proxy_widths=(8, 8),
        proxy_steps=40, log_every=20,
    )
    plain, _, _ = train_offline(ds, cfg, np.random.default_rng(4))
    via_fql, _, _ = train_fql(ds, replace(cfg, alpha=0.7), np.random.default_rng(4))
    pairs = list(zip(plain.actor.params().values(), via_fql.actor.params().values()))
    pairs += list(zip(plain.critics.params().values(), via_fql.critics.params().values()))
    fql_bitwise = all(np.array_equal(a.data, b.data) for a, b in pairs)

    rng = np.random.default_rng(14)
    inv_cfg = AgentConfig(
        alpha=0.5, lam=0.1, gamma=0.0, q_norm=True, steps=1, batch_size=32,
        actor_widths=(16, 16), critic_widths=(16, 16), proxy_widths=(16, 16), proxy_steps=1,
    )
    inv_agent = Agent(
        actor=OneStepActor(1, 1, inv_cfg.actor_widths, rng),
        critics=CriticPair(1, 1, inv_cfg.critic_widths, rng, aggregation="min"),
        config=inv_cfg,
    )
    inv_proxy = VelocityProxy(1, 1, (8,), rng)
    inv_batch = {
        "states": np.zeros((32, 1)),
        "actions": rng.uniform(-1, 1, (32, 1)),
        "rewards": rng.standard_normal(32),
        "next_states": np.zeros((32, 1)),
        "terminals": np.ones(32),
    }
    params = inv_agent.actor.params()
    g_base = analytic_gradients(
        lambda: actor_loss(inv_agent, inv_proxy, inv_batch, np.random.default_rng(15))[0], params
    )
    for net in (inv_agent.critics.q1, inv_agent.critics.q2):
        net.weights[-1].data *= 10.0
        net.biases[-1].data *= 10.0
    g_scaled = analytic_gradients(
        lambda: actor_loss(inv_agent, inv_proxy, inv_batch, np.random.default_rng(15))[0], params
    )
    flat_a = np.concatenate([g_base[k].ravel() for k in sorted(g_base)])
    flat_b = np.concatenate([g_scaled[k].ravel() for k in sorted(g_scaled)])
    cosine = float(flat_a @ flat_b / (np.linalg.norm(flat_a) * np.linalg.norm(flat_b)))

    detail = (
        f"weights_exact={weights_exact}; schemes_exact={schemes_exact}; "
        f"fql_bitwise={fql_bitwise}; rescale_cosine={cosine:.6f}"
    )
    ok = weights_exact and schemes_exact and fql_bitwise and cosine >= 0.999
    _verdict("penalty algebra and ablation equivalence", ok, time.monotonic() - start, 10.0, detail)


# -- 8: divergence estimator -----------------------------------------------------


class _LinearField:
    """Velocity field v(x; s, u) = A x, constant in s and u.

    Its divergence is trace(A) everywhere, which gives the estimator an exact
    target. Implements the same duck-typed surface the transport code uses.
    """

    def __init__(self, A: np.ndarray, n_steps: int = 10):
        self.A = np.asarray(A, dtype=np.float64)
        self.action_dim = self.A.shape[0]
        self.state_dim = 1
        self.n_steps = n_steps

    def velocity_np(self, states, x, u):
        return x @ self.A.T

    def velocity_jvp(self, states, x, u, tangent):
        return self.velocity_np(states, x, u), tangent @ self.A.T


def test_divergence_estimator():
    start = time.monotonic()
    worst_rel = 0.0
    for d in (2, 3, 4):
        rng = np.random.default_rng(30 + d)
        # The diagonal shift keeps trace(A) away from zero so the relative
        # tolerance is meaningful; the off-diagonal noise is what the
        # stochastic estimator actually has to average away.
        A = rng.standard_normal((d, d)) + 3.0 * np.eye(d)
        field = _LinearField(A)
        x = rng.standard_normal((5, d))
        est = divergence_hutchinson(
            field, np.zeros((5, 1)), x, 0.3, np.random.default_rng(50 + d), n_probes=100_000
        )
        rel = float(np.max(np.abs(est - np.trace(A)) / abs(np.trace(A))))
        worst_rel = max(worst_rel, rel)

    proxy = VelocityProxy(2, 3, (8, 8), np.random.default_rng(60))
    s = np.random.default_rng(61).standard_normal((7, 2))
    a = np.random.default_rng(62).uniform(-1, 1, (7, 3))
    coord = log_density_hutchinson(proxy, s, a, probe_kind="coordinate")
    exact = log_density_exact(proxy, s, a)
    bitwise = bool(np.array_equal(coord, exact))

    detail = f"linear-field worst rel err={worst_rel:.4%}; coordinate-probe bitwise={bitwise}"
    ok = worst_rel < 0.01 and bitwise
    _verdict("divergence estimator", ok, time.monotonic() - start, 30.0, detail)


# -- shared trained flow proxy ----------------------------------------------------


@dataclass
class TrainedFlow:
    dataset: object
    holdout: object
    proxy: VelocityProxy
    train_seconds: float


@pytest.fixture(scope="module")
def trained_flow():
    start = time.monotonic()
    rng = np.random.default_rng(7)
    dataset = make_gmm2d_dataset(10_000, rng)
    proxy = VelocityProxy(dataset.state_dim, dataset.action_dim, (256, 256, 256, 256), rng)
    train_proxy(
        proxy, dataset.states, dataset.actions, rng,
        steps=40_000, batch_size=256, lr=3e-4, lr_final=1e-5, ema_decay=0.999,
    )
    holdout = make_gmm2d_dataset(1_000, rng)
    return TrainedFlow(dataset, holdout, proxy, time.monotonic() - start)


def _chunked_log_density(proxy, states, actions, n_steps, chunk=2048):
    parts = [
        log_density_exact(proxy, states[i : i + chunk], actions[i : i + chunk], n_steps=n_steps)
        for i in range(0, len(actions), chunk)
    ]
    return np.concatenate(parts)


# -- 3: flow density fidelity ------------------------------------------------------


def test_flow_density_fidelity(trained_flow):
    start = time.monotonic()
    f = trained_flow
    est = log_density_exact(f.proxy, f.holdout.states, f.holdout.actions, n_steps=10)
    err = float(np.mean(np.abs(est - gmm_true_logpdf(f.holdout.actions))))

    res = 101
    pts = action_grid_2d(res)
    grid_states = np.repeat(f.dataset.states[:1], len(pts), axis=0)
    vals = _chunked_log_density(f.proxy, grid_states, pts, n_steps=100)
    cell = (3.0 / (res - 1)) ** 2
    integral = float(np.exp(vals).sum() * cell)

    seconds = f.train_seconds + (time.monotonic() - start)
    detail = f"held-out |log err| mean={err:.3f} nats (<0.5); grid integral={integral:.4f} (in [0.9,1.1])"
    ok = err < 0.5 and 0.9 <= integral <= 1.1
    _verdict("flow density fidelity", ok, seconds, 600.0, detail)


# -- 4: density-model contrast ordering ---------------------------------------------


def test_density_model_contrast(trained_flow):
    start = time.monotonic()
    f = trained_flow
    models, failures = fit_density_models(f.dataset, np.random.default_rng(11), proxy=f.proxy)
    assert not failures, failures
    gaps = density_contrast_gaps(models, np.random.default_rng(12), elbo_draws=64)

    pts = action_grid_2d(101)
    grid_states = np.repeat(f.dataset.states[:1], len(pts), axis=0)
    gvals = density_values(
        {"gaussian": models["gaussian"]}, pts, np.random.default_rng(13), chunk=4096
    )["gaussian"]
    peak = pts[int(np.argmax(gvals))]
    peak_dist = float(np.linalg.norm(peak))

    seconds = f.train_seconds + (time.monotonic() - start)
    detail = (
        f"contrast gaps flow={gaps['flow']:.2f} ddpm={gaps['ddpm']:.2f} "
        f"gaussian={gaps['gaussian']:.2f} cvae={gaps['cvae']:.2f}; "
        f"gaussian peak dist={peak_dist:.3f} (<0.25)"
    )
    ok = gaps["flow"] > gaps["ddpm"] and peak_dist < 0.25
    _verdict("density-model contrast ordering", ok, seconds, 1200.0, detail)


def _grid_states_like(dataset, n):
    return np.repeat(dataset.states[:1], n, axis=0)


# -- 5: integration-step fidelity trend ----------------------------------------------


def test_step_count_fidelity_trend(trained_flow):
    start = time.monotonic()
    f = trained_flow
    z = np.random.default_rng(21).standard_normal((4000, f.dataset.action_dim))
    states = _grid_states_like(f.dataset, len(z))
    cov10 = mode_coverage(euler_sample(f.proxy, states, z, n_steps=10))
    cov3 = mode_coverage(euler_sample(f.proxy, states, z, n_steps=3))

    true_ld = gmm_true_logpdf(f.holdout.actions)
    err10 = float(np.mean(np.abs(
        log_density_exact(f.proxy, f.holdout.states, f.holdout.actions, n_steps=10) - true_ld
    )))
    err3 = float(np.mean(np.abs(
        log_density_exact(f.proxy, f.holdout.states, f.holdout.actions, n_steps=3) - true_ld
    )))

    seconds = f.train_seconds + (time.monotonic() - start)
    detail = (
        f"mode coverage T=10 {cov10:.3f} >= T=3 {cov3:.3f}; "
        f"held-out err T=10 {err10:.3f} < T=3 {err3:.3f}"
    )
    ok = cov10 >= cov3 and err10 < err3
    _verdict("integration-step fidelity trend", ok, seconds, 900.0, detail)


# -- 6: bandit method comparison -------------------------------------------------------


def test_bandit_method_comparison(tmp_path):
    start = time.monotonic()
    config = RunConfig(tag="bandit-compare", seed=0, data={"kind": "bandit", "n": 1000})
    report = run_bandit_compare(config, out_override=str(tmp_path))
    checks = report.summary["checks"]
    methods = report.summary["methods"]
    detail = (
        f"agent concentration={methods['agent']['high_mode_concentration']:.3f} (>=0.8); "
        f"gap excess agent={methods['agent']['gap_region_excess']:.3f} "
        f"< fql={methods['fql-weak']['gap_region_excess']:.3f}; "
        f"cql gap excess={methods['cql']['gap_region_excess']:.3f} (<0); "
        f"svr ratio max={max(methods['svr']['ratio_max_grid'], methods['svr']['ratio_max_seen']):.3g} "
        f"(reaches 1e4)"
    )
    ok = all(checks.values())
    _verdict("bandit method comparison", ok, time.monotonic() - start, 600.0, detail)


# -- 9: online fine-tuning stability ----------------------------------------------------


def test_online_finetune_stability():
    start = time.monotonic()
    dataset = make_bandit_dataset(1000, np.random.default_rng(0))
    cfg = AgentConfig(
        alpha=0.5, lam=0.1, gamma=0.0, steps=5000, batch_size=256,
        actor_widths=(64, 64), critic_widths=(64, 64), proxy_widths=(64, 64),
        proxy_steps=3000, n_steps=10,
    )
    rng = np.random.default_rng(5)
    agent, proxy, _ = train_offline(dataset, cfg, rng)

    probe_states = np.zeros((1000, 1))
    # The same evaluation draws before and after so the comparison is paired.
    before = high_mode_concentration(agent.actor.sample_np(probe_states, np.random.default_rng(99)))

    # Batch 64 keeps 50k fine-tune steps inside the time budget; the update
    # count is what the stability claim is about, not the batch size.
    agent.config = replace(cfg, steps=50_000, batch_size=64, eps_scheme="batch-wide")
    replay = ReplayBuffer(dataset)
    env = BanditEnv(rng)
    train_online_finetune(agent, proxy, env, replay, agent.config, rng)
    after = high_mode_concentration(agent.actor.sample_np(probe_states, np.random.default_rng(99)))

    seconds = time.monotonic() - start
    detail = f"high-mode concentration before={before:.3f} after={after:.3f} (drop <= 0.05)"
    ok = after >= before - 0.05
    _verdict("online fine-tuning stability", ok, seconds, 600.0, detail)
