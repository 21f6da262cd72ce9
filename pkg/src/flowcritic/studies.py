"""The three studies and the two training runs behind the CLI.

Each ``run_*`` function takes a RunConfig, trains or verifies what the run
needs, writes CSV artifacts plus a JSON report into the output directory,
and returns the report. Checks recorded in the report gate the process exit
status, so a study doubles as an executable claim about the method.

Training runs checkpoint every K steps. A checkpoint carries every array
the loop state depends on (parameters, target copies, Adam moments, the
generator state, and for fine-tuning the replay tail and environment
cursor), so resuming reproduces the uninterrupted trajectory bitwise.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .agent import (
    Agent,
    AgentConfig,
    CriticPair,
    OneStepActor,
    ReplayBuffer,
    TrainingError,
    finetune_step,
    precompute_densities,
    train_offline,
    train_step,
)
from .baselines import CqlConfig, SvrConfig, train_cql, train_fql, train_svr
from .bc import (
    cvae_elbo,
    cvae_fit,
    cvae_sample,
    ddpm_elbo,
    ddpm_fit,
    ddpm_sample,
    gaussian_fit,
    gaussian_logpdf,
)
from .data import (
    BANDIT_STATE,
    GMM_MEANS,
    GMM_STATE,
    GMM_VAR,
    BanditEnv,
    OfflineDataset,
    bandit_true_q,
    dataset_load,
    gmm_true_logpdf,
    make_bandit_dataset,
    make_gmm2d_dataset,
)
from .flow import VelocityProxy, euler_sample, log_density_exact, train_proxy
from .nn import AdamState, load_checkpoint, save_checkpoint
from .runio import (
    ConfigError,
    RunConfig,
    RunReport,
    agent_config,
    append_metrics,
    read_metrics,
    resolve_out_dir,
    write_report,
)
from .tabular import (
    closed_form_fixed_point,
    fixed_point_iterate,
    occupancy_related_check,
    penalized_operator_apply,
    random_instance,
    support_violation_probe,
)

GRID_LOW = -1.5
GRID_HIGH = 1.5
GRID_RES = 101

# Inter-mode saddle points of the four-mode mixture; the density contrast is
# measured between the mode centers and these.
CONTRAST_SADDLES = np.array([[0.0, -0.5], [0.0, 0.5], [-0.5, 0.0], [0.5, 0.0]])
MODE_RADIUS = 3.0 * float(np.sqrt(GMM_VAR))

BANDIT_GRID_RES = 401
GAP_LOW, GAP_HIGH = -0.2, 0.2
HIGH_MODE_CENTER = -0.5
HIGH_MODE_TOL = 0.15

DENSITY_MODELS = ("flow", "gaussian", "cvae", "ddpm")
BANDIT_METHODS = ("agent", "fql-weak", "fql-strong", "cql", "svr")


# -- shared dataset plumbing ---------------------------------------------------


def load_or_generate_dataset(
    config: RunConfig, default_kind: str, default_n: int = 10000
) -> OfflineDataset:
    """Resolve a run's dataset: an explicit file wins over a generator spec.

    Generation is seeded from ``data.seed`` (falling back to the run seed),
    so the same config always rebuilds the same dataset.
    """
    if config.dataset_path:
        return dataset_load(config.dataset_path)
    kind = str(config.data.get("kind", default_kind))
    n = int(config.data.get("n", default_n))
    rng = np.random.default_rng(int(config.data.get("seed", config.seed)))
    if kind == "bandit":
        return make_bandit_dataset(n, rng)
    if kind == "gmm2d":
        return make_gmm2d_dataset(n, rng)
    raise ConfigError(f"unknown dataset kind {kind!r} (expected 'bandit' or 'gmm2d')")


def _gmm_states(n: int) -> np.ndarray:
    return np.broadcast_to(GMM_STATE, (n, GMM_STATE.shape[0])).copy()


def _bandit_states(n: int) -> np.ndarray:
    return np.broadcast_to(BANDIT_STATE, (n, 1)).copy()


def _write_csv(path: str, rows: list[dict]) -> None:
    """Replace-on-write for study artifacts; metrics CSVs stay append-only."""
    if os.path.exists(path):
        os.remove(path)
    append_metrics(path, rows)


def _run_widths(run: dict, key: str, default: tuple) -> tuple:
    value = run.get(key)
    if value is None:
        return default
    if isinstance(value, (int, float)):
        return (int(value),)
    return tuple(int(w) for w in str(value).split(","))


# -- density study -------------------------------------------------------------


def action_grid_2d(res: int = GRID_RES, low: float = GRID_LOW, high: float = GRID_HIGH) -> np.ndarray:
    """Row-major (res^2, 2) grid over the square, x varying fastest."""
    xs = np.linspace(low, high, res)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


def mode_coverage(actions: np.ndarray) -> float:
    """Fraction of samples within three component stds of some mode center."""
    d = np.linalg.norm(np.asarray(actions)[:, None, :] - GMM_MEANS[None, :, :], axis=2)
    return float((d.min(axis=1) <= MODE_RADIUS).mean())


def fit_density_models(
    dataset: OfflineDataset,
    rng: np.random.Generator,
    proxy: VelocityProxy | None = None,
    proxy_widths=(256, 256, 256, 256),
    proxy_steps: int = 40000,
    widths=(256, 256),
    gaussian_steps: int = 2000,
    cvae_steps: int = 3000,
    ddpm_steps: int = 4000,
    batch_size: int = 256,
    n_steps: int = 10,
    lr: float = 3e-4,
) -> tuple[dict, dict]:
    """Train the four density models on one dataset.

    A model whose training blows up is recorded under its name in the
    failure dict and dropped; the remaining models still train. A
    pre-trained flow proxy can be passed in to skip the expensive fit.
    """
    s, a = dataset.states, dataset.actions
    models: dict = {}
    failures: dict = {}

    if proxy is not None:
        models["flow"] = proxy
    else:
        try:
            flow = VelocityProxy(dataset.state_dim, dataset.action_dim, proxy_widths, rng, n_steps=n_steps)
            train_proxy(
                flow, s, a, rng,
                steps=proxy_steps, batch_size=batch_size,
                lr=lr, lr_final=1e-5, ema_decay=0.999,
            )
            models["flow"] = flow
        except TrainingError as exc:
            failures["flow"] = str(exc)

    fits = (
        ("gaussian", lambda: gaussian_fit(s, a, rng, widths=widths, steps=gaussian_steps, batch_size=batch_size, lr=lr)),
        ("cvae", lambda: cvae_fit(s, a, rng, widths=widths, steps=cvae_steps, batch_size=batch_size, lr=lr)),
        ("ddpm", lambda: ddpm_fit(s, a, rng, widths=widths, steps=ddpm_steps, batch_size=batch_size, lr=lr)),
    )
    for name, fit in fits:
        try:
            models[name] = fit()
        except TrainingError as exc:
            failures[name] = str(exc)
    return models, failures


def density_values(
    models: dict,
    actions: np.ndarray,
    rng: np.random.Generator,
    n_steps: int = 10,
    elbo_draws: int = 16,
    chunk: int = 2048,
) -> dict[str, np.ndarray]:
    """Log-density (flow, Gaussian) or ELBO (CVAE, DDPM) per action.

    All models are conditioned on the mixture's constant state, so the
    values are directly comparable across models at the same action.
    """
    actions = np.asarray(actions, dtype=np.float64)
    out: dict[str, np.ndarray] = {}
    for name, model in models.items():
        vals = []
        for lo in range(0, len(actions), chunk):
            block = actions[lo : lo + chunk]
            states = _gmm_states(len(block))
            if name == "flow":
                vals.append(log_density_exact(model, states, block, n_steps=n_steps))
            elif name == "gaussian":
                vals.append(gaussian_logpdf(model, states, block))
            elif name == "cvae":
                vals.append(cvae_elbo(model, states, block, rng, n_mc=elbo_draws))
            elif name == "ddpm":
                vals.append(ddpm_elbo(model, states, block, rng, n_draws=elbo_draws))
            else:
                raise ValueError(f"unknown density model {name!r}")
        out[name] = np.concatenate(vals) if vals else np.zeros(0)
    return out


def sample_model(name: str, model, n: int, rng: np.random.Generator, n_steps: int = 10) -> np.ndarray:
    """Draw n conditioned actions from one density model, clamped to the box."""
    states = _gmm_states(n)
    if name == "flow":
        z = rng.standard_normal((n, 2))
        return np.clip(euler_sample(model, states, z, n_steps=n_steps), -1.0, 1.0)
    if name == "gaussian":
        return model.sample(states, rng)
    if name == "cvae":
        return cvae_sample(model, states, rng)
    if name == "ddpm":
        return ddpm_sample(model, states, rng)
    raise ValueError(f"unknown density model {name!r}")


def density_contrast_gaps(
    models: dict, rng: np.random.Generator, n_steps: int = 10, elbo_draws: int = 64
) -> dict[str, float]:
    """Mean value at the mode centers minus mean value at the saddles.

    A sharp estimator separates modes from the low-density ridge between
    them; a washed-out one does not. Eight evaluation points, so the draw
    count per point can afford to be high.
    """
    at_modes = density_values(models, GMM_MEANS, rng, n_steps=n_steps, elbo_draws=elbo_draws)
    at_saddles = density_values(models, CONTRAST_SADDLES, rng, n_steps=n_steps, elbo_draws=elbo_draws)
    return {name: float(at_modes[name].mean() - at_saddles[name].mean()) for name in models}


def run_density_study(config: RunConfig, out_override: str | None = None) -> RunReport:
    out = resolve_out_dir(config, out_override)
    run = config.run
    rng = np.random.default_rng(config.seed)
    dataset = load_or_generate_dataset(config, default_kind="gmm2d")
    if dataset.action_dim != 2:
        raise ConfigError("the density study needs a two-dimensional action space")

    n_steps = int(run.get("n_steps", 10))
    grid_res = int(run.get("grid_res", GRID_RES))
    elbo_draws = int(run.get("elbo_draws", 16))
    t0 = time.time()
    models, failures = fit_density_models(
        dataset, rng,
        proxy_widths=_run_widths(run, "proxy_widths", (256, 256, 256, 256)),
        proxy_steps=int(run.get("proxy_steps", 40000)),
        widths=_run_widths(run, "widths", (256, 256)),
        gaussian_steps=int(run.get("gaussian_steps", 2000)),
        cvae_steps=int(run.get("cvae_steps", 3000)),
        ddpm_steps=int(run.get("ddpm_steps", 4000)),
        batch_size=int(run.get("batch_size", 256)),
        n_steps=n_steps,
    )
    train_seconds = time.time() - t0

    files: dict[str, str] = {}
    n_samples = int(run.get("samples", 4000))
    coverage = {}
    for name, model in models.items():
        actions = sample_model(name, model, n_samples, rng, n_steps=n_steps)
        coverage[name] = mode_coverage(actions)
        rel = f"samples_{name}.csv"
        _write_csv(os.path.join(out, rel), [{"x": float(x), "y": float(y)} for x, y in actions])
        files[f"samples_{name}"] = rel

    grid = action_grid_2d(grid_res)
    grid_vals = density_values(models, grid, rng, n_steps=n_steps, elbo_draws=max(4, elbo_draws // 4))
    grid_rows = []
    for name in models:
        vals = grid_vals[name]
        grid_rows.extend(
            {"model": name, "x": float(p[0]), "y": float(p[1]), "value": float(v)}
            for p, v in zip(grid, vals)
        )
    _write_csv(os.path.join(out, "density_grid.csv"), grid_rows)
    files["density_grid"] = "density_grid.csv"

    gaps = density_contrast_gaps(models, rng, n_steps=n_steps, elbo_draws=elbo_draws)

    summary: dict = {
        "contrast_gap": gaps,
        "mode_coverage": coverage,
        "failures": failures,
        "train_seconds": round(train_seconds, 1),
        "grid_res": grid_res,
    }
    checks: dict = {}
    if "gaussian" in models:
        peak = grid[int(np.argmax(grid_vals["gaussian"]))]
        summary["gaussian_peak"] = [float(peak[0]), float(peak[1])]
        checks["gaussian_peak_near_center"] = bool(np.linalg.norm(peak) < 0.25)
    if "flow" in models and "ddpm" in models:
        checks["flow_contrast_exceeds_ddpm"] = bool(gaps["flow"] > gaps["ddpm"])
    if "flow" in models:
        holdout = make_gmm2d_dataset(int(run.get("holdout", 1000)), np.random.default_rng(config.seed + 1))
        est = log_density_exact(models["flow"], holdout.states, holdout.actions, n_steps=n_steps)
        summary["flow_holdout_error"] = float(np.mean(np.abs(est - gmm_true_logpdf(holdout.actions))))
    summary["checks"] = checks

    passed = bool(checks) and all(checks.values()) and not failures
    return write_report(out, "density_report", config, summary, files, passed)


# -- bandit comparison ----------------------------------------------------------


def bandit_action_grid(res: int = BANDIT_GRID_RES) -> np.ndarray:
    return np.linspace(-1.0, 1.0, res).reshape(-1, 1)


def high_mode_concentration(actions: np.ndarray) -> float:
    """Fraction of actions inside the tolerance band around the tall mode."""
    a = np.asarray(actions).reshape(-1)
    return float((np.abs(a - HIGH_MODE_CENTER) < HIGH_MODE_TOL).mean())


def gap_region_excess(critics, grid: np.ndarray | None = None) -> float:
    """Mean (learned Q - true Q) over the between-cluster action interval.

    The behavior data has no mass there, so this is where an optimistic
    critic invents value and a conservative one stays below truth.
    """
    if grid is None:
        grid = bandit_action_grid()
    mask = (grid[:, 0] > GAP_LOW) & (grid[:, 0] < GAP_HIGH)
    learned = critics.online_np(_bandit_states(len(grid)), grid)
    return float((learned[mask] - bandit_true_q(grid[mask, 0])).mean())


def svr_ratio_curve(actor, behavior, config: SvrConfig, grid: np.ndarray | None = None) -> np.ndarray:
    """Importance ratio proposal/behavior on an action grid, with the same
    widened proposal and hard clip the training loss uses."""
    if grid is None:
        grid = bandit_action_grid()
    states = _bandit_states(len(grid))
    mean, log_std = actor.dist_np(states)
    log_k_std = log_std + np.log(config.k)
    diff = grid - mean
    log_q = (-0.5 * (diff * diff) * np.exp(-2.0 * log_k_std) - log_k_std - 0.5 * np.log(2.0 * np.pi)).sum(axis=1)
    log_b = gaussian_logpdf(behavior, states, grid)
    return np.minimum(np.exp(np.minimum(log_q - log_b, 700.0)), config.ratio_clip)


def run_bandit_compare(config: RunConfig, out_override: str | None = None) -> RunReport:
    """Five methods, one dataset, shared seeds, artifacts per method.

    Every method gets its own fresh generator seeded identically, so the
    comparison differences come from the algorithms and not the draws. The
    flow proxy for the agent and both FQL variants is trained once up front.
    """
    out = resolve_out_dir(config, out_override)
    run = config.run
    # 1000 samples leave the region between the behavior clusters genuinely
    # unobserved, which is the regime the comparison is about; larger sets
    # fill the gap with stray draws and every method just fits the reward.
    dataset = load_or_generate_dataset(config, default_kind="bandit", default_n=1000)
    if dataset.action_dim != 1:
        raise ConfigError("the bandit comparison needs a one-dimensional action space")

    steps = int(run.get("steps", 5000))
    batch_size = int(run.get("batch_size", 256))
    widths = _run_widths(run, "widths", (64, 64))
    n_samples = int(run.get("samples", 1000))
    grid = bandit_action_grid(int(run.get("grid_res", BANDIT_GRID_RES)))

    def fresh_rng() -> np.random.Generator:
        return np.random.default_rng(config.seed)

    # gamma=0: the bandit is a single-decision problem, so the critic is a
    # regression onto the noisy reward with no bootstrap term. The proxy gets
    # its own budget: the penalty is only as sharp as the learned density, and
    # the between-cluster dip needs far more capacity than the actor/critic.
    base = dict(
        steps=steps, batch_size=batch_size, lr=3e-4, gamma=0.0,
        actor_widths=widths, critic_widths=widths,
        proxy_widths=_run_widths(run, "proxy_widths", (256, 256, 256)),
        proxy_steps=int(run.get("proxy_steps", 20000)),
    )
    shared_cfg = agent_config(config.algo, alpha=0.5, lam=0.1, **base)
    proxy_rng = fresh_rng()
    proxy = VelocityProxy(dataset.state_dim, dataset.action_dim, shared_cfg.proxy_widths, proxy_rng)
    # Decay plus weight averaging: the penalty threshold reads the density's
    # low tail, which late-training parameter noise blurs badly.
    train_proxy(
        proxy, dataset.states, dataset.actions, proxy_rng,
        steps=shared_cfg.proxy_steps, batch_size=batch_size, lr=shared_cfg.lr,
        lr_final=1e-5, ema_decay=0.999,
    )

    results: dict = {}
    failures: dict = {}
    svr_cfg = SvrConfig(alpha=float(run.get("svr_alpha", 1.0)), k=float(run.get("svr_k", 2.0)))

    def train_block(name):
        if name == "agent":
            agent, _, _ = train_offline(dataset, shared_cfg, fresh_rng(), proxy=proxy)
            return {"actor": agent.actor, "critics": agent.critics}
        if name in ("fql-weak", "fql-strong"):
            lam = 0.1 if name == "fql-weak" else 10.0
            cfg = agent_config(config.algo, alpha=0.0, lam=lam, **base)
            agent, _, _ = train_fql(dataset, cfg, fresh_rng(), proxy=proxy)
            return {"actor": agent.actor, "critics": agent.critics}
        if name == "cql":
            cfg = CqlConfig(alpha=float(run.get("cql_alpha", 1.0)), eta=float(run.get("cql_eta", 0.1)))
            actor, critics, _ = train_cql(dataset, cfg, fresh_rng(), steps=steps, batch_size=batch_size, widths=widths)
            return {"actor": actor, "critics": critics}
        actor, behavior, critics, metrics = train_svr(
            dataset, svr_cfg, fresh_rng(),
            steps=steps, batch_size=batch_size, widths=widths,
            behavior_steps=int(run.get("behavior_steps", 1500)),
        )
        return {"actor": actor, "critics": critics, "behavior": behavior,
                "ratio_max_seen": float(metrics[-1]["is_ratio_max"]) if metrics else 0.0}

    for name in BANDIT_METHODS:
        try:
            results[name] = train_block(name)
        except TrainingError as exc:
            failures[name] = str(exc)

    files: dict[str, str] = {}
    q_rows, sample_rows = [], []
    summary_methods: dict = {}
    true_q = bandit_true_q(grid[:, 0])
    id_states, id_actions = dataset.states, dataset.actions
    true_q_id = bandit_true_q(id_actions[:, 0])
    for name, block in results.items():
        learned = block["critics"].online_np(_bandit_states(len(grid)), grid)
        q_rows.extend(
            {"method": name, "action": float(a), "learned_q": float(lq), "true_q": float(tq)}
            for a, lq, tq in zip(grid[:, 0], learned, true_q)
        )
        samples = block["actor"].sample_np(_bandit_states(n_samples), fresh_rng())
        sample_rows.extend({"method": name, "action": float(a)} for a in samples[:, 0])
        id_fit = block["critics"].online_np(id_states, id_actions)
        summary_methods[name] = {
            "gap_region_excess": gap_region_excess(block["critics"], grid),
            "high_mode_concentration": high_mode_concentration(samples),
            "id_q_mse": float(np.mean((id_fit - true_q_id) ** 2)),
        }
    _write_csv(os.path.join(out, "q_curves.csv"), q_rows)
    _write_csv(os.path.join(out, "actor_samples.csv"), sample_rows)
    files["q_curves"] = "q_curves.csv"
    files["actor_samples"] = "actor_samples.csv"

    checks: dict = {}
    if "svr" in results:
        ratios = svr_ratio_curve(results["svr"]["actor"], results["svr"]["behavior"], svr_cfg, grid)
        _write_csv(
            os.path.join(out, "svr_is_ratio.csv"),
            [{"action": float(a), "ratio": float(r)} for a, r in zip(grid[:, 0], ratios)],
        )
        files["svr_is_ratio"] = "svr_is_ratio.csv"
        summary_methods["svr"]["ratio_max_grid"] = float(ratios.max())
        summary_methods["svr"]["ratio_max_seen"] = results["svr"]["ratio_max_seen"]
        checks["svr_ratio_reaches_clip"] = bool(
            max(ratios.max(), results["svr"]["ratio_max_seen"]) >= svr_cfg.ratio_clip
        )
    if "agent" in results:
        checks["agent_concentrates_on_high_mode"] = bool(
            summary_methods["agent"]["high_mode_concentration"] >= 0.8
        )
    if "agent" in results and "fql-weak" in results:
        checks["agent_gap_below_fql"] = bool(
            summary_methods["agent"]["gap_region_excess"] < summary_methods["fql-weak"]["gap_region_excess"]
        )
    if "cql" in results:
        checks["cql_underestimates_gap"] = bool(summary_methods["cql"]["gap_region_excess"] < 0.0)

    summary = {"methods": summary_methods, "failures": failures, "checks": checks}
    passed = bool(checks) and all(checks.values()) and not failures
    return write_report(out, "bandit_report", config, summary, files, passed)


# -- tabular verification --------------------------------------------------------


def tabular_property_suite(
    seed: int = 0,
    n_instances: int = 100,
    alpha: float = 0.5,
    max_states: int = 6,
    max_actions: int = 4,
) -> dict:
    """The full property battery over seeded random MDP instances.

    Per instance: contraction of the penalized operator on a random pair of
    tables, iterated fixed point against the resolvent closed form, the
    unbiased/conservative value split, greedy improvement staying on
    support, and the discounted-visitation identity for the shift. Returns
    worst-case measurements and a pass flag per property.
    """
    rng = np.random.default_rng(seed)
    gammas = (0.5, 0.9, 0.99)

    contraction_slack = -np.inf
    cross_gap = 0.0
    split_zero_gap = 0.0
    split_margin = np.inf
    probe_mass = 0.0
    occupancy_gap = 0.0
    per_instance = []

    for i in range(n_instances):
        gamma = gammas[i % len(gammas)]
        n_states = int(rng.integers(2, max_states + 1))
        n_actions = int(rng.integers(2, max_actions + 1))
        mdp, policy, behavior, proxy = random_instance(rng, n_states, n_actions, gamma)

        qa, qb = rng.normal(scale=5.0, size=(2, n_states, n_actions))
        ta = penalized_operator_apply(qa, mdp, policy, behavior, proxy, alpha).q
        tb = penalized_operator_apply(qb, mdp, policy, behavior, proxy, alpha).q
        ratio = float(np.max(np.abs(ta - tb)) / np.max(np.abs(qa - qb)))
        contraction_slack = max(contraction_slack, ratio - gamma)

        q_iter, _ = fixed_point_iterate(mdp, policy, behavior, proxy, alpha, tol=1e-12)
        q_closed = closed_form_fixed_point(mdp, policy, behavior, proxy, alpha)
        cross_gap = max(cross_gap, float(np.max(np.abs(q_iter - q_closed))))

        # The split is a statement about the fixed point itself, so measure it
        # on the resolvent solutions; the iterate is compared separately above.
        q_plain = closed_form_fixed_point(mdp, policy, behavior, proxy, 0.0)
        on = behavior > 0.0
        zero_w = on & (proxy.weight == 0.0)
        penalized = on & (proxy.weight > 0.0)
        if zero_w.any():
            split_zero_gap = max(split_zero_gap, float(np.max(np.abs(q_closed - q_plain)[zero_w])))
        if penalized.any():
            split_margin = min(split_margin, float(np.min((q_plain - q_closed)[penalized])))

        probe = support_violation_probe(mdp, behavior, proxy, alpha)
        probe_mass = max(probe_mass, max(probe.values()))

        occ = occupancy_related_check(mdp, policy, behavior, proxy, alpha)
        occupancy_gap = max(occupancy_gap, occ["shift_matches_difference"])

        per_instance.append({"instance": i, "gamma": gamma, "contraction_factor": ratio})

    properties = {
        "contraction": {
            "pass": bool(contraction_slack <= 1e-9),
            "worst": contraction_slack,
            "tolerance": 1e-9,
            "note": "max over instances of measured factor minus gamma",
        },
        "fixed_point_cross_check": {
            "pass": bool(cross_gap < 1e-8),
            "worst": cross_gap,
            "tolerance": 1e-8,
            "note": "sup-norm gap, iterated vs resolvent",
        },
        "split_unbiased": {
            "pass": bool(split_zero_gap <= 1e-10),
            "worst": split_zero_gap,
            "tolerance": 1e-10,
            "note": "max |penalized - plain| over zero-weight supported pairs",
        },
        "split_conservative": {
            "pass": bool(split_margin > 0.0),
            "worst": split_margin,
            "tolerance": 0.0,
            "note": "min (plain - penalized) over penalized supported pairs",
        },
        "improvement_support": {
            "pass": bool(probe_mass < 1e-6),
            "worst": probe_mass,
            "tolerance": 1e-6,
            "note": "max improved-policy mass on zero-support actions",
        },
        "occupancy_identity": {
            "pass": bool(occupancy_gap < 1e-10),
            "worst": occupancy_gap,
            "tolerance": 1e-10,
            "note": "conservative shift vs resolvent-weighted penalties",
        },
    }
    return {
        "seed": seed,
        "n_instances": n_instances,
        "alpha": alpha,
        "all_pass": all(p["pass"] for p in properties.values()),
        "properties": properties,
        "per_instance": per_instance,
    }


def run_tabular_verify(config: RunConfig, out_override: str | None = None) -> RunReport:
    out = resolve_out_dir(config, out_override)
    run = config.run
    t0 = time.time()
    suite = tabular_property_suite(
        seed=config.seed,
        n_instances=int(run.get("instances", 100)),
        alpha=float(run.get("alpha", 0.5)),
    )
    per_instance = suite.pop("per_instance")
    _write_csv(os.path.join(out, "contraction_factors.csv"), per_instance)
    summary = {**suite, "seconds": round(time.time() - t0, 2)}
    return write_report(
        out, "tabular_report", config, summary,
        {"contraction_factors": "contraction_factors.csv"},
        passed=suite["all_pass"],
    )


# -- checkpointed training runs ---------------------------------------------------


def _arch_metadata(agent: Agent, proxy: VelocityProxy, state_dim: int, action_dim: int) -> dict:
    cfg = agent.config
    return {
        "state_dim": state_dim,
        "action_dim": action_dim,
        "actor_widths": list(cfg.actor_widths),
        "critic_widths": list(cfg.critic_widths),
        "proxy_widths": list(cfg.proxy_widths),
        "aggregation": cfg.aggregation,
        "n_steps": proxy.n_steps,
    }


def build_shells(arch: dict, cfg: AgentConfig) -> tuple[Agent, VelocityProxy]:
    """Construct untrained networks matching a checkpoint's architecture.

    The throwaway generator only feeds weight init; every array is
    overwritten by the checkpoint load that follows.
    """
    scratch = np.random.default_rng(0)
    s_dim, a_dim = int(arch["state_dim"]), int(arch["action_dim"])
    proxy = VelocityProxy(s_dim, a_dim, tuple(arch["proxy_widths"]), scratch, n_steps=int(arch["n_steps"]))
    agent = Agent(
        actor=OneStepActor(s_dim, a_dim, tuple(arch["actor_widths"]), scratch),
        critics=CriticPair(s_dim, a_dim, tuple(arch["critic_widths"]), scratch, aggregation=str(arch["aggregation"])),
        config=cfg,
    )
    return agent, proxy


def _pack_params(agent: Agent, proxy: VelocityProxy) -> dict[str, np.ndarray]:
    out = {}
    sections = (
        ("actor", agent.actor.net), ("q1", agent.critics.q1), ("q2", agent.critics.q2),
        ("target1", agent.critics.target1), ("target2", agent.critics.target2),
        ("proxy", proxy.net),
    )
    for prefix, net in sections:
        for key, arr in net.state().items():
            out[f"{prefix}.{key}"] = arr
    return out


def _section(tensors: dict, prefix: str) -> dict[str, np.ndarray]:
    tag = prefix + "."
    return {key[len(tag):]: arr for key, arr in tensors.items() if key.startswith(tag)}


def _unpack_params(tensors: dict, agent: Agent, proxy: VelocityProxy) -> None:
    agent.actor.net.load_state(_section(tensors, "actor"))
    agent.critics.q1.load_state(_section(tensors, "q1"))
    agent.critics.q2.load_state(_section(tensors, "q2"))
    agent.critics.target1.load_state(_section(tensors, "target1"))
    agent.critics.target2.load_state(_section(tensors, "target2"))
    proxy.net.load_state(_section(tensors, "proxy"))


def _pack_opt(name: str, opt: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for key, arr in opt.m.items():
        out[f"opt.{name}.m.{key}"] = arr
    for key, arr in opt.v.items():
        out[f"opt.{name}.v.{key}"] = arr
    return out


def _unpack_opt(tensors: dict, name: str, opt: AdamState, t: int) -> None:
    opt.load_state({
        "t": t,
        "m": _section(tensors, f"opt.{name}.m"),
        "v": _section(tensors, f"opt.{name}.v"),
    })


def _drop_metrics_after(path: str, step: int) -> None:
    """Rewind the metrics CSV to a checkpointed step before resuming.

    Rows past the checkpoint belong to the interrupted stretch that is
    about to be replayed; keeping them would duplicate steps in the file.
    """
    if not os.path.exists(path):
        return
    rows = [r for r in read_metrics(path) if float(r["step"]) <= step]
    os.remove(path)
    if rows:
        append_metrics(path, rows)


def save_train_checkpoint(
    path: str,
    agent: Agent,
    proxy: VelocityProxy,
    opts: dict[str, AdamState],
    rng: np.random.Generator,
    step: int,
    state_dim: int,
    action_dim: int,
    extra_tensors: dict | None = None,
    extra_meta: dict | None = None,
) -> None:
    tensors = _pack_params(agent, proxy)
    for name, opt in opts.items():
        tensors.update(_pack_opt(name, opt))
    if extra_tensors:
        tensors.update(extra_tensors)
    metadata = {
        "step": int(step),
        "opt_t": {name: opt.t for name, opt in opts.items()},
        "rng_state": rng.bit_generator.state,
        "arch": _arch_metadata(agent, proxy, state_dim, action_dim),
        **(extra_meta or {}),
    }
    save_checkpoint(path, tensors, metadata)


def load_agent_from_checkpoint(path: str, cfg: AgentConfig | None = None) -> tuple[Agent, VelocityProxy, dict, dict]:
    """Rebuild agent and proxy from a checkpoint alone.

    The architecture block in the metadata is enough to size the networks,
    so evaluation needs no training config. Returns the raw tensors and
    metadata too, for callers that also restore optimizer or replay state.
    """
    tensors, metadata = load_checkpoint(path)
    arch = metadata["arch"]
    if cfg is None:
        cfg = AgentConfig(
            actor_widths=tuple(arch["actor_widths"]),
            critic_widths=tuple(arch["critic_widths"]),
            proxy_widths=tuple(arch["proxy_widths"]),
            aggregation=str(arch["aggregation"]),
            n_steps=int(arch["n_steps"]),
        )
    agent, proxy = build_shells(arch, cfg)
    _unpack_params(tensors, agent, proxy)
    return agent, proxy, tensors, metadata


def run_train(config: RunConfig, out_override: str | None = None) -> RunReport:
    """Offline training with periodic checkpoints and an append-only metrics CSV.

    With ``run.resume = true`` and a checkpoint present in the output
    directory, training restarts from the recorded step with every piece of
    loop state restored; the continued trajectory is bit-identical to one
    that never stopped.
    """
    out = resolve_out_dir(config, out_override)
    run = config.run
    cfg = agent_config(config.algo)
    dataset = load_or_generate_dataset(config, default_kind="bandit")
    s_dim, a_dim = dataset.state_dim, dataset.action_dim

    rng = np.random.default_rng(config.seed)
    proxy = VelocityProxy(s_dim, a_dim, cfg.proxy_widths, rng, n_steps=cfg.n_steps)
    agent = Agent(
        actor=OneStepActor(s_dim, a_dim, cfg.actor_widths, rng),
        critics=CriticPair(s_dim, a_dim, cfg.critic_widths, rng, aggregation=cfg.aggregation),
        config=cfg,
    )
    critic_opt = AdamState(agent.critics.params())
    actor_opt = AdamState(agent.actor.params())
    opts = {"critic": critic_opt, "actor": actor_opt}

    ckpt_path = os.path.join(out, "checkpoint.json")
    metrics_path = os.path.join(out, "metrics.csv")
    every = int(run.get("checkpoint_every", 0))

    step0 = 0
    if run.get("resume", False) and os.path.exists(ckpt_path):
        tensors, meta = load_checkpoint(ckpt_path)
        _unpack_params(tensors, agent, proxy)
        for name, opt in opts.items():
            _unpack_opt(tensors, name, opt, meta["opt_t"][name])
        rng.bit_generator.state = meta["rng_state"]
        step0 = int(meta["step"])
        _drop_metrics_after(metrics_path, step0)
    else:
        if os.path.exists(metrics_path):
            os.remove(metrics_path)
        train_proxy(
            proxy, dataset.states, dataset.actions, rng,
            steps=cfg.proxy_steps, batch_size=cfg.batch_size, lr=cfg.lr,
        )
    dataset = precompute_densities(proxy, dataset)

    def save(step: int) -> None:
        save_train_checkpoint(ckpt_path, agent, proxy, opts, rng, step, s_dim, a_dim, extra_meta={"kind": "train"})

    info: dict = {}
    for step in range(step0 + 1, cfg.steps + 1):
        info = train_step(agent, proxy, dataset, critic_opt, actor_opt, rng)
        # Strict cadence, no final-step special case: the row set depends only
        # on the cadence, so an interrupted-and-resumed run writes the same
        # file as an uninterrupted one wherever the interruption lands.
        if cfg.log_every and step % cfg.log_every == 0:
            append_metrics(metrics_path, [{"step": step, **info}])
        if every and step % every == 0 and step < cfg.steps:
            save(step)
    save(cfg.steps)

    summary = {"steps": cfg.steps, "resumed_from": step0, "final": info or None}
    files = {"metrics": "metrics.csv", "checkpoint": "checkpoint.json"}
    if not os.path.exists(metrics_path):
        files.pop("metrics")
    return write_report(out, "train_report", config, summary, files, passed=True)


def run_finetune(config: RunConfig, out_override: str | None = None) -> RunReport:
    """Online fine-tuning of a checkpointed offline agent on the bandit.

    ``run.checkpoint`` names the offline training checkpoint to start from.
    The replay buffer is seeded with the offline dataset; checkpoints add
    the collected tail and the environment cursor so a resumed run replays
    the identical interaction stream.
    """
    out = resolve_out_dir(config, out_override)
    run = config.run
    source = str(run.get("checkpoint", ""))
    if not source:
        raise ConfigError("finetune needs run.checkpoint = <offline training checkpoint>")

    dataset = load_or_generate_dataset(config, default_kind="bandit")
    kind = dataset.metadata.get("source", config.data.get("kind", "bandit"))
    if kind != "bandit":
        raise ConfigError(f"no environment available for dataset kind {kind!r}")

    src_tensors, src_meta = load_checkpoint(source)
    arch = src_meta["arch"]
    if (dataset.state_dim, dataset.action_dim) != (int(arch["state_dim"]), int(arch["action_dim"])):
        raise ConfigError("dataset dimensions do not match the checkpointed agent")
    cfg = agent_config(
        config.algo,
        actor_widths=tuple(arch["actor_widths"]),
        critic_widths=tuple(arch["critic_widths"]),
        proxy_widths=tuple(arch["proxy_widths"]),
        aggregation=str(arch["aggregation"]),
        n_steps=int(arch["n_steps"]),
    )

    rng = np.random.default_rng(config.seed)
    env = BanditEnv(rng)
    agent, proxy = build_shells(arch, cfg)
    _unpack_params(src_tensors, agent, proxy)
    replay = ReplayBuffer(dataset)
    critic_opt = AdamState(agent.critics.params())
    actor_opt = AdamState(agent.actor.params())
    proxy_opt = AdamState(proxy.net.params())
    opts = {"critic": critic_opt, "actor": actor_opt, "proxy": proxy_opt}

    ckpt_path = os.path.join(out, "checkpoint.json")
    metrics_path = os.path.join(out, "metrics.csv")
    every = int(run.get("checkpoint_every", 0))
    per_update = int(run.get("env_steps_per_update", 1))
    n_probe = int(run.get("probe_samples", 1000))

    env_state = env.reset()
    step0 = 0
    if run.get("resume", False) and os.path.exists(ckpt_path):
        tensors, meta = load_checkpoint(ckpt_path)
        _unpack_params(tensors, agent, proxy)
        for name, opt in opts.items():
            _unpack_opt(tensors, name, opt, meta["opt_t"][name])
        rng.bit_generator.state = meta["rng_state"]
        env_state = np.asarray(tensors["env_state"], dtype=np.float64)
        tail = int(meta["replay_tail"])
        for i in range(tail):
            replay.add(
                tensors["replay.states"][i],
                tensors["replay.actions"][i],
                float(tensors["replay.rewards"][i]),
                tensors["replay.next_states"][i],
                bool(tensors["replay.terminals"][i] != 0.0),
            )
        step0 = int(meta["step"])
        start_concentration = float(meta["concentration_start"])
        _drop_metrics_after(metrics_path, step0)
    else:
        if os.path.exists(metrics_path):
            os.remove(metrics_path)
        start_concentration = high_mode_concentration(agent.actor.sample_np(_bandit_states(n_probe), rng))

    offline_len = len(dataset)

    def save(step: int) -> None:
        tail = len(replay) - offline_len
        extra: dict[str, np.ndarray] = {"env_state": np.asarray(env_state, dtype=np.float64)}
        if tail > 0:
            extra["replay.states"] = np.stack(replay.states[offline_len:])
            extra["replay.actions"] = np.stack(replay.actions[offline_len:])
            extra["replay.rewards"] = np.asarray(replay.rewards[offline_len:], dtype=np.float64)
            extra["replay.next_states"] = np.stack(replay.next_states[offline_len:])
            extra["replay.terminals"] = np.asarray(replay.terminals[offline_len:], dtype=np.float64)
        save_train_checkpoint(
            ckpt_path, agent, proxy, opts, rng, step, dataset.state_dim, dataset.action_dim,
            extra_tensors=extra,
            extra_meta={
                "kind": "finetune",
                "replay_tail": tail,
                "concentration_start": start_concentration,
            },
        )

    info: dict = {}
    for step in range(step0 + 1, cfg.steps + 1):
        env_state, info = finetune_step(
            agent, proxy, env, replay, critic_opt, actor_opt, proxy_opt, rng, env_state, per_update,
        )
        if cfg.log_every and step % cfg.log_every == 0:
            append_metrics(metrics_path, [{"step": step, **info}])
        if every and step % every == 0 and step < cfg.steps:
            save(step)
    save(cfg.steps)

    final_concentration = high_mode_concentration(agent.actor.sample_np(_bandit_states(n_probe), rng))
    checks = {"concentration_kept": bool(final_concentration >= start_concentration - 0.05)}
    summary = {
        "steps": cfg.steps,
        "resumed_from": step0,
        "concentration_start": start_concentration,
        "concentration_final": final_concentration,
        "replay_size": len(replay),
        "final": info or None,
        "checks": checks,
    }
    files = {"metrics": "metrics.csv", "checkpoint": "checkpoint.json"}
    if not os.path.exists(metrics_path):
        files.pop("metrics")
    return write_report(out, "finetune_report", config, summary, files, passed=all(checks.values()))


# -- proxy evaluation --------------------------------------------------------------


def eval_density(
    checkpoint_path: str,
    dataset: OfflineDataset,
    out_dir: str,
    n_steps: int | None = None,
    chunk: int = 2048,
) -> dict:
    """Score a dataset under the proxy stored in a training checkpoint.

    Writes one log-density row per transition and returns summary moments;
    nothing about the optimizer or agent is touched, so any checkpoint the
    trainer wrote works here.
    """
    _, proxy, _, _ = load_agent_from_checkpoint(checkpoint_path)
    steps = proxy.n_steps if n_steps is None else int(n_steps)
    vals = []
    for lo in range(0, len(dataset), chunk):
        hi = min(lo + chunk, len(dataset))
        vals.append(log_density_exact(proxy, dataset.states[lo:hi], dataset.actions[lo:hi], n_steps=steps))
    logd = np.concatenate(vals) if vals else np.zeros(0)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "log_density.csv")
    _write_csv(path, [{"index": i, "log_density": float(v)} for i, v in enumerate(logd)])
    return {
        "n": int(logd.size),
        "mean": float(logd.mean()) if logd.size else None,
        "std": float(logd.std()) if logd.size else None,
        "min": float(logd.min()) if logd.size else None,
        "max": float(logd.max()) if logd.size else None,
        "n_steps": steps,
        "csv": path,
    }
