"""Episode loop, experiment configuration, batch running, and exports.

One episode wires the whole pipeline together: plan with the sampling
controller, step the true world, compare against the nominal
prediction, label and store the resulting points, check the task
constraints, refine the active set when they fail, and refit the
kernel on a fixed cadence. Everything is driven by a single seed fanned
out into independent counter-based streams, so ablations never disturb
unrelated randomness.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import constraints as cons
from . import contact, envs, mppi, refine, sensor
from .gp import KernelParams, fit_hyperparams
from .gpis import Gpis, GridSpec, OccupancyGrid


PEG_DEFAULTS = dict(
    temperature=0.01, samples=500, horizon=15, noise_cov=0.2,
    alpha=0.590, beta=0.996, eta=11.03, collision_c=15.88,
    d_min=0.01, t_m=5, t_e=0, t_fit=3, r_g=0.02, r_c=0.01,
    t_cma=25, n_cma=20, zeta=0.4, max_steps=750, vision=False,
)

CABLE_DEFAULTS = dict(
    temperature=0.167, samples=72, horizon=8, noise_cov=0.004,
    alpha=0.627, beta=0.995, eta=100.0, collision_c=10000.0,
    d_min=0.01, t_m=3, t_e=3, t_fit=2, r_g=0.04, r_c=0.01,
    t_cma=25, n_cma=50, zeta=0.4, max_steps=200, vision=True,
)


@dataclass
class EpisodeConfig:
    scene: str = "peg_u"
    seed: int = 0
    scene_file: Optional[str] = None
    max_steps: int = 750
    # controller
    temperature: float = 0.01
    samples: int = 500
    horizon: int = 15
    noise_cov: float = 0.2  # per-dimension control noise variance
    alpha: float = 0.590
    beta: float = 0.996
    eta: float = 11.03
    collision_c: float = 15.88
    r_g: float = 0.02
    # contact pipeline
    d_min: float = 0.01
    t_m: int = 5
    t_e: int = 0  # 0 disables periodic re-selection (single component)
    t_fit: int = 3
    r_c: float = 0.01
    zeta: float = 0.4
    # refinement
    t_cma: int = 25
    n_cma: int = 20
    # kernel
    lengthscale: float = 0.1
    outputscale: float = 1.0
    kernel_noise: float = 1e-4
    fit_steps: int = 10
    fit_lr: float = 0.05
    # refit box: marginal likelihood on discrete contact labels prefers
    # degenerate tiny lengthscales, so the fit stays workspace-commensurate
    ls_min: float = 0.06
    ls_max: float = 0.25
    os_min: float = 0.25
    os_max: float = 4.0
    # feature switches
    vision: bool = False
    refinement: bool = True
    local_min_detection: bool = True
    adaptive: bool = True
    obs_noise_std: float = 0.0

    @classmethod
    def for_scene(cls, scene: str, seed: int = 0, **overrides) -> "EpisodeConfig":
        base = CABLE_DEFAULTS if scene.startswith("cable") else PEG_DEFAULTS
        kw = dict(base)
        kw.update(overrides)
        return cls(scene=scene, seed=seed, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = ""
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EpisodeConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in types:
                raise ValueError(f"unknown config key '{key}'")
            kw[key] = _parse_value(types[key], val)
        return cls(**kw)


def _parse_value(typename: str, val: str):
    if val == "":
        return None
    if "bool" in typename:
        return val.lower() in ("1", "true", "yes", "on")
    if "int" in typename:
        return int(val)
    if "float" in typename:
        return float(val)
    return val


def rng_streams(seed: int):
    """Counter-based streams for the controller, the refiner, and the
    observation noise; one global seed fans out so disabling a feature
    never shifts another stream."""
    root = np.random.SeedSequence(seed)
    ss = root.spawn(3)
    gen = lambda s: np.random.Generator(np.random.Philox(s))
    return gen(ss[0]), ss[1], gen(ss[2])


@dataclass
class EpisodeReport:
    success: bool
    steps_used: int
    records: list
    events: list
    final_grid: Optional[OccupancyGrid]
    final_datasets: Optional[contact.DatasetPair]
    wall_clock: float
    config: EpisodeConfig

    def log_text(self) -> str:
        """Per-step structured log, one JSON record per line. Contains
        no timing, so equal runs produce identical bytes."""
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _observe(x_true: np.ndarray, std: float, rng) -> np.ndarray:
    if std <= 0.0:
        return x_true.copy()
    return x_true + rng.normal(0.0, std, size=x_true.shape)


def run_episode(cfg: EpisodeConfig) -> EpisodeReport:
    """Execute the high-level control loop until success or budget."""
    start_time = time.perf_counter()
    if cfg.scene_file:
        scene = envs.parse_scene(Path(cfg.scene_file).read_text(), name=cfg.scene)
    else:
        scene = envs.make_scene(cfg.scene)
    env = scene.env
    n = env.n
    goal_pts = scene.goals.points
    goals = mppi.GoalSet(scene.goals.components, goal_pts)
    weights = mppi.CostWeights(action=cfg.alpha, exploration=cfg.beta,
                               collision=cfg.collision_c, basin=cfg.eta,
                               r_g=cfg.r_g)
    u_dim = env.control_dim
    mcfg = mppi.MppiConfig(
        temperature=cfg.temperature, samples=cfg.samples, horizon=cfg.horizon,
        noise_cov=np.full(u_dim, cfg.noise_cov),
        u_min=np.full(u_dim, -env.u_max), u_max=np.full(u_dim, env.u_max),
    )
    mppi_rng, cma_ss, noise_rng = rng_streams(cfg.seed)

    use_vision = cfg.vision and scene.camera is not None
    cam = scene.camera if use_vision else None
    depth = scene.depth if use_vision else None
    free_space = sensor.free_space_oracle(cam, depth) if use_vision else None

    params = KernelParams(cfg.lengthscale, cfg.outputscale, cfg.kernel_noise)
    if cfg.adaptive:
        dp = contact.DatasetPair.seeded(goal_pts)
        surface = Gpis(dp.bar_points, dp.bar_labels, params, goal_pts, free_space)
    else:
        dp = None
        surface = envs.ObservedSurface(env.world)

    x = _observe(env.state, cfg.obs_noise_std, noise_rng)
    x_saved = x.copy()
    nominal_seq = np.zeros((cfg.horizon, u_dim))
    sel = 0
    records = []
    events = []
    success = False
    steps_used = 0

    for step in range(1, cfg.max_steps + 1):
        if n > 1 and cfg.t_e and (step - 1) % cfg.t_e == 0:
            sel = mppi.select_component(surface, x)
        u, nominal_seq = mppi.mppi_step(x, nominal_seq, env.nominal, surface,
                                        goals, weights, mcfg, sel, mppi_rng)
        x_true = env.step_truth(u)
        x_next = _observe(x_true, cfg.obs_noise_std, noise_rng)
        x_pred = env.nominal(x[None], u[None])[0]

        added = 0
        local_min = False
        refine_rec = None
        if cfg.adaptive:
            batch = contact.gen_labels(x, x_next, x_pred)
            if cfg.local_min_detection and step % cfg.t_m == 0:
                local_min = contact.local_minimum(x_next, x_saved, cfg.t_m,
                                                  cfg.d_min)
                x_saved = x_next.copy()
            batch = contact.pre_process(batch, x_next, cam, depth, cfg.r_c,
                                        local_min)
            before = dp.bar_size
            dp = dp.update(batch, x_next, x_pred, local_min)
            added = dp.bar_size - before
            surface = surface.with_active(dp.bar_points, dp.bar_labels)
            satisfied = cons.all_satisfied(scene.constraint_specs, surface,
                                           x_next, goal_pts)
            if cfg.refinement and not satisfied:
                def factory(pts, labs):
                    return cons.SubsetEvaluator(scene.constraint_specs, pts,
                                                labs, params, free_space,
                                                x_next, goal_pts)
                seed = int(cma_ss.spawn(1)[0].generate_state(1)[0])
                dp, event = refine.refine_contacts(dp, params, factory,
                                                   cfg.t_cma, cfg.n_cma,
                                                   seed, step=step)
                events.append(event)
                refine_rec = event.to_record()
                surface = surface.with_active(dp.bar_points, dp.bar_labels)
            if step % cfg.t_fit == 0 and dp.bar_size >= 2:
                params = fit_hyperparams(dp.bar_points, dp.bar_labels, params,
                                         steps=cfg.fit_steps, lr=cfg.fit_lr,
                                         fit_noise=False,
                                         lengthscale_bounds=(cfg.ls_min, cfg.ls_max),
                                         outputscale_bounds=(cfg.os_min, cfg.os_max))
                surface = Gpis(dp.bar_points, dp.bar_labels, params, goal_pts,
                               free_space)

        dist = np.linalg.norm(
            x_true[np.asarray(goals.components)] - goal_pts, axis=1)
        success = bool(np.all(dist < cfg.r_g))
        steps_used = step
        records.append({
            "step": step,
            "state": [[float(v) for v in row] for row in x_next],
            "action": [float(v) for v in u],
            "labels_added": int(added),
            "bar_size": int(dp.bar_size) if dp is not None else 0,
            "mem_size": int(dp.mem_size) if dp is not None else 0,
            "local_min": bool(local_min),
            "selected": int(sel),
            "refinement": refine_rec,
            "goal_dist": [float(v) for v in dist],
            "success": success,
        })
        x = x_next
        if success:
            break

    grid = None
    if scene.grid is not None:
        mean = surface.predict_mean(scene.grid.centers())
        grid = OccupancyGrid(tuple(float(v) for v in scene.grid.lo),
                             scene.grid.resolution,
                             (mean <= 0.0).reshape(scene.grid.shape))
    return EpisodeReport(
        success=success, steps_used=steps_used, records=records,
        events=events, final_grid=grid, final_datasets=dp,
        wall_clock=time.perf_counter() - start_time, config=cfg,
    )


@dataclass
class BatchSummary:
    seeds: list
    successes: int
    success_rate: float
    steps_mean: Optional[float]
    steps_ci: Optional[float]
    reports: list

    def to_record(self) -> dict:
        return {
            "seeds": self.seeds,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "steps_mean": self.steps_mean,
            "steps_ci95": self.steps_ci,
        }


def summarize(reports: list, seeds: list) -> BatchSummary:
    """Aggregate reports: success rate plus a 95% confidence interval on
    step counts given success (absent when nothing succeeded)."""
    wins = [r.steps_used for r in reports if r.success]
    m = len(wins)
    if m == 0:
        mean = ci = None
    else:
        mean = float(np.mean(wins))
        sd = float(np.std(wins, ddof=1)) if m > 1 else 0.0
        ci = 1.96 * sd / np.sqrt(m)
    return BatchSummary(list(seeds), m, m / len(reports), mean, ci, reports)


def _episode_for_seed(args) -> EpisodeReport:
    cfg, seed = args
    return run_episode(dataclasses.replace(cfg, seed=seed))


def run_batch(cfg: EpisodeConfig, seeds, workers: int = 1) -> BatchSummary:
    """Run one episode per seed; reports merge in seed order regardless
    of worker count."""
    seeds = list(seeds)
    jobs = [(cfg, s) for s in seeds]
    if workers > 1:
        import multiprocessing as mp
        with mp.Pool(workers) as pool:
            reports = pool.map(_episode_for_seed, jobs)
    else:
        reports = [_episode_for_seed(j) for j in jobs]
    return summarize(reports, seeds)


# -- exports ------------------------------------------------------------

def export_artifacts(report: EpisodeReport, out_dir, svg: bool = False) -> list:
    """Write the per-step log, final grid, and summary; optionally a
    static drawing of the run. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    log_path = out / "steps.jsonl"
    log_path.write_text(report.log_text())
    written.append(log_path)

    if report.final_grid is not None:
        grid_path = out / "grid.txt"
        grid_path.write_text(report.final_grid.to_text())
        written.append(grid_path)

    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps({
        "success": report.success,
        "steps_used": report.steps_used,
        "wall_clock": report.wall_clock,
        "config": dataclasses.asdict(report.config),
    }, sort_keys=True, indent=2) + "\n")
    written.append(summary_path)

    if svg:
        svg_path = out / "trajectory.svg"
        svg_path.write_text(render_svg(report))
        written.append(svg_path)
    return written


def render_svg(report: EpisodeReport, scene: Optional[envs.Scene] = None) -> str:
    """World, estimated-surface cells, and one polyline per tracked
    component."""
    if scene is None:
        scene = envs.make_scene(report.config.scene) if not report.config.scene_file \
            else envs.parse_scene(Path(report.config.scene_file).read_text())
    lo = np.asarray(scene.env.world.bounds_lo)
    hi = np.asarray(scene.env.world.bounds_hi)
    span = hi - lo
    scale = 800.0 / max(span)
    w, h = span * scale

    def sx(x):
        return (x - lo[0]) * scale

    def sy(y):
        return h - (y - lo[1]) * scale  # flip so +y is up

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" '
             f'height="{h:.0f}" viewBox="0 0 {w:.0f} {h:.0f}">',
             f'<rect width="{w:.0f}" height="{h:.0f}" fill="white"/>']

    if report.final_grid is not None:
        g = report.final_grid
        cell = g.resolution * scale
        sub = []
        for (i, j) in zip(*np.nonzero(g.cells)):
            cx = sx(g.origin[0] + i * g.resolution)
            cy = sy(g.origin[1] + (j + 1) * g.resolution)
            sub.append(f"M{cx:.1f} {cy:.1f}h{cell:.1f}v{cell:.1f}h{-cell:.1f}Z")
        parts.append(f'<path class="levelset" d="{" ".join(sub)}" '
                     'fill="#9ecae1" fill-opacity="0.6"/>')

    for b in scene.env.world.boxes:
        x0, y0 = sx(b.lo[0]), sy(b.hi[1])
        bw = (b.hi[0] - b.lo[0]) * scale
        bh = (b.hi[1] - b.lo[1]) * scale
        color = "#636363" if b.observable else "#d95f0e"
        parts.append(f'<path class="obstacle" d="M{x0:.1f} {y0:.1f}h{bw:.1f}'
                     f'v{bh:.1f}h{-bw:.1f}Z" fill="{color}"/>')

    states = np.array([r["state"] for r in report.records])  # (T, n, 2)
    if states.size:
        for comp in range(states.shape[1]):
            pts = " ".join(f"{sx(p[0]):.1f},{sy(p[1]):.1f}"
                           for p in states[:, comp])
            parts.append(f'<polyline class="trajectory" points="{pts}" '
                         'fill="none" stroke="#31a354" stroke-width="2"/>')

    for pt in scene.goals.points:
        parts.append(f'<circle cx="{sx(pt[0]):.1f}" cy="{sy(pt[1]):.1f}" '
                     f'r="{scene.r_g * scale:.1f}" fill="none" '
                     'stroke="#e6550d" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
