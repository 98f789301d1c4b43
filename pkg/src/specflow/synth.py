"""Synthetic expert driving scenarios and labeled anomaly injections.

Expert futures are composed from a small vocabulary of smooth primitives:

* progress: a speed profile with one quintic speed transition,
* steady curvature, a turn "apex" bump and a clothoid-like curvature ramp,
  all expressed in arc length so the heading has a closed form,
* a lateral S-curve lane change and a slow lateral wander, applied as
  Frenet offsets along the route centerline.

Coordinates are generated in meters in the ego frame (anchor at the origin,
heading +x) and stored divided by ``SCALE``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline

from . import kinematics as kin

SCALE = 50.0
DT = kin.DT
HORIZON = 80
HISTORY = 11
GOAL_POINTS = 20
FUTURE_TIMES = DT * np.arange(1, HORIZON + 1)
HISTORY_TIMES = DT * np.arange(-(HISTORY - 1), 1)

NOMINAL = "nominal"
ANOMALY_TAGS = ("hard_brake", "swerve", "lane_violation", "corner_cut", "jitter")
TAGS = (NOMINAL,) + ANOMALY_TAGS

_SEED_STRIDE = 10_000_000
_VAL_OFFSET = 5_000_000


class ConfigError(ValueError):
    pass


class InjectionError(RuntimeError):
    """The parent scenario cannot host the requested anomaly."""


@dataclass(frozen=True)
class GeneratorConfig:
    n_train: int = 20_000
    n_val: int = 2_000
    anomaly_fraction: float = 0.08
    speed_min: float = 3.0  # m/s
    speed_max: float = 25.0
    speed_change_max: float = 0.4  # fraction of the initial speed
    accel_max: float = 2.5  # m/s^2, peak of an expert speed transition
    lat_accel_max: float = 2.5  # m/s^2, sets the curvature budget
    curvature_max: float = 0.2  # 1/m
    p_speed_change: float = 0.6
    p_curve: float = 0.5
    p_turn: float = 0.3
    p_clothoid: float = 0.3
    p_lane_change: float = 0.2
    lane_width: float = 3.5  # m
    wander_max: float = 0.2  # m
    jerk_max: float = 5.0  # m/s^3
    expert_yaw_max: float = 1.0  # rad/s, keeps experts clear of the 1.5 rad/s rule
    expert_decel_max: float = 3.5  # m/s^2, keeps experts clear of the -5 m/s^2 rule
    jitter_sigma: float = 0.3  # m
    goal_margin: float = 10.0  # m of goal lane beyond the final position
    max_attempts: int = 500

    def validate(self) -> None:
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")
        if max(self.n_train, self.n_val) >= _VAL_OFFSET:
            raise ConfigError("split sizes exceed the per-split seed range")
        if not (0.0 <= self.speed_min <= self.speed_max <= 30.0):
            raise ConfigError("speeds must satisfy 0 <= speed_min <= speed_max <= 30 m/s")
        if not (0.0 <= self.curvature_max <= 0.2):
            raise ConfigError("|curvature| must be <= 0.2 1/m")
        for name in ("anomaly_fraction", "p_speed_change", "p_curve", "p_turn", "p_clothoid", "p_lane_change"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        for name in ("accel_max", "lat_accel_max", "jerk_max", "expert_yaw_max", "expert_decel_max", "lane_width"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.speed_change_max < 0 or self.wander_max < 0 or self.jitter_sigma < 0 or self.goal_margin < 0:
            raise ConfigError("negative magnitude in generator config")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class ManeuverParams:
    """Primitive amplitudes for one expert; zeros switch a primitive off."""

    v0: float
    dv: float = 0.0
    dv_start: float = 0.0  # s
    dv_duration: float = 4.0  # s
    kappa: float = 0.0  # steady curvature, 1/m
    turn_kappa: float = 0.0  # peak of the apex bump
    turn_start: float = 0.0  # m of arc length
    turn_length: float = 1.0  # m
    ramp_kappa: float = 0.0  # clothoid ramp end value
    ramp_start: float = 0.0  # m
    ramp_length: float = 1.0  # m
    lc_offset: float = 0.0  # lateral lane-change offset, m (left positive)
    lc_start: float = 0.0  # s
    lc_duration: float = 4.0  # s
    wander_amp: float = 0.0  # m
    wander_freq: float = 0.1  # Hz


@dataclass
class SceneContext:
    history: np.ndarray  # (11, 5): x, y, vx, vy, heading; positions/velocities / SCALE
    goal_lane: np.ndarray  # (20, 2) / SCALE


@dataclass
class Scenario:
    context: SceneContext
    future: np.ndarray  # (80, 2) / SCALE
    anomaly_tag: str
    seed: int
    meta: dict[str, Any] = field(default_factory=dict)

    def future_m(self) -> np.ndarray:
        return self.future * SCALE

    def goal_lane_m(self) -> np.ndarray:
        return self.context.goal_lane * SCALE


@dataclass
class DatasetSplit:
    train: list[Scenario]
    val: list[Scenario]
    generator_config: GeneratorConfig
    seed: int


# ----------------------------------------------------------------------------
# primitive profiles


def smoothstep(u):
    """Quintic 0->1 step with zero first and second derivatives at both ends."""
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


def _smoothstep_integral(u):
    u = np.clip(u, 0.0, 1.0)
    return u**6 - 3.0 * u**5 + 2.5 * u**4


def _step_area(x, start, length):
    # integral of smoothstep((x' - start) / length) dx' from -inf to x
    u = (x - start) / length
    return length * _smoothstep_integral(u) + np.maximum(x - start - length, 0.0)


def speed_at(p: ManeuverParams, t):
    return p.v0 + p.dv * smoothstep((np.asarray(t, dtype=float) - p.dv_start) / p.dv_duration)


def arclength_at(p: ManeuverParams, t):
    t = np.asarray(t, dtype=float)
    area = _step_area(t, p.dv_start, p.dv_duration) - _step_area(0.0, p.dv_start, p.dv_duration)
    return p.v0 * t + p.dv * area


def curvature_at(p: ManeuverParams, s):
    s = np.asarray(s, dtype=float)
    k = np.full_like(s, p.kappa)
    if p.turn_kappa:
        sig = np.clip(s - p.turn_start, 0.0, p.turn_length)
        k = k + p.turn_kappa * np.sin(np.pi * sig / p.turn_length) ** 2
    if p.ramp_kappa:
        k = k + p.ramp_kappa * smoothstep((s - p.ramp_start) / p.ramp_length)
    return k


def heading_at(p: ManeuverParams, s):
    """Closed-form integral of the curvature profile from 0 to s."""
    s = np.asarray(s, dtype=float)
    th = p.kappa * s
    if p.turn_kappa:
        L = p.turn_length
        sig = np.clip(s - p.turn_start, 0.0, L)
        th = th + p.turn_kappa * (0.5 * sig - L / (4.0 * np.pi) * np.sin(2.0 * np.pi * sig / L))
    if p.ramp_kappa:
        area = _step_area(s, p.ramp_start, p.ramp_length) - _step_area(0.0, p.ramp_start, p.ramp_length)
        th = th + p.ramp_kappa * area
    return th


def lateral_offset_at(p: ManeuverParams, t):
    t = np.asarray(t, dtype=float)
    d = p.lc_offset * smoothstep((t - p.lc_start) / p.lc_duration)
    if p.wander_amp:
        d = d + np.where(t > 0.0, p.wander_amp * np.sin(np.pi * p.wander_freq * t) ** 2, 0.0)
    return d


class _Centerline:
    """Route centerline c(s) integrated on a fine arc-length grid."""

    def __init__(self, p: ManeuverParams, s_lo: float, s_hi: float, h: float = 0.05):
        n_neg = int(np.ceil(max(-s_lo, 0.0) / h)) + 2
        n_pos = int(np.ceil(max(s_hi, 0.0) / h)) + 2
        grid = h * np.arange(-n_neg, n_pos + 1)
        th = heading_at(p, grid)
        i0 = n_neg  # grid[i0] == 0
        xy = np.zeros((len(grid), 2))
        for col, f in enumerate((np.cos(th), np.sin(th))):
            fwd = cumulative_simpson(f[i0:], dx=h, initial=0.0)
            bwd = cumulative_simpson(f[: i0 + 1][::-1], dx=h, initial=0.0)
            xy[i0:, col] = fwd
            xy[: i0 + 1, col] = -bwd[::-1]
        self._p = p
        self._spline = CubicSpline(grid, xy, axis=0)

    def point(self, s):
        return self._spline(s)

    def tangent(self, s):
        th = heading_at(self._p, s)
        return np.stack([np.cos(th), np.sin(th)], axis=-1)

    def normal(self, s):
        th = heading_at(self._p, s)
        return np.stack([-np.sin(th), np.cos(th)], axis=-1)


def compose_expert(p: ManeuverParams, goal_margin: float = 10.0) -> tuple[SceneContext, np.ndarray]:
    """Build (context, future) in meters from explicit primitive parameters."""
    s_fut = arclength_at(p, FUTURE_TIMES)
    s_hist = arclength_at(p, HISTORY_TIMES)
    s_goal = np.linspace(0.0, s_fut[-1] + goal_margin, GOAL_POINTS)
    line = _Centerline(p, min(s_hist[0], 0.0) - 1.0, max(s_goal[-1], s_fut[-1]) + 1.0)

    d = lateral_offset_at(p, FUTURE_TIMES)
    future = line.point(s_fut) + d[:, None] * line.normal(s_fut)

    v_hist = speed_at(p, HISTORY_TIMES)
    hist_xy = line.point(s_hist)
    hist_xy[-1] = 0.0  # the anchor is exactly the origin
    vel = v_hist[:, None] * line.tangent(s_hist)
    history = np.column_stack([hist_xy, vel, heading_at(p, s_hist)])

    goal = line.point(s_goal) + p.lc_offset * line.normal(s_goal)
    return SceneContext(history=history, goal_lane=goal), future


def _normalized(ctx: SceneContext, future: np.ndarray) -> tuple[SceneContext, np.ndarray]:
    hist = ctx.history.copy()
    hist[:, :4] /= SCALE
    return SceneContext(history=hist, goal_lane=ctx.goal_lane / SCALE), future / SCALE


# ----------------------------------------------------------------------------
# expert sampling


def sample_maneuver(rng: np.random.Generator, cfg: GeneratorConfig) -> ManeuverParams:
    v0 = rng.uniform(cfg.speed_min, cfg.speed_max)
    kw: dict[str, float] = {"v0": v0}
    if rng.random() < cfg.p_speed_change and cfg.speed_change_max > 0:
        dv = rng.uniform(-1.0, 1.0) * cfg.speed_change_max * v0
        dv = float(np.clip(v0 + dv, max(1.5, cfg.speed_min * 0.5), max(cfg.speed_max, 1.5)) - v0)
        dur = rng.uniform(2.0, 6.0)
        dur = max(dur, 1.875 * abs(dv) / cfg.accel_max)
        kw.update(dv=dv, dv_start=rng.uniform(-1.5, 6.0), dv_duration=dur)
    v_ref = max(v0, v0 + kw.get("dv", 0.0))
    k_lim = min(cfg.curvature_max, cfg.lat_accel_max / max(v_ref, 1.0) ** 2)
    s_end = float(arclength_at(ManeuverParams(**kw), FUTURE_TIMES[-1]))
    if rng.random() < cfg.p_curve:
        kw["kappa"] = rng.uniform(-0.6, 0.6) * k_lim
    if rng.random() < cfg.p_turn:
        dtheta = rng.uniform(0.4, 1.6) * rng.choice([-1.0, 1.0])
        k_peak = rng.uniform(0.5, 1.0) * k_lim
        length = 2.0 * abs(dtheta) / k_peak
        kw.update(
            turn_kappa=float(np.sign(dtheta) * k_peak),
            turn_start=rng.uniform(0.0, max(s_end - 0.5 * length, 1.0)),
            turn_length=length,
        )
    if rng.random() < cfg.p_clothoid:
        kw.update(
            ramp_kappa=rng.uniform(-0.6, 0.6) * k_lim,
            ramp_start=rng.uniform(0.0, s_end),
            ramp_length=rng.uniform(10.0, 60.0),
        )
    if rng.random() < cfg.p_lane_change:
        dur = rng.uniform(4.0, 6.0)
        kw.update(
            lc_offset=float(rng.choice([-1.0, 1.0]) * cfg.lane_width),
            lc_start=rng.uniform(0.0, 8.0 - dur),
            lc_duration=dur,
        )
    if cfg.wander_max > 0:
        kw.update(wander_amp=rng.uniform(-1.0, 1.0) * cfg.wander_max, wander_freq=rng.uniform(0.05, 0.2))
    return ManeuverParams(**kw)


def expert_is_valid(future_m: np.ndarray, cfg: GeneratorConfig) -> bool:
    path = np.vstack([np.zeros((1, 2)), future_m])
    if not np.all(np.isfinite(future_m)):
        return False
    if kin.max_abs_jerk(future_m) > cfg.jerk_max:
        return False
    if np.min(kin.speeds(path)) < 0.5:
        return False
    if np.min(kin.longitudinal_accel(future_m)) < -cfg.expert_decel_max:
        return False
    return float(np.max(np.abs(kin.yaw_rates(future_m)))) <= cfg.expert_yaw_max


def generate_expert(seed: int, config: GeneratorConfig | None = None, variant: int = 0) -> Scenario:
    cfg = config or GeneratorConfig()
    cfg.validate()
    rng = np.random.default_rng([seed, variant])
    for _ in range(cfg.max_attempts):
        params = sample_maneuver(rng, cfg)
        ctx, fut = compose_expert(params, cfg.goal_margin)
        if expert_is_valid(fut, cfg):
            ctx, fut = _normalized(ctx, fut)
            meta = {"variant": variant} if variant else {}
            return Scenario(context=ctx, future=fut, anomaly_tag=NOMINAL, seed=seed, meta=meta)
    raise RuntimeError(f"no valid expert for seed {seed} after {cfg.max_attempts} attempts")


def expert_from_params(params: ManeuverParams, seed: int = 0, goal_margin: float = 10.0) -> Scenario:
    ctx, fut = _normalized(*compose_expert(params, goal_margin))
    return Scenario(context=ctx, future=fut, anomaly_tag=NOMINAL, seed=seed)


# ----------------------------------------------------------------------------
# anomaly injection (all geometry in meters, origin prepended at t = 0)


def _path(s: Scenario) -> np.ndarray:
    return np.vstack([np.zeros((1, 2)), s.future_m()])


def _unit_normals(path: np.ndarray) -> np.ndarray:
    tan = np.gradient(path, axis=0)
    norm = np.linalg.norm(tan, axis=1, keepdims=True)
    tan = tan / np.maximum(norm, 1e-12)
    return np.column_stack([-tan[:, 1], tan[:, 0]])


def _arclength(path: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(kin.segment_lengths(path))])


def _kinematic_flags(future_m: np.ndarray) -> tuple[float, float]:
    return float(np.min(kin.longitudinal_accel(future_m))), float(np.max(np.abs(kin.yaw_rates(future_m))))


def _inject_hard_brake(path, rng, cfg):
    arc = _arclength(path)
    v = np.diff(arc) / DT
    candidates = [i for i in range(10, 61) if v[i] >= 4.0]
    if not candidates:
        raise InjectionError("no segment fast enough to brake from")
    spline = CubicSpline(arc, path, axis=0)
    times = DT * np.arange(len(path))
    for _ in range(20):
        i = int(rng.choice(candidates))
        a_b = rng.uniform(-8.5, -6.5)
        v_b = v[i]
        shed = max(rng.uniform(0.5, 1.0), min(1.0, 0.35 * abs(a_b) / v_b))
        t_stop = shed * v_b / abs(a_b)
        tau = np.clip(times - times[i], 0.0, None)
        tb = np.minimum(tau, t_stop)
        s_new = arc[i] + v_b * tb + 0.5 * a_b * tb**2 + v_b * (1.0 - shed) * (tau - tb)
        s_new = np.where(times <= times[i], arc, np.minimum(s_new, arc[-1]))
        out = spline(s_new)
        if _kinematic_flags(out[1:])[0] <= -6.0:
            return out, {"start": i, "decel": a_b, "shed": shed}
    raise InjectionError("hard brake did not reach -6 m/s^2")


def _inject_swerve(path, rng, cfg):
    normals = _unit_normals(path)
    times = DT * np.arange(len(path))
    speed = np.concatenate([[0.0], kin.speeds(path)])
    w = rng.uniform(1.0, 1.6)
    t0 = rng.uniform(1.0, 8.0 - w - 0.5)
    sign = rng.choice([-1.0, 1.0])
    win = (times >= t0) & (times <= t0 + w)
    v_loc = max(float(np.mean(speed[win])), 1.0)
    amp = rng.uniform(2.5, 3.5) * v_loc * w**2 / (2.0 * np.pi**2)
    bump = np.where(win, np.sin(np.pi * (times - t0) / w) ** 2, 0.0)
    for _ in range(8):
        out = path + (sign * amp * bump)[:, None] * normals
        if _kinematic_flags(out[1:])[1] >= 2.0:
            return out, {"start": float(t0), "width": float(w), "amplitude": float(sign * amp)}
        amp *= 1.5
    raise InjectionError("swerve did not reach 2 rad/s")


def _inject_lane_violation(path, rng, cfg, goal_m):
    normals = _unit_normals(path)
    times = DT * np.arange(len(path))
    for _ in range(12):
        w = rng.uniform(2.5, 4.0)
        t0 = rng.uniform(0.5, 6.0 - w)
        amp = rng.uniform(1.8, 2.6) * rng.choice([-1.0, 1.0])
        d = amp * smoothstep((times - t0) / w)
        out = path + d[:, None] * normals
        a_min, yaw_max = _kinematic_flags(out[1:])
        if a_min < -4.5 or yaw_max > 1.4:
            continue
        far = kin.distance_to_polyline(out[1:], goal_m) >= 1.5
        if _longest_run(far) >= 20:
            return out, {"start": float(t0), "width": float(w), "offset": float(amp)}
    raise InjectionError("could not place a sub-threshold lane violation")


def _longest_run(mask: np.ndarray) -> int:
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def chord_replacement(path: np.ndarray, a: int, b: int, ramp: float = 0.4) -> np.ndarray:
    """Replace path[a..b] by its chord, blending back in over ``ramp`` of the span."""
    arc = _arclength(path)
    lam = (arc[a : b + 1] - arc[a]) / (arc[b] - arc[a])
    chord = path[a] + lam[:, None] * (path[b] - path[a])
    blend = smoothstep(np.minimum(lam, 1.0 - lam) / ramp)
    out = path.copy()
    out[a : b + 1] = path[a : b + 1] + blend[:, None] * (chord - path[a : b + 1])
    return out


def _inject_corner_cut(path, rng, cfg):
    tan = np.gradient(path, axis=0)
    theta = np.unwrap(np.arctan2(tan[:, 1], tan[:, 0]))
    n = len(path)
    windows = []
    for span in range(20, 52, 2):
        for a in range(1, n - span):
            b = a + span
            turn = abs(theta[b] - theta[a])
            if not 0.5 <= turn <= 1.6:
                continue
            seg = path[a : b + 1]
            chord = path[b] - path[a]
            cn = np.linalg.norm(chord)
            if cn < 1.0:
                continue
            rel = seg - path[a]
            sag = np.max(np.abs(rel[:, 0] * chord[1] - rel[:, 1] * chord[0]) / cn)
            if sag >= 1.5:
                windows.append((a, b))
    if not windows:
        raise InjectionError("no turn with a cuttable corner")
    order = rng.permutation(len(windows))
    for j in order[:12]:
        a, b = windows[j]
        out = chord_replacement(path, a, b)
        a_min, yaw_max = _kinematic_flags(out[1:])
        if a_min > -4.5 and yaw_max < 1.4:
            return out, {"start": int(a), "end": int(b)}
    raise InjectionError("corner cut triggers kinematic rules")


def inject_anomaly(s: Scenario, tag: str, seed: int, config: GeneratorConfig | None = None) -> Scenario:
    """Return a copy of a nominal scenario with one anomaly injected into its future."""
    cfg = config or GeneratorConfig()
    if s.anomaly_tag != NOMINAL:
        raise ValueError("anomalies are injected into nominal scenarios only")
    if tag == NOMINAL:
        raise ValueError("tag 'nominal' has nothing to inject")
    if tag not in ANOMALY_TAGS:
        raise ValueError(f"unknown anomaly tag {tag!r}")
    rng = np.random.default_rng([seed, 1 + ANOMALY_TAGS.index(tag)])
    path = _path(s)
    if tag == "hard_brake":
        out, info = _inject_hard_brake(path, rng, cfg)
    elif tag == "swerve":
        out, info = _inject_swerve(path, rng, cfg)
    elif tag == "lane_violation":
        out, info = _inject_lane_violation(path, rng, cfg, s.goal_lane_m())
    elif tag == "corner_cut":
        out, info = _inject_corner_cut(path, rng, cfg)
    else:
        out = path.copy()
        out[1:] += rng.normal(0.0, cfg.jitter_sigma, size=out[1:].shape)
        info = {"sigma": cfg.jitter_sigma}
    future = out[1:] / SCALE
    if future.shape != (HORIZON, 2) or not np.all(np.isfinite(future)):
        raise InjectionError(f"{tag} produced an invalid trajectory")
    meta = dict(s.meta)
    meta["injection"] = info
    return replace(s, future=future, anomaly_tag=tag, meta=meta)


# ----------------------------------------------------------------------------
# datasets


def scenario_seed(dataset_seed: int, split: str, index: int) -> int:
    base = dataset_seed * _SEED_STRIDE
    return base + index if split == "train" else base + _VAL_OFFSET + index


def _anomalous_scenario(seed: int, tag: str, cfg: GeneratorConfig) -> Scenario:
    for variant in range(50):
        parent = generate_expert(seed, cfg, variant=variant)
        try:
            return inject_anomaly(parent, tag, seed, cfg)
        except InjectionError:
            continue
    raise RuntimeError(f"could not inject {tag} for seed {seed}")


def build_dataset(config: GeneratorConfig | None = None, seed: int = 0) -> DatasetSplit:
    cfg = config or GeneratorConfig()
    cfg.validate()
    train = [generate_expert(scenario_seed(seed, "train", i), cfg) for i in range(cfg.n_train)]
    n_anom = int(round(cfg.anomaly_fraction * cfg.n_val))
    pick = np.sort(np.random.default_rng([seed, 0xA7]).permutation(cfg.n_val)[:n_anom])
    tag_of = {int(j): ANOMALY_TAGS[r % len(ANOMALY_TAGS)] for r, j in enumerate(pick)}
    val = []
    for j in range(cfg.n_val):
        sd = scenario_seed(seed, "val", j)
        if j in tag_of:
            val.append(_anomalous_scenario(sd, tag_of[j], cfg))
        else:
            val.append(generate_expert(sd, cfg))
    return DatasetSplit(train=train, val=val, generator_config=cfg, seed=seed)


def config_dict(cfg: GeneratorConfig) -> dict[str, Any]:
    return json.loads(json.dumps(asdict(cfg)))
