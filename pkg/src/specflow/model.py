"""Conditional vector field v(z, t, C) with hand-written forward, backward and JVP.

Layout (row-vector convention, ``y = x @ W + b``)::

    feats = [history (11x5), goal_lane (20x2)]          -> 95
    f     = (feats - feat_shift) / feat_scale           (fixed buffers, fit on train)
    c     = tanh(tanh(f @ enc.w1 + enc.b1) @ enc.w2 + enc.b2)
    x_in  = [z, temb(t), c, f_goal]                     -> k + 8 + d_c + 40
    h     = x_in @ head.w_in + head.b_in
    h    += tanh(h @ blk.w1 + blk.b1) @ blk.w2 + blk.b2   (per block)
    v     = h @ head.w_out + head.b_out                 (zero-initialized)

The goal lane enters the head twice: through the encoder and directly
(skip path), so goal information survives a saturated encoder.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

HISTORY_FEATURES = 11 * 5
GOAL_FEATURES = 20 * 2
CONTEXT_FEATURES = HISTORY_FEATURES + GOAL_FEATURES


@dataclass(frozen=True)
class ModelConfig:
    k: int = 12
    d_c: int = 64
    enc_hidden: int = 128
    hidden: int = 256
    blocks: int = 3
    t_freqs: int = 4  # sin and cos at pi * 2**j, j < t_freqs

    @property
    def t_dim(self) -> int:
        return 2 * self.t_freqs

    @property
    def head_in(self) -> int:
        return self.k + self.t_dim + self.d_c + GOAL_FEATURES


def time_embedding(t, n_freqs: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    ang = t[:, None] * (np.pi * 2.0 ** np.arange(n_freqs))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def context_features(history: np.ndarray, goal_lane: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ravel(history), np.ravel(goal_lane)])


def scenario_features(scenarios) -> tuple[np.ndarray, np.ndarray]:
    """Stacked encoder inputs (N, 95) and goal skips (N, 40)."""
    feats = np.array([context_features(s.context.history, s.context.goal_lane) for s in scenarios])
    return feats, feats[:, HISTORY_FEATURES:].copy()


def feature_stats(feats: np.ndarray, floor: float = 1e-3) -> dict[str, np.ndarray]:
    """Per-feature shift and scale; near-constant features keep a unit-ish scale."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    return {"feat_shift": feats.mean(axis=0), "feat_scale": np.maximum(feats.std(axis=0), floor)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "enc.w1": (CONTEXT_FEATURES, cfg.enc_hidden),
        "enc.b1": (cfg.enc_hidden,),
        "enc.w2": (cfg.enc_hidden, cfg.d_c),
        "enc.b2": (cfg.d_c,),
        "head.w_in": (cfg.head_in, cfg.hidden),
        "head.b_in": (cfg.hidden,),
    }
    for i in range(cfg.blocks):
        shapes[f"head.blk{i}.w1"] = (cfg.hidden, cfg.hidden)
        shapes[f"head.blk{i}.b1"] = (cfg.hidden,)
        shapes[f"head.blk{i}.w2"] = (cfg.hidden, cfg.hidden)
        shapes[f"head.blk{i}.b2"] = (cfg.hidden,)
    shapes["head.w_out"] = (cfg.hidden, cfg.k)
    shapes["head.b_out"] = (cfg.k,)
    return shapes


class FlowModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None):
        shapes = param_shapes(config)
        if set(shapes) != set(params):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
            if not np.all(np.isfinite(params[name])):
                raise ValueError(f"{name} has non-finite entries")
        self.config = config
        self.params = params
        self.buffers = {"feat_shift": np.zeros(CONTEXT_FEATURES), "feat_scale": np.ones(CONTEXT_FEATURES)}
        if buffers is not None:
            self.set_buffers(buffers)

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        """Install the fixed input normalization (not trained, not decayed)."""
        if set(buffers) != set(self.buffers):
            raise ValueError(f"buffers must be {sorted(self.buffers)}")
        for name, arr in buffers.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (CONTEXT_FEATURES,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite vector of length {CONTEXT_FEATURES}")
            if name == "feat_scale" and np.any(arr <= 0):
                raise ValueError("feat_scale must be positive")
            self.buffers[name] = arr.copy()

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "FlowModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.startswith("head.") and name.endswith("_out"):
                params[name] = np.zeros(shape)
                continue
            layer = name.rsplit(".", 1)
            fan_in = param_shapes(config)[layer[0] + ".w" + layer[1][1:]][0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params)

    def copy(self) -> "FlowModel":
        return FlowModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.buffers)

    def config_dict(self) -> dict:
        return asdict(self.config)

    # -- encoder -------------------------------------------------------------

    def normalize_feats(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.buffers["feat_shift"]) / self.buffers["feat_scale"]

    def normalize_goal(self, goal: np.ndarray) -> np.ndarray:
        sl = slice(HISTORY_FEATURES, None)
        return (goal - self.buffers["feat_shift"][sl]) / self.buffers["feat_scale"][sl]

    def encode(self, feats: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Context vector from raw features; the cache holds the normalized input."""
        p = self.params
        feats = self.normalize_feats(feats)
        e1 = np.tanh(feats @ p["enc.w1"] + p["enc.b1"])
        c = np.tanh(e1 @ p["enc.w2"] + p["enc.b2"])
        return c, (feats, e1, c)

    def encode_context(self, ctx) -> tuple[np.ndarray, np.ndarray]:
        """Context vector c and the goal skip for one SceneContext."""
        feats = context_features(ctx.history, ctx.goal_lane)[None, :]
        c, _ = self.encode(feats)
        return c[0], np.ravel(ctx.goal_lane).copy()

    # -- head ----------------------------------------------------------------

    def head_input(self, z, t, c, goal) -> np.ndarray:
        """Head input from latent, time, context vector and the raw goal skip."""
        z = np.atleast_2d(z)
        n = len(z)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        temb = time_embedding(t, self.config.t_freqs)
        c = np.broadcast_to(c, (n, self.config.d_c))
        goal = np.broadcast_to(self.normalize_goal(goal), (n, GOAL_FEATURES))
        return np.concatenate([z, temb, c, goal], axis=1)

    def head_forward(self, x_in: np.ndarray) -> tuple[np.ndarray, tuple]:
        p = self.params
        h = x_in @ p["head.w_in"] + p["head.b_in"]
        hs, ss = [h], []
        for i in range(self.config.blocks):
            s = np.tanh(h @ p[f"head.blk{i}.w1"] + p[f"head.blk{i}.b1"])
            h = h + s @ p[f"head.blk{i}.w2"] + p[f"head.blk{i}.b2"]
            hs.append(h)
            ss.append(s)
        v = h @ p["head.w_out"] + p["head.b_out"]
        return v, (x_in, hs, ss)

    def head_jvp(self, x_in: np.ndarray, z_tangents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Velocity and its directional derivatives along z.

        ``z_tangents`` has shape (N, m, k); the result ``dv`` has shape (N, m, k)
        with ``dv[n, j] = J_n @ z_tangents[n, j]``.
        """
        p = self.params
        k = self.config.k
        h = x_in @ p["head.w_in"] + p["head.b_in"]
        dh = z_tangents @ p["head.w_in"][:k]
        for i in range(self.config.blocks):
            s = np.tanh(h @ p[f"head.blk{i}.w1"] + p[f"head.blk{i}.b1"])
            ds = (1.0 - s * s)[:, None, :] * (dh @ p[f"head.blk{i}.w1"])
            w2 = p[f"head.blk{i}.w2"]
            h = h + s @ w2 + p[f"head.blk{i}.b2"]
            dh = dh + ds @ w2
        v = h @ p["head.w_out"] + p["head.b_out"]
        return v, dh @ p["head.w_out"]

    # -- full passes ---------------------------------------------------------

    def forward(self, z, t, feats, goal) -> tuple[np.ndarray, tuple]:
        c, enc_cache = self.encode(feats)
        v, head_cache = self.head_forward(self.head_input(z, t, c, goal))
        return v, (enc_cache, head_cache)

    def backward(self, cache: tuple, dv: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of a scalar loss given dL/dv of shape (N, k)."""
        p = self.params
        cfg = self.config
        (feats, e1, c), (x_in, hs, ss) = cache
        g: dict[str, np.ndarray] = {}
        g["head.w_out"] = hs[-1].T @ dv
        g["head.b_out"] = dv.sum(axis=0)
        dh = dv @ p["head.w_out"].T
        for i in reversed(range(cfg.blocks)):
            s = ss[i]
            g[f"head.blk{i}.w2"] = s.T @ dh
            g[f"head.blk{i}.b2"] = dh.sum(axis=0)
            da = (dh @ p[f"head.blk{i}.w2"].T) * (1.0 - s * s)
            g[f"head.blk{i}.w1"] = hs[i].T @ da
            g[f"head.blk{i}.b1"] = da.sum(axis=0)
            dh = dh + da @ p[f"head.blk{i}.w1"].T
        g["head.w_in"] = x_in.T @ dh
        g["head.b_in"] = dh.sum(axis=0)
        lo = cfg.k + cfg.t_dim
        dc = dh @ p["head.w_in"][lo : lo + cfg.d_c].T
        dpre2 = dc * (1.0 - c * c)
        g["enc.w2"] = e1.T @ dpre2
        g["enc.b2"] = dpre2.sum(axis=0)
        dpre1 = (dpre2 @ p["enc.w2"].T) * (1.0 - e1 * e1)
        g["enc.w1"] = feats.T @ dpre1
        g["enc.b1"] = dpre1.sum(axis=0)
        return g

    # -- single-scenario conveniences ----------------------------------------

    def bind(self, ctx=None, *, feats=None, goal=None) -> "BoundField":
        """Freeze the conditioning for one context or a batch of stacked features."""
        if ctx is not None:
            feats = context_features(ctx.history, ctx.goal_lane)[None, :]
            goal = np.ravel(ctx.goal_lane)[None, :]
        c, _ = self.encode(np.atleast_2d(feats))
        return BoundField(self, c, np.atleast_2d(goal))

    def velocity(self, z, t, ctx) -> np.ndarray:
        return self.bind(ctx).velocity(np.atleast_2d(z), t)[0]

    def jacobian_z(self, z, t, ctx) -> np.ndarray:
        return self.bind(ctx).jacobian(np.atleast_2d(z), t)[0]


class BoundField:
    """v(z, t) for fixed conditioning; rows of z pair with rows of the context."""

    def __init__(self, model: FlowModel, c: np.ndarray, goal: np.ndarray):
        self.model = model
        self.c = c
        self.goal = goal
        self.k = model.config.k

    def velocity(self, z: np.ndarray, t: float) -> np.ndarray:
        v, _ = self.model.head_forward(self.model.head_input(z, t, self.c, self.goal))
        return v

    def jvp(self, z: np.ndarray, t: float, tangents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.model.head_jvp(self.model.head_input(z, t, self.c, self.goal), tangents)

    def jacobian(self, z: np.ndarray, t: float) -> np.ndarray:
        """J[n, i, j] = d v_i / d z_j for each row n."""
        eye = np.broadcast_to(np.eye(self.k), (len(z), self.k, self.k))
        _, dv = self.jvp(z, t, eye)
        return np.swapaxes(dv, 1, 2)


class LinearField:
    """v(z, t) = z @ A.T + b; analytic oracle for the likelihood engine."""

    def __init__(self, a, b=None):
        self.a = np.asarray(a, dtype=np.float64)
        self.k = self.a.shape[0]
        self.b = np.zeros(self.k) if b is None else np.asarray(b, dtype=np.float64)

    def velocity(self, z: np.ndarray, t: float) -> np.ndarray:
        return z @ self.a.T + self.b

    def jvp(self, z: np.ndarray, t: float, tangents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.velocity(z, t), tangents @ self.a.T

    def jacobian(self, z: np.ndarray, t: float) -> np.ndarray:
        return np.broadcast_to(self.a, (len(z), self.k, self.k)).copy()
