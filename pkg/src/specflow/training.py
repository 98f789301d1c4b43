"""OT-CFM objective, hybrid manifold/coordinate loss and the AdamW training loop."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable

import numpy as np

from . import complexity
from .manifold import SpectralBasis, project
from .model import FlowModel, ModelConfig, feature_stats, scenario_features
from .synth import SCALE

FORMAT_CKPT = "specflow-ckpt-v1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    sigma_min: float = 1e-4
    lambda_coord: float = 0.1
    epochs: int = 80
    batch: int = 128
    lr_init: float = 5e-4
    lr_floor: float = 1e-6
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    use_complexity_weights: bool = True
    alpha: float = complexity.ALPHA
    coord_decode: str = "one_step"
    seed: int = 0
    d_c: int = 64
    enc_hidden: int = 128
    hidden: int = 256
    blocks: int = 3
    t_freqs: int = 4

    def validate(self) -> None:
        if not 0.0 < self.sigma_min < 1.0:
            raise ValueError("sigma_min must be in (0, 1)")
        if self.lambda_coord < 0:
            raise ValueError("lambda_coord must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.coord_decode != "one_step":
            raise ValueError(f"unsupported coord_decode {self.coord_decode!r}")

    def model_config(self, k: int) -> ModelConfig:
        return ModelConfig(
            k=k, d_c=self.d_c, enc_hidden=self.enc_hidden, hidden=self.hidden, blocks=self.blocks, t_freqs=self.t_freqs
        )

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class Batch:
    z1: np.ndarray  # (B, k) whitened targets
    z0: np.ndarray  # (B, k) prior draws
    t: np.ndarray  # (B,)
    feats: np.ndarray  # (B, 95)
    goal: np.ndarray  # (B, 40)
    x: np.ndarray | None = None  # (B, D) normalized flattened futures
    weights: np.ndarray | None = None  # batch-normalized


@dataclass
class Checkpoint:
    model: FlowModel
    basis_hash: str
    config: dict[str, Any]
    epoch: int
    format_version: str = FORMAT_CKPT


@dataclass
class EpochRecord:
    epoch: int
    flow_loss: float
    coord_rmse_m: float
    grad_norm_mean: float
    grad_norm_max: float
    lr: float
    flow_share: float  # projection share <g_flow, g> / |g|^2, pre-clipping
    coord_share: float  # projection share <g_coord, g> / |g|^2
    coord_norm_ratio: float  # |g_coord| / (|g_flow| + |g_coord|)


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0


# ----------------------------------------------------------------------------
# objective


def ot_path(z0, z1, t, sigma_min: float) -> tuple[np.ndarray, np.ndarray]:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tt = t[..., None] if t.ndim else t
    zt = (1.0 - (1.0 - sigma_min) * tt) * z0 + tt * z1
    return zt, z1 - (1.0 - sigma_min) * z0


def ot_pair(z1, t, noise_seed: int, sigma_min: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    z1 = np.asarray(z1, dtype=np.float64)
    z0 = np.random.default_rng(noise_seed).standard_normal(z1.shape)
    return ot_path(z0, z1, t, sigma_min)


def cfm_loss(model, batch: Batch, sigma_min: float = 1e-4) -> tuple[float, np.ndarray]:
    """Mean and per-sample squared velocity error. ``model`` may be any callable field."""
    zt, u = ot_path(batch.z0, batch.z1, batch.t, sigma_min)
    if isinstance(model, FlowModel):
        v, _ = model.forward(zt, batch.t, batch.feats, batch.goal)
    else:
        v = model(zt, batch.t)
    per = np.sum((v - u) ** 2, axis=1)
    return float(per.mean()), per


@dataclass
class HybridTerms:
    loss: float
    flow: np.ndarray  # per-sample squared error
    rmse_m: np.ndarray  # per-sample coordinate RMSE in meters
    dv_flow: np.ndarray  # dL/dv split by term
    dv_coord: np.ndarray
    cache: tuple | None


def hybrid_terms(
    model: FlowModel,
    batch: Batch,
    basis: SpectralBasis,
    lambda_coord: float,
    sigma_min: float,
    v_override: np.ndarray | None = None,
) -> HybridTerms:
    zt, u = ot_path(batch.z0, batch.z1, batch.t, sigma_min)
    cache = None
    if v_override is None:
        v, cache = model.forward(zt, batch.t, batch.feats, batch.goal)
    else:
        v = v_override
    n = len(zt)
    w = np.ones(n) if batch.weights is None else batch.weights
    diff = v - u
    flow = np.sum(diff * diff, axis=1)

    one_minus_t = (1.0 - batch.t)[:, None]
    z1_hat = zt + one_minus_t * v
    x_hat = basis.mean + (z1_hat * basis.scales) @ basis.basis
    r = (x_hat - batch.x) * SCALE  # meters
    n_pts = r.shape[1] // 2
    msq = np.sum(r * r, axis=1) / n_pts
    rmse = np.sqrt(msq)

    loss = float(np.sum(w * (flow + lambda_coord * rmse)) / n)
    dv_flow = (w / n)[:, None] * 2.0 * diff
    safe = np.where(rmse > 0.0, rmse, 1.0)
    g_xhat = np.where(rmse[:, None] > 0.0, r * SCALE / (n_pts * safe[:, None]), 0.0)
    g_z = (g_xhat @ basis.basis.T) * basis.scales
    dv_coord = (w * lambda_coord / n)[:, None] * one_minus_t * g_z
    return HybridTerms(loss, flow, rmse, dv_flow, dv_coord, cache)


def hybrid_loss(model, batch: Batch, basis: SpectralBasis, weights=None, lambda_coord: float = 0.1, sigma_min: float = 1e-4) -> float:
    if weights is not None:
        batch = Batch(batch.z1, batch.z0, batch.t, batch.feats, batch.goal, batch.x, np.asarray(weights, dtype=np.float64))
    return hybrid_terms(model, batch, basis, lambda_coord, sigma_min).loss


def hybrid_grads(model: FlowModel, batch: Batch, basis: SpectralBasis, lambda_coord: float, sigma_min: float):
    """Loss terms plus per-term parameter gradients (flow, coord)."""
    terms = hybrid_terms(model, batch, basis, lambda_coord, sigma_min)
    g_flow = model.backward(terms.cache, terms.dv_flow)
    g_coord = model.backward(terms.cache, terms.dv_coord)
    return terms, g_flow, g_coord


# ----------------------------------------------------------------------------
# optimizer


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if cfg.epochs == 1:
        return cfg.lr_init
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_floor + (cfg.lr_init - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for name in sorted(params):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p = params[name]
            p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + c.adam_eps) + c.weight_decay * p)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainingData:
    z1: np.ndarray
    x: np.ndarray
    feats: np.ndarray
    goal: np.ndarray
    weights: np.ndarray  # raw complexity weights (ones when disabled)
    tortuosity: np.ndarray


def prepare(scenarios, basis: SpectralBasis, cfg: TrainConfig) -> TrainingData:
    futures = np.array([s.future for s in scenarios])
    x = futures.reshape(len(futures), -1)
    z1 = project(basis, x)
    feats, goal = scenario_features(scenarios)
    cw = [complexity.complexity_weight(f * SCALE, cfg.alpha) for f in futures]
    tau = np.array([c.tortuosity for c in cw])
    w = np.array([c.weight for c in cw]) if cfg.use_complexity_weights else np.ones(len(futures))
    return TrainingData(z1=z1, x=x, feats=feats, goal=goal, weights=w, tortuosity=tau)


def gradient_shares(g_flow: dict[str, np.ndarray], g_coord: dict[str, np.ndarray]) -> tuple[float, float, float]:
    """Projection shares of the summed gradient g = g_flow + g_coord, plus the plain norm ratio.

    The projection shares add up to one: |g|^2 = <g_flow, g> + <g_coord, g>.
    """
    dot_f = dot_c = 0.0
    for name in g_flow:
        tot = g_flow[name] + g_coord[name]
        dot_f += float(np.sum(g_flow[name] * tot))
        dot_c += float(np.sum(g_coord[name] * tot))
    total = dot_f + dot_c
    nf, nc = global_norm(g_flow), global_norm(g_coord)
    ratio = nc / (nf + nc) if nf + nc > 0 else 0.0
    if total <= 0.0:
        return 0.0, 0.0, ratio
    return dot_f / total, dot_c / total, ratio


def train(
    scenarios,
    basis: SpectralBasis,
    config: TrainConfig | None = None,
    data: TrainingData | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    epoch_limit: int | None = None,
) -> tuple[Checkpoint, TrainReport]:
    """Train for ``config.epochs`` epochs, or only the first ``epoch_limit`` of that schedule."""
    cfg = config or TrainConfig()
    cfg.validate()
    if data is None:
        if not scenarios:
            raise ValueError("training set is empty")
        data = prepare(scenarios, basis, cfg)
    n, k = data.z1.shape
    model = FlowModel.initialize(cfg.model_config(k), seed=cfg.seed)
    model.set_buffers(feature_stats(data.feats))
    opt = AdamW(model.params, cfg)
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    report = TrainReport()
    start = time.perf_counter()

    n_epochs = cfg.epochs if epoch_limit is None else min(epoch_limit, cfg.epochs)
    for epoch in range(n_epochs):
        lr = lr_at(epoch, cfg)
        perm = rng.permutation(n)
        flow_sum = rmse_sum = 0.0
        norms, f_shares, c_shares, ratios = [], [], [], []
        for b, lo in enumerate(range(0, n, cfg.batch)):
            idx = perm[lo : lo + cfg.batch]
            m = len(idx)
            t = rng.random(m)
            z0 = rng.standard_normal((m, k))
            batch = Batch(
                z1=data.z1[idx], z0=z0, t=t, feats=data.feats[idx], goal=data.goal[idx], x=data.x[idx],
                weights=complexity.batch_normalize(data.weights[idx]),
            )
            terms, g_flow, g_coord = hybrid_grads(model, batch, basis, cfg.lambda_coord, cfg.sigma_min)
            grads = {name: g_flow[name] + g_coord[name] for name in g_flow}
            fs, cs, ratio = gradient_shares(g_flow, g_coord)
            grads, norm = clip_grads(grads, cfg.clip_norm)
            if not (math.isfinite(terms.loss) and math.isfinite(norm)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {b}: loss={terms.loss} grad_norm={norm} "
                    f"flow_grad_norm={global_norm(g_flow)} coord_grad_norm={global_norm(g_coord)}"
                )
            opt.step(model.params, grads, lr)
            f_shares.append(fs)
            c_shares.append(cs)
            ratios.append(ratio)
            norms.append(norm)
            flow_sum += float(terms.flow.sum())
            rmse_sum += float(terms.rmse_m.sum())
            report.step_losses.append(terms.loss)
        rec = EpochRecord(
            epoch=epoch,
            flow_loss=flow_sum / n,
            coord_rmse_m=rmse_sum / n,
            grad_norm_mean=float(np.mean(norms)),
            grad_norm_max=float(np.max(norms)),
            lr=lr,
            flow_share=float(np.mean(f_shares)),
            coord_share=float(np.mean(c_shares)),
            coord_norm_ratio=float(np.mean(ratios)),
        )
        report.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    report.wall_time = time.perf_counter() - start
    ckpt = Checkpoint(model=model, basis_hash=basis.digest(), config=asdict(cfg), epoch=n_epochs)
    return ckpt, report


def per_sample_cfm(model: FlowModel, data: TrainingData, draws: int = 8, seed: int = 0, sigma_min: float = 1e-4) -> np.ndarray:
    """Per-sample CFM loss averaged over ``draws`` fixed (t, z0) draws."""
    rng = np.random.default_rng([seed, 0xE7A1])
    n, k = data.z1.shape
    acc = np.zeros(n)
    for _ in range(draws):
        t = rng.random(n)
        z0 = rng.standard_normal((n, k))
        _, per = cfm_loss(model, Batch(data.z1, z0, t, data.feats, data.goal), sigma_min)
        acc += per
    return acc / draws
