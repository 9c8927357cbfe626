"""Temporal condition encoder, conditional shape decoder and the composite loss.

The diffusion variable is the 2D displacement of a branch away from its
rigidly projected 3D centerline, in per-sample normalized units multiplied by
``residual_gain``. A predicted shape is therefore ``proj3d + x / gain``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import ShapeMismatch, StepOutOfRange, TooFewPoints
from .nn import ops
from .nn.tensor import Tensor, as_tensor

POSE_DIM = 21
SKIP_MODES = ("none", "scaled", "gated")


@dataclass
class ModelConfig:
    """Network hyperparameters.

    The widths are sized so that a training run fits in minutes on one core.
    """
    points: int = 32
    frames: int = 4
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    width: int = 128
    conv_channels: tuple = (32, 64)
    kernel: int = 3
    frame_features: int = 128
    pose_hidden: int = 64
    branch_slots: int = 16
    branch_dim: int = 16
    max_frames: int = 16
    position_dim: int = 16
    heads: int = 4
    ffn_hidden: int = 256
    blocks: int = 2
    time_dim: int = 64
    decoder_hidden: tuple = (256, 256)
    basis_modes: int = 8
    residual_gain: float = 20.0
    transformer_encoder: bool = True
    # feed the conv stack observed points relative to the projected prior
    relative_points: bool = True
    # append the per-frame point inputs to the pooled context in y
    observation_skip: bool = True
    # how x_t reaches the prediction besides the network: "none", "scaled" or "gated"
    skip_connection: str = "gated"
    data_std: float = 1.0
    # parallel linear map from the decoder input straight to its output
    linear_path: bool = True
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.decoder_hidden = tuple(int(c) for c in self.decoder_hidden)
        if self.points < 3:
            raise TooFewPoints("model needs at least 3 points per branch")
        if self.frames < 1 or self.frames > self.max_frames:
            raise ShapeMismatch(f"frames must lie in [1, {self.max_frames}]")
        if self.width % self.heads:
            raise ShapeMismatch("width must be divisible by heads")
        if self.basis_modes > self.points:
            raise ShapeMismatch("basis_modes cannot exceed points")
        if self.skip_connection not in SKIP_MODES:
            raise ValueError(f"skip_connection must be one of {SKIP_MODES}")
        if self.residual_gain <= 0 or self.data_std <= 0:
            raise ValueError("residual_gain and data_std must be positive")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ValueError("need 0 < beta_start <= beta_end < 1")

    def alpha_bar(self) -> np.ndarray:
        """Cumulative signal fraction for steps 0..T under the linear beta schedule."""
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        return np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    @property
    def condition_dim(self) -> int:
        n = self.width + (self.frames * self.points * 2 if self.observation_skip else 0)
        # the gated decoder also receives one gate logit per frame and point
        return n + (self.frames * self.points if self.skip_connection == "gated" else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    curv: float = 0.1
    diff: float = 1.0

    def __post_init__(self):
        vals = (self.mse, self.curv, self.diff)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError("loss weights must be finite and non-negative")
        if not any(vals):
            raise ValueError("at least one loss weight must be positive")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Normalized network inputs for B samples of F frames and P points."""
    obs: np.ndarray       # (B, F, P, 2)
    proj: np.ndarray      # (B, F, P, 2)
    pose: np.ndarray      # (B, F, 21)
    branch: np.ndarray    # (B,)
    label: Optional[np.ndarray] = None  # (B, F, P, 2)
    occluded: Optional[np.ndarray] = None  # (B, F, P)
    scale: Optional[np.ndarray] = None     # (B,) millimetres per normalized unit

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    def subset(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]
        return Batch(self.obs[idx], self.proj[idx], self.pose[idx], self.branch[idx],
                     pick(self.label), pick(self.occluded), pick(self.scale))


def pose_features(cam) -> np.ndarray:
    """K, R, t flattened to 21 reals; K and t rescaled to order one."""
    return np.concatenate([cam.K.ravel() / 1000.0, cam.R.ravel(), cam.t / 1000.0])


def make_batch(samples: Sequence) -> Batch:
    if not samples:
        raise ShapeMismatch("empty batch")
    F, P = samples[0].F, samples[0].P
    for s in samples:
        if s.F != F or s.P != P:
            raise ShapeMismatch(f"inconsistent sample shapes ({s.F}, {s.P}) vs ({F}, {P})")
    obs = np.stack([s.normalize(s.stacked("obs2d")) for s in samples])
    proj = np.stack([s.normalize(s.stacked("proj3d")) for s in samples])
    label = np.stack([s.normalize(s.stacked("label2d")) for s in samples])
    pose = np.stack([[pose_features(fr.cam) for fr in s.frames] for s in samples])
    occl = np.stack([[fr.occluded for fr in s.frames] for s in samples])
    branch = np.array([s.branch_id for s in samples], dtype=np.int64)
    scale = np.array([s.scale for s in samples], float)
    return Batch(obs, proj, pose, branch, label, occl, scale)


def dct_basis(points: int, modes: int) -> np.ndarray:
    """Orthonormal DCT-II rows, shape (modes, points)."""
    i = np.arange(points) + 0.5
    B = np.cos(np.pi * np.arange(modes)[:, None] * i[None, :] / points)
    return B / np.linalg.norm(B, axis=1, keepdims=True)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape (len(t), dim)."""
    t = np.asarray(t, float).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class TemporalEncoder(nn.Module):
    """Per-frame tokens (points, pose, projection, position) fused across frames.

    The condition vector is the normalized mean of the fused tokens; with
    ``observation_skip`` the flattened point inputs of every frame follow it,
    so the decoder sees the observations at full resolution. For the gated
    decoder a 1-channel convolution over the point features appends one gate
    logit per frame and point, a local estimate of how far to trust x_t there.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        P, D = cfg.points, cfg.width
        c1, c2 = cfg.conv_channels
        self.conv1 = nn.Conv1D(2, c1, cfg.kernel, rng)
        self.conv2 = nn.Conv1D(c1, c2, cfg.kernel, rng)
        self.point_head = nn.Dense(c2 * P, cfg.frame_features, rng)
        self.gate_head = (nn.Conv1D(c2, 1, cfg.kernel, rng)
                          if cfg.skip_connection == "gated" else None)
        self.branch_emb = nn.Embedding(cfg.branch_slots, cfg.branch_dim, rng)
        self.pose_mlp = nn.MLP([POSE_DIM, cfg.pose_hidden, cfg.pose_hidden], rng)
        self.pos_emb = nn.Embedding(cfg.max_frames, cfg.position_dim, rng)
        n_tok = cfg.frame_features + cfg.branch_dim + cfg.pose_hidden + 2 * P + cfg.position_dim
        self.token = nn.Dense(n_tok, D, rng)
        if cfg.transformer_encoder:
            self.blocks = [nn.TransformerBlock(D, cfg.heads, cfg.ffn_hidden, rng)
                           for _ in range(cfg.blocks)]
        else:
            self.blocks = [nn.MLP([D, cfg.ffn_hidden, D], rng) for _ in range(cfg.blocks)]
        self.norm = nn.LayerNorm(D)
        self.cfg = cfg

    def forward(self, obs, proj, pose, branch, order=None) -> Tensor:
        cfg = self.cfg
        obs, proj, pose = as_tensor(obs), as_tensor(proj), as_tensor(pose)
        if obs.ndim != 4 or obs.shape[2:] != (cfg.points, 2):
            raise ShapeMismatch(f"points must be (B, F, {cfg.points}, 2), got {obs.shape}")
        B, F = obs.shape[:2]
        if proj.shape != obs.shape or pose.shape != (B, F, POSE_DIM):
            raise ShapeMismatch("obs, proj and pose disagree in batch/frame layout")
        if F > cfg.max_frames:
            raise ShapeMismatch(f"{F} frames exceed max_frames={cfg.max_frames}")
        pts = (obs - proj) * cfg.residual_gain if cfg.relative_points else obs
        x = pts.reshape(B * F, cfg.points, 2).transpose(0, 2, 1)
        x = ops.relu(self.conv2(ops.relu(self.conv1(x))))
        feats = ops.relu(self.point_head(x.reshape(B * F, -1)))
        slots = np.asarray(branch, np.int64) % cfg.branch_slots
        b = self.branch_emb(np.repeat(slots, F))
        pz = ops.relu(self.pose_mlp(pose.reshape(B * F, POSE_DIM)))
        positions = np.tile(np.arange(F) if order is None else np.asarray(order), B)
        pe = self.pos_emb(positions)
        tok = ops.concat([feats, b, pz, proj.reshape(B * F, 2 * cfg.points), pe], axis=-1)
        h = self.token(tok).reshape(B, F, cfg.width)
        for blk in self.blocks:
            h = blk(h) if cfg.transformer_encoder else h + blk(h)
        y = self.norm(h.mean(axis=1))
        parts = [y]
        if cfg.observation_skip:
            parts.append(pts.reshape(B, F * cfg.points * 2))
        if self.gate_head is not None:
            parts.append(self.gate_head(x).reshape(B, F * cfg.points))
        return ops.concat(parts, axis=-1) if len(parts) > 1 else y


class ShapeDecoder(nn.Module):
    """MLP over [flatten(x_t), step embedding, y] predicting the clean displacement.

    With ``basis_modes`` the output lives in the span of the first DCT modes
    along the branch, which keeps predicted curves smooth.

    ``c_skip(t)`` is the linear least-squares estimate of x0 from x_t under a
    prior of scale ``data_std``. The skip modes combine it with the network:

    - ``"none"``: the network output is the prediction.
    - ``"scaled"``: ``c_skip(t) x_t + c_out(t) net``, the network learning the
      remaining correction at unit scale.
    - ``"gated"``: ``m + g c_skip(t) (x_t - sqrt(abar_t) m)`` with network
      estimate m and a per-point gate g in (0, 1). This is the posterior mean
      of x0 under a local prior centred on m with scale ``g``-weighted
      ``data_std``. Where the condition pins the shape down the gate can
      close and samples agree; where it does not, x_t pulls the estimate and
      samples spread. ``blend=False`` returns m alone; the sampler does
      this on its last step, where what x_1 adds is sampling noise.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        n = cfg.frames * cfg.points * 2
        n_out = cfg.frames * 2 * cfg.basis_modes if cfg.basis_modes else n
        n_in = n + cfg.time_dim + cfg.condition_dim
        self.n_coef = n_out
        if cfg.skip_connection == "gated":
            n_out += cfg.frames * cfg.points
        self.mlp = nn.MLP([n_in, *cfg.decoder_hidden, n_out], rng)
        self.linear = nn.Dense(n_in, n_out, rng) if cfg.linear_path else None
        self.cfg = cfg
        self.basis = dct_basis(cfg.points, cfg.basis_modes) if cfg.basis_modes else None
        ab = cfg.alpha_bar()
        var = ab * cfg.data_std ** 2 + (1 - ab)
        self.c_skip = np.sqrt(ab) * cfg.data_std ** 2 / var
        self.c_out = cfg.data_std * np.sqrt((1 - ab) / var)
        self.alpha_bar = ab

    def forward(self, x_t, t, y, blend: bool = True) -> Tensor:
        cfg = self.cfg
        x_t, y = as_tensor(x_t), as_tensor(y)
        t = np.atleast_1d(np.asarray(t, np.int64))
        B = x_t.shape[0]
        if x_t.shape[1:] != (cfg.frames, cfg.points, 2):
            raise ShapeMismatch(f"x_t must be (B, {cfg.frames}, {cfg.points}, 2), got {x_t.shape}")
        if y.shape != (B, cfg.condition_dim):
            raise ShapeMismatch(f"y must be ({B}, {cfg.condition_dim}), got {y.shape}")
        if t.size == 1:
            t = np.full(B, int(t[0]))
        if t.min() < 1 or t.max() > cfg.T:
            raise StepOutOfRange(f"diffusion step outside [1, {cfg.T}]")
        temb = timestep_embedding(t, cfg.time_dim)
        inp = ops.concat([x_t.reshape(B, -1), Tensor(temb), y], axis=-1)
        h = self.mlp(inp)
        if self.linear is not None:
            h = h + self.linear(inp)
        shape = (B, 1, 1, 1)
        c_skip = self.c_skip[t].reshape(shape)
        if cfg.skip_connection == "gated":
            n_gate = cfg.frames * cfg.points
            logit = h[:, self.n_coef:] + y[:, cfg.condition_dim - n_gate:]
            gate = ops.sigmoid(logit).reshape(B, cfg.frames, cfg.points, 1)
            h = h[:, :self.n_coef]
        if self.basis is None:
            out = h.reshape(B, cfg.frames, cfg.points, 2)
        else:
            coef = h.reshape(B, cfg.frames, 2, cfg.basis_modes)
            out = (coef @ Tensor(self.basis)).transpose(0, 1, 3, 2)
        if cfg.skip_connection == "none" or (cfg.skip_connection == "gated" and not blend):
            return out
        if cfg.skip_connection == "scaled":
            skip = x_t * c_skip
            if self.basis is not None:
                skip = self._project(skip)
            return out * self.c_out[t].reshape(shape) + skip
        # move the network's estimate towards x_t by the gated posterior-mean weight
        root_ab = np.sqrt(self.alpha_bar[t]).reshape(shape)
        corr = gate * ((x_t - out * root_ab) * c_skip)
        if self.basis is not None:
            corr = self._project(corr)
        return out + corr

    def _project(self, pts) -> Tensor:
        """Least-squares projection of (B, F, P, 2) points onto the basis span."""
        Bt = Tensor(self.basis)
        coef = pts.transpose(0, 1, 3, 2) @ Tensor(self.basis.T)
        return (coef @ Bt).transpose(0, 1, 3, 2)


class TempDiffRegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.encoder = TemporalEncoder(cfg, rng)
        self.decoder = ShapeDecoder(cfg, rng)
        self.cfg = cfg

    def encode(self, batch: Batch, order=None) -> Tensor:
        return self.encoder(batch.obs, batch.proj, batch.pose, batch.branch, order)

    def decode(self, x_t, t, y, blend: bool = True) -> Tensor:
        return self.decoder(x_t, t, y, blend)

    # conversions between diffusion space and normalized shapes
    def to_displacement(self, shapes, proj) -> np.ndarray:
        return (np.asarray(shapes) - proj) * self.cfg.residual_gain

    def to_shape(self, x, proj) -> np.ndarray:
        return proj + np.asarray(x) / self.cfg.residual_gain

    def spec(self):
        return {"type": "TempDiffRegNet", "config": self.cfg.to_dict()}


def encode_branch_sequence(sample, model: TempDiffRegNet, order=None) -> np.ndarray:
    """Condition vector y (length ``cfg.condition_dim``) for one multi-frame sample."""
    with nn.no_grad():
        return model.encode(make_batch([sample]), order).data[0].copy()


def decode_shape(x_t, t: int, y, model: TempDiffRegNet) -> np.ndarray:
    """Denoised displacement for a single (F, P, 2) state."""
    with nn.no_grad():
        out = model.decode(np.asarray(x_t)[None], t, np.asarray(y)[None])
    return out.data[0].copy()


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def menger_tensor(pts) -> Tensor:
    """Curvature over consecutive triples of (..., P, 2) points: |cross| / (|ab| |bc| |ca|)."""
    pts = as_tensor(pts)
    a, b, c = pts[..., :-2, :], pts[..., 1:-1, :], pts[..., 2:, :]
    ab, bc, ca = b - a, c - b, a - c
    cross = ab[..., 0] * (c - a)[..., 1] - ab[..., 1] * (c - a)[..., 0]

    def norm(v):
        return ops.sqrt((v * v).sum(axis=-1))
    return ops.tabs(cross) / (norm(ab) * norm(bc) * norm(ca))


def point_mse(pred, target) -> Tensor:
    d = as_tensor(pred) - as_tensor(target)
    return (d * d).sum(axis=-1).mean()


def composite_loss(x0_hat, x0, weights: LossWeights, step_pairs=(), reference=None,
                   gain: float = 1.0):
    """Weighted sum of point MSE, curvature and step-averaged denoising terms.

    Parameters
    ----------
    x0_hat, x0 : Tensor or array, (..., P, 2)
        Final-step prediction and target.
    step_pairs : sequence of (prediction, target)
        Denoising predictions at sampled diffusion steps.
    reference, gain : array and float, optional
        When the inputs are displacements, curvature is measured on the shapes
        ``reference + x / gain``; without a reference the inputs are shapes.

    Returns
    -------
    total : Tensor
    terms : dict of float
    """
    x0_hat, x0 = as_tensor(x0_hat), as_tensor(x0)
    if x0_hat.shape != x0.shape:
        raise ShapeMismatch(f"prediction {x0_hat.shape} vs target {x0.shape}")
    terms = {"mse": 0.0, "curv": 0.0, "diff": 0.0}
    total = Tensor(0.0)
    if weights.mse:
        l_mse = point_mse(x0_hat, x0)
        terms["mse"] = float(l_mse.data)
        total = total + weights.mse * l_mse
    if weights.curv:
        if x0.shape[-2] < 3:
            raise TooFewPoints("curvature term needs at least 3 points")
        base = 0.0 if reference is None else np.asarray(reference)
        k_hat = menger_tensor(x0_hat * (1.0 / gain) + base)
        k_ref = menger_tensor(Tensor(x0.data / gain + base)).data
        l_curv = ops.tabs(k_hat - k_ref).mean()
        terms["curv"] = float(l_curv.data)
        total = total + weights.curv * l_curv
    if weights.diff and len(step_pairs):
        l_diff = sum((point_mse(p, q) for p, q in step_pairs), Tensor(0.0)) * (1.0 / len(step_pairs))
        terms["diff"] = float(l_diff.data)
        total = total + weights.diff * l_diff
    terms["total"] = float(total.data)
    return total, terms
