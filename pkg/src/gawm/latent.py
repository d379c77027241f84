"""Learned world model pieces: feature encoder, latent dynamics, decoder.

The encoder is a fixed seeded full-rank linear map on the pose features
(x, y, cos theta, sin theta); heading enters through its cosine and sine
so the learned dynamics never sees a wrap discontinuity. The decoder is
the encoder's left inverse, which makes pose recovery exact up to
observation noise. The dynamics network is a one-hidden-layer tanh MLP
in residual form, so the all-zero parameter vector is exactly the
identity transition.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .se2 import Pose2
from .segments import ActionIncrement, ActionSegment

CHECKPOINT_VERSION = "gawm-checkpoint-1"

MAX_ENCODER_CONDITION = 1e6


class HeadingUndefinedError(ValueError):
    """Decoded heading features are both zero, so the angle is undefined."""


def pose_features(pose: Pose2) -> np.ndarray:
    """(x, y, cos theta, sin theta) feature vector of a pose."""
    return np.array([pose.x, pose.y, math.cos(pose.theta), math.sin(pose.theta)])


@dataclass(frozen=True)
class FeatureEncoder:
    """Fixed linear observation map from pose features into the latent space."""

    projection: np.ndarray
    seed: int
    obs_noise_sigma: float = 0.0

    @property
    def latent_dim(self) -> int:
        return self.projection.shape[0]


def make_encoder(latent_dim: int, seed: int, obs_noise_sigma: float = 0.0) -> FeatureEncoder:
    """Sample a well-conditioned latent_dim x 4 projection from the seed.

    Resamples (continuing the same stream) until the condition number is
    acceptable, so the decoder's left inverse is numerically exact.
    """
    if latent_dim < 4:
        raise ValueError(f"latent_dim must be >= 4, got {latent_dim}")
    if obs_noise_sigma < 0.0:
        raise ValueError(f"obs_noise_sigma must be >= 0, got {obs_noise_sigma}")
    rng = np.random.Generator(np.random.PCG64(seed))
    while True:
        projection = rng.normal(0.0, 0.5, size=(latent_dim, 4))
        if np.linalg.cond(projection) <= MAX_ENCODER_CONDITION:
            return FeatureEncoder(projection=projection, seed=seed, obs_noise_sigma=obs_noise_sigma)


@dataclass(frozen=True)
class FeatureDecoder:
    """Left inverse of the encoder projection; recovers poses from latents."""

    pinv: np.ndarray

    def __post_init__(self):
        if self.pinv.shape[0] != 4:
            raise ValueError(f"decoder expects a 4 x d left inverse, got {self.pinv.shape}")


def make_decoder(encoder: FeatureEncoder) -> FeatureDecoder:
    pinv = np.linalg.pinv(encoder.projection)
    residual = np.max(np.abs(pinv @ encoder.projection - np.eye(4)))
    if residual > 1e-8:
        raise ValueError(f"left-inverse residual {residual:g} exceeds 1e-8")
    return FeatureDecoder(pinv=pinv)


def encode(pose: Pose2, encoder: FeatureEncoder, rng: np.random.Generator | None = None) -> np.ndarray:
    """Project pose features into the latent space, plus seeded observation noise."""
    z = encoder.projection @ pose_features(pose)
    if encoder.obs_noise_sigma > 0.0:
        if rng is None:
            raise ValueError("observation noise requires a random generator")
        z = z + rng.normal(0.0, encoder.obs_noise_sigma, size=z.shape)
    return z


def decode(z: np.ndarray, decoder: FeatureDecoder) -> Pose2:
    """Recover the pose whose features best explain the latent."""
    f = decoder.pinv @ z
    if f[2] == 0.0 and f[3] == 0.0:
        raise HeadingUndefinedError("heading features are both zero")
    return Pose2(theta=math.atan2(f[3], f[2]), x=float(f[0]), y=float(f[1]))


class DynamicsNet:
    """Residual one-hidden-layer transition network z' = z + MLP([z; a]).

    Parameters live in one flat float64 vector; the weight matrices are
    views into it, so optimizer updates on the flat vector are reflected
    everywhere.
    """

    def __init__(self, latent_dim: int, hidden_dim: int, params: np.ndarray | None = None):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        n = self.n_params(latent_dim, hidden_dim)
        if params is None:
            params = np.zeros(n)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    @staticmethod
    def n_params(latent_dim: int, hidden_dim: int) -> int:
        d, h = latent_dim, hidden_dim
        return (d + 3) * h + h + h * d + d

    def _views(self, params: np.ndarray):
        d, h = self.latent_dim, self.hidden_dim
        i0 = (d + 3) * h
        i1 = i0 + h
        i2 = i1 + h * d
        w1 = params[:i0].reshape(h, d + 3)
        b1 = params[i0:i1]
        w2 = params[i1:i2].reshape(d, h)
        b2 = params[i2:]
        return w1, b1, w2, b2

    def weights(self):
        return self._views(self.params)

    def param_tensors(self) -> tuple[ag.Tensor, ag.Tensor, ag.Tensor, ag.Tensor]:
        """Fresh graph leaves for one recorded forward pass."""
        return tuple(ag.Tensor(w) for w in self.weights())

    def pack_grads(self, tensors) -> np.ndarray:
        """Flatten per-weight gradients back into the parameter layout."""
        return np.concatenate([ag.grad_or_zeros(t).ravel() for t in tensors])

    def copy(self) -> "DynamicsNet":
        return DynamicsNet(self.latent_dim, self.hidden_dim, self.params.copy())


def make_dynamics_net(latent_dim: int, hidden_dim: int,
                      seed: int | np.random.SeedSequence,
                      w1_gain: float = 1.0) -> DynamicsNet:
    """Seeded initialization: near-zero residual output, first layer at
    1/sqrt(fan-in) scale times ``w1_gain``.

    The gain controls how much untrained structure the input layer starts
    with; directions never exercised by the training distribution keep
    their initialization, which matters for rollout-dispersion studies.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    d, h = latent_dim, hidden_dim
    w1 = rng.normal(0.0, w1_gain / math.sqrt(d + 3), size=(h, d + 3))
    b1 = np.zeros(h)
    w2 = rng.normal(0.0, 0.01, size=(d, h))
    b2 = np.zeros(d)
    return DynamicsNet(d, h, np.concatenate([w1.ravel(), b1, w2.ravel(), b2]))


def net_step(z: np.ndarray, action: ActionIncrement, net: DynamicsNet) -> np.ndarray:
    """One deterministic latent transition."""
    w1, b1, w2, b2 = net.weights()
    x = np.concatenate([z, action.as_array()])
    return z + w2 @ np.tanh(w1 @ x + b1) + b2


def latent_rollout_endpoint(z0: np.ndarray, u: ActionSegment, net: DynamicsNet) -> np.ndarray:
    """Fold the latent transition over a segment; an empty segment returns z0."""
    z = z0
    for a in u:
        z = net_step(z, a, net)
    return z


def net_step_graph(z: ag.Tensor, action: ActionIncrement, weights) -> ag.Tensor:
    """Recorded counterpart of net_step for gradient computation."""
    w1, b1, w2, b2 = weights
    x = ag.concat(z, ag.constant(action.as_array()))
    h = ag.tanh(ag.bias_add(ag.matmul(w1, x), b1))
    return ag.add(z, ag.bias_add(ag.matmul(w2, h), b2))


def rollout_endpoint_graph(z0: ag.Tensor, u: ActionSegment, weights) -> ag.Tensor:
    z = z0
    for a in u:
        z = net_step_graph(z, a, weights)
    return z


class LearnedWorldModel:
    """The latent model exposed as a pose-space world model.

    ``step`` encodes the pose (with observation noise when configured),
    applies the transition network once, and decodes the result; the
    consistency probes drive the model through this interface.

    ``sample_trajectory`` is the model's native rollout: the latent state
    is carried across steps without re-encoding, with seeded noise
    perturbing each transition input, and every latent is decoded into
    the recovered trajectory. The dispersion metric prefers this path
    when present, so accumulated inconsistency in the model's own
    rollout dynamics is what gets measured.
    """

    def __init__(
        self,
        encoder: FeatureEncoder,
        net: DynamicsNet,
        decoder: FeatureDecoder | None = None,
        name: str = "learned",
    ):
        self.encoder = encoder
        self.net = net
        self.decoder = decoder if decoder is not None else make_decoder(encoder)
        self.name = name

    def step(self, state: Pose2, action: ActionIncrement, rng: np.random.Generator) -> Pose2:
        z = encode(state, self.encoder, rng)
        return decode(net_step(z, action, self.net), self.decoder)

    def sample_trajectory(self, start: Pose2, actions, rng: np.random.Generator):
        from .models import Trajectory

        sigma = self.encoder.obs_noise_sigma
        z = encode(start, self.encoder, rng)
        poses = [start]
        for a in actions:
            if sigma > 0.0:
                z = z + rng.normal(0.0, sigma, size=z.shape)
            z = net_step(z, a, self.net)
            poses.append(decode(z, self.decoder))
        return Trajectory(poses)

    def with_obs_noise(self, sigma: float) -> "LearnedWorldModel":
        enc = FeatureEncoder(
            projection=self.encoder.projection, seed=self.encoder.seed, obs_noise_sigma=sigma
        )
        return LearnedWorldModel(enc, self.net, self.decoder, name=self.name)


def save_checkpoint(path, net: DynamicsNet, encoder: FeatureEncoder, meta: dict | None = None) -> None:
    """Single JSON checkpoint: version tag, dims, encoder seed and matrices, params."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "latent_dim": net.latent_dim,
        "hidden_dim": net.hidden_dim,
        "encoder_seed": encoder.seed,
        "obs_noise_sigma": encoder.obs_noise_sigma,
        "projection": encoder.projection.tolist(),
        "params": net.params.tolist(),
        "meta": meta or {},
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> tuple[DynamicsNet, FeatureEncoder, dict]:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('version')!r}")
    encoder = FeatureEncoder(
        projection=np.array(payload["projection"]),
        seed=int(payload["encoder_seed"]),
        obs_noise_sigma=float(payload["obs_noise_sigma"]),
    )
    net = DynamicsNet(int(payload["latent_dim"]), int(payload["hidden_dim"]), np.array(payload["params"]))
    return net, encoder, payload.get("meta", {})
