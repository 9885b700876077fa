"""Servo policies: three learned controllers (plain MLP, autoencoder-conditioned,
and hypernetwork-generated) plus adapters for the classical laws.

All learned controllers map pixel keypoints to a twist bounded by tanh * v_max,
so every output component already lies inside the velocity limit.  Keypoints
are normalized to roughly [-1, 1] via (u - cx)/cx, (v - cy)/cy before entering
any network, at training and inference time alike.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .camera import Intrinsics, point_depths
from .classic import ibvs, pbvs
from .mlp import (
    AdamState,
    DenseNet,
    DimensionMismatch,
    LayerSpec,
    backward,
    forward,
    net_from_dict,
    net_to_dict,
    overlay_backward,
    overlay_forward,
)
from .sim import EpisodeStart, Observation


class EmptyDataset(ValueError):
    pass


def normalize_keypoints(kp: np.ndarray, k: Intrinsics) -> np.ndarray:
    """(..., n, 2) pixels -> (..., 2n) normalized coordinates."""
    kp = np.asarray(kp, dtype=float)
    out = np.empty_like(kp)
    out[..., 0] = (kp[..., 0] - k.cx) / k.cx
    out[..., 1] = (kp[..., 1] - k.cy) / k.cy
    return out.reshape(*kp.shape[:-2], kp.shape[-2] * 2)


def _mse_and_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch MSE: mean over samples of the squared L2 error; gradient w.r.t. pred."""
    diff = pred - target
    batch = pred.shape[0] if pred.ndim == 2 else 1
    return float((diff * diff).sum() / batch), (2.0 / batch) * diff


class _LearnedController:
    """Shared plumbing: episode reset caching, checkpointing, Adam bookkeeping."""

    kind = ""
    uses_features = True

    def __init__(self, n_points: int, intrinsics: Intrinsics, v_max: float = 0.15, lr: float = 1e-3):
        self.n_points = n_points
        self.intrinsics = intrinsics
        self.v_max = v_max
        self.lr = lr
        self.train_steps = 0
        self.seed: int | None = None
        self._s_star_norm: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return 2 * self.n_points

    def reset(self, start: EpisodeStart) -> None:
        self._s_star_norm = normalize_keypoints(start.s_star, self.intrinsics)

    def command(self, obs: Observation) -> np.ndarray:
        raise NotImplementedError

    def twist(self, s_star: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Single-query convenience: pixel keypoints in, (6,) twist out."""
        raise NotImplementedError

    def train_batch(self, s_star: np.ndarray, s: np.ndarray, targets: np.ndarray) -> float:
        raise NotImplementedError

    @property
    def param_count(self) -> int:
        raise NotImplementedError

    def _nets(self) -> dict[str, DenseNet]:
        raise NotImplementedError

    def _extra_state(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "kind": self.kind,
            "n_points": self.n_points,
            "v_max": self.v_max,
            "lr": self.lr,
            "seed": self.seed,
            "counters": {"train_steps": self.train_steps},
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
            "nets": {name: net_to_dict(net) for name, net in self._nets().items()},
            **self._extra_state(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))


class FcnNc(_LearnedController):
    """Plain three-layer controller on the keypoint error (relu/relu/tanh)."""

    kind = "fcn"

    def __init__(
        self,
        n_points: int,
        intrinsics: Intrinsics,
        hidden: int = 512,
        penultimate: int = 128,
        v_max: float = 0.15,
        lr: float = 1e-3,
        seed: int | None = None,
        net: DenseNet | None = None,
    ):
        super().__init__(n_points, intrinsics, v_max, lr)
        self.seed = seed
        if net is None:
            rng = np.random.default_rng(seed)
            net = DenseNet(
                [
                    LayerSpec(self.in_dim, hidden, "relu"),
                    LayerSpec(hidden, penultimate, "relu"),
                    LayerSpec(penultimate, 6, "tanh"),
                ],
                rng=rng,
            )
        self.net = net
        self.adam = AdamState(net.n_params, lr=lr)

    def twist_from_error(self, error_norm: np.ndarray) -> np.ndarray:
        out, _ = forward(self.net, error_norm)
        return self.v_max * out

    def twist(self, s_star: np.ndarray, s: np.ndarray) -> np.ndarray:
        e = normalize_keypoints(s_star, self.intrinsics) - normalize_keypoints(s, self.intrinsics)
        return self.twist_from_error(e)

    def command(self, obs: Observation) -> np.ndarray:
        e = self._s_star_norm - normalize_keypoints(obs.s, self.intrinsics)
        return self.twist_from_error(e)

    def train_batch(self, s_star: np.ndarray, s: np.ndarray, targets: np.ndarray) -> float:
        e = normalize_keypoints(s_star, self.intrinsics) - normalize_keypoints(s, self.intrinsics)
        out, tape = forward(self.net, e)
        loss, d_pred = _mse_and_grad(self.v_max * out, np.asarray(targets, dtype=float))
        bundle = backward(self.net, tape, self.v_max * d_pred)
        self.adam.step(self.net.params, bundle.d_params)
        self.train_steps += 1
        return loss

    @property
    def param_count(self) -> int:
        return self.net.n_params

    def _nets(self) -> dict[str, DenseNet]:
        return {"net": self.net}


class HpnNc(_LearnedController):
    """Hypernetwork controller: a hyper net maps the desired keypoints to the
    last-layer weights and biases of a plain controller trunk; the modulated
    trunk then maps the keypoint error to a twist.

    Generation happens once per desired pose (at episode reset); the cached
    and regenerated paths are bit-identical because generation is a pure
    function of the hyper parameters and the desired keypoints.
    """

    kind = "hpn"

    def __init__(
        self,
        n_points: int,
        intrinsics: Intrinsics,
        hidden: int = 512,
        penultimate: int = 128,
        hyper_hidden: tuple[int, int] = (512, 512),
        v_max: float = 0.15,
        lr: float = 1e-3,
        seed: int | None = None,
        trunk: DenseNet | None = None,
        hyper: DenseNet | None = None,
    ):
        super().__init__(n_points, intrinsics, v_max, lr)
        self.seed = seed
        rng = np.random.default_rng(seed)
        if trunk is None:
            trunk = DenseNet(
                [
                    LayerSpec(self.in_dim, hidden, "relu"),
                    LayerSpec(hidden, penultimate, "relu"),
                    LayerSpec(penultimate, 6, "tanh"),
                ],
                rng=rng,
            )
        last = trunk.layers[-1]
        gen_dim = last.in_dim * last.out_dim + last.out_dim
        if hyper is None:
            hyper = DenseNet(
                [
                    LayerSpec(self.in_dim, hyper_hidden[0], "relu"),
                    LayerSpec(hyper_hidden[0], hyper_hidden[1], "relu"),
                    LayerSpec(hyper_hidden[1], gen_dim, "linear"),
                ],
                rng=rng,
            )
        if hyper.out_dim != gen_dim:
            raise DimensionMismatch(f"hyper net must emit {gen_dim} values, emits {hyper.out_dim}")
        self.trunk = trunk
        self.hyper = hyper
        self.freeze_hyper = False
        self.trunk_adam = AdamState(trunk.n_params, lr=lr)
        self.hyper_adam = AdamState(hyper.n_params, lr=lr)
        self._cached_layer: tuple[np.ndarray, np.ndarray] | None = None

    def _split_generated(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        last = self.trunk.layers[-1]
        n_w = last.in_dim * last.out_dim
        if raw.ndim == 2:
            return raw[:, :n_w].reshape(-1, last.out_dim, last.in_dim), raw[:, n_w:]
        return raw[:n_w].reshape(last.out_dim, last.in_dim), raw[n_w:]

    def generate(self, s_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Last-layer (weights, biases) for one desired keypoint set.  The raw
        hyper output is split row-major: weights first, biases last."""
        raw, _ = forward(self.hyper, normalize_keypoints(s_star, self.intrinsics))
        return self._split_generated(raw)

    def reset(self, start: EpisodeStart) -> None:
        super().reset(start)
        self._cached_layer = self.generate(start.s_star)

    def twist(self, s_star: np.ndarray, s: np.ndarray) -> np.ndarray:
        w, b = self.generate(s_star)
        e = normalize_keypoints(s_star, self.intrinsics) - normalize_keypoints(s, self.intrinsics)
        out, _ = overlay_forward(self.trunk, w, b, e)
        return self.v_max * out

    def command(self, obs: Observation) -> np.ndarray:
        w, b = self._cached_layer
        e = self._s_star_norm - normalize_keypoints(obs.s, self.intrinsics)
        out, _ = overlay_forward(self.trunk, w, b, e)
        return self.v_max * out

    def materialize(self, s_star: np.ndarray) -> DenseNet:
        """A plain controller holding the generated last layer (for one desired pose)."""
        w, b = self.generate(s_star)
        net = DenseNet(self.trunk.layers, params=self.trunk.params)
        wv, bv = net.split_params()[-1]
        wv[:] = w
        bv[:] = b
        return net

    def train_batch(self, s_star: np.ndarray, s: np.ndarray, targets: np.ndarray) -> float:
        sstar_n = normalize_keypoints(s_star, self.intrinsics)
        e = sstar_n - normalize_keypoints(s, self.intrinsics)
        raw, hyper_tape = forward(self.hyper, sstar_n)
        w, b = self._split_generated(raw)
        out, trunk_tape = overlay_forward(self.trunk, w, b, e)
        loss, d_pred = _mse_and_grad(self.v_max * out, np.asarray(targets, dtype=float))
        trunk_bundle, d_w, d_b = overlay_backward(self.trunk, w, trunk_tape, self.v_max * d_pred)
        d_raw = np.concatenate([d_w.reshape(d_w.shape[0], -1), d_b], axis=1)
        hyper_bundle = backward(self.hyper, hyper_tape, d_raw)
        self.trunk_adam.step(self.trunk.params, trunk_bundle.d_params)
        if not self.freeze_hyper:
            self.hyper_adam.step(self.hyper.params, hyper_bundle.d_params)
        self.train_steps += 1
        return loss

    @property
    def param_count(self) -> int:
        return self.trunk.n_params + self.hyper.n_params

    def _nets(self) -> dict[str, DenseNet]:
        return {"trunk": self.trunk, "hyper": self.hyper}


class AeNc(_LearnedController):
    """Controller conditioned on an autoencoder code of the desired keypoints.

    The autoencoder (4 layers, 8-dim bottleneck) is pretrained to reconstruct
    desired keypoint sets, then frozen; the controller consumes the keypoint
    error concatenated with the code.
    """

    kind = "ae"

    def __init__(
        self,
        n_points: int,
        intrinsics: Intrinsics,
        hidden: int = 512,
        penultimate: int = 128,
        ae_hidden: int = 64,
        latent: int = 8,
        v_max: float = 0.15,
        lr: float = 1e-3,
        seed: int | None = None,
        autoencoder: DenseNet | None = None,
        controller: DenseNet | None = None,
    ):
        super().__init__(n_points, intrinsics, v_max, lr)
        self.seed = seed
        self.latent = latent
        rng = np.random.default_rng(seed)
        if autoencoder is None:
            autoencoder = DenseNet(
                [
                    LayerSpec(self.in_dim, ae_hidden, "relu"),
                    LayerSpec(ae_hidden, latent, "linear"),
                    LayerSpec(latent, ae_hidden, "relu"),
                    LayerSpec(ae_hidden, self.in_dim, "linear"),
                ],
                rng=rng,
            )
        if controller is None:
            controller = DenseNet(
                [
                    LayerSpec(self.in_dim + latent, hidden, "relu"),
                    LayerSpec(hidden, penultimate, "relu"),
                    LayerSpec(penultimate, 6, "tanh"),
                ],
                rng=rng,
            )
        self.autoencoder = autoencoder
        self.controller = controller
        self.frozen = False
        self.ae_adam = AdamState(autoencoder.n_params, lr=lr)
        self.adam = AdamState(controller.n_params, lr=lr)
        self._cached_latent: np.ndarray | None = None

    def encode(self, s_star_norm: np.ndarray) -> np.ndarray:
        """Bottleneck code: the first two autoencoder layers."""
        a = np.asarray(s_star_norm, dtype=float)
        views = self.autoencoder.split_params()
        for spec, (w, b) in list(zip(self.autoencoder.layers, views))[:2]:
            z = a @ w.T + b
            a = np.maximum(z, 0.0) if spec.activation == "relu" else (np.tanh(z) if spec.activation == "tanh" else z)
        return a

    def reset(self, start: EpisodeStart) -> None:
        super().reset(start)
        self._cached_latent = self.encode(self._s_star_norm)

    def _controller_input(self, e: np.ndarray, latent: np.ndarray) -> np.ndarray:
        return np.concatenate([e, latent], axis=-1)

    def twist(self, s_star: np.ndarray, s: np.ndarray) -> np.ndarray:
        sstar_n = normalize_keypoints(s_star, self.intrinsics)
        e = sstar_n - normalize_keypoints(s, self.intrinsics)
        out, _ = forward(self.controller, self._controller_input(e, self.encode(sstar_n)))
        return self.v_max * out

    def command(self, obs: Observation) -> np.ndarray:
        e = self._s_star_norm - normalize_keypoints(obs.s, self.intrinsics)
        out, _ = forward(self.controller, self._controller_input(e, self._cached_latent))
        return self.v_max * out

    def pretrain(self, samples: np.ndarray, steps: int = 500, batch_size: int = 256, rng: np.random.Generator | None = None) -> list[float]:
        """Train the autoencoder on desired keypoint sets (N, n, 2) px, then freeze
        the encoder.  Returns the reconstruction-loss curve."""
        samples = np.asarray(samples, dtype=float)
        if samples.size == 0:
            raise EmptyDataset("autoencoder pretraining needs at least one sample")
        rng = rng if rng is not None else np.random.default_rng()
        x = normalize_keypoints(samples, self.intrinsics)
        curve = []
        for _ in range(steps):
            batch = x[rng.integers(0, len(x), size=min(batch_size, len(x)))]
            out, tape = forward(self.autoencoder, batch)
            loss, d_pred = _mse_and_grad(out, batch)
            bundle = backward(self.autoencoder, tape, d_pred)
            self.ae_adam.step(self.autoencoder.params, bundle.d_params)
            curve.append(loss)
        self.frozen = True
        return curve

    def train_batch(self, s_star: np.ndarray, s: np.ndarray, targets: np.ndarray) -> float:
        sstar_n = normalize_keypoints(s_star, self.intrinsics)
        e = sstar_n - normalize_keypoints(s, self.intrinsics)
        x = self._controller_input(e, self.encode(sstar_n))
        out, tape = forward(self.controller, x)
        loss, d_pred = _mse_and_grad(self.v_max * out, np.asarray(targets, dtype=float))
        bundle = backward(self.controller, tape, self.v_max * d_pred)
        self.adam.step(self.controller.params, bundle.d_params)
        self.train_steps += 1
        return loss

    @property
    def param_count(self) -> int:
        return self.autoencoder.n_params + self.controller.n_params

    def _nets(self) -> dict[str, DenseNet]:
        return {"autoencoder": self.autoencoder, "controller": self.controller}

    def _extra_state(self) -> dict:
        return {"latent": self.latent, "frozen": self.frozen}


def ae_pretrain(controller: AeNc, samples: np.ndarray, steps: int = 500, batch_size: int = 256, rng: np.random.Generator | None = None) -> list[float]:
    return controller.pretrain(samples, steps=steps, batch_size=batch_size, rng=rng)


def train_step(controller, s_star: np.ndarray, s: np.ndarray, expert_twists: np.ndarray) -> float:
    """One supervised step: MSE between the controller's twist and the (clamped)
    expert twist over the batch, followed by one Adam update."""
    if len(np.asarray(s_star)) == 0:
        raise EmptyDataset("training batch is empty")
    return controller.train_batch(s_star, s, expert_twists)


class PbvsController:
    """Expert: proportional control on the ground-truth relative pose."""

    kind = "pbvs"
    uses_features = False
    param_count = None

    def __init__(self, lam: float = 0.4):
        self.lam = lam

    def reset(self, start: EpisodeStart) -> None:
        pass

    def command(self, obs: Observation) -> np.ndarray:
        return pbvs(obs.rel_pose, self.lam).as_vector()


class IbvsController:
    """Classical image-based control; depths from the simulator (true per-point
    current depths by default, or the constant desired-pose depths)."""

    kind = "ibvs"
    uses_features = True
    param_count = None

    def __init__(self, lam: float = 0.4, depth_mode: str = "true"):
        if depth_mode not in ("true", "desired"):
            raise ValueError("depth_mode must be 'true' or 'desired'")
        self.lam = lam
        self.depth_mode = depth_mode
        self._desired_depths: np.ndarray | None = None

    def reset(self, start: EpisodeStart) -> None:
        if self.depth_mode == "desired":
            self._desired_depths = point_depths(start.model, start.desired_pose)

    def command(self, obs: Observation) -> np.ndarray:
        depths = obs.depths if self.depth_mode == "true" else self._desired_depths
        return ibvs(obs.s, obs.s_star, depths, obs.intrinsics, self.lam).as_vector()


class ZeroController:
    """Stationary camera; useful as a degenerate baseline."""

    kind = "zero"
    uses_features = False
    param_count = None

    def reset(self, start: EpisodeStart) -> None:
        pass

    def command(self, obs: Observation) -> np.ndarray:
        return np.zeros(6)


def controller_from_dict(data: dict) -> _LearnedController:
    kind = data["kind"]
    k = data["intrinsics"]
    intr = Intrinsics(k["fx"], k["fy"], k["cx"], k["cy"], k["width"], k["height"])
    nets = {name: net_from_dict(nd) for name, nd in data["nets"].items()}
    common = dict(n_points=data["n_points"], intrinsics=intr, v_max=data["v_max"], lr=data["lr"], seed=data["seed"])
    if kind == "fcn":
        ctl: _LearnedController = FcnNc(net=nets["net"], **common)
    elif kind == "hpn":
        ctl = HpnNc(trunk=nets["trunk"], hyper=nets["hyper"], **common)
    elif kind == "ae":
        ctl = AeNc(autoencoder=nets["autoencoder"], controller=nets["controller"], latent=data["latent"], **common)
        ctl.frozen = data.get("frozen", False)
    else:
        raise ValueError(f"unknown controller kind {kind!r}")
    ctl.train_steps = data.get("counters", {}).get("train_steps", 0)
    return ctl


def load_controller(path: str | Path) -> _LearnedController:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return controller_from_dict(json.loads(path.read_text()))
