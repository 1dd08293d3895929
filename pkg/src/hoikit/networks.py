"""The interactiveness predictor and the HOI classifier.

Both networks are multi-stream. The interactiveness net combines human and
object appearance streams with a spatial-pose stream and a small head that
emits one score per pair; the classifier combines human, object, and spatial
streams, each ending in its own per-category logit layer fused by an
equal-weight sum. Human and object residual blocks can share weights across
the two networks during joint training.

Appearance features come from a fixed synthetic extractor standing in for a
frozen backbone: a seeded per-class embedding plus the latent attributes
already attached to each detection when the dataset was generated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import rasterize
from .neural import (
    Concat,
    Conv2D,
    Dense,
    Flatten,
    Gradients,
    MaxPool2,
    ParamStore,
    ReLU,
    ResidualBlock,
    Sequential,
    sigmoid,
)
from .scene import Detection, SceneRecord

if TYPE_CHECKING:  # pragma: no cover
    from .training import PairCandidate


class ConfigError(ValueError):
    """A configuration value violates its invariants."""


# ---------------------------------------------------------------------------
# low-grade instance suppression


@dataclass(frozen=True)
class LisConstants:
    """Constants of the logistic suppression curve t / (1 + e^(k - w*x))."""

    t: float = 8.4
    k: float = 12.0
    w: float = 10.0


def lis_logistic(x: float, constants: LisConstants = LisConstants()) -> float:
    """Suppression weight of one detection score; domain is the open (0, 1).

    Low scores map to nearly zero weight and the curve rises steeply near the
    top of the score range, separating confident detections from marginal
    ones far more sharply than multiplying raw scores would.
    """
    if not 0.0 < x < 1.0:
        raise ValueError(f"detection score {x!r} outside the open interval (0, 1)")
    return constants.t / (1.0 + math.exp(constants.k - constants.w * x))


def lis_weight(s_h: float, s_o: float, constants: LisConstants = LisConstants()) -> float:
    """Pair suppression weight: the product of the two per-score weights."""
    return lis_logistic(s_h, constants) * lis_logistic(s_o, constants)


def _lis_logistic_array(x: np.ndarray, constants: LisConstants) -> np.ndarray:
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise ValueError("detection scores outside the open interval (0, 1)")
    return constants.t / (1.0 + np.exp(constants.k - constants.w * x))


def lis_weight_array(s_h: np.ndarray, s_o: np.ndarray, constants: LisConstants) -> np.ndarray:
    return _lis_logistic_array(s_h, constants) * _lis_logistic_array(s_o, constants)


# ---------------------------------------------------------------------------
# appearance features

_EMBED_ROOT = 0x5EED


@lru_cache(maxsize=1024)
def class_embedding(class_id: int, feature_dim: int) -> np.ndarray:
    """Fixed seeded embedding for a detector class; identical across datasets."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([_EMBED_ROOT, class_id, feature_dim])))
    emb = rng.normal(0.0, 1.0, size=feature_dim)
    emb.setflags(write=False)
    return emb


def extract_features(det: Detection, scene: SceneRecord | None = None, feature_dim: int = 64) -> np.ndarray:
    """Deterministic appearance feature for one detection.

    The class embedding carries category identity; the detection's stored
    latent attributes (generated once, with observation noise baked in) carry
    instance identity. The scene argument is unused here but kept so callers
    can treat this like a crop-based extractor.
    """
    out = class_embedding(det.class_id, feature_dim).copy()
    if det.latent:
        k = min(len(det.latent), feature_dim)
        out[:k] += np.asarray(det.latent[:k], dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# network configuration

P_STREAMS = ("human", "object", "spatial_pose")
C_STREAMS = ("human", "object", "spatial")


@dataclass(frozen=True)
class NetConfig:
    """Architecture knobs shared by both networks."""

    feature_dim: int = 64
    hidden: int = 256
    grid: int = 64
    conv_channels: tuple[int, int] = (8, 16)
    kernel: int = 5
    share_weights: bool = True
    p_streams: tuple[str, ...] = P_STREAMS
    c_streams: tuple[str, ...] = C_STREAMS
    lis: LisConstants = field(default_factory=LisConstants)

    def validate(self) -> None:
        if self.feature_dim < 1 or self.hidden < 1:
            raise ConfigError("feature_dim and hidden must be positive")
        if self.grid % 4 != 0:
            raise ConfigError("grid must be divisible by 4 (two 2x2 pooling stages)")
        if not self.p_streams or not self.c_streams:
            raise ConfigError("each network needs at least one stream")
        for s in self.p_streams:
            if s not in P_STREAMS:
                raise ConfigError(f"unknown interactiveness stream {s!r}")
        for s in self.c_streams:
            if s not in C_STREAMS:
                raise ConfigError(f"unknown classifier stream {s!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "NetConfig":
        raw = dict(raw)
        if "lis" in raw and isinstance(raw["lis"], dict):
            raw["lis"] = LisConstants(**raw["lis"])
        for key in ("conv_channels", "p_streams", "c_streams"):
            if key in raw:
                raw[key] = tuple(raw[key])
        cfg = NetConfig(**raw)
        cfg.validate()
        return cfg


def _appearance_stream(scope: str, cfg: NetConfig) -> Sequential:
    f, h = cfg.feature_dim, cfg.hidden
    return Sequential(
        scope,
        [
            ResidualBlock(f, name="res"),
            Dense(f, h, name="fc1"),
            ReLU(),
            Dense(h, h, name="fc2"),
            ReLU(),
        ],
    )


def _map_stream(scope: str, in_channels: int, cfg: NetConfig) -> Sequential:
    c1, c2 = cfg.conv_channels
    h = cfg.hidden
    flat = c2 * (cfg.grid // 4) ** 2
    return Sequential(
        scope,
        [
            Conv2D(in_channels, c1, cfg.kernel, name="conv1"),
            ReLU(),
            MaxPool2(),
            Conv2D(c1, c2, cfg.kernel, name="conv2"),
            ReLU(),
            MaxPool2(),
            Flatten(),
            Dense(flat, h, name="fc1"),
            ReLU(),
            Dense(h, h, name="fc2"),
            ReLU(),
        ],
    )


# ---------------------------------------------------------------------------
# interactiveness network


class InteractivenessNet:
    """Predicts whether a human/object pair interacts at all.

    ``forward`` returns the raw head logit per pair; callers apply the
    logistic to get the head score and optionally multiply by the suppression
    weight of the pair's detection scores.
    """

    def __init__(self, cfg: NetConfig):
        cfg.validate()
        self.cfg = cfg
        self.streams: dict[str, Sequential] = {}
        for name in cfg.p_streams:
            if name == "spatial_pose":
                self.streams[name] = _map_stream("p/spatial_pose", 3, cfg)
            else:
                self.streams[name] = _appearance_stream(f"p/{name}", cfg)
        head_in = cfg.hidden * len(cfg.p_streams)
        self.head = Sequential(
            "p/head",
            [
                Concat(),
                Dense(head_in, cfg.hidden, name="fc1"),
                ReLU(),
                Dense(cfg.hidden, cfg.hidden, name="fc2"),
                ReLU(),
                Dense(cfg.hidden, 1, name="logit"),
            ],
        )

    def param_names(self) -> list[str]:
        names = []
        for stream in self.streams.values():
            names += stream.param_names()
        return names + self.head.param_names()

    def build(self, store: ParamStore, rng: np.random.Generator) -> None:
        for name in self.cfg.p_streams:
            self.streams[name].build(store, rng)
        self.head.build(store, rng)

    def _stream_inputs(self, f_h: np.ndarray, f_o: np.ndarray, maps: np.ndarray) -> dict[str, np.ndarray]:
        return {"human": f_h, "object": f_o, "spatial_pose": maps}

    def forward(self, store: ParamStore, f_h: np.ndarray, f_o: np.ndarray, maps: np.ndarray):
        inputs = self._stream_inputs(f_h, f_o, maps)
        outs = []
        caches = {}
        for name in self.cfg.p_streams:
            y, cache = self.streams[name].forward(store, inputs[name])
            outs.append(y)
            caches[name] = cache
        logits, head_cache = self.head.forward(store, outs)
        return logits[:, 0], (caches, head_cache)

    def backward(self, store: ParamStore, cache, d_logits: np.ndarray, grads: Gradients) -> None:
        caches, head_cache = cache
        d_streams = self.head.backward(store, head_cache, d_logits[:, None], grads)
        for name, d_out in zip(self.cfg.p_streams, d_streams):
            self.streams[name].backward(store, caches[name], d_out, grads)


# ---------------------------------------------------------------------------
# HOI classifier


class HOIClassifier:
    """Scores every HOI category for a pair via three late-fused streams."""

    def __init__(self, cfg: NetConfig, n_categories: int):
        cfg.validate()
        if n_categories < 1:
            raise ConfigError("n_categories must be positive")
        self.cfg = cfg
        self.n_categories = n_categories
        self.streams: dict[str, Sequential] = {}
        self.logit_layers: dict[str, Sequential] = {}
        for name in cfg.c_streams:
            if name == "spatial":
                self.streams[name] = _map_stream("c/spatial", 2, cfg)
            else:
                self.streams[name] = _appearance_stream(f"c/{name}", cfg)
            self.logit_layers[name] = Sequential(
                f"c/{name}_head", [Dense(cfg.hidden, n_categories, name="logits")]
            )

    def param_names(self) -> list[str]:
        names = []
        for name in self.cfg.c_streams:
            names += self.streams[name].param_names()
            names += self.logit_layers[name].param_names()
        return names

    def head_param_names(self) -> list[str]:
        """The per-stream final logit layers (replaced when transferring C)."""
        names = []
        for name in self.cfg.c_streams:
            names += self.logit_layers[name].param_names()
        return names

    def build(self, store: ParamStore, rng: np.random.Generator) -> None:
        for name in self.cfg.c_streams:
            self.streams[name].build(store, rng)
            self.logit_layers[name].build(store, rng)

    def _stream_inputs(self, f_h: np.ndarray, f_o: np.ndarray, maps: np.ndarray) -> dict[str, np.ndarray]:
        return {"human": f_h, "object": f_o, "spatial": maps}

    def forward(self, store: ParamStore, f_h: np.ndarray, f_o: np.ndarray, maps: np.ndarray):
        inputs = self._stream_inputs(f_h, f_o, maps)
        logits = None
        caches = {}
        for name in self.cfg.c_streams:
            y, stream_cache = self.streams[name].forward(store, inputs[name])
            z, head_cache = self.logit_layers[name].forward(store, y)
            caches[name] = (stream_cache, head_cache)
            logits = z if logits is None else logits + z
        return logits, caches

    def backward(self, store: ParamStore, caches, d_logits: np.ndarray, grads: Gradients) -> None:
        # late fusion by plain sum: every stream sees the same output gradient
        for name in self.cfg.c_streams:
            stream_cache, head_cache = caches[name]
            dy = self.logit_layers[name].backward(store, head_cache, d_logits, grads)
            self.streams[name].backward(store, stream_cache, dy, grads)


SHARED_BLOCKS = ("human", "object")


def build_shared(
    cfg: NetConfig,
    n_categories: int,
    seed: int = 0,
    sharing: bool | None = None,
) -> tuple[ParamStore, InteractivenessNet, HOIClassifier]:
    """Build both networks in one store, optionally sharing residual blocks.

    The classifier owns the physical arrays of the shared human/object
    residual blocks; the interactiveness net's same-named blocks alias them,
    so writes through either side are visible to both and their gradients
    accumulate into one slot.
    """
    cfg.validate()
    if sharing is None:
        sharing = cfg.share_weights
    store = ParamStore()
    c_net = HOIClassifier(cfg, n_categories)
    p_net = InteractivenessNet(cfg)
    c_net.build(store, np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC]))))
    if sharing:
        block = ResidualBlock(cfg.feature_dim)
        for name in SHARED_BLOCKS:
            if name in cfg.p_streams and name in cfg.c_streams:
                for p_param, c_param in zip(
                    block.param_names(f"p/{name}/res"), block.param_names(f"c/{name}/res")
                ):
                    store.share(p_param, c_param)
    p_net.build(store, np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xP if False else 0xA]))))
    return store, p_net, c_net


def build_classifier(cfg: NetConfig, n_categories: int, seed: int = 0) -> tuple[ParamStore, HOIClassifier]:
    """Build the classifier alone (no interactiveness net, no sharing)."""
    cfg.validate()
    store = ParamStore()
    c_net = HOIClassifier(cfg, n_categories)
    c_net.build(store, np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC]))))
    return store, c_net


def build_interactiveness(cfg: NetConfig, seed: int = 0) -> tuple[ParamStore, InteractivenessNet]:
    """Build the interactiveness net alone (transfer training)."""
    cfg.validate()
    store = ParamStore()
    p_net = InteractivenessNet(cfg)
    p_net.build(store, np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xA]))))
    return store, p_net


# ---------------------------------------------------------------------------
# batched pair inputs and convenience forwards


@dataclass(eq=False)
class PairBatch:
    """Stacked network inputs for a list of pair candidates."""

    f_h: np.ndarray
    f_o: np.ndarray
    s_h: np.ndarray
    s_o: np.ndarray
    spatial: np.ndarray | None = None
    spatial_pose: np.ndarray | None = None


def batch_inputs(
    pairs: Sequence["PairCandidate"],
    cfg: NetConfig,
    need_spatial: bool = True,
    need_pose: bool = True,
) -> PairBatch:
    f_h = np.stack([p.f_h for p in pairs])
    f_o = np.stack([p.f_o for p in pairs])
    s_h = np.array([p.human.score for p in pairs], dtype=np.float64)
    s_o = np.array([p.object.score for p in pairs], dtype=np.float64)
    spatial = None
    pose = None
    if need_spatial:
        spatial = np.stack([rasterize.build_spatial_tensor(p, cfg.grid).values for p in pairs])
    if need_pose:
        pose = np.stack([rasterize.build_spatial_pose_tensor(p, cfg.grid).values for p in pairs])
    return PairBatch(f_h=f_h, f_o=f_o, s_h=s_h, s_o=s_o, spatial=spatial, spatial_pose=pose)


def p_scores_batch(
    batch: PairBatch,
    store: ParamStore,
    p_net: InteractivenessNet,
    lis_on: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Interactiveness scores for a batch: (final s_p, head score f_p)."""
    logits, _ = p_net.forward(store, batch.f_h, batch.f_o, batch.spatial_pose)
    f_p = sigmoid(logits)
    if lis_on:
        return f_p * lis_weight_array(batch.s_h, batch.s_o, p_net.cfg.lis), f_p
    return f_p.copy(), f_p


def c_scores_batch(batch: PairBatch, store: ParamStore, c_net: HOIClassifier) -> np.ndarray:
    logits, _ = c_net.forward(store, batch.f_h, batch.f_o, batch.spatial)
    return sigmoid(logits)


def p_forward(pair: "PairCandidate", store: ParamStore, p_net: InteractivenessNet, lis_on: bool = True) -> float:
    """Interactiveness score of one pair: head score times the suppression weight."""
    batch = batch_inputs([pair], p_net.cfg, need_spatial=False, need_pose=True)
    s_p, _ = p_scores_batch(batch, store, p_net, lis_on=lis_on)
    return float(s_p[0])


def c_forward(pair: "PairCandidate", store: ParamStore, c_net: HOIClassifier) -> np.ndarray:
    """Per-category scores of one pair, each in (0, 1)."""
    batch = batch_inputs([pair], c_net.cfg, need_spatial=True, need_pose=False)
    return c_scores_batch(batch, store, c_net)[0]
