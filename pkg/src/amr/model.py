"""Encoder/decoder set-prediction network with optional dual query banks."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .domain import Sample
from .tensor import Tensor

WIDTH_FLOOR = 1e-4
POOL_MODES = ("pooled", "ori", "act")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    num_heads: int = 4
    num_queries: int = 10
    ffn_dim: int = 256
    dual_query_mode: bool = False
    video_dim: int = 64
    text_dim: int = 64
    max_query_len: int = 32
    pool_mode: str = "pooled"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.num_queries < 1 or self.num_encoder_layers < 1 or self.num_decoder_layers < 1:
            raise ConfigError("num_queries and layer counts must be >= 1")
        if self.pool_mode not in POOL_MODES:
            raise ConfigError(f"pool_mode must be one of {POOL_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    features: np.ndarray  # B x L x Dv
    tokens: np.ndarray  # B x K x Dt

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        return cls(np.stack([s.features for s in samples]), np.stack([s.query_tokens for s in samples]))


@dataclass
class Encoded:
    video: Tensor  # B x L x C
    text: Tensor  # B x K x C
    eos: Tensor  # B x C


@dataclass
class DualQueryState:
    q_ori: Tensor
    q_act: Tensor
    decoded_ori: list[Tensor] = field(default_factory=list)
    decoded_act: list[Tensor] = field(default_factory=list)


@dataclass
class Heads:
    spans: Tensor  # B x N x 2, (center, width) in (0, 1)
    logits: Tensor  # B x N
    saliency: Tensor  # B x L

    @property
    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))


@dataclass
class ModelOutput:
    spans: Tensor
    logits: Tensor
    saliency: Tensor
    encoded_video: Tensor
    encoded_text: Tensor
    eos_embedding: Tensor
    decoded: dict[str, list[Tensor]]
    paths: dict[str, Heads]

    @property
    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange((dim + 1) // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : dim // 2]
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


class Model:
    """Parameters live in ``self.params`` keyed by dotted names."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        if rng is not None:
            self._init(rng)

    # parameter construction

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self._add(f"{name}.w", rng.uniform(-bound, bound, (fan_in, fan_out)))
        self._add(f"{name}.b", np.zeros(fan_out))

    def _norm(self, name: str, dim: int) -> None:
        self._add(f"{name}.g", np.ones(dim))
        self._add(f"{name}.b", np.zeros(dim))

    def _attention(self, rng, name: str, dim: int) -> None:
        for part in ("q", "k", "v", "o"):
            self._linear(rng, f"{name}.{part}", dim, dim)
        # softmax is shift-invariant per row, so a key bias never receives gradient
        del self.params[f"{name}.k.b"]

    def _ffn(self, rng, name: str, dim: int, hidden: int) -> None:
        self._linear(rng, f"{name}.fc1", dim, hidden)
        self._linear(rng, f"{name}.fc2", hidden, dim)
        self._norm(f"{name}.norm", dim)

    def _init(self, rng: np.random.Generator) -> None:
        cfg = self.config
        C = cfg.hidden_dim
        self._linear(rng, "in.video", cfg.video_dim, C)
        self._norm("in.video_norm", C)
        self._linear(rng, "in.text", cfg.text_dim, C)
        self._norm("in.text_norm", C)
        self._add("in.text_pos", rng.normal(0.0, 0.02, (cfg.max_query_len, C)))
        for i in range(cfg.num_encoder_layers):
            p = f"enc.{i}"
            self._attention(rng, f"{p}.text_sa", C)
            self._norm(f"{p}.text_norm", C)
            self._attention(rng, f"{p}.ca", C)
            self._norm(f"{p}.ca_norm", C)
            self._attention(rng, f"{p}.sa", C)
            self._norm(f"{p}.sa_norm", C)
            self._ffn(rng, f"{p}.ffn", C, cfg.ffn_dim)
        self._add("dec.q_ori", rng.normal(0.0, 1.0, (cfg.num_queries, C)))
        for i in range(cfg.num_decoder_layers):
            p = f"dec.{i}"
            self._attention(rng, f"{p}.sa", C)
            self._norm(f"{p}.sa_norm", C)
            self._attention(rng, f"{p}.ca", C)
            self._norm(f"{p}.ca_norm", C)
            self._ffn(rng, f"{p}.ffn", C, cfg.ffn_dim)
        self._linear(rng, "head.span1", C, C)
        self._linear(rng, "head.span2", C, 2)
        self._linear(rng, "head.score", C, 1)
        self._linear(rng, "head.saliency", C, 1)
        if cfg.dual_query_mode:
            self.add_active_path(rng, noise=0.01)

    def add_active_path(self, rng: np.random.Generator, noise: float) -> None:
        """Create q_act and FFN^act as copies of their original-path twins."""
        self.config.dual_query_mode = True
        q = self.params["dec.q_ori"].data
        self._add("dec.q_act", q + (rng.normal(0.0, noise, q.shape) if noise > 0 else 0.0))
        for i in range(self.config.num_decoder_layers):
            for name in [n for n in list(self.params) if n.startswith(f"dec.{i}.ffn.")]:
                self._add(name.replace(".ffn.", ".ffn_act."), self.params[name].data.copy())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state) if self.params else set()
        if missing:
            raise ConfigError(f"parameter set mismatch: {sorted(missing)[:5]}")
        for k, v in state.items():
            if k in self.params and self.params[k].shape != np.shape(v):
                raise ConfigError(f"parameter {k} has shape {np.shape(v)}, expected {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # building blocks

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _norm_apply(self, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def _mha(self, name: str, xq: Tensor, xkv: Tensor, qpos: np.ndarray | None = None,
             kpos: np.ndarray | None = None) -> Tensor:
        """Multi-head attention; positions are added to queries/keys only, never to values."""
        B, Lq, C = xq.shape
        Lk = xkv.shape[1]
        H = self.config.num_heads
        d = C // H
        xq_in = xq if qpos is None else xq + qpos
        xk_in = xkv if kpos is None else xkv + kpos
        q = T.transpose(T.reshape(linear(xq_in, self._p(f"{name}.q.w"), self._p(f"{name}.q.b")), (B, Lq, H, d)), (0, 2, 1, 3))
        k = T.transpose(T.reshape((xk_in @ self._p(f"{name}.k.w")), (B, Lk, H, d)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(linear(xkv, self._p(f"{name}.v.w"), self._p(f"{name}.v.b")), (B, Lk, H, d)), (0, 2, 1, 3))
        att = T.softmax_rows((q @ k) * (1.0 / np.sqrt(d)))
        out = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (B, Lq, C))
        return linear(out, self._p(f"{name}.o.w"), self._p(f"{name}.o.b"))

    def _ffn_apply(self, name: str, x: Tensor) -> Tensor:
        h = T.relu(linear(x, self._p(f"{name}.fc1.w"), self._p(f"{name}.fc1.b")))
        y = linear(h, self._p(f"{name}.fc2.w"), self._p(f"{name}.fc2.b"))
        return self._norm_apply(f"{name}.norm", x + y)

    # the four stages of the forward pass

    def encode(self, features: np.ndarray, tokens: np.ndarray) -> Encoded:
        cfg = self.config
        features = np.asarray(features, dtype=np.float64)
        tokens = np.asarray(tokens, dtype=np.float64)
        if features.ndim == 2:
            features, tokens = features[None], tokens[None]
        if features.shape[-1] != cfg.video_dim or tokens.shape[-1] != cfg.text_dim:
            raise ConfigError(
                f"input dims ({features.shape[-1]}, {tokens.shape[-1]}) do not match "
                f"config ({cfg.video_dim}, {cfg.text_dim})")
        L, K = features.shape[1], tokens.shape[1]
        if K > cfg.max_query_len:
            raise ConfigError(f"query has {K} tokens, max_query_len is {cfg.max_query_len}")
        v = self._norm_apply("in.video_norm", linear(Tensor(features), self._p("in.video.w"), self._p("in.video.b")))
        pos = sinusoidal_positions(L, cfg.hidden_dim)
        v = v + pos
        t = self._norm_apply("in.text_norm", linear(Tensor(tokens), self._p("in.text.w"), self._p("in.text.b")))
        t = t + T.take(self._p("in.text_pos"), np.arange(K), axis=0)
        for i in range(cfg.num_encoder_layers):
            p = f"enc.{i}"
            t = self._norm_apply(f"{p}.text_norm", t + self._mha(f"{p}.text_sa", t, t))
            v = self._norm_apply(f"{p}.ca_norm", v + self._mha(f"{p}.ca", v, t))
            v = self._norm_apply(f"{p}.sa_norm", v + self._mha(f"{p}.sa", v, v, pos, pos))
            v = self._ffn_apply(f"{p}.ffn", v)
        eos = T.reshape(T.take(t, [K - 1], axis=1), (t.shape[0], cfg.hidden_dim))
        return Encoded(v, t, eos)

    def _attend(self, i: int, x: Tensor, video: Tensor) -> Tensor:
        p = f"dec.{i}"
        x = self._norm_apply(f"{p}.sa_norm", x + self._mha(f"{p}.sa", x, x))
        # frame positions re-enter every cross-attention key, as in the DETR lineage
        kpos = sinusoidal_positions(video.shape[1], self.config.hidden_dim)
        return self._norm_apply(f"{p}.ca_norm", x + self._mha(f"{p}.ca", x, video, kpos=kpos))

    def _expand(self, q: Tensor, batch: int) -> Tensor:
        return T.broadcast_to(q, (batch,) + q.shape)

    def decode_single(self, video: Tensor, queries: Tensor | None = None) -> list[Tensor]:
        x = self._expand(self._p("dec.q_ori") if queries is None else queries, video.shape[0])
        out = []
        for i in range(self.config.num_decoder_layers):
            x = self._ffn_apply(f"dec.{i}.ffn", self._attend(i, x, video))
            out.append(x)
        return out

    def decode_dual(self, video: Tensor, state: DualQueryState | None = None) -> DualQueryState:
        """Shared self/cross attention over [Q_ori, Q_act]; path-specific FFNs."""
        if not self.config.dual_query_mode:
            raise ConfigError("decode_dual requires dual_query_mode")
        if state is None:
            state = DualQueryState(self._p("dec.q_ori"), self._p("dec.q_act"))
        if state.q_ori.shape != state.q_act.shape:
            raise ConfigError("q_ori and q_act must have identical shapes")
        B = video.shape[0]
        N = state.q_ori.shape[0]
        ori, act = self._expand(state.q_ori, B), self._expand(state.q_act, B)
        first, second = np.arange(N), np.arange(N, 2 * N)
        state.decoded_ori, state.decoded_act = [], []
        for i in range(self.config.num_decoder_layers):
            x = self._attend(i, T.concat([ori, act], axis=1), video)
            ori = self._ffn_apply(f"dec.{i}.ffn", T.take(x, first, axis=1))
            act = self._ffn_apply(f"dec.{i}.ffn_act", T.take(x, second, axis=1))
            state.decoded_ori.append(ori)
            state.decoded_act.append(act)
        return state

    def predict_heads(self, decoded: Tensor, video: Tensor) -> Heads:
        h = T.relu(linear(decoded, self._p("head.span1.w"), self._p("head.span1.b")))
        raw = T.sigmoid(linear(h, self._p("head.span2.w"), self._p("head.span2.b")))
        spans = raw * np.array([1.0, 1.0 - WIDTH_FLOOR]) + np.array([0.0, WIDTH_FLOOR])
        B, N = decoded.shape[:2]
        logits = T.reshape(linear(decoded, self._p("head.score.w"), self._p("head.score.b")), (B, N))
        saliency = T.reshape(linear(video, self._p("head.saliency.w"), self._p("head.saliency.b")), video.shape[:2])
        return Heads(spans, logits, saliency)

    def forward(self, batch: Batch) -> ModelOutput:
        enc = self.encode(batch.features, batch.tokens)
        if self.config.dual_query_mode:
            state = self.decode_dual(enc.video)
            ho = self.predict_heads(state.decoded_ori[-1], enc.video)
            ha = self.predict_heads(state.decoded_act[-1], enc.video)
            spans = T.concat([ho.spans, ha.spans], axis=1)
            logits = T.concat([ho.logits, ha.logits], axis=1)
            decoded = {"ori": state.decoded_ori, "act": state.decoded_act}
            paths = {"ori": ho, "act": ha}
            saliency = ho.saliency
        else:
            dec = self.decode_single(enc.video)
            hs = self.predict_heads(dec[-1], enc.video)
            spans, logits, saliency = hs.spans, hs.logits, hs.saliency
            decoded = {"ori": dec}
            paths = {"ori": hs}
        return ModelOutput(spans, logits, saliency, enc.video, enc.text, enc.eos, decoded, paths)

    def __call__(self, batch: Batch) -> ModelOutput:
        return self.forward(batch)

    def inference_predictions(self, out: ModelOutput) -> tuple[np.ndarray, np.ndarray]:
        """(spans B x P x 2, scores B x P) for the configured query path(s)."""
        mode = self.config.pool_mode if self.config.dual_query_mode else "ori"
        if mode == "pooled":
            return out.spans.data, out.scores
        h = out.paths[mode]
        return h.spans.data, h.scores


class BaseModel:
    """Frozen cold-start model that supplies the distillation targets."""

    def __init__(self, model: Model):
        self.model = Model(copy.deepcopy(model.config))
        self.model.params = {k: Tensor(v.data.copy(), requires_grad=False, name=k) for k, v in model.params.items()}
        for v in self.model.params.values():
            v.data.setflags(write=False)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def decoded_queries(self, batch: Batch) -> list[np.ndarray]:
        with T.no_grad():
            enc = self.model.encode(batch.features, batch.tokens)
            return [d.data for d in self.model.decode_single(enc.video)]

    def forward(self, batch: Batch) -> ModelOutput:
        with T.no_grad():
            return self.model.forward(batch)

    def digest(self) -> str:
        return self.model.digest()


def freeze_as_base(model: Model) -> BaseModel:
    if model.config.dual_query_mode:
        raise ConfigError("the base model must be a single-path cold-start model")
    return BaseModel(model)


def make_distill_model(base: BaseModel, rng: np.random.Generator, act_noise: float = 0.01) -> Model:
    """Stage-2 model: every shared weight copied from ``base``, plus an active path."""
    cfg = copy.deepcopy(base.config)
    cfg.dual_query_mode = False
    model = Model(cfg)
    model.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in base.model.params.items()}
    model.add_active_path(rng, act_noise)
    return model
