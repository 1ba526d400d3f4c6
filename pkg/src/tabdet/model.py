"""The detector: conv backbone, transformer encoder, region-aligned decoder.

Each decoder layer runs query self-attention, then the region aligner
(RoIAlign on the reference boxes, salient-point prediction, per-head
resampling, sigmoid reweighting from the previous queries), cross-attention
into the encoded features and a feed-forward block.  Class and box heads are
shared across layers; boxes refine the layer's reference boxes in
inverse-sigmoid space and feed the next layer as detached references.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as G
from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    queries: int = 30
    roi_size: int = 7
    classes: int = 1
    backbone_channels: tuple[int, int] = (16, 32)
    ffn_dim: int = 128
    aligner_channels: int = 16
    aligner_hidden: int = 64
    pos_temperature: float = G.DEFAULT_TEMPERATURE
    pos_scale: float = 2 * math.pi

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.d_model % self.heads:
            raise G.ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if (self.d_model // self.heads) % 4:
            raise G.ConfigError("per-head width d_model/heads must be divisible by 4")
        if self.d_model % 8:
            raise G.ConfigError("d_model must be divisible by 8 for the box code")
        if self.queries < 1 or self.roi_size < 1:
            raise G.ConfigError("queries and roi_size must be >= 1")

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(d_model=16, heads=4, enc_layers=1, dec_layers=1, queries=4, roi_size=3,
                   backbone_channels=(4, 8), ffn_dim=16, aligner_channels=4, aligner_hidden=8)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


@dataclass
class QueryState:
    q: Tensor  # B×N×d content
    q_pos: Tensor  # B×N×d position


@dataclass
class EncodedFeatures:
    features: Tensor  # B×(H·W)×d
    height: int
    width: int
    pos: np.ndarray  # (H·W)×d

    def as_map(self) -> Tensor:
        B, L, d = self.features.shape
        return self.features.reshape(B, self.height, self.width, d)


@dataclass
class LayerOutput:
    logits: Tensor  # B×N×(C+1)
    boxes: Tensor  # B×N×4
    state: QueryState
    trace: dict = field(default_factory=dict)


@dataclass
class Detection:
    box: np.ndarray
    score: float
    label: int = 0


# -- parameter construction ------------------------------------------------------

class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def linear(self, name: str, fan_in: int, fan_out: int, bias: bool = True, gain: float = 1.0) -> None:
        self.add(f"{name}.w", self.rng.normal(0.0, gain / math.sqrt(fan_in), (fan_in, fan_out)))
        if bias:
            self.add(f"{name}.b", np.zeros(fan_out))

    def conv(self, name: str, c_in: int, c_out: int, k: int = 3) -> None:
        fan_in = c_in * k * k
        self.add(f"{name}.w", self.rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, k, k)))
        self.add(f"{name}.b", np.zeros(c_out))

    def norm(self, name: str, d: int) -> None:
        self.add(f"{name}.g", np.ones(d))
        self.add(f"{name}.b", np.zeros(d))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    ini = _Init(seed)
    d = cfg.d_model
    chans = (1,) + cfg.backbone_channels + (d,)
    for i in range(3):
        ini.conv(f"backbone.{i}.down", chans[i], chans[i + 1])
        if i > 0:
            ini.conv(f"backbone.{i}.conv", chans[i + 1], chans[i + 1])
    for i in range(cfg.enc_layers):
        p = f"enc.{i}"
        for proj in ("q", "k", "v", "o"):
            ini.linear(f"{p}.attn.{proj}", d, d)
        ini.norm(f"{p}.norm1", d)
        ini.linear(f"{p}.ffn1", d, cfg.ffn_dim, gain=math.sqrt(2))
        ini.linear(f"{p}.ffn2", cfg.ffn_dim, d)
        ini.norm(f"{p}.norm2", d)
    ini.add("query.embed", ini.rng.normal(0.0, 1.0, (cfg.queries, d)))
    # reference boxes: centres spread over the page, moderate extents
    centers = ini.rng.uniform(0.1, 0.9, (cfg.queries, 2))
    sizes = ini.rng.uniform(0.2, 0.5, (cfg.queries, 2))
    ref = np.concatenate([centers, sizes], axis=1)
    ini.add("query.ref_logits", np.log(ref / (1 - ref)))
    S, ca = cfg.roi_size, cfg.aligner_channels
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        for proj in ("q", "k", "v", "o"):
            ini.linear(f"{p}.self.{proj}", d, d)
        ini.norm(f"{p}.norm0", d)
        ini.conv(f"{p}.align.conv1", d, ca)
        ini.conv(f"{p}.align.conv2", ca, ca)
        ini.linear(f"{p}.align.mlp1", ca * S * S, cfg.aligner_hidden, gain=math.sqrt(2))
        ini.linear(f"{p}.align.mlp2", cfg.aligner_hidden, 2 * cfg.heads, gain=0.1)
        ini.linear(f"{p}.rw1", d, d, bias=False)
        ini.linear(f"{p}.rw2", d, d, bias=False)
        ini.linear(f"{p}.cross.v", d, d)
        ini.linear(f"{p}.cross.o", d, d)
        ini.norm(f"{p}.norm1", d)
        ini.linear(f"{p}.ffn1", d, cfg.ffn_dim, gain=math.sqrt(2))
        ini.linear(f"{p}.ffn2", cfg.ffn_dim, d)
        ini.norm(f"{p}.norm2", d)
    ini.linear("head.cls", d, cfg.classes + 1)
    ini.linear("head.box1", d, d, gain=math.sqrt(2))
    ini.add("head.box2.w", np.zeros((d, 4)))
    ini.add("head.box2.b", np.zeros(4))
    return ini.params


# -- building blocks ----------------------------------------------------------------

def linear(x: Tensor, P: dict[str, Tensor], name: str) -> Tensor:
    y = x @ P[f"{name}.w"]
    b = P.get(f"{name}.b")
    return y if b is None else y + b


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return x.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention on per-head channel slices (no projections).

    Inputs are ``B×L×d``; returns the ``B×Lq×d`` output and the
    ``B×heads×Lq×Lk`` weights.
    """
    B, Lq, d = q.shape
    dh = d // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    w = T.softmax(scores, axis=-1)
    out = (w @ vh).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return out, w


def projected_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, P, name: str, heads: int):
    out, w = multihead_attention(linear(q_in, P, f"{name}.q"), linear(k_in, P, f"{name}.k"),
                                 linear(v_in, P, f"{name}.v"), heads)
    return linear(out, P, f"{name}.o"), w


def norm(x: Tensor, P, name: str) -> Tensor:
    return T.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def ffn(x: Tensor, P, name: str) -> Tensor:
    return linear(T.relu(linear(x, P, f"{name}1")), P, f"{name}2")


# -- the detector --------------------------------------------------------------------

class Detector:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)

    # state helpers
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise DimensionError(f"checkpoint lacks parameter {k}")
            if state[k].shape != p.shape:
                raise DimensionError(f"parameter {k}: checkpoint shape {state[k].shape}, model {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        extra = set(state) - set(self.params)
        if extra:
            raise DimensionError(f"checkpoint has unknown parameters {sorted(extra)[:3]}")

    def clone(self) -> "Detector":
        return Detector(self.cfg, params={k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                          for k, v in self.params.items()})

    # stages
    def backbone(self, images) -> Tensor:
        """``B×1×H×W`` (or ``1×H×W``) images in [0,1] → ``B×d×H/8×W/8``."""
        x = T.as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.shape[-1] < 8 or x.shape[-2] < 8:
            raise DimensionError(f"image {x.shape[-2]}x{x.shape[-1]} smaller than 8x8")
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise DimensionError("image sides must be multiples of 8")
        P = self.params
        B, _, H, W = x.shape
        x = 1.0 - x.reshape(B, H, W, 1)  # ink-positive, channel-last
        for i in range(3):
            x = T.relu(T.conv2d(x, P[f"backbone.{i}.down.w"], P[f"backbone.{i}.down.b"], stride=2, pad=1,
                                channels_last=True))
            if i > 0:
                x = T.relu(T.conv2d(x, P[f"backbone.{i}.conv.w"], P[f"backbone.{i}.conv.b"], stride=1, pad=1,
                                    channels_last=True))
        return x.transpose(0, 3, 1, 2)

    def encoder(self, feat: Tensor) -> EncodedFeatures:
        cfg, P = self.cfg, self.params
        B, d, H, W = feat.shape
        pos = G.grid_position_code(H, W, d, cfg.heads, cfg.pos_temperature, cfg.pos_scale)
        x = feat.reshape(B, d, H * W).transpose(0, 2, 1) + Tensor(pos)
        for i in range(cfg.enc_layers):
            p = f"enc.{i}"
            a, _ = projected_attention(x, x, x, P, f"{p}.attn", cfg.heads)
            x = norm(x + a, P, f"{p}.norm1")
            x = norm(x + ffn(x, P, f"{p}.ffn"), P, f"{p}.norm2")
        return EncodedFeatures(x, H, W, pos)

    def region_features(self, enc: EncodedFeatures, ref: np.ndarray) -> Tensor:
        """``B×N×S×S×d`` RoIAlign grids of the encoded map under each reference box."""
        return G.roi_align(enc.as_map(), ref, self.cfg.roi_size)

    def salient_points(self, regions: Tensor, layer: int) -> Tensor:
        """``B×N×S×S×d`` grids → ``B×N×heads×2`` box-relative points in (0,1)."""
        cfg, P = self.cfg, self.params
        B, N, S, _, d = regions.shape
        p = f"dec.{layer}.align"
        x = regions.reshape(B * N, S, S, d)
        x = T.relu(T.conv2d(x, P[f"{p}.conv1.w"], P[f"{p}.conv1.b"], pad=1, channels_last=True))
        x = T.relu(T.conv2d(x, P[f"{p}.conv2.w"], P[f"{p}.conv2.b"], pad=1, channels_last=True))
        x = x.reshape(B * N, -1)
        x = linear(T.relu(linear(x, P, f"{p}.mlp1")), P, f"{p}.mlp2")
        return T.sigmoid(x).reshape(B, N, cfg.heads, 2)

    def resample(self, regions: Tensor, ref: np.ndarray, pts: Tensor) -> tuple[Tensor, Tensor]:
        """Per-head feature reads and sine codes at the salient points."""
        cfg = self.cfg
        B, N, S, _, d = regions.shape
        q_new = G.sample_points(regions.reshape(B * N, S, S, d), pts.reshape(B * N, cfg.heads, 2), cfg.heads)
        q_pos = G.sinusoidal_embed(ref.reshape(B * N, 4), pts.reshape(B * N, cfg.heads, 2), d // cfg.heads,
                                   cfg.pos_temperature, cfg.pos_scale)
        return q_new.reshape(B, N, d), q_pos.reshape(B, N, d)

    def reweight(self, q_new: Tensor, q_pos: Tensor, q_prev: Tensor, layer: int):
        P = self.params
        c1 = T.sigmoid(q_prev @ P[f"dec.{layer}.rw1.w"])
        c2 = T.sigmoid(q_prev @ P[f"dec.{layer}.rw2.w"])
        return q_new * c1, q_pos * c2, (c1, c2)

    def cross_attention(self, q: Tensor, q_pos: Tensor, enc: EncodedFeatures, layer: int):
        P = self.params
        keys = enc.features + Tensor(enc.pos)
        values = linear(enc.features, P, f"dec.{layer}.cross.v")
        out, w = multihead_attention(q + q_pos, keys, values, self.cfg.heads)
        return linear(out, P, f"dec.{layer}.cross.o"), w

    def decoder(self, enc: EncodedFeatures, trace: bool = False, refs: list | None = None) -> list[LayerOutput]:
        """Run the decoder stack.

        ``refs`` pins the detached per-layer reference boxes (as recorded in a
        previous pass's ``trace["ref"]``); gradient checks need this so that
        perturbing a parameter does not move the stop-gradient inputs.
        """
        cfg, P = self.cfg, self.params
        B = enc.features.shape[0]
        N, d = cfg.queries, cfg.d_model
        q = P["query.embed"].reshape(1, N, d) * Tensor(np.ones((B, 1, 1)))
        ref_logit = P["query.ref_logits"].reshape(1, N, 4) * Tensor(np.ones((B, 1, 1)))
        ref = T.sigmoid(ref_logit).data
        outputs = []
        for i in range(cfg.dec_layers):
            p = f"dec.{i}"
            if refs is not None:
                ref = refs[i]
            rec: dict = {"ref": ref}
            sa_pos = Tensor(G.box_code(ref, d, cfg.pos_temperature))
            a, w_self = projected_attention(q + sa_pos, q + sa_pos, q, P, f"{p}.self", cfg.heads)
            q_prev = norm(q + a, P, f"{p}.norm0")
            regions = self.region_features(enc, ref)
            pts = self.salient_points(regions, i)
            q_new, q_pos = self.resample(regions, ref, pts)
            q_new, q_pos, coeffs = self.reweight(q_new, q_pos, q_prev, i)
            attn, w_cross = self.cross_attention(q_new, q_pos, enc, i)
            q = norm(q_new + attn, P, f"{p}.norm1")
            q = norm(q + ffn(q, P, f"{p}.ffn"), P, f"{p}.norm2")
            logits = linear(q, P, "head.cls")
            delta = linear(T.relu(linear(q, P, "head.box1")), P, "head.box2")
            base = ref_logit if i == 0 else T.inverse_sigmoid(Tensor(ref))
            boxes = T.sigmoid(base + delta)
            if trace:
                rec.update(points=pts.data, coeffs=(coeffs[0].data, coeffs[1].data),
                           cross_weights=w_cross.data, self_weights=w_self.data, regions=regions.data)
            outputs.append(LayerOutput(logits, boxes, QueryState(q_new, q_pos), rec))
            ref = boxes.data
        return outputs

    def forward(self, images, trace: bool = False, refs: list | None = None) -> list[LayerOutput]:
        imgs = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        if imgs.ndim == 2:
            imgs = imgs[None, None]
        elif imgs.ndim == 3:
            imgs = imgs[:, None]
        return self.decoder(self.encoder(self.backbone(Tensor(imgs))), trace=trace, refs=refs)

    __call__ = forward

    def predict(self, images) -> list[list[Detection]]:
        """Final-layer detections per image, N per image, unsorted."""
        with T.no_grad():
            out = self.forward(images)[-1]
        scores, boxes = scores_and_boxes(out)
        return [[Detection(boxes[b, n].copy(), float(scores[b, n]), 0) for n in range(boxes.shape[1])]
                for b in range(boxes.shape[0])]


def scores_and_boxes(out: LayerOutput) -> tuple[np.ndarray, np.ndarray]:
    """Table-class probability (class 0 of the softmax) and boxes, as arrays."""
    z = out.logits.data
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    prob = e / e.sum(axis=-1, keepdims=True)
    return prob[..., 0], out.boxes.data
