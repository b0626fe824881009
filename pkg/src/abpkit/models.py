"""Feature extractor and seq2seq backbones, built on the autodiff engine.

The extractor stacks dilated causal conv blocks (batchnorm -> conv ->
ReLU), pools over time, optionally fuses per-window morphology/PTT
scalars, and runs a three-layer FC head to an embedding. Two backbones
map the extractor's sequence features plus the embedding to one output
sample per input sample: a 1-D U-Net (embedding broadcast-added at the
bottleneck) and a small transformer encoder over 16-sample patches with
the embedding prepended as a context token.

Parameters live in flat name->array dicts so the trainer can bind them as
tape leaves; batchnorm running statistics live in a separate state dict.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray

__all__ = [
    "FeatureExtractorConfig",
    "BackboneConfig",
    "ModelBundle",
    "build_bundle",
    "extractor_forward",
    "unet_forward",
    "transformer_forward",
    "bundle_forward",
    "reinit_extractor",
    "save_checkpoint",
    "load_checkpoint",
    "params_checksum",
]

PATCH_LEN = 16


@dataclass(frozen=True)
class FeatureExtractorConfig:
    in_channels: int = 1
    conv_channels: int = 16
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    fc_widths: tuple[int, int, int] = (256, 128, 64)
    embed_dim: int = 64
    use_gradients: bool = True
    use_morphology: bool = True
    ptt_mode: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.conv_channels, self.kernel, self.embed_dim) < 1:
            raise ValueError("extractor dims must be positive")
        if len(self.fc_widths) != 3:
            raise ValueError("fc_widths must have exactly 3 entries")
        if self.embed_dim != self.fc_widths[-1]:
            raise ValueError("embed_dim must equal the last FC width")

    @property
    def conv_in_channels(self) -> int:
        return self.in_channels * (3 if self.use_gradients else 1)

    @property
    def n_aux(self) -> int:
        return (11 if self.use_morphology else 0) + (1 if self.ptt_mode else 0)


@dataclass(frozen=True)
class UnetConfig:
    depth: int = 3
    base_channels: int = 8


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 2
    model_dim: int = 64
    ff_dim: int = 128


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "unet"
    window_len: int = 512
    unet: UnetConfig = field(default_factory=UnetConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)

    def __post_init__(self):
        if self.kind not in ("unet", "transformer"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "unet" and self.window_len % (2**self.unet.depth) != 0:
            raise ValueError(
                f"window_len {self.window_len} not divisible by 2^{self.unet.depth}"
            )
        if self.kind == "transformer":
            if self.transformer.model_dim % self.transformer.heads != 0:
                raise ValueError("model_dim must be divisible by heads")
            if self.window_len % PATCH_LEN != 0:
                raise ValueError(f"window_len must be divisible by {PATCH_LEN}")


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _init_extractor(cfg: FeatureExtractorConfig, rng) -> tuple[dict, dict]:
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    c_in = cfg.conv_in_channels
    for i, _d in enumerate(cfg.dilations):
        params[f"ext.conv{i}.bn.gamma"] = np.ones((1, c_in, 1))
        params[f"ext.conv{i}.bn.beta"] = np.zeros((1, c_in, 1))
        state[f"ext.conv{i}.bn.mean"] = np.zeros((1, c_in, 1))
        state[f"ext.conv{i}.bn.var"] = np.ones((1, c_in, 1))
        params[f"ext.conv{i}.w"] = _he_uniform(
            rng, (cfg.conv_channels, c_in, cfg.kernel), c_in * cfg.kernel
        )
        params[f"ext.conv{i}.b"] = np.zeros((1, cfg.conv_channels, 1))
        c_in = cfg.conv_channels
    width_in = cfg.conv_channels + cfg.n_aux
    for i, width in enumerate(cfg.fc_widths):
        params[f"ext.fc{i}.bn.gamma"] = np.ones((1, width_in))
        params[f"ext.fc{i}.bn.beta"] = np.zeros((1, width_in))
        state[f"ext.fc{i}.bn.mean"] = np.zeros((1, width_in))
        state[f"ext.fc{i}.bn.var"] = np.ones((1, width_in))
        params[f"ext.fc{i}.w"] = _he_uniform(rng, (width_in, width), width_in)
        params[f"ext.fc{i}.b"] = np.zeros((1, width))
        width_in = width
    return params, state


def _unet_channel_plan(cfg: FeatureExtractorConfig, u: UnetConfig) -> list[tuple[int, int]]:
    plan = []
    c = cfg.conv_channels
    for level in range(u.depth):
        out = u.base_channels * (2**level)
        plan.append((c, out))
        c = out
    return plan


def _init_unet(
    ext: FeatureExtractorConfig, bb: BackboneConfig, rng
) -> tuple[dict, dict]:
    u = bb.unet
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}

    def conv_block(name, cin, cout, k=3):
        params[f"{name}.w"] = _he_uniform(rng, (cout, cin, k), cin * k)
        params[f"{name}.b"] = np.zeros((1, cout, 1))
        params[f"{name}.bn.gamma"] = np.ones((1, cout, 1))
        params[f"{name}.bn.beta"] = np.zeros((1, cout, 1))
        state[f"{name}.bn.mean"] = np.zeros((1, cout, 1))
        state[f"{name}.bn.var"] = np.ones((1, cout, 1))

    plan = _unet_channel_plan(ext, u)
    for level, (cin, cout) in enumerate(plan):
        conv_block(f"bb.enc{level}", cin, cout)
    c_bneck = u.base_channels * (2**u.depth)
    conv_block("bb.bneck", plan[-1][1], c_bneck)
    params["bb.embed.w"] = _he_uniform(rng, (ext.embed_dim, c_bneck), ext.embed_dim)
    params["bb.embed.b"] = np.zeros((1, c_bneck))
    c_up = c_bneck
    for level in reversed(range(u.depth)):
        skip = plan[level][1]
        conv_block(f"bb.dec{level}", c_up + skip, skip)
        c_up = skip
    params["bb.head.w"] = _he_uniform(rng, (1, c_up, 1), c_up)
    params["bb.head.b"] = np.zeros((1, 1, 1))
    return params, state


def _init_transformer(ext: FeatureExtractorConfig, bb: BackboneConfig, rng) -> dict:
    t = bb.transformer
    d = t.model_dim
    patch_feat = ext.conv_channels * PATCH_LEN
    params: dict[str, np.ndarray] = {
        "bb.patch.w": _he_uniform(rng, (patch_feat, d), patch_feat),
        "bb.patch.b": np.zeros((1, d)),
        "bb.ctx.w": _he_uniform(rng, (ext.embed_dim, d), ext.embed_dim),
        "bb.ctx.b": np.zeros((1, d)),
    }
    for l in range(t.layers):
        for name in ("q", "k", "v", "o"):
            params[f"bb.l{l}.attn.{name}.w"] = _he_uniform(rng, (d, d), d)
            params[f"bb.l{l}.attn.{name}.b"] = np.zeros((1, d))
        params[f"bb.l{l}.ln1.g"] = np.ones((1, 1, d))
        params[f"bb.l{l}.ln1.b"] = np.zeros((1, 1, d))
        params[f"bb.l{l}.ff.w1"] = _he_uniform(rng, (d, t.ff_dim), d)
        params[f"bb.l{l}.ff.b1"] = np.zeros((1, t.ff_dim))
        params[f"bb.l{l}.ff.w2"] = _he_uniform(rng, (t.ff_dim, d), t.ff_dim)
        params[f"bb.l{l}.ff.b2"] = np.zeros((1, d))
        params[f"bb.l{l}.ln2.g"] = np.ones((1, 1, d))
        params[f"bb.l{l}.ln2.b"] = np.zeros((1, 1, d))
    params["bb.head.w"] = _he_uniform(rng, (d, PATCH_LEN), d)
    params["bb.head.b"] = np.zeros((1, PATCH_LEN))
    return params


@dataclass
class ModelBundle:
    """Extractor + backbone parameters with configs and a seed.

    ``target_mean``/``target_std`` hold the affine the trainer fits on its
    training targets; predictions are mapped back through it at eval time.
    """

    extractor_cfg: FeatureExtractorConfig
    backbone_cfg: BackboneConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    seed: int
    target_mean: float = 0.0
    target_std: float = 1.0

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            extractor_cfg=self.extractor_cfg,
            backbone_cfg=self.backbone_cfg,
            params={k: v.copy() for k, v in self.params.items()},
            state={k: v.copy() for k, v in self.state.items()},
            seed=self.seed,
            target_mean=self.target_mean,
            target_std=self.target_std,
        )

    def backbone_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("bb.")}

    def extractor_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("ext.")}


def build_bundle(
    extractor_cfg: FeatureExtractorConfig,
    backbone_cfg: BackboneConfig,
    seed: int = 0,
) -> ModelBundle:
    rng = np.random.default_rng(seed)
    params, state = _init_extractor(extractor_cfg, rng)
    if backbone_cfg.kind == "unet":
        bb_params, bb_state = _init_unet(extractor_cfg, backbone_cfg, rng)
        params.update(bb_params)
        state.update(bb_state)
    else:
        params.update(_init_transformer(extractor_cfg, backbone_cfg, rng))
    return ModelBundle(
        extractor_cfg=extractor_cfg,
        backbone_cfg=backbone_cfg,
        params=params,
        state=state,
        seed=seed,
    )


def reinit_extractor(bundle: ModelBundle, seed: int) -> ModelBundle:
    """Fresh extractor draw; backbone arrays are copied bit-identically."""
    rng = np.random.default_rng(seed)
    new_params, new_state = _init_extractor(bundle.extractor_cfg, rng)
    out = bundle.copy()
    for k, v in new_params.items():
        out.params[k] = v
    for k, v in new_state.items():
        out.state[k] = v
    out.seed = seed
    return out


def _expand_input_channels(x: np.ndarray, use_gradients: bool, rate: float) -> np.ndarray:
    """Optionally append first/second time-gradient channels (data-side)."""
    if not use_gradients:
        return x
    d1 = np.gradient(x, axis=-1) * rate
    d2 = np.gradient(d1, axis=-1) * rate
    return np.concatenate([x, d1, d2], axis=1)


def extractor_forward(
    p: dict[str, DiffArray],
    state: dict[str, np.ndarray],
    windows: np.ndarray,
    aux: np.ndarray | None,
    cfg: FeatureExtractorConfig,
    training: bool,
    update_stats: bool = True,
    rate: float = 1.0,
) -> tuple[DiffArray, DiffArray]:
    """(batch, channels, len) windows -> (embedding, sequence_features).

    Each conv block runs batchnorm -> dilated causal conv -> ReLU; the
    pooled features, fused with the selected aux scalars, pass through
    three FC blocks of the same normalization order.
    """
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != cfg.in_channels:
        raise ad.ShapeMismatch("extractor_forward", x.shape, (None, cfg.in_channels, None))
    x = _expand_input_channels(x, cfg.use_gradients, rate)
    h = DiffArray(x)
    for i, dilation in enumerate(cfg.dilations):
        h = ad.batch_norm(
            h,
            p[f"ext.conv{i}.bn.gamma"],
            p[f"ext.conv{i}.bn.beta"],
            state[f"ext.conv{i}.bn.mean"],
            state[f"ext.conv{i}.bn.var"],
            axes=(0, 2),
            training=training,
            update_running=update_stats,
        )
        h = ad.causal_conv1d(h, p[f"ext.conv{i}.w"], dilation) + p[f"ext.conv{i}.b"]
        h = ad.relu(h)
    seq_features = h

    pooled = ad.amean(h, axis=2)
    fused = [pooled]
    if cfg.n_aux:
        if aux is None:
            raise ValueError("extractor_forward: config fuses aux but none given")
        aux = np.asarray(aux, dtype=np.float64)
        cols = []
        if cfg.use_morphology:
            cols.append(aux[:, :11])
        if cfg.ptt_mode:
            cols.append(aux[:, 11:12])
        fused.append(DiffArray(np.concatenate(cols, axis=1)))
    z = ad.concat(fused, axis=1) if len(fused) > 1 else pooled
    for i in range(len(cfg.fc_widths)):
        z = ad.batch_norm(
            z,
            p[f"ext.fc{i}.bn.gamma"],
            p[f"ext.fc{i}.bn.beta"],
            state[f"ext.fc{i}.bn.mean"],
            state[f"ext.fc{i}.bn.var"],
            axes=(0,),
            training=training,
            update_running=update_stats,
        )
        z = ad.matmul(z, p[f"ext.fc{i}.w"]) + p[f"ext.fc{i}.b"]
        z = ad.relu(z)
    return z, seq_features


def _downsample2(x: DiffArray) -> DiffArray:
    b, c, t = x.shape
    return ad.amean(ad.reshape(x, (b, c, t // 2, 2)), axis=3)


def _upsample2(x: DiffArray) -> DiffArray:
    b, c, t = x.shape
    e = ad.reshape(x, (b, c, t, 1))
    return ad.reshape(ad.concat([e, e], axis=3), (b, c, 2 * t))


def unet_forward(
    p: dict[str, DiffArray],
    state: dict[str, np.ndarray],
    seq_features: DiffArray,
    embedding: DiffArray,
    ext_cfg: FeatureExtractorConfig,
    bb_cfg: BackboneConfig,
    training: bool = False,
    update_stats: bool = False,
) -> DiffArray:
    """1-D encoder/decoder with skip connections; embedding joins at the
    bottleneck through a learned projection, broadcast over time. Each
    block runs conv -> batchnorm -> ReLU."""
    u = bb_cfg.unet
    b, _, t = seq_features.shape
    if t % (2**u.depth) != 0:
        raise ValueError(f"sequence length {t} not divisible by 2^{u.depth}")

    def block(h, name):
        h = ad.causal_conv1d(h, p[f"{name}.w"]) + p[f"{name}.b"]
        h = ad.batch_norm(
            h,
            p[f"{name}.bn.gamma"],
            p[f"{name}.bn.beta"],
            state[f"{name}.bn.mean"],
            state[f"{name}.bn.var"],
            axes=(0, 2),
            training=training,
            update_running=update_stats,
        )
        return ad.relu(h)

    h = seq_features
    skips = []
    for level in range(u.depth):
        h = block(h, f"bb.enc{level}")
        skips.append(h)
        h = _downsample2(h)
    h = block(h, "bb.bneck")
    ctx = ad.matmul(embedding, p["bb.embed.w"]) + p["bb.embed.b"]
    h = h + ad.reshape(ctx, (b, ctx.shape[1], 1))
    for level in reversed(range(u.depth)):
        h = _upsample2(h)
        h = ad.concat([h, skips[level]], axis=1)
        h = block(h, f"bb.dec{level}")
    out = ad.causal_conv1d(h, p["bb.head.w"]) + p["bb.head.b"]
    return ad.reshape(out, (b, t))


def _sinusoid_positions(n_tokens: int, dim: int) -> np.ndarray:
    pos = np.arange(n_tokens)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _layer_norm(x: DiffArray, g: DiffArray, b: DiffArray, eps: float = 1e-5) -> DiffArray:
    mu = ad.amean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.amean(xc * xc, axis=-1, keepdims=True)
    return (xc / ad.sqrt(var + eps)) * g + b


def _linear_tokens(x: DiffArray, w: DiffArray, bias: DiffArray) -> DiffArray:
    b, s, d = x.shape
    flat = ad.reshape(x, (b * s, d))
    out = ad.matmul(flat, w) + bias
    return ad.reshape(out, (b, s, w.shape[1]))


def transformer_forward(
    p: dict[str, DiffArray],
    seq_features: DiffArray,
    embedding: DiffArray,
    ext_cfg: FeatureExtractorConfig,
    bb_cfg: BackboneConfig,
) -> DiffArray:
    """Patchify into 16-sample tokens, add sinusoidal positions, prepend
    the embedding as a context token, and decode tokens back to samples."""
    t_cfg = bb_cfg.transformer
    b, c, t = seq_features.shape
    if t % PATCH_LEN != 0:
        raise ValueError(f"sequence length {t} not divisible by {PATCH_LEN}")
    n_tok = t // PATCH_LEN
    d = t_cfg.model_dim
    heads = t_cfg.heads
    dh = d // heads

    patches = ad.reshape(seq_features, (b, c, n_tok, PATCH_LEN))
    patches = ad.transpose(patches, (0, 2, 1, 3))
    patches = ad.reshape(patches, (b, n_tok, c * PATCH_LEN))
    tokens = _linear_tokens(patches, p["bb.patch.w"], p["bb.patch.b"])
    tokens = tokens + DiffArray(_sinusoid_positions(n_tok, d)[None, :, :])
    ctx = ad.matmul(embedding, p["bb.ctx.w"]) + p["bb.ctx.b"]
    h = ad.concat([ad.reshape(ctx, (b, 1, d)), tokens], axis=1)
    s = n_tok + 1

    for l in range(t_cfg.layers):
        q = _linear_tokens(h, p[f"bb.l{l}.attn.q.w"], p[f"bb.l{l}.attn.q.b"])
        k = _linear_tokens(h, p[f"bb.l{l}.attn.k.w"], p[f"bb.l{l}.attn.k.b"])
        v = _linear_tokens(h, p[f"bb.l{l}.attn.v.w"], p[f"bb.l{l}.attn.v.b"])

        def split_heads(x):
            x = ad.reshape(x, (b, s, heads, dh))
            x = ad.transpose(x, (0, 2, 1, 3))
            return ad.reshape(x, (b * heads, s, dh))

        qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
        scores = ad.matmul(qh, ad.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(attn, vh)
        mixed = ad.reshape(mixed, (b, heads, s, dh))
        mixed = ad.transpose(mixed, (0, 2, 1, 3))
        mixed = ad.reshape(mixed, (b, s, d))
        mixed = _linear_tokens(mixed, p[f"bb.l{l}.attn.o.w"], p[f"bb.l{l}.attn.o.b"])
        h = _layer_norm(h + mixed, p[f"bb.l{l}.ln1.g"], p[f"bb.l{l}.ln1.b"])

        ff = _linear_tokens(h, p[f"bb.l{l}.ff.w1"], p[f"bb.l{l}.ff.b1"])
        ff = ad.relu(ff)
        ff = _linear_tokens(ff, p[f"bb.l{l}.ff.w2"], p[f"bb.l{l}.ff.b2"])
        h = _layer_norm(h + ff, p[f"bb.l{l}.ln2.g"], p[f"bb.l{l}.ln2.b"])

    h = h[:, 1:, :]  # drop the context token
    out = _linear_tokens(h, p["bb.head.w"], p["bb.head.b"])
    return ad.reshape(out, (b, t))


def bundle_forward(
    bundle: ModelBundle,
    bound: dict[str, DiffArray],
    windows: np.ndarray,
    aux: np.ndarray | None,
    training: bool,
    update_stats: bool = True,
    rate: float = 1.0,
) -> DiffArray:
    """Run extractor then backbone with parameters bound as tape leaves."""
    emb, seq = extractor_forward(
        bound, bundle.state, windows, aux, bundle.extractor_cfg, training, update_stats, rate
    )
    if bundle.backbone_cfg.kind == "unet":
        return unet_forward(
            bound,
            bundle.state,
            seq,
            emb,
            bundle.extractor_cfg,
            bundle.backbone_cfg,
            training,
            update_stats,
        )
    return transformer_forward(bound, seq, emb, bundle.extractor_cfg, bundle.backbone_cfg)


def params_checksum(params: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(params[name].tobytes())
    return digest.hexdigest()


CHECKPOINT_MAGIC = b"ABPCKPT1"


def _config_payload(bundle: ModelBundle) -> dict:
    return {
        "extractor": asdict(bundle.extractor_cfg),
        "backbone": asdict(bundle.backbone_cfg),
        "seed": bundle.seed,
        "target_mean": bundle.target_mean,
        "target_std": bundle.target_std,
    }


def _write_table(buf: io.BufferedIOBase, table: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f8")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())


def _read_table(buf: io.BufferedIOBase) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", buf.read(4))
    table = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
        table[name] = arr
    return table


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Versioned binary: magic, config JSON + digest, param/state tables."""
    payload = json.dumps(_config_payload(bundle), sort_keys=True).encode()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(digest)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        _write_table(fh, bundle.params)
        _write_table(fh, bundle.state)


def load_checkpoint(path) -> ModelBundle:
    """Read a checkpoint and validate parameter shapes against its config."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        digest = fh.read(32)
        (n,) = struct.unpack("<I", fh.read(4))
        payload = fh.read(n)
        if hashlib.sha256(payload).digest() != digest:
            raise ValueError("checkpoint config digest mismatch")
        cfg = json.loads(payload)
        params = _read_table(fh)
        state = _read_table(fh)
    ext = FeatureExtractorConfig(
        **{
            **cfg["extractor"],
            "dilations": tuple(cfg["extractor"]["dilations"]),
            "fc_widths": tuple(cfg["extractor"]["fc_widths"]),
        }
    )
    bb = BackboneConfig(
        kind=cfg["backbone"]["kind"],
        window_len=cfg["backbone"]["window_len"],
        unet=UnetConfig(**cfg["backbone"]["unet"]),
        transformer=TransformerConfig(**cfg["backbone"]["transformer"]),
    )
    reference = build_bundle(ext, bb, seed=cfg["seed"])
    for name, arr in reference.params.items():
        if name not in params or params[name].shape != arr.shape:
            raise ValueError(f"checkpoint parameter {name!r} missing or misshapen")
    return ModelBundle(
        extractor_cfg=ext,
        backbone_cfg=bb,
        params=params,
        state=state,
        seed=cfg["seed"],
        target_mean=cfg["target_mean"],
        target_std=cfg["target_std"],
    )
