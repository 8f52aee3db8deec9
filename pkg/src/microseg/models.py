"""Model zoo: hybrid CNN+Swin segmentation, pure-Swin and pure-CNN baselines,
and the classification variant used for pre-training.

A ``Model`` is a config plus a flat, insertion-ordered name -> Tensor
registry; forward passes are free functions reading that registry.  Stable
prefixes (swin_encoder., cnn_encoder., fusion., bottleneck., decoder.,
head.) let checkpoints transfer between variants by name.

The hybrid network runs two encoders in parallel.  The Swin stream is patch
embedding followed by block stages separated by patch merging; the CNN stream
is a small conv pyramid at the same resolutions.  At every stage the CNN map
is projected onto the Swin channel width and added to the Swin tokens (then
layer-normalized); these fused tokens feed the skip connections and the
bottleneck, while the Swin stream itself continues unmixed.  The decoder
mirrors the encoder with patch expanding, skip concatenation, and transformer
blocks, ending in a 4x expand and a per-token projection to class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from microseg import swin
from microseg import tensor as T
from microseg.tensor import Tensor

__all__ = [
    "ModelConfig",
    "Model",
    "LoadReport",
    "build_model",
    "cnn_forward",
    "tokens_from_map",
    "fuse_features",
    "forward_segmentation",
    "forward_classification",
    "swin_unet_forward",
    "unet_forward",
    "load_pretrained",
    "count_parameters",
]

VARIANTS = ("cs_unet", "swin_unet", "unet", "classifier")

DECODER_BLOCKS_PER_STAGE = 2
BOTTLENECK_BLOCKS = 2


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by all variants.

    depths/heads describe the Swin encoder stages (2 to 4 of them); stage i
    runs at channel width embed_dim * 2^i on a token grid whose side halves
    per stage.  cnn_channels sets the parallel conv pyramid (cs_unet / unet).
    """

    variant: str = "cs_unet"
    input_size: int = 224
    patch: int = 4
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    heads: tuple = (3, 6, 12, 24)
    window: int = 7
    num_classes: int = 2
    cnn_channels: tuple = (96, 192, 384, 768)
    mlp_ratio: float = 4.0
    attn_dropout: float = 0.0
    mlp_dropout: float = 0.0
    fusion_norm: bool = True

    @property
    def num_stages(self):
        return len(self.depths)

    def stage_dim(self, i):
        return self.embed_dim * 2**i

    def stage_grid(self, i):
        return self.input_size // self.patch // 2**i

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; "
                             f"expected one of {VARIANTS}")
        s = self.num_stages
        if not 2 <= s <= 4:
            raise ValueError(f"need 2..4 stages, got {s}")
        if len(self.heads) != s:
            raise ValueError(
                f"len(heads)={len(self.heads)} must equal len(depths)={s}"
            )
        if self.patch < 1:
            raise ValueError("patch must be positive")
        divisor = self.patch * 2 ** (s - 1)
        if self.input_size % divisor:
            raise ValueError(
                f"input_size {self.input_size} not divisible by "
                f"patch * 2^(stages-1) = {divisor}"
            )
        if self.variant != "unet":
            if self.window < 2:
                raise ValueError(f"window must be >= 2, got {self.window}")
            for i in range(s):
                if self.stage_dim(i) % self.heads[i]:
                    raise ValueError(
                        f"stage {i} dim {self.stage_dim(i)} not divisible by "
                        f"heads {self.heads[i]}"
                    )
                g = self.stage_grid(i)
                if g > self.window and g % self.window:
                    raise ValueError(
                        f"stage {i} grid {g} neither divisible by window "
                        f"{self.window} nor small enough for one window"
                    )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.variant in ("cs_unet", "unet") and len(self.cnn_channels) != s:
            raise ValueError(
                f"cnn_channels needs {s} entries, got {len(self.cnn_channels)}"
            )
        for p in (self.attn_dropout, self.mlp_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout probability out of range: {p}")
        return self

    def stage_window(self, i):
        """(effective window, shift allowed) for stage i's token grid."""
        return swin.effective_window(self.stage_grid(i), self.window)

    @staticmethod
    def from_dict(d):
        known = {f.name for f in ModelConfig.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        cfg = ModelConfig(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in d.items()
        })
        return cfg.validate()


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def forward(self, image, rng=None, training=False):
        fn = {
            "cs_unet": forward_segmentation,
            "swin_unet": swin_unet_forward,
            "unet": unet_forward,
            "classifier": forward_classification,
        }[self.config.variant]
        return fn(self, image, rng=rng, training=training)


@dataclass
class LoadReport:
    """How each model parameter fared during checkpoint loading."""

    loaded: list
    skipped: list
    mismatched: list

    def summary(self):
        return (f"loaded {len(self.loaded)}, skipped {len(self.skipped)}, "
                f"mismatched {len(self.mismatched)}")


# -- construction -----------------------------------------------------------------


def _init_conv(reg, name, c_out, c_in, k, rng, transpose=False):
    # Kaiming fan-in scaling; transpose kernels are stored (Cin, Cout, k, k)
    std = np.sqrt(2.0 / (c_in * k * k))
    shape = (c_in, c_out, k, k) if transpose else (c_out, c_in, k, k)
    reg[name + ".weight"] = Tensor(
        rng.normal(0.0, std, size=shape).astype(np.float32),
        requires_grad=True,
    )
    reg[name + ".bias"] = Tensor(np.zeros(c_out, dtype=np.float32),
                                 requires_grad=True)


def _init_cnn_stage(reg, prefix, c_in, c_out, rng):
    _init_conv(reg, prefix + "conv1", c_out, c_in, 3, rng)
    swin.init_layer_norm(reg, prefix + "norm1", c_out)
    _init_conv(reg, prefix + "conv2", c_out, c_out, 3, rng)
    swin.init_layer_norm(reg, prefix + "norm2", c_out)


def _init_swin_encoder(reg, cfg, rng):
    swin.init_patch_embed(reg, "swin_encoder.patch_embed.", cfg.embed_dim,
                          cfg.patch, rng)
    for i, depth in enumerate(cfg.depths):
        dim = cfg.stage_dim(i)
        m, _ = cfg.stage_window(i)
        for j in range(depth):
            swin.init_swin_block(
                reg, f"swin_encoder.stages.{i}.blocks.{j}.", dim,
                cfg.heads[i], m, cfg.mlp_ratio, rng,
            )
        if i < cfg.num_stages - 1:
            swin.init_patch_merging(reg, f"swin_encoder.stages.{i}.merge.",
                                    dim, rng)


def _init_swin_decoder(reg, cfg, rng):
    s = cfg.num_stages
    for j in range(BOTTLENECK_BLOCKS):
        m, _ = cfg.stage_window(s - 1)
        swin.init_swin_block(reg, f"bottleneck.blocks.{j}.",
                             cfg.stage_dim(s - 1), cfg.heads[s - 1], m,
                             cfg.mlp_ratio, rng)
    for d in range(s - 1):
        enc = s - 2 - d  # encoder stage this decoder stage mirrors
        dim_in = cfg.stage_dim(enc + 1)
        dim = cfg.stage_dim(enc)
        prefix = f"decoder.stages.{d}."
        swin.init_patch_expanding(reg, prefix + "expand.", dim_in, 2, rng)
        swin.init_linear(reg, prefix + "reduce", dim, 2 * dim, rng)
        m, _ = cfg.stage_window(enc)
        for j in range(DECODER_BLOCKS_PER_STAGE):
            swin.init_swin_block(reg, prefix + f"blocks.{j}.", dim,
                                 cfg.heads[enc], m, cfg.mlp_ratio, rng)
    swin.init_patch_expanding(reg, "decoder.final_expand.", cfg.embed_dim,
                              4, rng)


def build_model(config, rng):
    """Instantiate a variant with deterministic, seed-driven initialization."""
    cfg = config.validate()
    reg = {}
    s = cfg.num_stages

    if cfg.variant in ("cs_unet", "swin_unet", "classifier"):
        _init_swin_encoder(reg, cfg, rng)

    if cfg.variant in ("cs_unet", "unet"):
        c_prev = 3
        for i, c in enumerate(cfg.cnn_channels):
            _init_cnn_stage(reg, f"cnn_encoder.stages.{i}.", c_prev, c, rng)
            c_prev = c

    if cfg.variant == "cs_unet":
        for i in range(s):
            swin.init_linear(reg, f"fusion.stages.{i}.proj",
                             cfg.stage_dim(i), cfg.cnn_channels[i], rng)
            if cfg.fusion_norm:
                swin.init_layer_norm(reg, f"fusion.stages.{i}.norm",
                                     cfg.stage_dim(i))

    if cfg.variant in ("cs_unet", "swin_unet"):
        _init_swin_decoder(reg, cfg, rng)
        swin.init_linear(reg, "head.proj", cfg.num_classes, cfg.embed_dim, rng)

    if cfg.variant == "classifier":
        swin.init_layer_norm(reg, "head.norm", cfg.stage_dim(s - 1))
        swin.init_linear(reg, "head.fc", cfg.num_classes,
                         cfg.stage_dim(s - 1), rng)

    if cfg.variant == "unet":
        for d in range(s - 1):
            enc = s - 2 - d
            c_in = cfg.cnn_channels[enc + 1]
            c_out = cfg.cnn_channels[enc]
            prefix = f"decoder.stages.{d}."
            _init_conv(reg, prefix + "up", c_out, c_in, 2, rng, transpose=True)
            _init_conv(reg, prefix + "conv1", c_out, 2 * c_out, 3, rng)
            swin.init_layer_norm(reg, prefix + "norm1", c_out)
            _init_conv(reg, prefix + "conv2", c_out, c_out, 3, rng)
            swin.init_layer_norm(reg, prefix + "norm2", c_out)
        c0 = cfg.cnn_channels[0]
        _init_conv(reg, "decoder.final_up1", c0, c0, 2, rng, transpose=True)
        swin.init_layer_norm(reg, "decoder.final_norm", c0)
        _init_conv(reg, "decoder.final_up2", c0, c0, 2, rng, transpose=True)
        _init_conv(reg, "head.conv", cfg.num_classes, c0, 1, rng)

    return Model(config=cfg, params=reg)


def count_parameters(model):
    return int(sum(p.size for p in model.params.values()))


# -- shared forward pieces ------------------------------------------------------------


def _channel_norm(x, gamma, beta):
    # layer norm across channels of a (B, C, H, W) map
    h = x.transpose(0, 2, 3, 1)
    h = T.layer_norm(h, gamma, beta)
    return h.transpose(0, 3, 1, 2)


def _check_input(model, image):
    size = model.config.input_size
    b, c, h, w = image.shape
    if c != 3 or h != size or w != size:
        raise ValueError(
            f"expected input (B, 3, {size}, {size}), got {image.shape}"
        )


def cnn_forward(model, image):
    """Conv pyramid: feature maps at strides 4, 8, 16, ... matching the Swin
    token grids.  Stage 0 applies two stride-2 convs; later stages convolve
    at full resolution then average-pool by 2."""
    _check_input(model, image)
    params = model.params
    maps = []
    x = image
    for i, _c in enumerate(model.config.cnn_channels):
        prefix = f"cnn_encoder.stages.{i}."
        stride = 2 if i == 0 else 1
        x = T.conv2d(x, params[prefix + "conv1.weight"],
                     params[prefix + "conv1.bias"], stride=stride, padding=1)
        x = _channel_norm(x, params[prefix + "norm1.gamma"],
                          params[prefix + "norm1.beta"])
        x = T.gelu(x)
        x = T.conv2d(x, params[prefix + "conv2.weight"],
                     params[prefix + "conv2.bias"], stride=stride, padding=1)
        x = _channel_norm(x, params[prefix + "norm2.gamma"],
                          params[prefix + "norm2.beta"])
        x = T.gelu(x)
        if i > 0:
            x = T.avg_pool2d(x, 2)
        maps.append(x)
    return maps


def tokens_from_map(fmap):
    """(B, C, h, w) -> (B, h*w, C), spatial row-major like the Swin tokens."""
    b, c, h, w = fmap.shape
    return fmap.reshape(b, c, h * w).transpose(0, 2, 1)


def fuse_features(cnn_tokens, swin_tokens, params, prefix, use_norm=True):
    """Project the CNN tokens onto the Swin width, add, then normalize."""
    if cnn_tokens.shape[1] != swin_tokens.shape[1]:
        raise ValueError(
            f"token counts differ: cnn {cnn_tokens.shape[1]} vs "
            f"swin {swin_tokens.shape[1]}"
        )
    projected = T.linear(cnn_tokens, params[prefix + "proj.weight"],
                         params[prefix + "proj.bias"])
    fused = projected + swin_tokens
    if use_norm:
        fused = T.layer_norm(fused, params[prefix + "norm.gamma"],
                             params[prefix + "norm.beta"])
    return fused


def _run_blocks(model, tok, prefix, count, stage_idx, rng, training):
    cfg = model.config
    g = cfg.stage_grid(stage_idx)
    m, can_shift = cfg.stage_window(stage_idx)
    for j in range(count):
        shift = (m // 2) if (j % 2 == 1 and can_shift) else 0
        tok = swin.swin_block(
            tok, model.params, f"{prefix}blocks.{j}.", g, g,
            cfg.heads[stage_idx], m, shift,
            attn_dropout=cfg.attn_dropout, mlp_dropout=cfg.mlp_dropout,
            rng=rng, training=training,
        )
    return tok


def _swin_encoder(model, image, rng, training, fuse_with=None):
    """Run the Swin stages; returns per-stage skip tokens.

    ``fuse_with``: optional list of CNN feature maps; when given, each
    stage's skip is the fused (CNN + Swin) tokens, and the Swin stream itself
    continues unfused.
    """
    cfg = model.config
    params = model.params
    tok = swin.patch_embed(image, params, "swin_encoder.patch_embed.",
                           cfg.patch)
    skips = []
    for i in range(cfg.num_stages):
        tok = _run_blocks(model, tok, f"swin_encoder.stages.{i}.",
                          cfg.depths[i], i, rng, training)
        if fuse_with is None:
            skips.append(tok)
        else:
            skips.append(fuse_features(
                tokens_from_map(fuse_with[i]), tok,
                params, f"fusion.stages.{i}.", use_norm=cfg.fusion_norm,
            ))
        if i < cfg.num_stages - 1:
            tok = swin.patch_merging(tok, params,
                                     f"swin_encoder.stages.{i}.merge.",
                                     cfg.stage_grid(i), cfg.stage_grid(i))
    return skips


def _swin_decoder(model, skips, rng, training):
    cfg = model.config
    params = model.params
    s = cfg.num_stages
    tok = skips[-1]
    for j in range(BOTTLENECK_BLOCKS):
        m, can_shift = cfg.stage_window(s - 1)
        shift = (m // 2) if (j % 2 == 1 and can_shift) else 0
        tok = swin.swin_block(tok, params, f"bottleneck.blocks.{j}.",
                              cfg.stage_grid(s - 1), cfg.stage_grid(s - 1),
                              cfg.heads[s - 1], m, shift,
                              attn_dropout=cfg.attn_dropout,
                              mlp_dropout=cfg.mlp_dropout,
                              rng=rng, training=training)
    for d in range(s - 1):
        enc = s - 2 - d
        prefix = f"decoder.stages.{d}."
        g_in = cfg.stage_grid(enc + 1)
        tok = swin.patch_expanding(tok, params, prefix + "expand.",
                                   g_in, g_in, 2)
        tok = T.concat([tok, skips[enc]], axis=2)
        tok = T.linear(tok, params[prefix + "reduce.weight"],
                       params[prefix + "reduce.bias"])
        tok = _run_blocks(model, tok, prefix, DECODER_BLOCKS_PER_STAGE,
                          enc, rng, training)
    g0 = cfg.stage_grid(0)
    tok = swin.patch_expanding(tok, params, "decoder.final_expand.",
                               g0, g0, 4)
    logits = T.linear(tok, params["head.proj.weight"],
                      params["head.proj.bias"])  # (B, H*W, K)
    b = logits.shape[0]
    size = cfg.input_size
    return logits.reshape(b, size, size, cfg.num_classes).transpose(0, 3, 1, 2)


# -- forward variants ----------------------------------------------------------------


def forward_segmentation(model, image, rng=None, training=False):
    """Hybrid pass: parallel encoders, per-stage fusion, Swin decoder."""
    if model.config.variant != "cs_unet":
        raise ValueError(f"not a cs_unet model: {model.config.variant}")
    _check_input(model, image)
    maps = cnn_forward(model, image)
    skips = _swin_encoder(model, image, rng, training, fuse_with=maps)
    return _swin_decoder(model, skips, rng, training)


def swin_unet_forward(model, image, rng=None, training=False):
    """Pure-transformer pass: raw Swin skips, same decoder shape."""
    if model.config.variant != "swin_unet":
        raise ValueError(f"not a swin_unet model: {model.config.variant}")
    _check_input(model, image)
    skips = _swin_encoder(model, image, rng, training, fuse_with=None)
    return _swin_decoder(model, skips, rng, training)


def unet_forward(model, image, rng=None, training=False):
    """Conv encoder-decoder with concatenating skips."""
    if model.config.variant != "unet":
        raise ValueError(f"not a unet model: {model.config.variant}")
    _check_input(model, image)
    cfg = model.config
    params = model.params
    maps = cnn_forward(model, image)
    x = maps[-1]
    for d in range(cfg.num_stages - 1):
        enc = cfg.num_stages - 2 - d
        prefix = f"decoder.stages.{d}."
        x = T.conv_transpose2d(x, params[prefix + "up.weight"],
                               params[prefix + "up.bias"], stride=2)
        x = T.concat([x, maps[enc]], axis=1)
        x = T.conv2d(x, params[prefix + "conv1.weight"],
                     params[prefix + "conv1.bias"], padding=1)
        x = _channel_norm(x, params[prefix + "norm1.gamma"],
                          params[prefix + "norm1.beta"])
        x = T.gelu(x)
        x = T.conv2d(x, params[prefix + "conv2.weight"],
                     params[prefix + "conv2.bias"], padding=1)
        x = _channel_norm(x, params[prefix + "norm2.gamma"],
                          params[prefix + "norm2.beta"])
        x = T.gelu(x)
    x = T.conv_transpose2d(x, params["decoder.final_up1.weight"],
                           params["decoder.final_up1.bias"], stride=2)
    x = T.gelu(_channel_norm(x, params["decoder.final_norm.gamma"],
                             params["decoder.final_norm.beta"]))
    x = T.conv_transpose2d(x, params["decoder.final_up2.weight"],
                           params["decoder.final_up2.bias"], stride=2)
    return T.conv2d(x, params["head.conv.weight"], params["head.conv.bias"])


def encode(model, image, rng=None, training=False):
    """Classifier trunk: Swin stages, final norm, global average pool."""
    _check_input(model, image)
    skips = _swin_encoder(model, image, rng, training, fuse_with=None)
    tok = skips[-1]
    tok = T.layer_norm(tok, model.params["head.norm.gamma"],
                       model.params["head.norm.beta"])
    return tok.mean(axis=1)  # (B, C_last)


def forward_classification(model, image, rng=None, training=False):
    if model.config.variant != "classifier":
        raise ValueError(f"not a classifier model: {model.config.variant}")
    pooled = encode(model, image, rng, training)
    return T.linear(pooled, model.params["head.fc.weight"],
                    model.params["head.fc.bias"])


# -- transfer -------------------------------------------------------------------------


def _decoder_source_name(name, num_stages):
    """Checkpoint name whose weights seed this decoder/bottleneck parameter.

    Decoder stage d mirrors encoder stage (S-2-d); the bottleneck mirrors the
    deepest encoder stage.  Only block-internal tensors map.
    """
    parts = name.split(".")
    if name.startswith("bottleneck.blocks."):
        rest = ".".join(parts[2:])
        return f"swin_encoder.stages.{num_stages - 1}.blocks.{rest}"
    if name.startswith("decoder.stages.") and parts[3] == "blocks":
        d = int(parts[2])
        rest = ".".join(parts[4:])
        enc = num_stages - 2 - d
        return f"swin_encoder.stages.{enc}.blocks.{rest}"
    return None


def load_pretrained(model, tensors, policy="encoder_only"):
    """Copy name- and shape-matched tensors from a checkpoint mapping.

    encoder_only: plain name matching.  encoder_and_decoder: additionally
    seeds decoder and bottleneck blocks from the mirrored encoder stages of
    the checkpoint.  Returns a LoadReport partitioning the model's names.
    """
    if policy not in ("encoder_only", "encoder_and_decoder"):
        raise ValueError(f"unknown policy {policy!r}")
    loaded, skipped, mismatched = [], [], []
    for name, param in model.params.items():
        source = None
        if name in tensors:
            source = tensors[name]
        elif policy == "encoder_and_decoder":
            alt = _decoder_source_name(name, model.config.num_stages)
            if alt is not None and alt in tensors:
                source = tensors[alt]
        if source is None:
            skipped.append(name)
            continue
        if tuple(source.shape) != tuple(param.shape):
            mismatched.append(name)
            continue
        param.data = np.array(source, dtype=param.data.dtype, copy=True)
        loaded.append(name)
    return LoadReport(loaded=loaded, skipped=skipped, mismatched=mismatched)
