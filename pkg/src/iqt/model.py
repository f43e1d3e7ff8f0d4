"""The full quality model: backbone streams -> routing -> encoder/decoder -> head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneSpec, FeatureMap, build_backbone, diff_features, extract_features, normalize_image
from .embedding import assemble_sequence, init_embedding_params, project_and_flatten
from .errors import ConfigError, ShapeError
from .io import ImageBuffer
from .tensor import Tensor
from .transformer import TransformerConfig, decoder_forward, encoder_forward, head_forward, init_transformer_params

STREAMS = ("dist", "ref", "diff")
DIFF_LEVELS = ("feature", "image")


@dataclass(frozen=True)
class Routing:
    encoder: str = "diff"
    decoder: str = "ref"
    diff_level: str = "feature"

    def __post_init__(self):
        if self.encoder not in STREAMS or self.decoder not in STREAMS:
            raise ConfigError(f"streams must be among {STREAMS}, got {self.encoder}/{self.decoder}")
        if self.diff_level not in DIFF_LEVELS:
            raise ConfigError(f"diff_level must be one of {DIFF_LEVELS}, got {self.diff_level!r}")

    @property
    def uses_diff(self):
        return "diff" in (self.encoder, self.decoder)


DEFAULT_ROUTING = Routing()


@dataclass(frozen=True)
class ModelConfig:
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    patch_size: int = 256
    routing: Routing = DEFAULT_ROUTING

    def __post_init__(self):
        if self.backbone.kind == "toy-cnn" and self.patch_size % self.backbone.downsample:
            raise ConfigError(
                f"patch size {self.patch_size} is not divisible by the backbone downsample {self.backbone.downsample}"
            )

    @property
    def grid(self):
        g = self.backbone.grid(self.patch_size)
        return g, g

    @property
    def n_tokens(self):
        h, w = self.grid
        return h * w

    def to_dict(self):
        return {
            "transformer": self.transformer.to_dict(),
            "backbone": self.backbone.to_dict(),
            "patch_size": self.patch_size,
            "routing": {"encoder": self.routing.encoder, "decoder": self.routing.decoder,
                        "diff_level": self.routing.diff_level},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            transformer=TransformerConfig(**d["transformer"]),
            backbone=BackboneSpec.from_dict(d["backbone"]),
            patch_size=int(d["patch_size"]),
            routing=Routing(**d["routing"]),
        )


PRESETS = {
    "iqt": dict(transformer=TransformerConfig(layers=2, heads=4, dim=256, ff_dim=1024, head_dim=512), patch_size=256),
    "iqt-c": dict(transformer=TransformerConfig(layers=1, heads=4, dim=128, ff_dim=1024, head_dim=128), patch_size=192),
    # desk-scale config used by the tests and the overfit check
    "tiny": dict(transformer=TransformerConfig(layers=1, heads=2, dim=32, ff_dim=64, head_dim=32), patch_size=16),
}


def preset_config(name, backbone=None, routing=DEFAULT_ROUTING):
    try:
        p = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return ModelConfig(backbone=backbone or BackboneSpec(), routing=routing, **p)


class IQTModel:
    """Parameters plus the frozen backbone for one ModelConfig."""

    def __init__(self, config, params=None, seed=0, dtype=np.float32, backbone=None):
        self.config = config
        self.dtype = np.dtype(dtype).type
        if params is None:
            params = self.init_params(config, seed, self.dtype)
        self.params = params
        self._backbone = backbone
        n_pos = params["embed.pos_enc"].shape[0]
        if n_pos != 1 + config.n_tokens:
            raise ShapeError(f"position tables hold {n_pos} rows; config expects {1 + config.n_tokens}")

    @staticmethod
    def init_params(config, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        t = config.transformer
        params = init_embedding_params(config.backbone.total_channels, t.dim, config.n_tokens, rng, dtype)
        params.update(init_transformer_params(t, rng, dtype))
        return params

    @property
    def backbone(self):
        if self._backbone is None:
            if self.config.backbone.kind != "toy-cnn":
                raise ConfigError("this model reads features from IQTF files and has no image backbone")
            self._backbone = build_backbone(self.config.backbone)
        return self._backbone

    def with_routing(self, routing):
        return IQTModel(replace(self.config, routing=routing), self.params, dtype=self.dtype, backbone=self._backbone)

    # --- streams ---

    def streams(self, ref, dist):
        """Backbone features ``{'ref', 'dist', 'diff'}`` for one aligned image pair."""
        ref_px = ref.pixels if isinstance(ref, ImageBuffer) else np.asarray(ref)
        dist_px = dist.pixels if isinstance(dist, ImageBuffer) else np.asarray(dist)
        if ref_px.shape != dist_px.shape:
            raise ShapeError(f"reference {ref_px.shape} and distorted {dist_px.shape} images differ in shape")
        f_ref = extract_features(ref_px, self.backbone)
        f_dist = extract_features(dist_px, self.backbone)
        if self.config.routing.diff_level == "image":
            # difference taken on normalized RGB before the backbone
            f_diff = self.backbone(normalize_image(ref_px) - normalize_image(dist_px))
        else:
            f_diff = diff_features(f_ref, f_dist)
        return {"ref": f_ref, "dist": f_dist, "diff": f_diff}

    def feature_streams(self, f_ref, f_dist):
        """Streams from precomputed features (image-level differences are unavailable here)."""
        if self.config.routing.diff_level == "image" and self.config.routing.uses_diff:
            raise ConfigError("image-level differences need images, not feature files")
        return {"ref": f_ref, "dist": f_dist, "diff": diff_features(f_ref, f_dist)}

    def route(self, streams):
        r = self.config.routing
        return streams[r.encoder], streams[r.decoder]

    # --- forward ---

    def forward(self, enc_maps, dec_maps, records=None):
        """Scores (Tensor, shape ``lead``) for feature arrays of shape (*lead, H, W, C)."""
        p, cfg = self.params, self.config.transformer
        enc_x = project_and_flatten(enc_maps, p["embed.proj.w"], p["embed.proj.b"])
        dec_x = project_and_flatten(dec_maps, p["embed.proj.w"], p["embed.proj.b"])
        if enc_x.shape[-2] != self.config.n_tokens:
            raise ShapeError(f"feature grid yields {enc_x.shape[-2]} tokens; model expects {self.config.n_tokens}")
        y0 = assemble_sequence(enc_x, p["embed.token_enc"], p["embed.pos_enc"])
        z0 = assemble_sequence(dec_x, p["embed.token_dec"], p["embed.pos_dec"])
        enc_out = encoder_forward(y0, p, cfg, records)
        dec_out = decoder_forward(z0, enc_out, p, cfg, records)
        return head_forward(dec_out[..., 0:1, :], p)

    def score_streams(self, streams, records=None):
        enc, dec = self.route(streams)
        return float(self.forward(_values(enc), _values(dec), records).data)

    def score_features(self, f_ref, f_dist, records=None):
        return self.score_streams(self.feature_streams(f_ref, f_dist), records)

    def parameter_count(self):
        return int(sum(t.data.size for t in self.params.values()))


def check_shapes(model_config):
    """Build-time check that encoder/decoder preserve (1 + N) x D; returns that shape."""
    model = IQTModel(model_config)
    p, t = model.params, model_config.transformer
    h, w = model_config.grid
    zeros = np.zeros((h, w, model_config.backbone.total_channels), dtype=np.float32)
    x = project_and_flatten(zeros, p["embed.proj.w"], p["embed.proj.b"])
    y0 = assemble_sequence(x, p["embed.token_enc"], p["embed.pos_enc"])
    enc = encoder_forward(y0, p, t)
    dec = decoder_forward(assemble_sequence(x, p["embed.token_dec"], p["embed.pos_dec"]), enc, p, t)
    expected = (1 + model_config.n_tokens, t.dim)
    if enc.shape != expected or dec.shape != expected:
        raise ShapeError(f"encoder {enc.shape} / decoder {dec.shape} differ from {expected}")
    return expected


def _values(f):
    return f.values if isinstance(f, FeatureMap) else np.asarray(f)


def as_tensor_dict(arrays, dtype=np.float32):
    return {k: Tensor(np.asarray(v), requires_grad=True, dtype=dtype) for k, v in arrays.items()}
