"""Model assembly: residual frame encoder feeding a dilated causal TCN.

Two presets are built in. "paper" is the full-size configuration
(50x3x224x224 clips, 512-d features, TCN 8 levels / 128 hidden /
kernel 7 / dropout 0.25, 4 classes). "desk" is a tiny variant with the
same topology that trains on a laptop CPU in minutes.
"""

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import nn
from .errors import ConfigurationError, DimensionError, ParameterError
from .rng import PURPOSE_INIT, DropoutRng, SeedStream
from .tensor import Tensor


def receptive_field(levels, kernel):
    """Trailing time steps visible to the last output of a TCN with two
    causal convs per level and dilation 2^i at level i."""
    if levels < 0:
        raise ParameterError(f"levels must be >= 0, got {levels}")
    if kernel < 1:
        raise ParameterError(f"kernel must be >= 1, got {kernel}")
    return 1 + 2 * (kernel - 1) * (2**levels - 1)


@dataclass(frozen=True)
class EncoderConfig:
    stage_widths: tuple
    blocks_per_stage: tuple
    input_channels: int = 3
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True

    def __post_init__(self):
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigurationError(
                f"stage_widths has {len(self.stage_widths)} stages but blocks_per_stage "
                f"has {len(self.blocks_per_stage)}"
            )
        if len(self.stage_widths) == 0:
            raise ConfigurationError("encoder needs at least one stage")
        if any(w < 1 for w in self.stage_widths) or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigurationError("stage widths and block counts must be >= 1")


@dataclass(frozen=True)
class TcnConfig:
    levels: int = 8
    hidden: int = 128
    kernel: int = 7
    dropout: float = 0.25

    def __post_init__(self):
        if self.levels < 0:
            raise ConfigurationError(f"tcn levels must be >= 0, got {self.levels}")
        if self.hidden < 1:
            raise ConfigurationError(f"tcn hidden must be >= 1, got {self.hidden}")
        if self.kernel < 1:
            raise ConfigurationError(f"tcn kernel must be >= 1, got {self.kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"tcn dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    feature_dim: int = 512
    tcn: TcnConfig = field(default_factory=TcnConfig)
    num_classes: int = 4
    clip_len: int = 50
    frame_size: tuple = (224, 224)
    head: str = "tcn"

    def __post_init__(self):
        if self.feature_dim != self.encoder.stage_widths[-1]:
            raise ConfigurationError(
                f"feature_dim {self.feature_dim} must equal the last stage width "
                f"{self.encoder.stage_widths[-1]} (global average pooling preserves channels)"
            )
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.clip_len < 1:
            raise ConfigurationError(f"clip_len must be >= 1, got {self.clip_len}")
        if self.head not in ("tcn", "meanpool"):
            raise ConfigurationError(f"head must be 'tcn' or 'meanpool', got {self.head!r}")
        if self.head == "tcn":
            rf = receptive_field(self.tcn.levels, self.tcn.kernel)
            if rf < self.clip_len:
                raise ConfigurationError(
                    f"receptive field {rf} is shorter than clip_len {self.clip_len}"
                )


def preset_config(name, head="tcn"):
    if name == "paper":
        enc = EncoderConfig(
            stage_widths=(64, 128, 256, 512),
            blocks_per_stage=(2, 2, 2, 2),
            input_channels=3,
            stem_kernel=7,
            stem_stride=2,
            stem_pool=True,
        )
        return ModelConfig(
            encoder=enc,
            feature_dim=512,
            tcn=TcnConfig(levels=8, hidden=128, kernel=7, dropout=0.25),
            num_classes=4,
            clip_len=50,
            frame_size=(224, 224),
            head=head,
        )
    if name == "desk":
        enc = EncoderConfig(
            stage_widths=(16, 32),
            blocks_per_stage=(1, 1),
            input_channels=3,
            stem_kernel=3,
            stem_stride=2,
            stem_pool=False,
        )
        return ModelConfig(
            encoder=enc,
            feature_dim=32,
            tcn=TcnConfig(levels=4, hidden=32, kernel=3, dropout=0.25),
            num_classes=4,
            clip_len=16,
            frame_size=(32, 32),
            head=head,
        )
    raise ParameterError(f"unknown preset {name!r}")


# -- flat key=value serialization ----------------------------------------------

_CONFIG_KEYS = (
    "encoder.stage_widths",
    "encoder.blocks_per_stage",
    "encoder.input_channels",
    "encoder.stem_kernel",
    "encoder.stem_stride",
    "encoder.stem_pool",
    "feature_dim",
    "tcn.levels",
    "tcn.hidden",
    "tcn.kernel",
    "tcn.dropout",
    "num_classes",
    "clip_len",
    "frame_size",
    "head",
)


def _ints_csv(values):
    return ",".join(str(int(v)) for v in values)


def config_to_text(cfg):
    """Flat key=value block, one field per line, fixed key order."""
    enc = cfg.encoder
    values = {
        "encoder.stage_widths": _ints_csv(enc.stage_widths),
        "encoder.blocks_per_stage": _ints_csv(enc.blocks_per_stage),
        "encoder.input_channels": str(enc.input_channels),
        "encoder.stem_kernel": str(enc.stem_kernel),
        "encoder.stem_stride": str(enc.stem_stride),
        "encoder.stem_pool": "1" if enc.stem_pool else "0",
        "feature_dim": str(cfg.feature_dim),
        "tcn.levels": str(cfg.tcn.levels),
        "tcn.hidden": str(cfg.tcn.hidden),
        "tcn.kernel": str(cfg.tcn.kernel),
        "tcn.dropout": repr(float(cfg.tcn.dropout)),
        "num_classes": str(cfg.num_classes),
        "clip_len": str(cfg.clip_len),
        "frame_size": _ints_csv(cfg.frame_size),
        "head": cfg.head,
    }
    return "".join(f"{k}={values[k]}\n" for k in _CONFIG_KEYS)


def config_from_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno} is not key=value: {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"duplicate config key {key!r}")
        values[key] = raw.strip()
    missing = [k for k in _CONFIG_KEYS if k not in values]
    if missing:
        raise ConfigurationError(f"config is missing keys: {', '.join(missing)}")
    try:
        ints = lambda s: tuple(int(v) for v in s.split(","))
        enc = EncoderConfig(
            stage_widths=ints(values["encoder.stage_widths"]),
            blocks_per_stage=ints(values["encoder.blocks_per_stage"]),
            input_channels=int(values["encoder.input_channels"]),
            stem_kernel=int(values["encoder.stem_kernel"]),
            stem_stride=int(values["encoder.stem_stride"]),
            stem_pool=values["encoder.stem_pool"] == "1",
        )
        return ModelConfig(
            encoder=enc,
            feature_dim=int(values["feature_dim"]),
            tcn=TcnConfig(
                levels=int(values["tcn.levels"]),
                hidden=int(values["tcn.hidden"]),
                kernel=int(values["tcn.kernel"]),
                dropout=float(values["tcn.dropout"]),
            ),
            num_classes=int(values["num_classes"]),
            clip_len=int(values["clip_len"]),
            frame_size=ints(values["frame_size"]),
            head=values["head"],
        )
    except ValueError as exc:
        raise ConfigurationError(f"malformed config value: {exc}") from None


# -- the assembled model ---------------------------------------------------------


class EngagementModel:
    """Per-frame residual encoder plus a temporal classification head.

    The "tcn" head runs the feature sequence through dilated causal
    temporal blocks and classifies the final time step; the "meanpool"
    head averages features over time before the classifier, which makes
    it invariant to frame order by construction.
    """

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.mode = "train"
        self.seed = seed
        self.params = nn.ParamStore()
        self.dropout_rng = DropoutRng(seed)
        self._tcn_specs = []
        self._build(SeedStream(seed, PURPOSE_INIT))

    def _build(self, stream):
        cfg = self.config
        enc = cfg.encoder
        dt = self.dtype
        stem_ch = enc.stage_widths[0]
        self.params.add(
            "encoder.stem.conv.weight",
            nn.he_init(
                (stem_ch, enc.input_channels, enc.stem_kernel, enc.stem_kernel),
                enc.input_channels * enc.stem_kernel * enc.stem_kernel,
                stream.generator(),
                dt,
            ),
        )
        nn.init_batchnorm(self.params, "encoder.stem.bn", stem_ch, dt)
        in_ch = stem_ch
        for si, (width, blocks) in enumerate(zip(enc.stage_widths, enc.blocks_per_stage)):
            for bi in range(blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                nn.init_basic_block2d(
                    self.params,
                    f"encoder.stage{si}.block{bi}",
                    in_ch,
                    width,
                    stride,
                    stream.generator(),
                    dt,
                )
                in_ch = width
        if cfg.head == "tcn":
            for i in range(cfg.tcn.levels):
                spec = nn.TemporalBlockSpec(
                    in_channels=cfg.feature_dim if i == 0 else cfg.tcn.hidden,
                    out_channels=cfg.tcn.hidden,
                    kernel=cfg.tcn.kernel,
                    dilation=2**i,
                    dropout_p=cfg.tcn.dropout,
                )
                self._tcn_specs.append(spec)
                nn.init_temporal_block(self.params, f"tcn.level{i}", spec, stream.generator(), dt)
            head_in = cfg.tcn.hidden if cfg.tcn.levels > 0 else cfg.feature_dim
        else:
            head_in = cfg.feature_dim
        self.params.add(
            "head.fc.weight", nn.he_init((cfg.num_classes, head_in), head_in, stream.generator(), dt)
        )
        self.params.add("head.fc.bias", nn.zeros((cfg.num_classes,), dt))

    # -- mode handling --

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def receptive_field(self):
        return receptive_field(self.config.tcn.levels, self.config.tcn.kernel)

    # -- encoder --

    def encode_frames(self, frames, conv_impl="im2col"):
        """Run a stack of frames [N,C,H,W] through the encoder to [N,feature_dim]."""
        cfg = self.config
        enc = cfg.encoder
        if frames.data.ndim != 4:
            raise DimensionError(f"encoder input must be 4-d, got {frames.data.ndim}-d")
        n, c, h, w = frames.shape
        if c != enc.input_channels or (h, w) != tuple(cfg.frame_size):
            raise DimensionError(
                f"frame extents {c}x{h}x{w} do not match configured "
                f"{enc.input_channels}x{cfg.frame_size[0]}x{cfg.frame_size[1]}"
            )
        pad = nn.floor_pad(h, enc.stem_kernel, enc.stem_stride, enc.stem_kernel // 2)
        x = F.conv2d(
            frames,
            self.params["encoder.stem.conv.weight"],
            None,
            stride=enc.stem_stride,
            padding=pad,
            impl=conv_impl,
        )
        x = nn.apply_batchnorm(x, self.params, "encoder.stem.bn", self.mode)
        x = F.relu(x)
        if enc.stem_pool:
            pool_pad = nn.floor_pad(x.shape[2], 3, 2, 1)
            x = F.maxpool2d(x, 3, 2, padding=pool_pad)
        for si in range(len(enc.stage_widths)):
            for bi in range(enc.blocks_per_stage[si]):
                stride = 2 if (si > 0 and bi == 0) else 1
                x = nn.basic_block2d(
                    x, self.params, f"encoder.stage{si}.block{bi}", stride, self.mode, conv_impl
                )
        return F.global_avgpool2d(x)

    def encode_clip(self, clip, conv_impl="im2col"):
        """Encode one clip [L,C,H,W] to a feature sequence [L,feature_dim]."""
        if clip.data.ndim != 4:
            raise DimensionError(f"clip must be 4-d, got {clip.data.ndim}-d")
        if clip.shape[0] != self.config.clip_len:
            raise DimensionError(
                f"clip length {clip.shape[0]} does not match configured {self.config.clip_len}"
            )
        return self.encode_frames(clip, conv_impl)

    # -- heads --

    def _head_batch(self, features):
        """Classify a feature-sequence batch [B,L,F] to logits [B,K]."""
        if features.data.ndim != 3:
            raise DimensionError(f"head input must be 3-d, got {features.data.ndim}-d")
        if features.shape[2] != self.config.feature_dim:
            raise DimensionError(
                f"feature extent {features.shape[2]} does not match configured "
                f"{self.config.feature_dim}"
            )
        if self.config.head == "tcn":
            x = features.transpose((0, 2, 1))
            for i, spec in enumerate(self._tcn_specs):
                x = nn.temporal_block(
                    x, spec, self.params, f"tcn.level{i}", self.mode, dropout_rng=self.dropout_rng
                )
            x = F.last_step(x)
        else:
            x = F.mean_over_time(features)
        return F.linear(x, self.params["head.fc.weight"], self.params["head.fc.bias"])

    def tcn_head(self, features):
        """Classify one feature sequence [L,F] through the temporal blocks."""
        if self.config.head != "tcn":
            raise ConfigurationError("model was built with the meanpool head")
        return self._head_batch(features.reshape((1,) + features.shape)).reshape(
            (self.config.num_classes,)
        )

    def mean_pool_head(self, features):
        """Classify one feature sequence [L,F] by its time-averaged feature."""
        if self.config.head != "meanpool":
            raise ConfigurationError("model was built with the tcn head")
        return self._head_batch(features.reshape((1,) + features.shape)).reshape(
            (self.config.num_classes,)
        )

    # -- full forward --

    def forward(self, clip, conv_impl="im2col"):
        """Logits [K] for one clip [L,C,H,W]."""
        features = self.encode_clip(clip, conv_impl)
        logits = self._head_batch(features.reshape((1,) + features.shape))
        return logits.reshape((self.config.num_classes,))

    def forward_batch(self, clips, conv_impl="im2col"):
        """Logits [B,K] for a clip batch [B,L,C,H,W].

        All B*L frames pass through the encoder (and its batchnorms) as
        one frame batch.
        """
        if clips.data.ndim != 5:
            raise DimensionError(f"clip batch must be 5-d, got {clips.data.ndim}-d")
        b, length = clips.shape[0], clips.shape[1]
        if length != self.config.clip_len:
            raise DimensionError(
                f"clip length {length} does not match configured {self.config.clip_len}"
            )
        frames = clips.reshape((b * length,) + tuple(clips.shape[2:]))
        feats = self.encode_frames(frames, conv_impl)
        return self._head_batch(feats.reshape((b, length, self.config.feature_dim)))

    def predict(self, clip):
        """Predicted class for one clip; ties break toward the lower index."""
        logits = self.forward(clip)
        return int(np.argmax(logits.data))
