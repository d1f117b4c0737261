"""Compact siamese encoder / dual-decoder network with pluggable extras.

Topology: a four-stage weight-sharing encoder (each stage a stride-2
downsampling convolution followed by a 3x3 conv + group norm + ReLU) feeds
two decoders. The semantic decoder restores a building localization map from
pre-event features alone; the change decoder fuses pre and post features at
every stage and restores a damage classification map. Both heads emit logits
at the input resolution (2 channels for localization, 5 for damage).

Four independently switchable extras mirror the experiment matrix:

* ``enable_focal``    -- adds the focal term to the damage-head loss
                         (zero extra parameters; see :mod:`bdakit.losses`),
* ``enable_ag_building`` / ``enable_ag_damage`` -- attention-gate the three
                         skip connections of one decoder,
* ``enable_align``    -- per-stage flow modules that warp pre features onto
                         the post grid before either decoder consumes them.

A disabled extra contributes no parameters and leaves the forward pass
bit-identical; parameter initialization draws base weights first so that
variants sharing a seed share their base network exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, ContractError, Parameter, Tensor
from .blocks import AlignmentModule, AttentionGate, gn_groups, _conv_param
from .losses import FocalConfig, LossWeights
from .rng import Rng

_DOWN_FACTOR = 16  # four stride-2 stages


@dataclass
class ModelConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    enable_focal: bool = False
    enable_ag_building: bool = False
    enable_ag_damage: bool = False
    enable_align: bool = False
    input_channels: int = 3
    loc_classes: int = 2
    dmg_classes: int = 5
    focal: FocalConfig = field(default_factory=FocalConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        ch = tuple(self.stage_channels)
        if len(ch) != 4:
            raise ConfigError("exactly four encoder stages are supported")
        if any(c < 1 for c in ch) or any(a >= b for a, b in zip(ch, ch[1:])):
            raise ConfigError("stage channels must be positive and strictly increasing")
        if self.input_channels < 1 or self.loc_classes != 2 or self.dmg_classes != 5:
            raise ConfigError("heads are fixed at 2 localization / 5 damage channels")
        self.focal.validate()
        self.loss_weights.validate()


def variant_name(cfg: ModelConfig) -> str:
    """Canonical experiment name: '+'-joined FOCAL, ALIGN, AGB|AGBD|AGD."""
    tokens = []
    if cfg.enable_focal:
        tokens.append("FOCAL")
    if cfg.enable_align:
        tokens.append("ALIGN")
    if cfg.enable_ag_building and cfg.enable_ag_damage:
        tokens.append("AGBD")
    elif cfg.enable_ag_building:
        tokens.append("AGB")
    elif cfg.enable_ag_damage:
        tokens.append("AGD")  # extension: never evaluated alone in the reference matrix
    return " + ".join(tokens) if tokens else "Baseline"


def variant_flags(name: str) -> dict[str, bool]:
    """Inverse of :func:`variant_name` for sweep drivers."""
    flags = {"enable_focal": False, "enable_align": False,
             "enable_ag_building": False, "enable_ag_damage": False}
    if name.strip() == "Baseline":
        return flags
    for token in [t.strip() for t in name.split("+")]:
        if token == "FOCAL":
            flags["enable_focal"] = True
        elif token == "ALIGN":
            flags["enable_align"] = True
        elif token == "AGB":
            flags["enable_ag_building"] = True
        elif token == "AGD":
            flags["enable_ag_damage"] = True
        elif token == "AGBD":
            flags["enable_ag_building"] = True
            flags["enable_ag_damage"] = True
        else:
            raise ConfigError(f"unknown variant token {token!r}")
    return flags


VARIANT_ORDER = [
    "Baseline", "AGBD", "AGB", "ALIGN", "FOCAL",
    "FOCAL + ALIGN", "FOCAL + AGB", "ALIGN + AGB",
    "FOCAL + ALIGN + AGBD", "FOCAL + ALIGN + AGB",
]


class _ConvBlock:
    """3x3 conv + group norm (+ ReLU applied by the caller)."""

    def __init__(self, rng: Rng, name: str, cin: int, cout: int):
        self.w = _conv_param(rng, f"{name}.w", cout, cin, 3)
        self.b = Parameter(np.zeros(cout), f"{name}.b")
        self.gamma = Parameter(np.ones(cout), f"{name}.gn.gamma")
        self.beta = Parameter(np.zeros(cout), f"{name}.gn.beta")
        self.groups = gn_groups(cout)

    def parameters(self):
        return [self.w, self.b, self.gamma, self.beta]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(
            ad.group_norm(ad.conv2d(x, self.w, self.b), self.groups, self.gamma, self.beta)
        )


class _EncoderStage:
    def __init__(self, rng: Rng, name: str, cin: int, cout: int):
        self.down_w = _conv_param(rng, f"{name}.down.w", cout, cin, 3)
        self.down_b = Parameter(np.zeros(cout), f"{name}.down.b")
        self.block = _ConvBlock(rng, f"{name}.conv", cout, cout)

    def parameters(self):
        return [self.down_w, self.down_b] + self.block.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return self.block(ad.conv2d(x, self.down_w, self.down_b, stride=2))


class Model:
    """Built by :func:`build_model`; holds parameters and the forward pass."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        ch = tuple(cfg.stage_channels)

        # base network first: variants sharing a seed share these draws
        self.encoder = []
        cin = cfg.input_channels
        for s, cout in enumerate(ch):
            self.encoder.append(_EncoderStage(rng, f"encoder.{s}", cin, cout))
            cin = cout

        self.chg_fuse = [
            _ConvBlock(rng, f"change.fuse.{s}", 2 * ch[s], ch[s]) for s in range(4)
        ]
        # merge blocks run deepest-first: index 0 merges stage 3 into stage 2
        self.sem_merge = [
            _ConvBlock(rng, f"semantic.merge.{i}", ch[s + 1] + ch[s], ch[s])
            for i, s in enumerate((2, 1, 0))
        ]
        self.chg_merge = [
            _ConvBlock(rng, f"change.merge.{i}", ch[s + 1] + ch[s], ch[s])
            for i, s in enumerate((2, 1, 0))
        ]
        self.loc_head_w = _conv_param(rng, "loc_head.w", cfg.loc_classes, ch[0], 1)
        self.loc_head_b = Parameter(np.zeros(cfg.loc_classes), "loc_head.b")
        self.dmg_head_w = _conv_param(rng, "dmg_head.w", cfg.dmg_classes, ch[0], 1)
        self.dmg_head_b = Parameter(np.zeros(cfg.dmg_classes), "dmg_head.b")

        # optional extras, initialized after the base network
        self.ag_building = None
        if cfg.enable_ag_building:
            self.ag_building = [
                AttentionGate(ch[s], ch[s + 1], rng, f"ag_building.{i}")
                for i, s in enumerate((2, 1, 0))
            ]
        self.ag_damage = None
        if cfg.enable_ag_damage:
            self.ag_damage = [
                AttentionGate(ch[s], ch[s + 1], rng, f"ag_damage.{i}")
                for i, s in enumerate((2, 1, 0))
            ]
        self.aligners = None
        if cfg.enable_align:
            self.aligners = [
                AlignmentModule(ch[s], rng, f"align.{s}") for s in range(4)
            ]

    # parameter bookkeeping -------------------------------------------------

    def parameter_groups(self) -> dict[str, list[Parameter]]:
        base: list[Parameter] = []
        for stage in self.encoder:
            base += stage.parameters()
        for block in self.chg_fuse + self.sem_merge + self.chg_merge:
            base += block.parameters()
        base += [self.loc_head_w, self.loc_head_b, self.dmg_head_w, self.dmg_head_b]
        groups = {"base": base, "ag_building": [], "ag_damage": [], "alignment": []}
        if self.ag_building:
            for gate in self.ag_building:
                groups["ag_building"] += gate.parameters()
        if self.ag_damage:
            for gate in self.ag_damage:
                groups["ag_damage"] += gate.parameters()
        if self.aligners:
            for aligner in self.aligners:
                groups["alignment"] += aligner.parameters()
        return groups

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for group in self.parameter_groups().values():
            params += group
        return params

    # forward ----------------------------------------------------------------

    def _encode(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for stage in self.encoder:
            h = stage(h)
            feats.append(h)
        return feats

    def _decode(self, deepest, skips, merges, gates, collect):
        d = deepest
        for i, skip in enumerate(skips):
            if gates is not None:
                skip, alpha = gates[i](skip, d)
                if collect is not None:
                    collect.append(alpha)
            up = ad.upsample_bilinear(d, skip.data.shape[2], skip.data.shape[3])
            d = merges[i](ad.concat([up, skip], axis=1))
        return d

    def forward(self, pre: Tensor, post: Tensor) -> tuple[Tensor, Tensor]:
        loc, dmg, _ = self._forward_impl(pre, post, collect_diagnostics=False)
        return loc, dmg

    def forward_with_diagnostics(self, pre: Tensor, post: Tensor):
        """Forward pass that also returns attention maps and flow fields."""
        return self._forward_impl(pre, post, collect_diagnostics=True)

    def _forward_impl(self, pre: Tensor, post: Tensor, collect_diagnostics: bool):
        if pre.data.shape != post.data.shape or pre.data.ndim != 4:
            raise ContractError("pre and post inputs must be 4-d with identical shapes")
        b, c, h, w = pre.data.shape
        if c != self.cfg.input_channels:
            raise ContractError(f"model expects {self.cfg.input_channels} input channels")
        if h % _DOWN_FACTOR or w % _DOWN_FACTOR:
            raise ContractError(
                f"spatial size {h}x{w} must be divisible by {_DOWN_FACTOR}"
            )
        diag: dict[str, list] = {"ag_building": [], "ag_damage": [], "flows": []}

        pre_feats = self._encode(pre)
        post_feats = self._encode(post)
        if self.aligners is not None:
            aligned = []
            for s in range(4):
                flow, warped = self.aligners[s](pre_feats[s], post_feats[s])
                diag["flows"].append(flow)
                aligned.append(warped)
            pre_feats = aligned

        sem = self._decode(
            pre_feats[3], [pre_feats[2], pre_feats[1], pre_feats[0]],
            self.sem_merge, self.ag_building,
            diag["ag_building"] if collect_diagnostics else None,
        )
        loc_logits = ad.conv2d(
            ad.upsample_bilinear(sem, h, w), self.loc_head_w, self.loc_head_b
        )

        fused = [
            self.chg_fuse[s](ad.concat([pre_feats[s], post_feats[s]], axis=1))
            for s in range(4)
        ]
        chg = self._decode(
            fused[3], [fused[2], fused[1], fused[0]],
            self.chg_merge, self.ag_damage,
            diag["ag_damage"] if collect_diagnostics else None,
        )
        dmg_logits = ad.conv2d(
            ad.upsample_bilinear(chg, h, w), self.dmg_head_w, self.dmg_head_b
        )
        return loc_logits, dmg_logits, diag


def build_model(cfg: ModelConfig, rng: Rng) -> Model:
    return Model(cfg, rng)


def count_params(model: Model) -> dict[str, int]:
    """Exact parameter counts per module group plus the total."""
    counts = {name: sum(p.data.size for p in group)
              for name, group in model.parameter_groups().items()}
    counts["total"] = sum(counts.values())
    return counts


# checkpoint format -----------------------------------------------------------
#
# magic | 8-byte LE header length | header JSON | raw <f8 arrays in header order
# The header carries a format version, the full model config echo, optional
# caller metadata, and the (name, shape) table. Bytes are a pure function of
# (config, parameter values), so identical runs produce identical files.

_MAGIC = b"BDKCKPT1"


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "stage_channels": list(cfg.stage_channels),
        "enable_focal": cfg.enable_focal,
        "enable_ag_building": cfg.enable_ag_building,
        "enable_ag_damage": cfg.enable_ag_damage,
        "enable_align": cfg.enable_align,
        "input_channels": cfg.input_channels,
        "loc_classes": cfg.loc_classes,
        "dmg_classes": cfg.dmg_classes,
        "focal": {"alpha": list(cfg.focal.alpha), "gamma": cfg.focal.gamma,
                  "alpha_bg": cfg.focal.alpha_bg},
        "loss_weights": {"w_ce": cfg.loss_weights.w_ce, "w_focal": cfg.loss_weights.w_focal,
                         "w_lovasz": cfg.loss_weights.w_lovasz},
    }


def config_from_dict(d: dict) -> ModelConfig:
    focal = FocalConfig(alpha=tuple(d["focal"]["alpha"]), gamma=d["focal"]["gamma"],
                        alpha_bg=d["focal"]["alpha_bg"])
    weights = LossWeights(**d["loss_weights"])
    return ModelConfig(
        stage_channels=tuple(d["stage_channels"]),
        enable_focal=d["enable_focal"],
        enable_ag_building=d["enable_ag_building"],
        enable_ag_damage=d["enable_ag_damage"],
        enable_align=d["enable_align"],
        input_channels=d["input_channels"],
        loc_classes=d["loc_classes"],
        dmg_classes=d["dmg_classes"],
        focal=focal,
        loss_weights=weights,
    )


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    params = model.parameters()
    header = {
        "version": 1,
        "model": config_to_dict(model.cfg),
        "extra": extra or {},
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [_MAGIC, len(payload).to_bytes(8, "little"), payload]
    for p in params:
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def load_checkpoint_bytes(blob: bytes) -> tuple[Model, dict]:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ContractError("not a recognized checkpoint file")
    hlen = int.from_bytes(blob[len(_MAGIC) : len(_MAGIC) + 8], "little")
    start = len(_MAGIC) + 8
    header = json.loads(blob[start : start + hlen].decode())
    if header.get("version") != 1:
        raise ContractError(f"unsupported checkpoint version {header.get('version')!r}")
    cfg = config_from_dict(header["model"])
    model = Model(cfg, Rng(0))
    params = {p.name: p for p in model.parameters()}
    offset = start + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        raw = blob[offset : offset + 8 * size]
        offset += 8 * size
        p = params.get(entry["name"])
        if p is None or p.data.shape != shape:
            raise ContractError(f"checkpoint parameter {entry['name']!r} does not fit the config")
        p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    return model, header["extra"]


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
