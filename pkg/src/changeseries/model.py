"""Full network: shared encoder, per-scale temporal refiners, twin decoders.

forward() maps an image series (T, C, H, W) plus an edge set to
segmentation probabilities (T, H, W) and change probabilities (N, H, W).
The change branch consumes parameter-free later-minus-earlier differences
of the refined pyramid, both as its deepest input and as its skip
connections.  backward() routes loss gradients from both heads down to
every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, Decoder, Encoder
from .changefeat import EdgeSet, change_pyramid, change_pyramid_backward
from .rng import SeededRng
from .temporal import TemporalConfig, TemporalRefiner

_STREAM_INIT = 777


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    temporal: TemporalConfig | None = field(default_factory=TemporalConfig)
    seed: int = 0

    def __post_init__(self):
        if self.temporal is not None and self.backbone.base_width % self.temporal.heads:
            raise ValueError("base width must be divisible by the head count")

    def to_jsonable(self) -> dict:
        bb = self.backbone
        out = {
            "seed": self.seed,
            "backbone": {
                "scales": bb.scales,
                "base_width": bb.base_width,
                "in_channels": bb.in_channels,
                "use_batchnorm": bb.use_batchnorm,
            },
            "temporal": None,
        }
        if self.temporal is not None:
            tc = self.temporal
            out["temporal"] = {
                "heads": tc.heads,
                "layers": tc.layers,
                "ff_mult": tc.ff_mult,
                "use_position_codes": tc.use_position_codes,
            }
        return out

    @staticmethod
    def from_jsonable(obj: dict) -> "ModelConfig":
        bb = obj["backbone"]
        temporal = None
        if obj.get("temporal") is not None:
            tc = obj["temporal"]
            temporal = TemporalConfig(
                heads=int(tc["heads"]),
                layers=int(tc["layers"]),
                ff_mult=int(tc["ff_mult"]),
                use_position_codes=bool(tc["use_position_codes"]),
            )
        return ModelConfig(
            backbone=BackboneConfig(
                scales=int(bb["scales"]),
                base_width=int(bb["base_width"]),
                in_channels=int(bb["in_channels"]),
                use_batchnorm=bool(bb["use_batchnorm"]),
            ),
            temporal=temporal,
            seed=int(obj["seed"]),
        )


class ChangeModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = SeededRng(cfg.seed).derive(_STREAM_INIT)
        ## construction order fixes the initialization draw order
        self.encoder = Encoder(cfg.backbone, rng)
        self.refiners = None
        if cfg.temporal is not None:
            self.refiners = [
                TemporalRefiner(cfg.backbone.width_at(s), cfg.temporal, rng)
                for s in range(cfg.backbone.scales)
            ]
        self.seg_decoder = Decoder(cfg.backbone, rng)
        self.change_decoder = Decoder(cfg.backbone, rng)
        self._edges = None

    def named_params(self) -> dict:
        out = {}
        for name, p in self.encoder.params():
            out[f"encoder.{name}"] = p
        if self.refiners is not None:
            for s, refiner in enumerate(self.refiners):
                for name, p in refiner.params():
                    out[f"temporal.scale{s}.{name}"] = p
        for name, p in self.seg_decoder.params():
            out[f"seg_decoder.{name}"] = p
        for name, p in self.change_decoder.params():
            out[f"change_decoder.{name}"] = p
        return out

    def param_values(self) -> dict:
        return {name: p.value.copy() for name, p in self.named_params().items()}

    def load_param_values(self, values: dict) -> None:
        params = self.named_params()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {missing}, extra {extra}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.value = arr.copy()

    def zero_grads(self) -> None:
        for p in self.named_params().values():
            p.grad = np.zeros_like(p.value)

    def forward(self, images: np.ndarray, edges: EdgeSet) -> tuple[np.ndarray, np.ndarray]:
        if images.ndim != 4:
            raise ValueError("expected an image series of shape (T, C, H, W)")
        if images.shape[0] != edges.t_len:
            raise ValueError(
                f"series length {images.shape[0]} does not match edge set over {edges.t_len}"
            )
        self._edges = edges
        pyramid = self.encoder.forward(images)
        if self.refiners is not None:
            refined = [r.forward(level) for r, level in zip(self.refiners, pyramid)]
        else:
            refined = pyramid
        seg = self.seg_decoder.forward(refined)
        diff = change_pyramid(refined, edges)
        ch = self.change_decoder.forward(diff)
        return seg, ch

    def backward(self, d_seg: np.ndarray, d_ch: np.ndarray) -> None:
        edges = self._edges
        d_diff = self.change_decoder.backward(d_ch)
        d_refined = change_pyramid_backward(d_diff, edges, edges.t_len)
        d_from_seg = self.seg_decoder.backward(d_seg)
        merged = [a + b for a, b in zip(d_refined, d_from_seg)]
        if self.refiners is not None:
            merged = [r.backward(g) for r, g in zip(self.refiners, merged)]
        self.encoder.backward(merged)
