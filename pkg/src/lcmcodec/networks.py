"""Network configuration and the codec's four learned components."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .context import GAUSSIAN, MIXTURE, SectionModel
from .gaussian import GEOM_DIM, SH_DIM
from .nn import MLP, Block, WeightStore, architecture_id, check_shapes


@dataclass
class ModelConfig:
    width: int = 32
    heads: int = 4
    layers: int = 1
    ffn_mult: int = 2
    knn: int = 16
    dgcnn_width: int = 32
    n_mix: int = 3
    geometry_groups: tuple = (3, 4, 1)
    geometry_hyper: int = 8
    color_groups: tuple = (8, 8, 16, 16)
    color_hyper: int = 48
    lossy_latent: int = 128
    lossy_groups: tuple = (32, 32, 64)
    lossy_hyper: int = 32
    lossy_width: int = 64
    division_width: int = 128
    space_context: bool = True
    channel_context: bool = True
    backbone: str = "attention"

    def __post_init__(self):
        for f in ("geometry_groups", "color_groups", "lossy_groups"):
            setattr(self, f, tuple(int(g) for g in getattr(self, f)))
        if self.backbone not in ("attention", "mlp"):
            raise ValueError(f"unknown backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class LossyModel(nn.Module):
    """Analysis / synthesis transforms for the lossy colors and the entropy model of their latent."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        W = cfg.lossy_width
        pe_dim = cfg.width if cfg.backbone == "attention" else None
        self.section = SectionModel(cfg, cfg.lossy_latent, cfg.lossy_groups, cfg.lossy_hyper, GAUSSIAN)
        self.analysis_in = MLP(SH_DIM, W, W)
        self.analysis_block = Block(W, cfg.heads, cfg.layers, cfg.ffn_mult, pe_dim, cfg.backbone)
        self.analysis_out = MLP(W, W, cfg.lossy_latent)
        self.synthesis_in = MLP(cfg.lossy_latent, W, W)
        self.synthesis_block = Block(W, cfg.heads, cfg.layers, cfg.ffn_mult, pe_dim, cfg.backbone)
        self.synthesis_out = MLP(W, W, SH_DIM)

    def analysis(self, colors, pe):
        return self.analysis_out(self.analysis_block(self.analysis_in(colors), pe))

    def synthesis(self, latent, pe):
        return self.synthesis_out(self.synthesis_block(self.synthesis_in(latent), pe))


class DivisionNet(nn.Module):
    """Per-Gaussian logit; sigmoid(logit) >= tau routes a Gaussian to the lossless color path."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        W = cfg.division_width
        self.embed = MLP(SH_DIM + 3, W, W)
        self.block = Block(W, cfg.heads, cfg.layers, cfg.ffn_mult, None, cfg.backbone)
        self.out = MLP(W, W, 1)

    def forward(self, colors, pos):
        return self.out(self.block(self.embed(torch.cat([colors, pos], dim=-1)))).squeeze(-1)


class CodecModel(nn.Module):
    """All learned parts; their flattened parameters form one weight file."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.geometry = SectionModel(self.cfg, GEOM_DIM, self.cfg.geometry_groups, self.cfg.geometry_hyper, MIXTURE)
        self.lossy = LossyModel(self.cfg)
        # analysis sees a coded flag; synthesis sees decoded lossy colors plus the flag
        self.color = SectionModel(
            self.cfg, SH_DIM, self.cfg.color_groups, self.cfg.color_hyper, MIXTURE,
            analysis_extra=1, synthesis_extra=SH_DIM + 1,
        )
        self.division = DivisionNet(self.cfg)

    @classmethod
    def initialized(cls, cfg: ModelConfig | None = None, seed: int = 0) -> "CodecModel":
        torch.manual_seed(seed)
        return cls(cfg).eval()

    def shapes(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.state_dict().items()}

    def to_store(self, **metadata) -> WeightStore:
        return WeightStore(
            ((k, v.detach().cpu().numpy()) for k, v in self.state_dict().items()),
            metadata={"model": self.cfg.to_dict(), **metadata},
        )

    @property
    def architecture_id(self) -> int:
        # training metadata in a checkpoint does not change the architecture
        return architecture_id(self.shapes(), {"model": self.cfg.to_dict()})

    @classmethod
    def from_store(cls, store: WeightStore) -> "CodecModel":
        cfg = ModelConfig.from_dict(store.metadata.get("model", {}))
        model = cls(cfg)
        check_shapes(store, model.shapes())
        extra = set(store) - set(model.shapes())
        if extra:
            raise ValueError(f"unexpected tensor '{sorted(extra)[0]}' in weight file")
        model.load_state_dict({k: torch.from_numpy(np.array(store[k])) for k in model.shapes()})
        return model.eval()
