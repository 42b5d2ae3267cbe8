"""Feed-forward learned codec for 3D Gaussian splatting clouds."""

from .gaussian import GaussianCloud, QuantizationSpec, parse_ply, read_ply, save_ply, write_ply
from .networks import CodecModel, ModelConfig
from .pipeline import CodecConfig, Container, compress, decode_streams, decompress, total_rate

__all__ = [
    "CodecConfig",
    "CodecModel",
    "Container",
    "GaussianCloud",
    "ModelConfig",
    "QuantizationSpec",
    "compress",
    "decode_streams",
    "decompress",
    "parse_ply",
    "read_ply",
    "save_ply",
    "total_rate",
    "write_ply",
]
