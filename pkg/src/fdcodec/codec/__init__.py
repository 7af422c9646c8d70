from .container import BitstreamHeader, FormatError, load_weights, parse_header, save_weights
from .imageio import from_field, read_pnm, to_field, write_pnm
from .pipeline import (
    CodecConfig,
    NeuralCodec,
    analyze,
    decode,
    decode_latent,
    encode,
    init_codec_weights,
    quantize,
    synthesize,
)

__all__ = [
    "BitstreamHeader",
    "CodecConfig",
    "FormatError",
    "NeuralCodec",
    "analyze",
    "decode",
    "decode_latent",
    "encode",
    "from_field",
    "init_codec_weights",
    "load_weights",
    "parse_header",
    "quantize",
    "read_pnm",
    "save_weights",
    "synthesize",
    "to_field",
    "write_pnm",
]
