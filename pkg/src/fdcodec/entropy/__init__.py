from .attention import attention_weights, laplacian_pe_table, windowed_attention
from .layout import PHASES, checkerboard_masks, chunk_layout
from .model import CONTEXTS, EntropyConfig, EntropyModel, init_entropy_weights

__all__ = [
    "CONTEXTS",
    "PHASES",
    "EntropyConfig",
    "EntropyModel",
    "attention_weights",
    "checkerboard_masks",
    "chunk_layout",
    "init_entropy_weights",
    "laplacian_pe_table",
    "windowed_attention",
]
