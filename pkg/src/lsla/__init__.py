"""Light self-limited attention (LSLA) and the hierarchical ViT-LSLA backbone."""

from .attention import AttentionConfig, AttentionParams, attend
from .model import ModelConfig, StageConfig, init_model, model_forward

__version__ = "0.1.0"
