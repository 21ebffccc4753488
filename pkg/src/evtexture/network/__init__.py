from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .flow import EventFlowNet, FlowNet, flow_warp, pretrain_flow
from .ite import DirectTextureModule, ITEModule, TextureUNet
from .model import (FULL_NETWORK, VARIANTS, EvTexture, NetworkConfig, bicubic_upsample, forward_sequence,
                    pixel_shuffle, variant_config)

warp = flow_warp

__all__ = [
    "EvTexture", "NetworkConfig", "FULL_NETWORK", "VARIANTS", "variant_config", "forward_sequence",
    "FlowNet", "EventFlowNet", "flow_warp", "warp", "pretrain_flow", "ITEModule", "DirectTextureModule",
    "TextureUNet", "pixel_shuffle", "bicubic_upsample", "save_checkpoint", "load_checkpoint", "read_manifest",
]
