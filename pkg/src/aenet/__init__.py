"""Prior generator and ambiguity eliminator plug-in for few-shot segmentation."""

from .ae import AEBlock, AEOutput, ae_forward, ae_stack_forward
from .losses import LossConfig, bce_loss, dice_loss, fb_iou, iou, miou, total_loss
from .prior import EmptyMaskError, PriorPack, final_prior, masked_gap, prior_pack
from .synth import Episode, GeneratorConfig, draw_episode, gen_episode
from .xattn import CrossAttnBlock, ToyModel, model_forward, xattn_forward

__version__ = "0.1.0"

__all__ = [
    "AEBlock", "AEOutput", "ae_forward", "ae_stack_forward",
    "LossConfig", "bce_loss", "dice_loss", "fb_iou", "iou", "miou", "total_loss",
    "EmptyMaskError", "PriorPack", "final_prior", "masked_gap", "prior_pack",
    "Episode", "GeneratorConfig", "draw_episode", "gen_episode",
    "CrossAttnBlock", "ToyModel", "model_forward", "xattn_forward",
]
