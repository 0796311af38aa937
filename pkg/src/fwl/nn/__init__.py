"""Autodiff core, masked waveform autoencoder and ghost classifier."""
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import focal_loss, mae_loss, peak_targets
from .model import (MaeConfig, TrainConfig, assemble_decoder_tokens, classify_head, decode_reconstruct, encode,
                    encode_full, init_head, init_params, mask_indices, mask_spatial, patch_embed, peak_heads,
                    sinusoidal_table)
from .optim import AdamW, adamw_step, adamw_update
from .train import (LossTrace, TrainingDiverged, finetune, infer, labels_from_probs, predict_probs, pretrain,
                    remove_ghosts)

__all__ = [
    "Tensor", "MaeConfig", "TrainConfig", "AdamW", "adamw_step", "adamw_update", "LossTrace",
    "TrainingDiverged", "assemble_decoder_tokens", "classify_head", "decode_reconstruct", "encode",
    "encode_full", "finetune", "focal_loss", "infer", "init_head", "init_params", "labels_from_probs",
    "load_checkpoint", "mae_loss", "mask_indices", "mask_spatial", "patch_embed", "peak_heads",
    "peak_targets", "predict_probs", "pretrain", "remove_ghosts", "save_checkpoint", "sinusoidal_table",
]
