"""Discrete task-oriented joint source-channel coding over K-PSK channels.

Modules: ``diffcore`` (dense nets and reverse-mode gradients), ``codec``
(codebook quantization and Gumbel-softmax), ``modem`` (PSK/AWGN channel law and
capacity), ``objective`` (robust-IB loss and information estimates), ``data``,
``engine`` (training, evaluation, checkpoints) and ``harness`` (experiments, CLI).
"""
from .engine import (Checkpoint, TrainConfig, evaluate, evaluate_loss, load_checkpoint,
                     save_checkpoint, train)

__version__ = "0.1.0"
__all__ = ["Checkpoint", "TrainConfig", "evaluate", "evaluate_loss", "load_checkpoint", "save_checkpoint", "train"]
