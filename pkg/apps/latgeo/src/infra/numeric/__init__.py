from .tensor import Graph, Tensor, backward, no_grad
from .module import Embedding, LayerNorm, Linear, Module
from .optim import Adam, OptimizerState, adam_step, noam_lr
