"""Reverse-mode autodiff and the 3D networks built on it."""
from .conv import conv3d, conv3d_transpose, conv3d_weight
from .layers import (BatchNorm3d, Conv3d, ConvTranspose3d, Module, avg_pool3d, batchnorm, crop_center,
                     frozen_stats, leaky_relu)
from .models import (Critic, CriticSpec, Generator, GeneratorSpec, ModelSizeError, build_critic,
                     build_generator, critic_param_count, generator_param_count)
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, no_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
