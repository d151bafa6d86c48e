from .grad import backward, grad_check, mse_loss
from .layers import (
    Activation,
    Conv2D,
    ConvTranspose2D,
    Dense,
    Embedding,
    Flatten,
    LayerSpec,
    MaxPool2D,
    Reshape,
    Sequential,
)
from .ops import (
    conv2d_forward,
    dense_forward,
    maxpool2d,
    sigmoid,
    softplus,
    softplus_inv,
    tconv2d_forward,
)
from .optim import AdamState, adam_step
