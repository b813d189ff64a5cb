from .blocks import (AvgPool, BatchNorm, Conv2D, Dense, Flatten, Network,
                     ReLU, ResidualBlock, block_output_shape, get_block,
                     iter_blocks, output_shapes, path_str, set_block)
from .engine import (InputLossSpec, SiteStats, backward, cross_entropy,
                     forward, forward_trace, im2col, input_gradient,
                     input_loss_and_gradient, run_tape, softmax)
from .recalibrate import bn_recalibrate
from .serialize import (load_network, network_from_bytes, network_to_bytes,
                        save_network)
