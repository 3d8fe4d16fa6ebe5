"""SubForkNet segmentation network with hand-written backpropagation."""
from .model import (NetworkParams, NetworkSpec, build_network, forward, layer_manifest,
                    loss_and_gradients, trace_shapes)
from .train import (AdamState, TrainConfig, TrainResult, adam_step, infer_volume,
                    prepare_input, slice_dataset, train)
from .checkpoint import load_checkpoint, save_checkpoint
