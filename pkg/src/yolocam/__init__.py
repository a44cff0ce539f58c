"""Grad-CAM explanations for the objectness and class scores of Tiny-YOLO-v3 detections."""
from .detector import (ActivationCache, Detection, NeuronAddress, Provenance, backpropagate, decode,
                       decode_head, detect, forward, iou, locate_target_neuron, nms)
from .gradcam import AttributionMap, compute_cam, explain_detection, select_target_layer
from .model_io import (ConfigError, LayerNode, NetworkSpec, WeightsError, count_parameters,
                       emit_network_config, load_model, load_network_config, load_weights,
                       parse_network_config, random_params, reference_config_text, serialize_weights)
from .normalize import MapGroup, NormalizationScope, normalize, normalize_all, regroup
from .persistence import ExplanationRecord, Run, RunFormatError, RunWriter, read_run, write_record
from .render import apply_colormap, draw_box, overlay, upscale_bilinear
from .tensor import BatchNorm, LayerParams, ShapeError

__version__ = "0.1.0"
