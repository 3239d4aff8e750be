"""ANN-to-SNN conversion with single-spike phase coding."""

from .builder import BaseSchedule, SnnLayer, SnnModel, build, load_snn, plan_gcn, \
    quantize_weights, save_snn
from .calibrate import CalibrationStats, NormalizedAnn, collect_stats, load_stats, \
    normalize, save_stats
from .codec import CodecConfig, decode, decode_input, encode_floor, encode_input, \
    encode_round, mape, optimal_q
from .engine import infer, infer_batch, infer_single_spike_input, run_network
from .metrics import FP32, INT8, EnergyModel, RunReport, alpha, build_report, \
    latency, op_count_ann
from .model import AnnModel, Layer, argmax_class, forward, forward_batch, \
    load_model, save_model

__version__ = "0.1.0"
