"""Temporal linear encoding (TLE) of per-segment convolutional feature maps."""
from .aggregation import AggregationMode, SegmentSet, aggregate_backward, aggregate_forward
from .bilinear import bilinear_backward, bilinear_forward
from .classify import ClassifierHead, FcEncoder, l2_normalize, signed_sqrt, softmax_cross_entropy
from .data import FeatureDataset, VideoRecord, read_dataset, synth_dataset, write_dataset
from .model import TleModel, TrainConfig, forward_video, sgd_step
from .persist import load_model, save_model
from .sketch import (SketchParams, TensorSketchEncoder, count_sketch_apply, sketch_params_new,
                     tensor_sketch_backward, tensor_sketch_forward)
from .tensor import EncodedVector, FeatureMap, elementwise, flatten_spatial
from .training import fuse_streams, predict_video, sample_segments, train

__version__ = "0.1.0"
