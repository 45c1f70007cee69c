"""Federated training of a convolutional-autoencoder feature extractor
with exact Euclidean top-K image patch retrieval."""

from .autodiff import OptimizerState, Tensor, adam, backward, conv2d, mse, optimizer_step, sgd, transpose_conv2d
from .autoencoder import (
    AutoencoderConfig,
    AutoencoderModel,
    FeatureVector,
    build_model,
    encode,
    flatten_weights,
    forward,
    layout_id,
    n_parameters,
    tiny_config,
    train,
    with_weights,
)
from .datasets import DatasetManifest, ImageRecord, SynthConfig, load_image, load_manifest, patchify, synth_generate
from .evaluation import ConfusionMatrix, EvalReport, evaluate, evaluate_queries, metrics, predict_label, timing_summary
from .federation import (
    ClientSpec,
    ClientUpdate,
    LocalClient,
    ModelWeights,
    RoundConfig,
    deserialize_weights,
    fedadagrad_aggregate,
    fedavg_aggregate,
    run_federation,
    serialize_weights,
)
from .retrieval import FeatureIndex, IndexEntry, RetrievalResult, build_index, euclidean, load_index, save_index, search
from .transport import FaultPlan, Message, MessageType, WireServer, decode_message, encode_message, run_wire_client, simulate_network
from .version import __version__

__all__ = [name for name in dir() if not name.startswith("_")]
