"""
The main __init__ file with termclust-relative classes and functions.
"""

__version__ = '0.1.0'

__all__ = [ 'Vocabulary',
            'ClusterMap',
            'SynthSpec',
            'SynthGenerator',
            'load_vocabulary',
            'write_vocabulary',
            'concept_clusters',
            'synth_vocabulary',
            'normalize_surface',
            'EncoderParams',
            'init_params',
            'save_embeddings',
            'load_embeddings',
            'save_checkpoint',
            'load_checkpoint',
            'NeighborTable',
            'build_neighbor_table',
            'top_m',
            'search',
            'cosine',
            'save_table',
            'load_table',
            'MiniBatch',
            'build_minibatch',
            'hard_negative_same_concept_fraction',
            'LossHyper',
            'ms_loss',
            'ms_loss_grad',
            'TrainConfig',
            'Trainer',
            'train',
            'ablation_config',
            'EvalReport',
            'evaluate',
            'sweep',
            'brute_force_evaluate',
            'brute_force_sweep',
            'connected_components',
            'linking_accuracy',
            'ShardPool',
            'TermclustError',
            'ValidationError',
            'DataError',
            'NumericError',
            'TrainerIsNotStartedError']

from .errors import TermclustError, ValidationError, DataError, NumericError
from .vocab import  Vocabulary, ClusterMap, SynthSpec, SynthGenerator, load_vocabulary, \
                    write_vocabulary, concept_clusters, synth_vocabulary, normalize_surface
from .encoder import    EncoderParams, init_params, save_embeddings, load_embeddings, \
                        save_checkpoint, load_checkpoint
from .simindex import   NeighborTable, build_neighbor_table, top_m, search, cosine, \
                        save_table, load_table
from .mining import MiniBatch, build_minibatch, hard_negative_same_concept_fraction
from .msloss import LossHyper, ms_loss, ms_loss_grad
from .trainer import TrainConfig, Trainer, train, ablation_config, TrainerIsNotStartedError
from .clustereval import    EvalReport, evaluate, sweep, brute_force_evaluate, brute_force_sweep, \
                            connected_components, linking_accuracy
from .shard_pool import ShardPool
