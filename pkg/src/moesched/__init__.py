"""Model-data collaborative scheduling toolkit for expert-parallel MoE
inference: activation profiling, balanced token-expert co-clustering, lookup
tables for online token/request scheduling, and an all-to-all communication
cost model."""

from .profiles import (EmbeddingTable, ProfileError, RequestTrace,
                       TokenExpertMatrix, Topology, ingest_profile,
                       emit_profile, matrices_from_trace, read_embeddings,
                       split_trace, synthesize_embeddings,
                       synthesize_planted_profile, validate,
                       write_embeddings)
from .predictor import (DeviceNGramTable, TokenDeviceTable,
                        TokenExpertConfidence, activation_kurtosis,
                        build_confidence_table, build_ngram_table,
                        encode_history, evaluate_predictor, extrapolate_oov,
                        token_table_from_assignment)
from .solver import (Assignment, ObjectiveValue, SolverConfig, SolverError,
                     baseline_round_robin, baseline_two_stage_kmeans,
                     check_constraints, metrics, objective, sample_labels,
                     solve_alternating, solve_bruteforce, solve_ceo)
from .scheduler import (GatePermutation, LookupBundle, SchedulerError,
                        ShuffleIndices, apply_expert_shuffle, bundle_memory,
                        bundle_memory_bytes, gate_permutation, lookup_device,
                        lookup_devices, rebatch_tokens, remap_topk,
                        resume_tokens, schedule_requests_dp)
from .comm import (CommError, PipelineSpec, Stage, VolumeReport,
                   dense_pipeline, pipeline_volume, saving_ratio,
                   sharded_pipeline, simulate_layer, simulate_trace,
                   sweep_alpha, tensor_parallel_pipeline,
                   vanilla_token_labels, volume_collective)
from .tables import TableError, export_token_csv, read_bundle, write_bundle

__version__ = "0.1.0"
