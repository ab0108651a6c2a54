"""Audio-driven lip-sync: sync expert, generator with quality GAN, LSE evaluation and CLI."""
from .corpus import (FaceTrack, GeneratorBatch, MelSpectrogram, MelSpectrogramTransformer, SyncPair, WindowConfig,
                     build_generator_batch, extract_mel, mask_lower_half, sample_sync_pair, slice_audio_window,
                     synth_toy_corpus, toy_window_config)
from .exceptions import (ConfigMismatch, ContractViolation, FormatError, FrameSkipped, InputTooShort, MediaError,
                         OutOfRange, ShapeError, SyncLipError)
from .expert import (SyncExpert, SyncExpertConfig, encode_audio_window, encode_face_window, expert_bce_loss,
                     off_sync_accuracy, sync_probability, toy_expert_config, train_expert)
from .gan import (LipSyncer, QualityDiscConfig, TrainConfig, disc_loss, gen_adv_loss, init_quality_disc,
                  toy_disc_config, total_generator_loss, train_wav2lip)
from .generator import (GeneratorConfig, LossReport, expert_sync_loss, fold_for_expert, generate_frames,
                        init_generator, reconstruction_loss, toy_generator_config, unfold_from_expert)
from .params import ParameterSet
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import (AblationRow, BenchmarkPair, LseReport, LseScorer, build_benchmark,
                         finetune_expert_in_gan, lse_metrics, run_ablation)
from .inference import FaceBox, InferenceJob, localize_faces, lipsync_video

__version__ = "0.1.0"
