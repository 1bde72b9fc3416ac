"""Few-shot image classification with correlation-based feature branches.

A small conv backbone feeds three episode-level branches: self-correlation
(spatial attention within one feature map), cross-correlation (position
matching between a query and a support map), and pattern-correlation
(a fitted mixture over feature vectors shared by the episode).  Each branch
yields embeddings trained with a prototype contrastive loss next to a plain
cross-entropy anchor.  Everything runs on a custom numpy autodiff so the
whole pipeline stays dependency-light and reproducible.
"""
from . import autodiff
from .autodiff import Tensor, grad_check, no_grad
from .backbone import (BackboneParams, episode_channel_shift, extract_features,
                       init_backbone, load_checkpoint, save_checkpoint)
from .checks import gradcheck_suite, suite_passed
from .config import Config, load_config, parse_config
from .contrastive import (fixed_query_loss, matched_pair_loss,
                          pair_similarities, prototype_contrastive_loss)
from .crosscorr import (correlation_tensor, cross_attention_map,
                        cross_embedding, pair_embeddings, unit_positions)
from .data import (Dataset, SynthSpec, dataset_digest, generate_synthetic,
                   load_dataset, load_synth_spec, read_image, save_dataset,
                   write_image)
from .episodic import (Episode, EvalSummary, classify_query, evaluate,
                       results_csv, run_ablation, sample_episode,
                       summary_from_accuracies)
from .errors import (ConfigError, DataError, DegenerateVectorError,
                     FewcorrError, NumericError, ShapeError)
from .model import (Model, episode_losses, inference_weights, init_model,
                    model_from_state, model_state)
from .objective import ClassifierHead, LossBundle, init_head, loss_ce, total_loss
from .patterncorr import (MixtureState, collect_samples, fit_mixture,
                          pattern_embedding, pattern_embeddings)
from .selfcorr import prototype_average, self_attention_map, self_embedding
from .trainer import TrainResult, sgd_step, train

__version__ = "0.1.0"
