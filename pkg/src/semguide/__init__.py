"""Semantic guidance for denoising diffusion models, at toy scale, in numpy."""

from .schedule import NoiseSchedule, build_schedule, q_sample
from .denoiser import EpsilonModel, TrainConfig, train_denoiser
from .encoders import (CleanEncoder, TextEncoder, TimeConditionedEncoder, encode_image, encode_text,
                       finetune_noised_encoder, pretrain_dual_encoder)
from .guidance import (Composite, Content, Language, Structure, Style, composite_guidance, content_guidance,
                       guidance_gradient, language_guidance, structure_guidance, style_guidance)
from .sampler import SamplerConfig, batch_sample, sdg_sample
from .corpus import CorpusSpec, generate_corpus
from .evaluation import (EvalReport, ablation_sweep, frechet_feature_distance, pairwise_diversity,
                         retrieval_accuracy)

__version__ = "0.1.0"
