"""Segmentation-aware semantic communication for images.

A trainable numpy simulator of an image semantic-communication pipeline:
a segmentation knowledge base splits the source into per-objective
segments, attention networks weigh and merge them into a semantic-aware
image, a convolutional codec and an MLP channel codec carry it across a
simulated wireless channel, and a learned binary mask drops unimportant
feature elements before transmission.
"""

from .channel import (ChannelConfig, SymbolVector, channel_decode, channel_encode,
                      estimate_mi, noise_variance, transmit)
from .codec import (CodecParams, FeatureTensor, MaskMatrix, mask_features, mask_ratio,
                    semantic_decode, semantic_encode)
from .asi import (AttentionParams, ExperienceBase, SegmentStack, build_experience_base,
                  build_stack, channel_attention, human_select, integrate,
                  spatial_attention, train_asi)
from .evaluation import BitReport, MetricsRow, bit_account, emit_curves, psnr, snr_sweep, ssim
from .images import ImageSample, load_image, save_image
from .skb import (IntegrityReport, SegmentMask, SegmentSet, extract_segment, iou,
                  make_backend, segment, verify_recovery)
from .training import (FreezeSet, PipelineParams, TrainConfig, crossed_train,
                       init_pipeline, load_pipeline, save_pipeline, train_asc,
                       train_channel_phase, train_semantic_phase)

__version__ = "0.1.0"
