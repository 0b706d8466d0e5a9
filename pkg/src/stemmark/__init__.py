"""Separation-first multi-stem audio watermarking at desk scale."""

__version__ = "0.1.0"

from .attacks import AttackCategory, AttackChain, AttackSpec, apply_attack, apply_category, sample_attack_spec
from .audio import (AudioBuffer, SegmentLocator, Spectrogram, STFTGeometry, crop_segment, istft, mel_project,
                    splice_segment, stft)
from .codec import (CodecConfig, Payload, ReferenceCodec, WatermarkKey, correlation_scores, decode_segment,
                    derive_pattern_bank, embed_segment)
from .loudness import measure_integrated_lufs, normalize_to_lufs
from .metrics import (bit_error_rate, mel_l1_loss, multi_res_stft_loss, nmr_ratio, sdr_db, si_sdr_db, si_snr_db,
                      snr_db)
from .separator import SeparatorModel, learnable_separate, oracle_mask_separate, update_separator
from .wavio import read_wav, write_wav
