"""Watermark-disguised adversarial examples against a small CTC text recognizer."""
from .attack import (
    AttackResult,
    GradAttackConfig,
    OptAttackConfig,
    WatermarkPlan,
    batch_attack,
    binary_search_c,
    grad_attack,
    opt_attack,
    plan_watermark,
    protect,
    protect_batch,
    quantize_within,
    watermark_attack_batch,
)
from .ctc import InfeasibleTargetError, ctc_loss, greedy_decode
from .metrics import EvalSummary, MetricsReport, export_saliency, image_metrics, mse, psnr, ssim, summarize
from .model import CTCRecognizer, TrainingDidNotConverge
from .textgen import GlyphFont, NoValidTargetError, TargetSpec, build_corpus, gen_letter_target, gen_word_target, render_text
from .watermark import (
    GamutError,
    NoPerturbedRegionError,
    Rect,
    WatermarkSpec,
    apply_watermark,
    colorize,
    find_position,
    render_watermark_mask,
    text_mask,
    to_gray,
)

__version__ = "0.1.0"
