"""ptame: a trainable attention explainer for frozen image classifiers,
with faithfulness metrics (AD/IC, MoRF/LeRF with neighbor infilling), a
parameter-randomization sanity check, and a CLI."""

from .attention import (AttentionMechanism, ExplanationMaps, FeatureBranch, FusionModule,
                        attention_forward, bilinear_upscale, branch_contributions,
                        feature_branch_forward, fuse, load_attention_file,
                        save_attention_file, select_class_map)
from .data import (ImageTensor, LabeledImageSet, Normalization, read_cifar_bin,
                   synthesize_glyph_dataset, synthesize_separable_dataset, write_cifar_bin)
from .errors import (ConfigurationError, DegenerateInputError, FormatError, InputError,
                     PTameError, TrainingError)
from .evaluation import (ConfidencePair, EvalConfig, EvalReport, PTameExplainer,
                         RandomExplainer, ThresholdMask, ad_ic, auc, deletion_curve,
                         evaluate, evaluate_ad_ic, random_baseline, road_infill, topk_mask)
from .fileio import (export_explanation, import_explanation, parse_config, read_config,
                     render_heatmap)
from .models import (ClassifierHandle, FeatureMapSet, ToyTrainConfig, build_model, classify,
                     evaluate_accuracy, extract_features, load_checkpoint_file, model_truth,
                     randomize_parameters_up_to, save_checkpoint_file, train_toy_classifier)
from .sanity import MprtCurve, mprt, retraining_explainer_factory, smoothed_non_increasing, ssim
from .training import (LossBreakdown, LossWeights, SearchSpace, TrainConfig, Trial, area_loss,
                       ce_loss, hyperparameter_search, lr_schedule, mask_image,
                       sample_class_subset, total_loss, train_attention, train_epoch,
                       variation_loss)

__version__ = "0.1.0"
