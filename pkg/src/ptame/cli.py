"""Command-line driver: model training, attention training, explanation
export, faithfulness evaluation, the randomization sanity check, and
hyperparameter search."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from . import attention as attention_mod
from . import data as data_mod
from . import evaluation as eval_mod
from . import fileio
from . import models as models_mod
from . import sanity as sanity_mod
from . import training as training_mod
from .errors import PTameError

REQUIRED_TRAIN_KEYS = ("lambda1", "lambda2")


def _add_common(parser: argparse.ArgumentParser, *names: str) -> None:
    flags = {
        "backbone": dict(required=True, help="backbone checkpoint path"),
        "aux": dict(required=True, help="auxiliary-classifier checkpoint path"),
        "attention": dict(required=True, help="attention checkpoint path"),
        "data": dict(required=True, help="dataset file (CIFAR-style binary)"),
        "out": dict(required=True, help="output directory"),
    }
    for name in names:
        parser.add_argument(f"--{name}", **flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptame", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output .bin path")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("glyph", "separable"), default="glyph")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train-models", help="train and save the frozen backbone and auxiliary")
    _add_common(p, "data", "out")
    p.add_argument("--arch", choices=("cnn_small", "vit_small"), default="cnn_small")
    p.add_argument("--aux-arch", choices=("resnet_aux",), default="resnet_aux")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=_cmd_train_models)

    p = sub.add_parser("train", help="train the attention mechanism")
    p.add_argument("--config", required=True, help="key-value training config file")
    _add_common(p, "backbone", "aux", "data", "out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("explain", help="explain one image")
    p.add_argument("--image", required=True, help="input image (PNG or similar)")
    p.add_argument("--class", dest="class_index", default="auto",
                   help="'auto' for the model-truth class, or an explicit index")
    p.add_argument("--mode", choices=("bilinear", "nearest"), default="bilinear")
    _add_common(p, "backbone", "aux", "attention", "out")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("evaluate", help="faithfulness report (AD/IC, MoRF/LeRF)")
    p.add_argument("--explainer", choices=("ptame", "random"), default="ptame")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unnormalized-ad", action="store_true",
                   help="report the unnormalized average-drop variant")
    _add_common(p, "backbone", "aux", "attention", "data", "out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sanity", help="model parameter randomization test")
    p.add_argument("--config", help="training config for the retraining budget")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-size", type=int, default=sanity_mod.DEFAULT_PROBE_SIZE)
    _add_common(p, "backbone", "aux", "attention", "data", "out")
    p.set_defaults(func=_cmd_sanity)

    p = sub.add_parser("hpsearch", help="constrained loss-weight search")
    p.add_argument("--config", help="base training config (weights come from the search)")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subsample", type=float, default=1.0,
                   help="fraction of the training split used per trial")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--random-only", action="store_true",
                   help="skip the surrogate model; sample all trials uniformly")
    _add_common(p, "backbone", "aux", "data", "out")
    p.set_defaults(func=_cmd_hpsearch)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    torch.manual_seed(getattr(args, "seed", 0))
    try:
        return args.func(args)
    except (PTameError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------


def _cmd_synth_data(args) -> int:
    if args.kind == "glyph":
        dataset = data_mod.synthesize_glyph_dataset(args.n, seed=args.seed)
    else:
        dataset = data_mod.synthesize_separable_dataset(args.n, seed=args.seed)
    data_mod.write_cifar_bin(args.out, dataset)
    print(f"wrote {len(dataset)} images ({args.kind}) to {args.out}")
    return 0


def _split_train_val(dataset, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(val_fraction * len(dataset))))
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


def _cmd_train_models(args) -> int:
    dataset = data_mod.read_cifar_bin(args.data)
    train_set, val_set = _split_train_val(dataset, args.val_fraction, args.seed)
    os.makedirs(args.out, exist_ok=True)
    config = models_mod.ToyTrainConfig(epochs=args.epochs, seed=args.seed)
    for arch, filename in ((args.arch, "backbone.ckpt"), (args.aux_arch, "aux.ckpt")):
        handle = models_mod.train_toy_classifier(train_set, val_set, arch, config)
        path = os.path.join(args.out, filename)
        models_mod.save_checkpoint_file(handle, path)
        print(f"{arch}: val accuracy {handle.metadata['val_accuracy']:.3f} -> {path}")
    return 0


def _require_keys(mapping: dict, keys) -> str | None:
    for key in keys:
        if key not in mapping:
            return key
    return None


def _cmd_train(args) -> int:
    try:
        mapping = fileio.read_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    missing = _require_keys(mapping, REQUIRED_TRAIN_KEYS)
    if missing is not None:
        print(f"error: config is missing required key {missing!r}", file=sys.stderr)
        return 2
    config, weights = training_mod.config_from_mapping(mapping)
    digest = fileio.config_digest(mapping)
    backbone = models_mod.load_checkpoint_file(args.backbone)
    aux = models_mod.load_checkpoint_file(args.aux)
    dataset = data_mod.read_cifar_bin(args.data)
    torch.manual_seed(config.seed)
    mechanism = _fresh_attention(aux, backbone.class_count, config.seed)
    mechanism, trace = training_mod.train_attention(backbone, aux, mechanism, dataset,
                                                    weights, config)
    os.makedirs(args.out, exist_ok=True)
    meta = {"seed": config.seed, "config_digest": digest}
    attention_mod.save_attention_file(mechanism, os.path.join(args.out, "attention.ckpt"),
                                      metadata=meta)
    fileio.write_loss_trace(os.path.join(args.out, "loss_trace.csv"), trace, metadata=meta)
    print(f"trained {len(trace)} steps; final total loss {trace[-1].total:.4f}")
    return 0


def _fresh_attention(aux, class_count: int, seed: int) -> attention_mod.AttentionMechanism:
    probe = torch.zeros((1, *aux.input_shape))
    features = aux.features(probe)
    shapes = [tuple(f.shape[1:]) for f in features]
    return attention_mod.AttentionMechanism.from_feature_shapes(
        shapes, class_count, layer_names=aux.module.feature_layers, seed=seed)


def _cmd_explain(args) -> int:
    backbone = models_mod.load_checkpoint_file(args.backbone)
    aux = models_mod.load_checkpoint_file(args.aux)
    mechanism, meta = attention_mod.load_attention_file(args.attention)
    pixels = fileio.read_image(args.image)
    image = data_mod.ImageTensor.from_pixels(pixels)
    logits = models_mod.classify(backbone, image)
    if args.class_index == "auto":
        class_index = models_mod.model_truth(logits)
    else:
        class_index = int(args.class_index)
    features = models_mod.extract_features(aux, image)
    maps = attention_mod.attention_forward(features, mechanism)
    e_c = attention_mod.select_class_map(maps, class_index)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    out_meta = {"seed": meta.get("seed", 0), "config_digest": meta.get("config_digest", ""),
                "class_index": class_index}
    fileio.export_explanation(maps, os.path.join(args.out, f"{stem}.pexp"), metadata=out_meta)
    raster = fileio.render_heatmap(e_c, image, mode=args.mode)
    fileio.write_png(os.path.join(args.out, f"{stem}_heatmap.png"), raster,
                     metadata={k: str(v) for k, v in out_meta.items()})
    print(f"class {class_index}: wrote {stem}.pexp and {stem}_heatmap.png to {args.out}")
    return 0


def _build_explainer(kind: str, aux, mechanism, seed: int):
    if kind == "ptame":
        return eval_mod.PTameExplainer(aux, mechanism)
    return eval_mod.RandomExplainer(mechanism.class_count, mechanism.target_hw, seed=seed)


def _cmd_evaluate(args) -> int:
    backbone = models_mod.load_checkpoint_file(args.backbone)
    aux = models_mod.load_checkpoint_file(args.aux)
    mechanism, meta = attention_mod.load_attention_file(args.attention)
    dataset = data_mod.read_cifar_bin(args.data)
    explainer = _build_explainer(args.explainer, aux, mechanism, args.seed)
    config = eval_mod.EvalConfig(seed=args.seed, normalized_drop=not args.unnormalized_ad)
    report = eval_mod.evaluate(backbone, explainer, dataset, config)
    os.makedirs(args.out, exist_ok=True)
    out_meta = {"seed": args.seed, "config_digest": meta.get("config_digest", "")}
    fileio.write_eval_report_json(os.path.join(args.out, "report.json"), report, out_meta)
    fileio.write_eval_report_csv(os.path.join(args.out, "report.csv"), report, out_meta)
    print(f"{report.explainer_id}: AD(50)={report.ad[50]:.2f} IC(50)={report.ic[50]:.2f} "
          f"MoRF_AUC={report.morf_auc:.3f} LeRF_AUC={report.lerf_auc:.3f}")
    return 0


def _training_setup(args):
    mapping = fileio.read_config(args.config) if args.config else {}
    config, weights = training_mod.config_from_mapping(mapping)
    return mapping, config, weights


def _cmd_sanity(args) -> int:
    backbone = models_mod.load_checkpoint_file(args.backbone)
    aux = models_mod.load_checkpoint_file(args.aux)
    mechanism, _ = attention_mod.load_attention_file(args.attention)
    dataset = data_mod.read_cifar_bin(args.data)
    mapping, config, weights = _training_setup(args)
    probe = dataset.subset(np.arange(min(args.probe_size, len(dataset))))
    factory = sanity_mod.retraining_explainer_factory(aux, mechanism, dataset, weights, config)
    curve = sanity_mod.mprt(backbone, factory, probe, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    out_meta = {"config_digest": fileio.config_digest(mapping)}
    fileio.write_mprt_csv(os.path.join(args.out, "mprt.csv"), curve, out_meta)
    fileio.plot_mprt(os.path.join(args.out, "mprt.png"), curve)
    print(f"MPRT: first={curve.entries[0][1]:.3f} final={curve.final_ssim:.3f} "
          f"over {len(curve.entries)} steps")
    return 0


def _cmd_hpsearch(args) -> int:
    backbone = models_mod.load_checkpoint_file(args.backbone)
    aux = models_mod.load_checkpoint_file(args.aux)
    dataset = data_mod.read_cifar_bin(args.data)
    mapping, config, _ = _training_setup(args)
    train_set, val_set = _split_train_val(dataset, args.val_fraction, args.seed)
    if args.subsample < 1.0:
        keep = max(1, int(round(args.subsample * len(train_set))))
        train_set = train_set.subset(np.arange(keep))

    def objective(weights: training_mod.LossWeights) -> float:
        torch.manual_seed(config.seed)
        mechanism = _fresh_attention(aux, backbone.class_count, config.seed)
        training_mod.train_attention(backbone, aux, mechanism, train_set, weights, config)
        explainer = eval_mod.PTameExplainer(aux, mechanism)
        curves = {}
        for mode in ("morf", "lerf"):
            curves[mode] = eval_mod.deletion_curve(backbone, explainer, val_set, mode,
                                                   seed=args.seed)
        return eval_mod.auc(curves["lerf"]) - eval_mod.auc(curves["morf"])

    space = training_mod.SearchSpace()
    best, log = training_mod.hyperparameter_search(space, args.trials, objective,
                                                   seed=args.seed,
                                                   guided=not args.random_only)
    os.makedirs(args.out, exist_ok=True)
    out_meta = {"seed": args.seed, "config_digest": fileio.config_digest(mapping)}
    fileio.write_trials_csv(os.path.join(args.out, "trials.csv"), log, out_meta)
    fileio.write_json(os.path.join(args.out, "best_weights.json"),
                      {"lambda1": best.lambda1, "lambda2": best.lambda2,
                       "lambda3": best.lambda3, "lambda_area": best.lambda_area,
                       **out_meta})
    best_trial = max(log, key=lambda t: t.score)
    print(f"best trial {best_trial.index}: score {best_trial.score:.4f}")
    return 0


if __name__ == "__main__":
    main()
