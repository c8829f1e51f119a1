"""Wiring from a RunConfig to encoders, data, model and training runs."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .classifier import PromptClassifier
from .config import RunConfig
from .data import (
    DatasetManifest,
    PreprocessConfig,
    SyntheticSpec,
    load_manifest,
    load_pixels,
    make_synthetic,
    preprocess,
    split,
    synthetic_pixels,
)
from .encoders import DualEncoder, ImageEncoderConfig, TextEncoderConfig
from .graph import GradCheckReport, grad_check
from .prompting import AblationFlags, ClassEmbeddings, Vocabulary, parse_template
from .training import TrainResult, TrainSettings, evaluate, train


def default_vocabulary() -> Vocabulary:
    with resources.as_file(resources.files("dpc.configs").joinpath("vocab.txt")) as path:
        return Vocabulary.from_file(path)


def load_vocabulary(config: RunConfig) -> Vocabulary:
    if config.vocab:
        return Vocabulary.from_file(config.resolve(config.vocab))
    return default_vocabulary()


def encoder_configs(config: RunConfig, vocab_size: int) -> tuple[ImageEncoderConfig, TextEncoderConfig]:
    return (ImageEncoderConfig(config.image_size, config.patch_size, config.image_width,
                               config.layers, config.dim),
            TextEncoderConfig(vocab_size, config.dim, config.layers, config.context_length))


def build_encoders(config: RunConfig, vocab: Vocabulary, dtype=np.float32) -> DualEncoder:
    image_cfg, text_cfg = encoder_configs(config, len(vocab))
    if config.encoder_archive:
        return DualEncoder.load_weights(config.resolve(config.encoder_archive), image_cfg, text_cfg, dtype)
    return DualEncoder.init(image_cfg, text_cfg, config.seed_weights, dtype)


def preprocess_config(config: RunConfig) -> PreprocessConfig:
    name = config.preprocess
    base = PreprocessConfig.load(name if name in ("clip", "tiny") else str(config.resolve(name)))
    return PreprocessConfig(base.mean, base.std, config.image_size)


def prompt_seed(config: RunConfig) -> np.random.SeedSequence:
    # third child of the weights seed; children 0 and 1 seed the two encoders
    return np.random.SeedSequence(config.seed_weights, spawn_key=(2,))


@dataclass
class Prepared:
    config: RunConfig
    vocab: Vocabulary
    encoders: DualEncoder
    train: DatasetManifest
    test: DatasetManifest
    train_x: np.ndarray  # frozen image features
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def labels(self) -> tuple[str, ...]:
        return self.train.labels

    @property
    def certificate(self) -> float | None:
        return self.train.certificate


def prepare(config: RunConfig, threads: int = 1) -> Prepared:
    vocab = load_vocabulary(config)
    encoders = build_encoders(config, vocab)
    pre = preprocess_config(config)
    if config.is_synthetic:
        spec = SyntheticSpec(classes=config.synthetic_classes, per_class=config.synthetic_per_class,
                             image_size=config.image_size, seed=config.seed_data)
        full = make_synthetic(spec, encoders.image, pre)
        train_m, test_m = split(full, (config.train_fraction, 1 - config.train_fraction), config.seed_data)
    else:
        full = load_manifest(config.resolve(config.manifest))
        train_m, test_m = full.by_split("train"), full.by_split("test")

    def features(m: DatasetManifest) -> np.ndarray:
        pixels = load_pixels(m, pre, threads)
        if not len(pixels):
            return np.zeros((0, config.dim), dtype=np.float32)
        return np.concatenate([encoders.image.encode(pixels[i:i + 64]).data
                               for i in range(0, len(pixels), 64)])

    return Prepared(config, vocab, encoders, train_m, test_m,
                    features(train_m), train_m.targets(), features(test_m), test_m.targets())


def config_flags(config: RunConfig) -> AblationFlags:
    return AblationFlags(config.instance_specific, config.class_specific)


def build_model(config: RunConfig, prep: Prepared, flags: AblationFlags | None = None,
                template: str | None = None, encoders: DualEncoder | None = None) -> PromptClassifier:
    encoders = encoders or prep.encoders
    tmpl = parse_template(template or config.template, prep.vocab)
    classes = ClassEmbeddings.build(prep.labels, prep.vocab, encoders.text.token_embedding)
    return PromptClassifier.build(encoders, tmpl, classes, flags or config_flags(config),
                                  seed=prompt_seed(config), normalize_weights=config.normalize_weights,
                                  logit_scale=config.logit_scale)


def train_settings(config: RunConfig, threads: int = 1) -> TrainSettings:
    return TrainSettings(lr0=config.lr0, momentum=config.momentum, step_size=config.lr_step,
                         gamma=config.lr_gamma, batch_size=config.batch_size, epochs=config.epochs,
                         shuffle_seed=config.seed_shuffle, threads=threads)


def run_training(config: RunConfig, prep: Prepared, flags: AblationFlags | None = None,
                 template: str | None = None, threads: int = 1,
                 max_steps: int | None = None) -> tuple[PromptClassifier, TrainResult]:
    model = build_model(config, prep, flags, template)
    result = train(model, prep.train_x, prep.train_y, train_settings(config, threads),
                   prep.test_x, prep.test_y, max_steps=max_steps)
    return model, result


def zero_shot_accuracy(config: RunConfig, prep: Prepared, threads: int = 1) -> float:
    """Test accuracy of the untrained hand-written template (shared prompt, no tuning)."""
    model = build_model(config, prep, AblationFlags(False, False))
    return evaluate(model, prep.test_x, prep.test_y, config.batch_size, threads).accuracy


def gradient_check(config: RunConfig, per_class: int = 2, batches: int = 2, h: float = 1e-4,
                   tolerance: float = 1e-4) -> GradCheckReport:
    """Analytic vs central-difference d(loss)/d(prompt bank) in 64-bit.

    Every bank coordinate is checked, once per seeded synthetic batch.
    """
    vocab = load_vocabulary(config)
    encoders = build_encoders(config, vocab).astype(np.float64)
    pre = preprocess_config(config)
    spec = SyntheticSpec(classes=config.synthetic_classes, per_class=per_class,
                         image_size=config.image_size, seed=config.seed_data)
    labels = spec.label_names()
    tmpl = parse_template(config.template, vocab)
    classes = ClassEmbeddings.build(labels, vocab, encoders.text.token_embedding)
    model = PromptClassifier.build(encoders, tmpl, classes, config_flags(config),
                                   seed=prompt_seed(config), normalize_weights=config.normalize_weights,
                                   logit_scale=config.logit_scale)
    targets = np.repeat(np.arange(spec.classes), per_class)
    report = GradCheckReport(tolerance=tolerance, step=h)
    for b in range(batches):
        images = synthetic_pixels(spec, config.seed_data + b)
        pixels = np.stack([preprocess(img, pre) for img in images.values()])
        feats = encoders.image.encode(pixels).data
        sub = grad_check(lambda: model.loss(feats, targets), model.parameters(), h=h, tolerance=tolerance)
        for check in sub.checks:
            check.name = f"{check.name}[batch{b}]"
        report.checks.extend(sub.checks)
    return report
