"""
The online adaptation engine.

For every batch of the stream the teacher prompts label weakly augmented views, the labels are refined by memory
enhancement, filtered and harvested into the instance memory (images left without labels are hallucinated from it),
and the student prompts take one AdamW step on strongly augmented views. The teacher follows the student by EMA.

Evaluation predictions for a batch are always made before the batch is used for adaptation.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ttaforge import execution, msg
from ttaforge.augment import AugmentationSpec, snap_to_patch, strong, weak
from ttaforge.backend import DetectorBackend, FeatureEmbedder, Target, ToyDetector, ToyEmbedder, pretrain_source
from ttaforge.core import Detection, Image, check_stream_image, clamp_box, nms
from ttaforge.errors import NonFiniteLoss, TTAForgeError
from ttaforge.idm import InstanceDynamicMemory
from ttaforge.idm.enhance import AffinityParams, enhance
from ttaforge.idm.halluc import HallucinationConfig, HallucinationResult, hallucinate
from ttaforge.prompts import PromptSet, WarmStartRecord, ema_update, init_text, random_visual, warm_start_visual, zero_visual
from .config import AdaptationConfig
from .optim import AdamW

MODES = ("adapt", "direct")

# rng stream index reserved for prompt initialisation; image indices never reach it
INIT_STREAM = 2 ** 32 - 1


@dataclass(frozen=True)
class Backends:
    detector: DetectorBackend
    embedder: FeatureEmbedder


@dataclass
class StepReport:
    step: int
    images: int
    loss_cls: Optional[float]
    loss_loc: Optional[float]
    loss_total: Optional[float]
    pseudo_labels: int
    hallucinated: int
    memory_sizes: Dict[int, int] = field(default_factory=dict)
    skipped: bool = False

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "images": self.images,
            "loss_cls": self.loss_cls,
            "loss_loc": self.loss_loc,
            "loss_total": self.loss_total,
            "pseudo_labels": self.pseudo_labels,
            "hallucinated": self.hallucinated,
            "memory": {str(c): n for c, n in sorted(self.memory_sizes.items())},
            "skipped": self.skipped,
        }


@dataclass
class AdaptationState:
    student: PromptSet
    teacher: PromptSet
    moments: Tuple[PromptSet, PromptSet]
    memory: InstanceDynamicMemory
    step: int = 0
    warm_started: bool = False
    record: Optional[WarmStartRecord] = None

    @classmethod
    def initial(cls, backends: Backends, config: AdaptationConfig) -> "AdaptationState":
        prompts = backends.detector.empty_prompts(config.effective_m)
        return cls(
            prompts,
            prompts.copy(),
            (prompts.zeros_like(), prompts.zeros_like()),
            InstanceDynamicMemory(len(backends.detector.categories), config.capacity),
        )


@dataclass
class BatchResult:
    image_ids: List[int]
    predictions: List[List[Detection]]
    report: Optional[StepReport] = None


def weak_spec(config: AdaptationConfig) -> AugmentationSpec:
    return AugmentationSpec("weak", config.resize_scales, config.patch_size, config.max_erase, config.erase_fill)


def strong_spec(config: AdaptationConfig) -> AugmentationSpec:
    return AugmentationSpec("strong", config.resize_scales, config.patch_size, config.max_erase, config.erase_fill)


def affinity_params(config: AdaptationConfig) -> AffinityParams:
    return AffinityParams(config.alpha, config.beta, config.th_me)


def hallucination_config(config: AdaptationConfig) -> HallucinationConfig:
    return HallucinationConfig(
        config.max_instances, config.th_iou, config.max_retries, config.mix_beta_a, config.mix_beta_b,
        (config.scale_lo, config.scale_hi),
    )


def optimizer(config: AdaptationConfig) -> AdamW:
    return AdamW(
        config.lr_text, config.lr_visual, (config.adam_beta1, config.adam_beta2), config.adam_eps, config.weight_decay,
        train_text=config.use_text_prompt, train_visual=config.use_visual_prompt and config.effective_m > 0,
    )


def image_rng(config: AdaptationConfig, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, step, index])


def select_pseudo_labels(detections: Sequence[Detection], th_pl: float, nms_iou: float = 0.5) -> List[Detection]:
    return [d for d in nms(detections, nms_iou) if d.score > th_pl]


def filter_pseudo_labels(detections: Sequence[Detection], th_pl: float, nms_iou: float = 0.5) -> List[Target]:
    """Class-agnostic NMS, then keep what scores strictly above ``th_pl``, as unit-weight targets."""
    return [Target(d.box, d.label, 1.0) for d in select_pseudo_labels(detections, th_pl, nms_iou)]


def initialize_prompts(state: AdaptationState, first_image: Image, backends: Backends, config: AdaptationConfig):
    """Set the student prompts from ``config.visual_init`` and copy them to the teacher."""
    detector = backends.detector
    m = config.effective_m
    view, _ = weak(first_image, image_rng(config, state.step, 0), weak_spec(config))
    rng = image_rng(config, state.step, INIT_STREAM)
    record = None
    if config.visual_init == "warm":
        visual, record = warm_start_visual(view, detector, m, rng, config.warm_start_noise)
    elif config.visual_init == "random":
        visual = random_visual(detector, m, rng)
    else:
        visual = zero_visual(detector, m)
    student = PromptSet(init_text(detector.categories, detector.text_dim), visual)
    state.student = student
    state.teacher = student.copy()
    state.moments = (student.zeros_like(), student.zeros_like())
    state.warm_started = True
    state.record = record
    msg.logMessage(f"Initialised prompts ({config.visual_init}, m={m})", level=msg.DEBUG)


def _evaluation_prompts(state: AdaptationState, config: AdaptationConfig) -> PromptSet:
    return state.student if config.eval_model == "student" else state.teacher


def predict_for_eval(image: Image, prompts: PromptSet, backends: Backends, config: AdaptationConfig,
                     memory: InstanceDynamicMemory = None) -> List[Detection]:
    """
    Predictions in the image's own pixel frame: predict on the patch-aligned view, optionally enhance, suppress
    duplicates, keep the best ``eval_max_detections``.
    """
    view, transform = snap_to_patch(image, config.patch_size)
    detections = backends.detector.predict(view, prompts)
    if memory is not None and config.use_enhancement:
        detections = enhance(view, detections, memory.prototypes(), backends.embedder, affinity_params(config))
    detections = nms(detections, config.eval_nms_iou)[: config.eval_max_detections]
    back = transform.inverse()
    return [d.with_box(clamp_box(back.map_box(d.box), image)) for d in detections]


@dataclass
class _Prepared:
    image: Image
    targets: List[Target]
    pseudo_labels: int
    hallucination: Optional[HallucinationResult] = None

    @property
    def hallucinated(self) -> bool:
        return self.hallucination is not None


def _prepare(image: Image, index: int, state: AdaptationState, backends: Backends,
             config: AdaptationConfig) -> _Prepared:
    """Teacher labelling, memory update and student view for one image. Mutates ``state.memory``."""
    rng = image_rng(config, state.step, index)
    view, _ = weak(image, rng, weak_spec(config))

    detections = backends.detector.predict(view, state.teacher)
    if config.use_enhancement:
        detections = enhance(view, detections, state.memory.prototypes(), backends.embedder, affinity_params(config))
    kept = select_pseudo_labels(detections, config.th_pl, config.nms_iou)
    targets = [Target(d.box, d.label, 1.0) for d in kept]

    if config.use_enhancement or config.use_hallucination:
        state.memory.harvest(view, kept, backends.embedder, config.th_pl, state.step)

    train_image, hallucination = view, None
    if not targets and config.use_hallucination and not state.memory.empty:
        result: HallucinationResult = hallucinate(view, state.memory, hallucination_config(config), rng)
        if result.labels:
            train_image, targets, hallucination = result.image, result.labels, result

    student_view, transform = strong(train_image, rng, strong_spec(config))
    mapped = [Target(transform.map_box(t.box), t.category, t.weight) for t in targets]
    return _Prepared(student_view, mapped, len(kept), hallucination)


def adapt_step(batch: Sequence[Image], state: AdaptationState, backends: Backends, config: AdaptationConfig,
               executor=None, on_hallucination: Callable[[int, int, HallucinationResult], None] = None) -> StepReport:
    """
    One online adaptation step on ``batch``; updates ``state`` in place.

    Per-image losses and gradients are computed in parallel and summed in batch order, then averaged. A non-finite
    loss skips the update: prompts, moments and the step counter stay as they were.
    """
    if not batch:
        raise ValueError("Empty batch")
    for image in batch:
        check_stream_image(image)
    executor = executor or execution.executor

    if not state.warm_started:
        initialize_prompts(state, batch[0], backends, config)

    prepared = [_prepare(image, i, state, backends, config) for i, image in enumerate(batch)]
    if on_hallucination:
        for i, p in enumerate(prepared):
            if p.hallucinated:
                on_hallucination(state.step, i, p.hallucination)
    pseudo_labels = sum(p.pseudo_labels for p in prepared)
    hallucinated = sum(p.hallucinated for p in prepared)

    def report(**losses) -> StepReport:
        return StepReport(
            state.step, len(batch), pseudo_labels=pseudo_labels, hallucinated=hallucinated,
            memory_sizes=state.memory.sizes(), **losses
        )

    if not config.use_prompt_tuning:
        out = report(loss_cls=None, loss_loc=None, loss_total=None)
        state.step += 1
        return out

    detector, student = backends.detector, state.student
    try:
        results = executor.map(lambda p: detector.loss_and_grad(p.image, p.targets, student), prepared)
        grad = results[0][1]
        for _, g in results[1:]:
            grad = grad + g
        grad = grad.scale(1.0 / len(batch))
        if not grad.is_finite():
            raise NonFiniteLoss("Prompt gradient is not finite")
    except NonFiniteLoss as ex:
        msg.logError(ex)
        msg.logMessage(f"Skipping step {state.step}: {ex}", level=msg.WARNING)
        return report(loss_cls=None, loss_loc=None, loss_total=None, skipped=True)

    n = len(batch)
    loss_cls = sum(loss.cls for loss, _ in results) / n
    loss_loc = sum(loss.loc for loss, _ in results) / n

    new_student, moments = optimizer(config).step(student, grad, state.moments, state.step + 1)
    if not new_student.is_finite():
        msg.logMessage(f"Skipping step {state.step}: update diverged", level=msg.WARNING)
        return report(loss_cls=loss_cls, loss_loc=loss_loc, loss_total=loss_cls + loss_loc, skipped=True)

    out = report(loss_cls=loss_cls, loss_loc=loss_loc, loss_total=loss_cls + loss_loc)
    state.student = new_student
    state.moments = moments
    state.teacher = ema_update(state.teacher, new_student, config.gamma)
    state.step += 1
    return out


def batches(stream: Iterable[Tuple[int, Image]], size: int):
    batch = []
    for item in stream:
        batch.append(item)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def run_stream(stream: Iterable[Tuple[int, Image]], state: Optional[AdaptationState], backends: Backends,
               config: AdaptationConfig, mode: str = "adapt", executor=None,
               on_batch: Callable[[BatchResult], None] = None,
               on_hallucination: Callable[[int, int, HallucinationResult], None] = None) -> List[BatchResult]:
    """
    Run a stream of ``(image_id, Image)`` pairs.

    ``direct`` predicts with the unprompted detector and never adapts. ``adapt`` predicts each batch with the current
    evaluation prompts (teacher by default) and enhancement, then adapts on it.
    """
    if mode not in MODES:
        raise ValueError(f"Unknown mode {mode!r}; choose one of {MODES}")
    if mode == "adapt" and state is None:
        state = AdaptationState.initial(backends, config)
    direct_prompts = backends.detector.empty_prompts(0)

    results = []
    for batch in batches(stream, config.batch_size):
        ids = [image_id for image_id, _ in batch]
        images = [image for _, image in batch]
        if mode == "direct":
            result = BatchResult(ids, [predict_for_eval(im, direct_prompts, backends, config) for im in images])
        else:
            if not state.warm_started:
                initialize_prompts(state, images[0], backends, config)
            prompts = _evaluation_prompts(state, config)
            predictions = [predict_for_eval(im, prompts, backends, config, state.memory) for im in images]
            try:
                report = adapt_step(images, state, backends, config, executor, on_hallucination)
            except TTAForgeError as ex:
                msg.logError(ex)
                report = StepReport(state.step, len(images), None, None, None, 0, 0, state.memory.sizes(), skipped=True)
            msg.logStructured(report.to_record(), level=msg.DEBUG)
            result = BatchResult(ids, predictions, report)
        results.append(result)
        if on_batch:
            on_batch(result)
    return results


def source_split(config: AdaptationConfig):
    """The clean labelled split the toy detector is pre-trained on (never written to disk)."""
    from ttaforge.data import SyntheticSpec, render

    spec = SyntheticSpec(num_images=config.pretrain_images)
    children = np.random.SeedSequence([config.backend_seed, 1]).spawn(spec.num_images)
    rendered = execution.executor.map(lambda child: render(spec, child), children)
    return spec.categories, [image for image, _ in rendered], [objects for _, objects in rendered]


def build_backends(config: AdaptationConfig, weights=None) -> Backends:
    """Toy detector (loaded from ``weights`` or seeded and pre-trained on the source split) and toy embedder."""
    from ttaforge.data import SyntheticSpec

    categories = SyntheticSpec().categories
    if weights is not None:
        detector = ToyDetector.load(weights, categories)
    else:
        detector = ToyDetector.from_seed(categories, config.backend_seed, config.patch_size, config.dim)
        if config.pretrain_images:
            _, images, annotations = source_split(config)
            detector = pretrain_source(detector, images, annotations)
    return Backends(detector, ToyEmbedder(config.backend_seed, config.embed_dim))


__all__ = [
    "AdaptationConfig",
    "AdaptationState",
    "AdamW",
    "BatchResult",
    "Backends",
    "StepReport",
    "adapt_step",
    "build_backends",
    "filter_pseudo_labels",
    "initialize_prompts",
    "predict_for_eval",
    "run_stream",
]
