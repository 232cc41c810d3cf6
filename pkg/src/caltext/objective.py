"""Training objective and optimizer.

The per-sample error is

    E = -sum_t ln p(target_t) + weight_decay * r(theta)
        + localization_weight * penalty(attention maps)

with r(theta) the squared L2 norm over non-convolutional parameters only and
teacher forcing throughout (each step conditions on the ground-truth previous
character). Updates use Adadelta with global-norm gradient clipping.

The localization penalty ships in two modes. `literal` sums |alpha| over all
steps and locations; since every attention map is softmax-normalized this is
identically the step count and its gradient through the softmax is exactly
zero, so it cannot influence training. That degenerate behavior is asserted
by tests rather than silently patched. `sparsity_surrogate` sums
1 - sum(alpha^2) per step, which is 0 for one-hot attention and largest for
uniform attention, and does carry gradient.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import PROB_FLOOR, CALDecoder
from .encoder import AnnotationGrid
from .metrics import corpus_report
from .model import Recognizer
from .tensor import NON_CONVOLUTIONAL, Tensor
from .vocab import EOS_INDEX, decode_indices


@dataclass(frozen=True)
class LossConfig:
    weight_decay: float = 1e-4
    localization_weight: float = 1.0
    localization_mode: str = "literal"
    clip_threshold: float = 100.0
    decay_rate: float = 0.95
    stability_epsilon: float = 1e-6

    def __post_init__(self):
        if self.weight_decay < 0 or self.localization_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.localization_mode not in ("literal", "sparsity_surrogate"):
            raise ValueError(
                f"localization_mode must be 'literal' or 'sparsity_surrogate', "
                f"got {self.localization_mode!r}")
        if not 0.0 < self.decay_rate < 1.0:
            raise ValueError("decay_rate must lie in (0, 1)")


def localization_penalty(alphas, mode: str) -> Tensor:
    if not alphas:
        raise ValueError("penalty needs at least one attention map")
    total = None
    for alpha in alphas:
        if mode == "literal":
            term = T.absolute(alpha).sum()
        elif mode == "sparsity_surrogate":
            term = Tensor(1.0) - (alpha * alpha).sum()
        else:
            raise ValueError(f"unknown localization mode {mode!r}")
        total = term if total is None else total + term
    return total


def regularizer(parameters) -> Tensor:
    """Squared L2 norm over non-convolutional parameters."""
    total = None
    for p in parameters:
        if p.layer_kind != NON_CONVOLUTIONAL:
            continue
        term = (p.tensor ** 2.0).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def _validate_target(target, vocab_size: int):
    target = list(target)
    if not target:
        raise ValueError("target sequence is empty")
    if target[-1] != EOS_INDEX:
        raise ValueError("target sequence must end with the end marker")
    for idx in target:
        if not 0 <= idx < vocab_size:
            raise ValueError(f"target index {idx} outside vocabulary 0..{vocab_size - 1}")
    return target


def teacher_forced_decode(decoder: CALDecoder, annotations: AnnotationGrid, target):
    """Negative log likelihood of `target` under teacher forcing.

    Returns (nll, alphas) with the per-step attention maps still attached to
    the graph so the localization penalty can differentiate through them.
    """
    target = _validate_target(target, decoder.config.vocab_size)
    state = decoder.initial_state(annotations)
    nll = None
    alphas = []
    for y in target:
        probs, alpha, state = decoder.decode_step(state, annotations)
        step_nll = -T.log(T.clamp_min(probs[y], PROB_FLOOR))
        nll = step_nll if nll is None else nll + step_nll
        alphas.append(alpha)
        state = state.with_choice(y)
    return nll, alphas


def sequence_loss(recognizer: Recognizer, image: Tensor, target,
                  config: LossConfig, rng,
                  encoder_mode: str = "train") -> Tensor:
    """Full per-sample training error on one preprocessed image.

    `encoder_mode` "infer" freezes the encoder's normalization statistics
    and disables dropout while still training every weight; useful for a
    fine-tuning phase where training features must match inference features.
    """
    grid = recognizer.encoder.encode(image, encoder_mode,
                                     rng if encoder_mode == "train" else None)
    loss, alphas = teacher_forced_decode(recognizer.decoder, grid, target)
    if config.weight_decay > 0:
        loss = loss + Tensor(config.weight_decay) * regularizer(recognizer.parameters())
    if config.localization_weight > 0:
        penalty = localization_penalty(alphas, config.localization_mode)
        loss = loss + Tensor(config.localization_weight) * penalty
    return loss


@dataclass
class OptimizerState:
    square_avg: dict = field(default_factory=dict)
    acc_delta: dict = field(default_factory=dict)

    @staticmethod
    def for_parameters(parameters) -> "OptimizerState":
        state = OptimizerState()
        for p in parameters:
            state.square_avg[p.name] = np.zeros_like(p.tensor.data)
            state.acc_delta[p.name] = np.zeros_like(p.tensor.data)
        return state


def zero_grads(parameters) -> None:
    for p in parameters:
        p.tensor.zero_grad()


def adadelta_step(parameters, opt_state: OptimizerState, config: LossConfig) -> None:
    """One clipped Adadelta update, in place. Missing grads count as zero."""
    grads = {}
    sq_sum = 0.0
    for p in parameters:
        g = p.grad if p.grad is not None else np.zeros_like(p.tensor.data)
        if np.isnan(g).any():
            raise FloatingPointError(f"NaN gradient in parameter {p.name!r}; step aborted")
        grads[p.name] = g
        sq_sum += float((g * g).sum())

    norm = np.sqrt(sq_sum)
    scale = config.clip_threshold / norm if norm > config.clip_threshold else 1.0

    rho, eps = config.decay_rate, config.stability_epsilon
    for p in parameters:
        g = grads[p.name] * scale
        sq = opt_state.square_avg[p.name]
        acc = opt_state.acc_delta[p.name]
        sq *= rho
        sq += (1.0 - rho) * g * g
        delta = np.sqrt((acc + eps) / (sq + eps)) * g
        acc *= rho
        acc += (1.0 - rho) * delta * delta
        p.tensor.data -= delta


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    probe_cer: float

    def log_line(self) -> str:
        return f"epoch {self.epoch} loss {self.mean_loss:.6f} probe_cer {self.probe_cer:.4f}"


def probe_outputs(recognizer: Recognizer, samples, max_len: int = 50):
    """Greedy-decode (target, output) text pairs for (image, text) samples."""
    pairs = []
    with T.no_grad():
        for image, text in samples:
            grid = recognizer.encoder.encode(image, "infer")
            hyp = recognizer.decoder.greedy_decode(grid, max_len)
            pairs.append((text, decode_indices(hyp.sequence, recognizer.vocab)))
    return pairs


def probe_cer(recognizer: Recognizer, samples, max_len: int = 50) -> float:
    """Corpus CER of greedy decodes; blank targets are excluded by the report.

    When every target is blank the CER is undefined, so the mismatch
    fraction stands in for it.
    """
    pairs = probe_outputs(recognizer, samples, max_len)
    if all(len(t) == 0 for t, _ in pairs):
        exact = sum(1.0 for t, o in pairs if t == o) / len(pairs)
        return (1.0 - exact) * 100.0
    return corpus_report(pairs).aggregate_cer


def train_epoch(recognizer: Recognizer, batches, opt_state: OptimizerState,
                config: LossConfig, rng, grad_hook=None,
                encoder_mode: str = "train") -> tuple:
    """One pass over `batches` (lists of (image Tensor, target indices)).

    Per batch: sum the per-sample errors, backpropagate their mean, then one
    Adadelta step. Returns (mean sample loss, number of steps taken).
    `grad_hook`, when given, maps each gradient array before the step; it
    exists for diagnostics (e.g. forcing zero gradients) and tests.
    """
    params = recognizer.parameters()
    total_loss = 0.0
    total_samples = 0
    steps = 0
    for batch in batches:
        if not batch:
            continue
        zero_grads(params)
        batch_loss = None
        for image, target in batch:
            loss = sequence_loss(recognizer, image, target, config, rng,
                                 encoder_mode=encoder_mode)
            batch_loss = loss if batch_loss is None else batch_loss + loss
        total_loss += float(batch_loss.data)
        total_samples += len(batch)
        (batch_loss * (1.0 / len(batch))).backward()
        if grad_hook is not None:
            for p in params:
                if p.grad is not None:
                    p.tensor.grad = grad_hook(p.grad)
        adadelta_step(params, opt_state, config)
        steps += 1
    if total_samples == 0:
        raise ValueError("train_epoch received no samples")
    return total_loss / total_samples, steps


def make_batches(samples, batch_size: int, rng):
    order = rng.permutation(len(samples))
    return [[samples[i] for i in order[pos:pos + batch_size]]
            for pos in range(0, len(order), batch_size)]


def train(recognizer: Recognizer, train_samples, probe_samples,
          config: LossConfig, seed: int, epochs: int, batch_size: int = 16,
          augment=None, stop_cer: float = None, require_exact: bool = False,
          max_steps: int = None, log=None, probe_every: int = 1,
          checkpoint_hook=None, encoder_mode: str = "train",
          opt_state: OptimizerState = None):
    """Epoch loop; `train_samples` are (image Tensor, target indices, text)
    triples and `probe_samples` are (image Tensor, text) pairs.

    Emits one `epoch <n> loss <float> probe_cer <float>` line per probed
    epoch through `log`. Deterministic for a fixed seed. Stops early once the
    probe CER reaches `stop_cer` (with every probe line, blank ones included,
    decoded exactly when `require_exact`), or when the Adadelta step budget
    `max_steps` runs out. Returns the list of EpochStats.

    Pass `encoder_mode` "infer" for a statistics-frozen fine-tuning phase and
    `opt_state` to continue from an earlier run's optimizer accumulators.
    """
    rng = np.random.default_rng(seed)
    if opt_state is None:
        opt_state = OptimizerState.for_parameters(recognizer.parameters())
    history = []
    steps_taken = 0
    for epoch in range(1, epochs + 1):
        batches = []
        for batch in make_batches(train_samples, batch_size, rng):
            prepared = []
            for image, target, _text in batch:
                if augment is not None:
                    image = augment(image, rng)
                prepared.append((image, target))
            batches.append(prepared)
        mean_loss, steps = train_epoch(recognizer, batches, opt_state, config,
                                       rng, encoder_mode=encoder_mode)
        steps_taken += steps

        probed = epoch % probe_every == 0 or epoch == epochs
        all_exact = False
        if probed:
            pairs = probe_outputs(recognizer, probe_samples)
            if all(len(t) == 0 for t, _ in pairs):
                cer_now = (1.0 - sum(t == o for t, o in pairs) / len(pairs)) * 100.0
            else:
                cer_now = corpus_report(pairs).aggregate_cer
            all_exact = all(t == o for t, o in pairs)
        else:
            cer_now = float("nan")
        stats = EpochStats(epoch=epoch, mean_loss=mean_loss, probe_cer=cer_now)
        history.append(stats)
        if log is not None and probed:
            log(stats.log_line())
        if checkpoint_hook is not None:
            checkpoint_hook(epoch, recognizer, opt_state)
        if (probed and stop_cer is not None and cer_now <= stop_cer
                and (all_exact or not require_exact)):
            break
        if max_steps is not None and steps_taken >= max_steps:
            break
    return history
