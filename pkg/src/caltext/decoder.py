"""Attention decoder: two gated recurrent units around a contextual
attention localization step.

Per decoded character the unit chain is

    gru1_step         predicted hidden state from the previous character
    compute_coverage  convolution over the attention aggregated so far
    attend            additive attention energies -> softmax over regions
    context           attention-weighted sum of annotation vectors
    gru2_step         final hidden state from predicted state + context
    output_probs      probability vector over the vocabulary

Coverage at step t sees attention from steps 1..t-1 only; the current map is
folded into the running total after it has been consumed.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .encoder import AnnotationGrid
from .tensor import CONVOLUTIONAL, NON_CONVOLUTIONAL, Parameter, Tensor, no_grad
from .vocab import EOS_INDEX

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 130
    embedding_dim: int = 256
    hidden_dim: int = 256
    attention_dim: int = 256
    annotation_dim: int = 684
    coverage_extent: int = 11
    coverage_channels: int = 512

    def __post_init__(self):
        dims = (self.vocab_size, self.embedding_dim, self.hidden_dim,
                self.attention_dim, self.annotation_dim,
                self.coverage_extent, self.coverage_channels)
        if any(v <= 0 for v in dims):
            raise ValueError(f"decoder dims must be positive, got {dims}")
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs the end marker plus one symbol")
        if self.coverage_extent % 2 == 0:
            raise ValueError(
                f"coverage_extent must be odd for extent-preserving convolution, "
                f"got {self.coverage_extent}")

    @staticmethod
    def toy(vocab_size: int = 4, annotation_dim: int = 8) -> "DecoderConfig":
        return DecoderConfig(vocab_size=vocab_size, embedding_dim=8, hidden_dim=8,
                             attention_dim=8, annotation_dim=annotation_dim,
                             coverage_extent=3, coverage_channels=4)

    @staticmethod
    def full(vocab_size: int = 130, annotation_dim: int = 684) -> "DecoderConfig":
        return DecoderConfig(vocab_size=vocab_size, embedding_dim=256, hidden_dim=256,
                             attention_dim=256, annotation_dim=annotation_dim,
                             coverage_extent=11, coverage_channels=512)


@dataclass(frozen=True)
class DecoderState:
    hidden: Tensor
    previous_index: int
    aggregated_attention: Tensor
    step: int

    def with_choice(self, index: int) -> "DecoderState":
        """Fix the character chosen at the step that produced this state."""
        return replace(self, previous_index=index)


@dataclass
class Hypothesis:
    sequence: list
    log_prob: float
    state: DecoderState
    alphas: list = field(default_factory=list)

    def finished(self) -> bool:
        return bool(self.sequence) and self.sequence[-1] == EOS_INDEX


def _glorot(rng, rows, cols):
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


class CALDecoder:
    def __init__(self, config: DecoderConfig, rng):
        self.config = config
        k, m, h = config.vocab_size, config.embedding_dim, config.hidden_dim
        n, d = config.attention_dim, config.annotation_dim
        f, q = config.coverage_extent, config.coverage_channels

        def proj(name, rows, cols):
            return Parameter(f"decoder.{name}", Tensor(_glorot(rng, rows, cols)),
                             NON_CONVOLUTIONAL)

        self.embedding = proj("embedding", k, m)

        self.gru1_update_embed = proj("gru1.update_embed", m, h)
        self.gru1_update_hidden = proj("gru1.update_hidden", h, h)
        self.gru1_reset_embed = proj("gru1.reset_embed", m, h)
        self.gru1_reset_hidden = proj("gru1.reset_hidden", h, h)
        self.gru1_cand_embed = proj("gru1.cand_embed", m, h)
        self.gru1_cand_hidden = proj("gru1.cand_hidden", h, h)

        # zero start so early training runs on content alone
        self.coverage_filters = Parameter("decoder.coverage_filters",
                                          Tensor(np.zeros((f, f, 1, q))),
                                          CONVOLUTIONAL)

        self.query_proj = proj("attend.query_proj", h, n)
        self.annotation_proj = proj("attend.annotation_proj", d, n)
        self.coverage_proj = proj("attend.coverage_proj", q, n)
        bound = np.sqrt(6.0 / (n + 1))
        self.score_vector = Parameter("decoder.attend.score_vector",
                                      Tensor(rng.uniform(-bound, bound, size=n)),
                                      NON_CONVOLUTIONAL)

        self.gru2_update_hidden = proj("gru2.update_hidden", h, h)
        self.gru2_update_context = proj("gru2.update_context", d, h)
        self.gru2_reset_hidden = proj("gru2.reset_hidden", h, h)
        self.gru2_reset_context = proj("gru2.reset_context", d, h)
        self.gru2_cand_hidden = proj("gru2.cand_hidden", h, h)
        self.gru2_cand_context = proj("gru2.cand_context", d, h)

        self.out_embed_proj = proj("out.embed_proj", m, m)
        self.out_hidden_proj = proj("out.hidden_proj", h, m)
        self.out_context_proj = proj("out.context_proj", d, m)
        self.out_proj = proj("out.proj", m, k)

    def parameters(self):
        return [
            self.embedding,
            self.gru1_update_embed, self.gru1_update_hidden,
            self.gru1_reset_embed, self.gru1_reset_hidden,
            self.gru1_cand_embed, self.gru1_cand_hidden,
            self.coverage_filters,
            self.query_proj, self.annotation_proj, self.coverage_proj,
            self.score_vector,
            self.gru2_update_hidden, self.gru2_update_context,
            self.gru2_reset_hidden, self.gru2_reset_context,
            self.gru2_cand_hidden, self.gru2_cand_context,
            self.out_embed_proj, self.out_hidden_proj, self.out_context_proj,
            self.out_proj,
        ]

    def embed(self, index: int) -> Tensor:
        if not 0 <= index < self.config.vocab_size:
            raise ValueError(
                f"character index {index} outside vocabulary range "
                f"0..{self.config.vocab_size - 1}")
        return self.embedding.tensor[index]

    def initial_state(self, grid: AnnotationGrid) -> DecoderState:
        return DecoderState(
            hidden=Tensor(np.zeros(self.config.hidden_dim)),
            previous_index=EOS_INDEX,
            aggregated_attention=Tensor(np.zeros((grid.h, grid.w))),
            step=1,
        )

    def gru1_step(self, y_prev: int, h_prev: Tensor) -> Tensor:
        emb = self.embed(y_prev)
        update = T.sigmoid(emb @ self.gru1_update_embed.tensor
                           + h_prev @ self.gru1_update_hidden.tensor)
        reset = T.sigmoid(emb @ self.gru1_reset_embed.tensor
                          + h_prev @ self.gru1_reset_hidden.tensor)
        candidate = T.tanh(emb @ self.gru1_cand_embed.tensor
                           + (reset * h_prev) @ self.gru1_cand_hidden.tensor)
        return update * h_prev + (Tensor(1.0) - update) * candidate

    def compute_coverage(self, aggregated_attention: Tensor) -> Tensor:
        gh, gw = aggregated_attention.shape
        planar = aggregated_attention.reshape(gh, gw, 1)
        return T.conv2d(planar, self.coverage_filters.tensor, padding="same")

    def attend(self, h_hat: Tensor, annotations: AnnotationGrid,
               coverage: Tensor) -> Tensor:
        L = annotations.num_regions
        flat_annotations = annotations.as_matrix()
        flat_coverage = coverage.reshape(L, self.config.coverage_channels)
        pre = (flat_annotations @ self.annotation_proj.tensor
               + flat_coverage @ self.coverage_proj.tensor
               + h_hat @ self.query_proj.tensor)
        energies = T.tanh(pre) @ self.score_vector.tensor
        return T.softmax(energies)

    def context(self, alpha: Tensor, annotations: AnnotationGrid) -> Tensor:
        if alpha.shape != (annotations.num_regions,):
            raise ValueError(
                f"attention length {alpha.shape} does not match "
                f"{annotations.num_regions} regions")
        return alpha @ annotations.as_matrix()

    def gru2_step(self, h_hat: Tensor, context: Tensor) -> Tensor:
        update = T.sigmoid(h_hat @ self.gru2_update_hidden.tensor
                           + context @ self.gru2_update_context.tensor)
        reset = T.sigmoid(h_hat @ self.gru2_reset_hidden.tensor
                          + context @ self.gru2_reset_context.tensor)
        candidate = T.tanh((reset * h_hat) @ self.gru2_cand_hidden.tensor
                           + context @ self.gru2_cand_context.tensor)
        return update * h_hat + (Tensor(1.0) - update) * candidate

    def output_probs(self, y_prev: int, hidden: Tensor, context: Tensor) -> Tensor:
        merged = (self.embed(y_prev) @ self.out_embed_proj.tensor
                  + hidden @ self.out_hidden_proj.tensor
                  + context @ self.out_context_proj.tensor)
        return T.softmax(merged @ self.out_proj.tensor)

    def decode_step(self, state: DecoderState, annotations: AnnotationGrid):
        """One character step; returns (probs, alpha, new_state).

        new_state still carries the previous character; callers fix their
        chosen character via new_state.with_choice(index) before stepping on.
        """
        if state.step < 1:
            raise ValueError(f"decoder step must be >= 1, got {state.step}")
        h_hat = self.gru1_step(state.previous_index, state.hidden)
        coverage = self.compute_coverage(state.aggregated_attention)
        alpha = self.attend(h_hat, annotations, coverage)
        ctx = self.context(alpha, annotations)
        hidden = self.gru2_step(h_hat, ctx)
        probs = self.output_probs(state.previous_index, hidden, ctx)
        new_state = DecoderState(
            hidden=hidden,
            previous_index=state.previous_index,
            aggregated_attention=(state.aggregated_attention
                                  + alpha.reshape(*state.aggregated_attention.shape)),
            step=state.step + 1,
        )
        return probs, alpha, new_state

    def greedy_decode(self, annotations: AnnotationGrid, max_len: int) -> Hypothesis:
        """Argmax decoding, written independently of beam_search on purpose."""
        with no_grad():
            state = self.initial_state(annotations)
            hyp = Hypothesis([], 0.0, state)
            for _ in range(max_len):
                probs, alpha, state = self.decode_step(hyp.state, annotations)
                choice = int(np.argmax(probs.data))
                hyp = Hypothesis(
                    hyp.sequence + [choice],
                    hyp.log_prob + float(np.log(max(probs.data[choice], PROB_FLOOR))),
                    state.with_choice(choice),
                    hyp.alphas + [alpha.data.copy()],
                )
                if choice == EOS_INDEX:
                    break
            return hyp

    def beam_search(self, annotations: AnnotationGrid, beam_width: int,
                    max_len: int) -> Hypothesis:
        if beam_width < 1:
            raise ValueError(f"beam width must be >= 1, got {beam_width}")
        if max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {max_len}")

        def rank(h: Hypothesis):
            return (-h.log_prob, len(h.sequence), h.sequence)

        with no_grad():
            live = [Hypothesis([], 0.0, self.initial_state(annotations))]
            finished = []
            for _ in range(max_len):
                candidates = []
                for hyp in live:
                    probs, alpha, new_state = self.decode_step(hyp.state, annotations)
                    log_probs = np.log(np.maximum(probs.data, PROB_FLOOR))
                    alpha_copy = alpha.data.copy()
                    for idx in range(self.config.vocab_size):
                        candidates.append(Hypothesis(
                            hyp.sequence + [idx],
                            hyp.log_prob + float(log_probs[idx]),
                            new_state.with_choice(idx),
                            hyp.alphas + [alpha_copy],
                        ))
                candidates.sort(key=rank)
                kept = candidates[:beam_width]
                live = []
                for hyp in kept:
                    (finished if hyp.finished() else live).append(hyp)
                if not live:
                    break
            # any still-live hypothesis finishes forcibly at max_len
            finished.extend(live)
            return min(finished, key=rank)
