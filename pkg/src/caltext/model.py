"""End-to-end recognizer tying the encoder, decoder, and vocabulary together."""

from dataclasses import dataclass

import numpy as np

from .decoder import CALDecoder, DecoderConfig, Hypothesis
from .encoder import DenseNetEncoder, EncoderConfig
from .tensor import Tensor
from .vocab import Vocabulary, decode_indices


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig

    def __post_init__(self):
        if self.encoder.annotation_dim != self.decoder.annotation_dim:
            raise ValueError(
                f"encoder produces {self.encoder.annotation_dim}-dim annotations "
                f"but decoder expects {self.decoder.annotation_dim}")

    @staticmethod
    def toy(vocab_size: int) -> "ModelConfig":
        enc = EncoderConfig.toy()
        return ModelConfig(enc, DecoderConfig.toy(vocab_size=vocab_size,
                                                  annotation_dim=enc.annotation_dim))

    @staticmethod
    def full(vocab_size: int = 130) -> "ModelConfig":
        enc = EncoderConfig.full()
        return ModelConfig(enc, DecoderConfig.full(vocab_size=vocab_size,
                                                   annotation_dim=enc.annotation_dim))

    @staticmethod
    def preset(name: str, vocab_size: int) -> "ModelConfig":
        if name == "toy":
            return ModelConfig.toy(vocab_size)
        if name == "full":
            return ModelConfig.full(vocab_size)
        raise ValueError(f"unknown preset {name!r}, expected 'toy' or 'full'")


class Recognizer:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        if vocab.size != config.decoder.vocab_size:
            raise ValueError(
                f"vocabulary size {vocab.size} does not match decoder config "
                f"{config.decoder.vocab_size}")
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        self.encoder = DenseNetEncoder(config.encoder, rng)
        self.decoder = CALDecoder(config.decoder, rng)

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def parameter_map(self):
        return {p.name: p for p in self.parameters()}

    def arrays(self):
        """Every array that defines the model: weights plus running stats."""
        out = {p.name: p.tensor.data for p in self.parameters()}
        out.update(self.encoder.running_stats())
        return out

    def load_arrays(self, mapping) -> None:
        own = self.arrays()
        missing = sorted(set(own) - set(mapping))
        extra = sorted(set(mapping) - set(own))
        if missing or extra:
            raise ValueError(f"array set mismatch: missing {missing}, extra {extra}")
        for name, arr in own.items():
            incoming = np.asarray(mapping[name])
            if incoming.shape != arr.shape:
                raise ValueError(
                    f"array {name!r} has shape {incoming.shape}, expected {arr.shape}")
            arr[...] = incoming

    def recognize(self, image: Tensor, beam_width: int = 5,
                  max_len: int = 150) -> tuple:
        """Decode a preprocessed image; returns (text, hypothesis)."""
        grid = self.encoder.encode(image, "infer")
        hyp: Hypothesis = self.decoder.beam_search(grid, beam_width, max_len)
        return decode_indices(hyp.sequence, self.vocab), hyp
