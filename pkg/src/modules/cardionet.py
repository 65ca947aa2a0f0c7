"""Ensemble multilabel network.

One block per label group. Each block runs its own encoder over every segment
of a sample with shared weights, stacks the per-segment feature maps along the
channel axis (global feature map 1), merges them with a 1x1 convolution
(global feature map 2) and classifies the pooled result. A global sigmoid head
reads the concatenated, flattened global feature map 2 of all five blocks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .autodiff import Parameter, Tensor, add, concat, mul, relu, reshape, transpose
from .errors import ConfigError, ShapeError
from .labels import GROUP_NAMES, GROUP_WIDTHS, LABEL_VECTOR_LENGTH, LabelSet, decode_labels, encode_labels
from .layers import avg_pool, conv2d, dense_block, global_avg_pool, linear, sigmoid_bce, softmax_cross_entropy, transition_pool
from .pcg_data import DEFAULT_SEGMENT_LENGTH, DEFAULT_SEGMENTS_PER_SAMPLE

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    """Stem convolution followed by dense blocks, each closed by a transition pool.

    Args:
        stem_channels (int): Output channels of the 3x3 stem convolution.
        block_depths (Tuple[int, ...]): Layers per dense block.
        growth_rate (int): Channels appended by every dense layer.
    """

    stem_channels: int = 8
    block_depths: Tuple[int, ...] = (2, 2)
    growth_rate: int = 8

    @property
    def output_channels(self) -> int:
        return self.stem_channels + sum(self.block_depths) * self.growth_rate


@dataclass(frozen=True)
class NetConfig:
    segments_per_sample: int = DEFAULT_SEGMENTS_PER_SAMPLE
    segment_length: int = DEFAULT_SEGMENT_LENGTH
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    group_widths: Tuple[int, ...] = GROUP_WIDTHS
    global_weight: float = 1.0
    # Group heads average-pool global feature map 2 down to head_grid x head_grid.
    head_grid: int = 4

    def __post_init__(self):
        object.__setattr__(self, "group_widths", tuple(int(width) for width in self.group_widths))
        object.__setattr__(self, "encoder", EncoderConfig(
            self.encoder.stem_channels, tuple(self.encoder.block_depths), self.encoder.growth_rate
        ))
        self.validate()

    def validate(self) -> NetConfig:
        if self.segments_per_sample < 1:
            raise ConfigError(f"segments_per_sample must be at least 1, got {self.segments_per_sample}")
        side = math.isqrt(self.segment_length)
        if self.segment_length < 1 or side * side != self.segment_length:
            raise ConfigError(f"segment_length {self.segment_length} is not a perfect square")
        if self.group_widths != GROUP_WIDTHS:
            raise ConfigError(f"group widths must be {GROUP_WIDTHS}, got {self.group_widths}")
        if self.global_weight < 0:
            raise ConfigError(f"global_weight must be non-negative, got {self.global_weight}")
        encoder = self.encoder
        if encoder.stem_channels < 1 or encoder.growth_rate < 1 or any(depth < 0 for depth in encoder.block_depths):
            raise ConfigError(f"invalid encoder configuration {encoder}")
        downsample = 2 ** len(encoder.block_depths)
        if side % downsample:
            raise ConfigError(f"segment side {side} not divisible by {downsample} ({len(encoder.block_depths)} transition pools)")
        if self.head_grid < 1 or self.feature_side % self.head_grid:
            raise ConfigError(f"head_grid {self.head_grid} must divide the feature map side {self.feature_side}")
        return self

    @property
    def side(self) -> int:
        return math.isqrt(self.segment_length)

    @property
    def feature_side(self) -> int:
        return self.side // 2 ** len(self.encoder.block_depths)

    @property
    def feature_channels(self) -> int:
        return self.encoder.output_channels

    @property
    def head_inputs(self) -> int:
        return self.feature_channels * self.head_grid**2

    @property
    def global_feature_size(self) -> int:
        return self.feature_channels * self.feature_side**2


@dataclass
class ConvParams:
    w: Parameter
    b: Parameter

    def parameters(self) -> Iterator[Parameter]:
        yield self.w
        yield self.b


@dataclass
class LinearParams:
    w: Parameter
    b: Parameter

    def parameters(self) -> Iterator[Parameter]:
        yield self.w
        yield self.b


@dataclass
class EncoderParams:
    stem: ConvParams
    blocks: List[List[ConvParams]]

    def parameters(self) -> Iterator[Parameter]:
        yield from self.stem.parameters()
        for block in self.blocks:
            for layer in block:
                yield from layer.parameters()


@dataclass
class GroupBlockParams:
    """Encoder shared by all segments, 1x1 merge convolution and classification head."""

    encoder: EncoderParams
    merge: ConvParams
    head: LinearParams

    def parameters(self) -> Iterator[Parameter]:
        yield from self.encoder.parameters()
        yield from self.merge.parameters()
        yield from self.head.parameters()


@dataclass
class EnsembleParams:
    """Five independent group blocks plus the global head, with their configuration."""

    config: NetConfig
    blocks: Dict[str, GroupBlockParams]
    global_head: LinearParams

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        """Every parameter in a fixed order: blocks in group order, then the global head."""
        params = [param for group in GROUP_NAMES for param in self.blocks[group].parameters()]
        params += list(self.global_head.parameters())
        return [(param.name, param) for param in params]

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing, unexpected = sorted(set(named) - set(state)), sorted(set(state) - set(named))
            raise ShapeError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
        for name, values in state.items():
            if named[name].shape != np.shape(values):
                raise ShapeError(f"parameter {name}: shape {np.shape(values)} vs expected {named[name].shape}")
            named[name].data = np.array(values, dtype=np.float64)
            named[name].zero_grad()

    @property
    def size(self) -> int:
        return sum(param.data.size for param in self.parameters())


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _conv(rng: np.random.Generator, name: str, kernel: int, channels: int, filters: int) -> ConvParams:
    return ConvParams(
        Parameter(f"{name}.w", _he_normal(rng, (kernel, kernel, channels, filters), kernel * kernel * channels)),
        Parameter(f"{name}.b", np.zeros(filters)),
    )


def _linear(rng: np.random.Generator, name: str, inputs: int, outputs: int) -> LinearParams:
    return LinearParams(
        Parameter(f"{name}.w", _he_normal(rng, (inputs, outputs), inputs)),
        Parameter(f"{name}.b", np.zeros(outputs)),
    )


def init_params(config: NetConfig, seed: int = 0) -> EnsembleParams:
    """He-normal weights (variance 2 / fan_in) and zero biases.

    Args:
        config (NetConfig): Architecture.
        seed (int, optional): Seed; equal seeds give identical parameters.

    Returns:
        EnsembleParams: Freshly initialised parameters.
    """
    rng = np.random.default_rng(seed)
    encoder_config = config.encoder
    blocks = {}
    for group, width in zip(GROUP_NAMES, config.group_widths):
        channels = encoder_config.stem_channels
        stem = _conv(rng, f"{group}.encoder.stem", 3, 1, channels)
        dense = []
        for block_index, depth in enumerate(encoder_config.block_depths):
            layers = []
            for layer_index in range(depth):
                layers.append(_conv(
                    rng, f"{group}.encoder.block{block_index}.layer{layer_index}", 3, channels, encoder_config.growth_rate
                ))
                channels += encoder_config.growth_rate
            dense.append(layers)
        features = config.feature_channels
        blocks[group] = GroupBlockParams(
            EncoderParams(stem, dense),
            _conv(rng, f"{group}.merge", 1, config.segments_per_sample * features, features),
            _linear(rng, f"{group}.head", config.head_inputs, width),
        )
    global_head = _linear(rng, "global_head", len(GROUP_NAMES) * config.global_feature_size, LABEL_VECTOR_LENGTH)
    params = EnsembleParams(config, blocks, global_head)
    logger.debug("initialised %d parameters with seed %d", params.size, seed)
    return params


def reshape_sample(sample: np.ndarray) -> np.ndarray:
    """Fill every segment row-major into a square single-channel image: (..., N, L) -> (..., N, s, s, 1)."""
    sample = np.asarray(sample, dtype=np.float64)
    length = sample.shape[-1]
    side = math.isqrt(length)
    if side * side != length:
        raise ShapeError(f"segment length {length} is not a perfect square")
    return sample.reshape(sample.shape[:-1] + (side, side, 1))


def unreshape_sample(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim < 3 or images.shape[-1] != 1 or images.shape[-2] != images.shape[-3]:
        raise ShapeError(f"expected (..., s, s, 1) images, got {images.shape}")
    return images.reshape(images.shape[:-3] + (images.shape[-2] ** 2,))


def encoder_forward(encoder: EncoderParams, images: Tensor) -> Tensor:
    """(M, s, s, 1) segment images -> (M, h, h, F) feature maps."""
    x = conv2d(images, encoder.stem.w, encoder.stem.b, stride=1, padding=1)
    for block in encoder.blocks:
        x = transition_pool(dense_block(x, [(layer.w, layer.b) for layer in block]))
    return relu(x)


def _as_batch(samples: Union[np.ndarray, Tensor], config: NetConfig) -> Tensor:
    batch = samples if isinstance(samples, Tensor) else Tensor(samples)
    if batch.ndim == 2:
        batch = reshape(batch, (1,) + batch.shape)
    expected = (config.segments_per_sample, config.segment_length)
    if batch.ndim != 3 or batch.shape[1:] != expected:
        raise ShapeError(f"expected samples of shape (B, {expected[0]}, {expected[1]}), got {batch.shape}")
    return batch


def group_block_forward(
    block: GroupBlockParams, samples: Union[np.ndarray, Tensor], config: NetConfig
) -> Tuple[Tensor, Tensor]:
    """Run one label-group block.

    Args:
        block (GroupBlockParams): Block parameters.
        samples (Union[np.ndarray, Tensor]): (B, N, L) or (N, L) samples.
        config (NetConfig): Architecture.

    Returns:
        Tuple[Tensor, Tensor]: Group logits (B, K) and the flattened global feature map 2 (B, h*h*F).
    """
    batch = _as_batch(samples, config)
    count, segments = batch.shape[0], config.segments_per_sample
    side, features, h = config.side, config.feature_channels, config.feature_side
    if block.merge.w.shape != (1, 1, segments * features, features):
        raise ShapeError(f"merge kernel {block.merge.w.shape} does not match {segments} segments x {features} features")

    images = reshape(batch, (count * segments, side, side, 1))
    encoded = reshape(encoder_forward(block.encoder, images), (count, segments, h, h, features))
    # Segment i occupies channels i*F .. (i+1)*F of global feature map 1.
    stacked = reshape(transpose(encoded, (0, 2, 3, 1, 4)), (count, h, h, segments * features))
    merged = conv2d(stacked, block.merge.w, block.merge.b)

    if config.head_grid == 1:
        pooled = global_avg_pool(merged)
    elif config.head_grid == h:
        pooled = merged
    else:
        pooled = avg_pool(merged, h // config.head_grid)
    logits = linear(reshape(pooled, (count, config.head_inputs)), block.head.w, block.head.b)
    return logits, reshape(merged, (count, config.global_feature_size))


@dataclass
class EnsembleOutput:
    """Raw logits of the five group heads and the global head.

    `squeeze` marks a single unbatched sample; the probability properties then
    drop the batch axis.
    """

    group_logits: Dict[str, Tensor]
    global_logits: Tensor
    squeeze: bool = False

    def _maybe_squeeze(self, values: np.ndarray) -> np.ndarray:
        return values[0] if self.squeeze else values

    @property
    def group_probs(self) -> List[np.ndarray]:
        return [self._maybe_squeeze(special.softmax(self.group_logits[group].data, axis=1)) for group in GROUP_NAMES]

    @property
    def global_scores(self) -> np.ndarray:
        return self._maybe_squeeze(special.expit(self.global_logits.data))

    @property
    def batch_size(self) -> int:
        return self.global_logits.shape[0]


def ensemble_forward(params: EnsembleParams, samples: Union[np.ndarray, Tensor]) -> EnsembleOutput:
    """Run the five group blocks and the global head on the same samples.

    Args:
        params (EnsembleParams): Network parameters.
        samples (Union[np.ndarray, Tensor]): (B, N, L) batch or one (N, L) sample.

    Returns:
        EnsembleOutput: Five group logit tensors and the 22 global logits.
    """
    config = params.config
    batch = _as_batch(samples, config)
    group_logits, global_features = {}, []
    for group in GROUP_NAMES:
        logits, feature = group_block_forward(params.blocks[group], batch, config)
        group_logits[group] = logits
        global_features.append(feature)
    global_logits = linear(concat(global_features, axis=1), params.global_head.w, params.global_head.b)
    return EnsembleOutput(group_logits, global_logits, squeeze=_ndim(samples) == 2)


def _ndim(samples: Union[np.ndarray, Tensor]) -> int:
    return samples.ndim if isinstance(samples, Tensor) else np.ndim(samples)


def _label_list(labels: Union[LabelSet, Sequence[LabelSet]]) -> List[LabelSet]:
    return [labels] if isinstance(labels, LabelSet) else list(labels)


def joint_loss(output: EnsembleOutput, labels: Union[LabelSet, Sequence[LabelSet]], global_weight: float = 1.0) -> Tensor:
    """Sum of the group cross-entropies plus `global_weight` times the global binary cross-entropy.

    Both terms are averaged over the batch.

    Args:
        output (EnsembleOutput): Forward result.
        labels (Union[LabelSet, Sequence[LabelSet]]): One LabelSet per sample.
        global_weight (float, optional): Weight of the global term; 0 drops it.

    Returns:
        Tensor: Scalar loss.
    """
    if global_weight < 0:
        raise ConfigError(f"global_weight must be non-negative, got {global_weight}")
    label_sets = _label_list(labels)
    if len(label_sets) != output.batch_size:
        raise ShapeError(f"{len(label_sets)} label sets for a batch of {output.batch_size}")
    targets = np.array([labels.as_tuple() for labels in label_sets], dtype=int)

    loss: Optional[Tensor] = None
    for position, group in enumerate(GROUP_NAMES):
        _, group_loss = softmax_cross_entropy(output.group_logits[group], targets[:, position])
        loss = group_loss if loss is None else add(loss, group_loss)
    if global_weight > 0:
        encoded = np.stack([encode_labels(labels) for labels in label_sets])
        _, global_loss = sigmoid_bce(output.global_logits, encoded)
        loss = add(loss, mul(global_loss, global_weight))
    return loss


def predict_batch(params: EnsembleParams, samples: np.ndarray, batch_size: int = 32) -> List[LabelSet]:
    """Per-group argmax of the group heads for every sample; the global head is not consulted."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    predictions = []
    for start in range(0, samples.shape[0], batch_size):
        probs = ensemble_forward(params, samples[start : start + batch_size]).group_probs
        joined = np.concatenate(probs, axis=1)
        predictions += [decode_labels(row) for row in joined]
    return predictions


def predict_sample(params: EnsembleParams, sample: np.ndarray) -> LabelSet:
    """Predicted LabelSet of one (N, L) sample."""
    return predict_batch(params, sample)[0]
