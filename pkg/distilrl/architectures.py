"""
Architectures as Data
=====================

This module contains the intermediate representation of the networks being
compressed. An `Architecture` is an immutable, ordered list of `LayerSpec`
records plus the input shape, the number of classes, and the spans of any
residual (skip-connection) blocks. It is the state of the compression
process: the removal and shrinkage actions (`apply_removal`,
`apply_shrinkage`) transform one architecture into another, deterministically
and without touching their input.

Other functionality:

* shape inference and parameter counting (`infer_shapes`, `param_count`);

* classification of degenerate architectures, which are scored with a fixed
  reward of -1 instead of being trained (`classify_degenerate`);

* the per-layer feature vectors observed by the policies
  (`encode_layer_features`, `shrink_features`);

* a human-readable text format (`dumps` / `loads`, `save` / `load`) which
  round-trips exactly.

Tensor shapes are `(channels, height, width)` triples throughout. A `Linear`
layer flattens whatever it receives and produces `(n_out, 1, 1)`.
"""

import enum
import hashlib
import dataclasses

import numpy as np


FORMAT_HEADER = "distilrl-architecture"
FORMAT_VERSION = 1

DEFAULT_MAX_FLATTEN = 16384


class ShapeError(ValueError):
    """Shape inference failed: some layer would see a dimension below 1."""


class ArchitectureFormatError(ValueError):
    """An architecture text file could not be parsed."""


class LayerType(str, enum.Enum):
    CONV2D = "Conv2d"
    LINEAR = "Linear"
    MAXPOOL = "MaxPool"
    ACTIVATION = "Activation"
    BATCHNORM = "BatchNorm"
    FLATTEN = "Flatten"


LAYER_TYPES = tuple(LayerType)
WEIGHT_LAYER_TYPES = (LayerType.CONV2D, LayerType.LINEAR)
SPATIAL_LAYER_TYPES = (LayerType.CONV2D, LayerType.MAXPOOL)


class DegeneracyClass(str, enum.Enum):
    VALID = "Valid"
    EMPTY_ARCHITECTURE = "EmptyArchitecture"
    LARGE_FC = "LargeFC"
    BLOCK_MISMATCH = "BlockMismatch"
    SHAPE_FAILURE = "ShapeFailure"


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    """
    One layer of an architecture.

    Fields:

    * `layer_type` (`LayerType`)
    * `kernel` (int): kernel size in pixels, 0 for non-spatial layers.
    * `stride` (int): at least 1.
    * `padding` (int): at least 0.
    * `n_out` (int): output filters or units, 0 for shape-preserving layers.
    * `skip_start`, `skip_end` (int): position inside the enclosing residual
      block, counted from its first and last layer respectively (both 1 at
      the block boundary layers), or both 0 outside any block. These are
      filled in by `Architecture` from its block spans.
    """
    layer_type: LayerType
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    n_out: int = 0
    skip_start: int = 0
    skip_end: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'layer_type', LayerType(self.layer_type))
        if self.layer_type in SPATIAL_LAYER_TYPES:
            if self.kernel < 1 or self.stride < 1:
                raise ValueError(f"{self.layer_type.value} needs kernel and "
                                 f"stride >= 1, got {self!r}")
        if self.layer_type in WEIGHT_LAYER_TYPES and self.n_out < 1:
            raise ValueError(f"{self.layer_type.value} needs n_out >= 1, "
                             f"got {self!r}")
        if self.padding < 0 or self.stride < 1:
            raise ValueError(f"bad padding or stride in {self!r}")
        if (self.skip_start == 0) != (self.skip_end == 0):
            raise ValueError(f"skip_start and skip_end must both be zero or "
                             f"both be positive, got {self!r}")


# # Layer constructors


def conv(n_out, kernel=3, stride=1, padding=1):
    return LayerSpec(LayerType.CONV2D, kernel, stride, padding, n_out)


def linear(n_out):
    return LayerSpec(LayerType.LINEAR, 0, 1, 0, n_out)


def maxpool(kernel=2, stride=2, padding=0):
    return LayerSpec(LayerType.MAXPOOL, kernel, stride, padding, 0)


def relu():
    return LayerSpec(LayerType.ACTIVATION)


def batchnorm():
    return LayerSpec(LayerType.BATCHNORM)


def flatten():
    return LayerSpec(LayerType.FLATTEN)


@dataclasses.dataclass(frozen=True)
class Architecture:
    """
    An immutable network description.

    Fields:

    * `layers` (tuple of `LayerSpec`)
    * `input_shape` (tuple `(channels, height, width)`)
    * `n_classes` (int)
    * `blocks` (tuple of `(start_index, end_index)` pairs, inclusive): the
      residual blocks. The output of a block is the output of its last layer
      plus the input of its first layer.

    On construction the skip annotations of every layer are recomputed from
    `blocks`, so callers never need to maintain them by hand.
    """
    layers: tuple
    input_shape: tuple
    n_classes: int
    blocks: tuple = ()

    def __post_init__(self):
        layers = tuple(self.layers)
        blocks = tuple(sorted((int(s), int(e)) for s, e in self.blocks))
        for start, end in blocks:
            if not 0 <= start <= end < len(layers):
                raise ValueError(f"block ({start}, {end}) out of range for "
                                 f"{len(layers)} layers")
        for (_, end), (start, _) in zip(blocks, blocks[1:]):
            if start <= end:
                raise ValueError(f"overlapping blocks in {blocks}")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be positive, got "
                             f"{self.n_classes}")
        object.__setattr__(self, 'layers', _annotate(layers, blocks))
        object.__setattr__(self, 'blocks', blocks)
        object.__setattr__(
            self,
            'input_shape',
            tuple(int(d) for d in self.input_shape),
        )

    def __len__(self):
        return len(self.layers)


@dataclasses.dataclass(frozen=True)
class RemovalMask:
    """Stage-1 actions: `keep[i]` is true when layer `i` survives."""
    keep: tuple

    def __post_init__(self):
        object.__setattr__(self, 'keep', tuple(bool(k) for k in self.keep))

    def __len__(self):
        return len(self.keep)


@dataclasses.dataclass(frozen=True)
class ShrinkVector:
    """Stage-2 actions: one factor from {0.1, ..., 1.0} per variable."""
    factors: tuple

    def __post_init__(self):
        factors = tuple(float(a) for a in self.factors)
        for a in factors:
            check_shrink_factor(a)
        object.__setattr__(self, 'factors', factors)

    def __len__(self):
        return len(self.factors)


def _annotate(layers, blocks):
    marks = {}
    for start, end in blocks:
        for i in range(start, end + 1):
            marks[i] = (i - start + 1, end - i + 1)
    return tuple(
        dataclasses.replace(layer, skip_start=marks.get(i, (0, 0))[0],
                            skip_end=marks.get(i, (0, 0))[1])
        for i, layer in enumerate(layers)
    )


# # Shapes and parameters


def _output_shape(layer, shape):
    c, h, w = shape
    kind = layer.layer_type
    if kind in SPATIAL_LAYER_TYPES:
        h = (h - layer.kernel + 2 * layer.padding) // layer.stride + 1
        w = (w - layer.kernel + 2 * layer.padding) // layer.stride + 1
        if kind is LayerType.CONV2D:
            c = layer.n_out
    elif kind is LayerType.LINEAR:
        c, h, w = layer.n_out, 1, 1
    elif kind is LayerType.FLATTEN:
        c, h, w = c * h * w, 1, 1
    return (c, h, w)


def infer_shapes(arch):
    """
    Compute the output shape `(channels, height, width)` after every layer
    of `arch`.

    Convolution and pooling use `floor((W - k + 2p) / s) + 1`.

    Raises `ShapeError` if the architecture has no layers, or if any
    dimension drops below 1.
    """
    if len(arch.layers) == 0:
        raise ShapeError("cannot infer shapes of an empty architecture")
    shapes = []
    shape = arch.input_shape
    for i, layer in enumerate(arch.layers):
        shape = _output_shape(layer, shape)
        if min(shape) < 1:
            raise ShapeError(f"layer {i} ({layer.layer_type.value}) produces "
                             f"shape {shape}")
        shapes.append(shape)
    return shapes


def input_shapes(arch, shapes=None):
    """The shape entering each layer (the input shape, then `shapes[:-1]`)."""
    if shapes is None:
        shapes = infer_shapes(arch)
    return [arch.input_shape] + list(shapes[:-1])


def _layer_params(layer, in_shape):
    c, h, w = in_shape
    kind = layer.layer_type
    if kind is LayerType.CONV2D:
        return c * layer.n_out * layer.kernel ** 2 + layer.n_out
    if kind is LayerType.LINEAR:
        return c * h * w * layer.n_out + layer.n_out
    if kind is LayerType.BATCHNORM:
        return 2 * c
    return 0


def layer_param_counts(arch):
    """Per-layer trainable parameter counts. Propagates `ShapeError`."""
    return [
        _layer_params(layer, in_shape)
        for layer, in_shape in zip(arch.layers, input_shapes(arch))
    ]


def param_count(arch):
    """
    Total trainable parameters: a Conv2d contributes
    `in_ch * n_out * k^2 + n_out`, a Linear `in_features * n_out + n_out`,
    a BatchNorm `2 * in_ch`, everything else nothing.

    Propagates `ShapeError`. An architecture with no layers has 0
    parameters.
    """
    if len(arch.layers) == 0:
        return 0
    return sum(layer_param_counts(arch))


def weight_layer_indices(arch):
    return [i for i, layer in enumerate(arch.layers)
            if layer.layer_type in WEIGHT_LAYER_TYPES]


def classifier_index(arch):
    """Index of the final classifier (the last weight layer), or None."""
    indices = weight_layer_indices(arch)
    return indices[-1] if indices else None


def flatten_size(arch, shapes=None):
    """
    Number of features entering the first Linear layer, or 0 if there is no
    Linear layer.
    """
    for layer, (c, h, w) in zip(arch.layers, input_shapes(arch, shapes)):
        if layer.layer_type is LayerType.LINEAR:
            return c * h * w
    return 0


def block_mismatches(arch, shapes=None):
    """
    The blocks whose input and output shapes differ (so the residual sum is
    undefined).
    """
    if shapes is None:
        shapes = infer_shapes(arch)
    ins = input_shapes(arch, shapes)
    return [(start, end) for start, end in arch.blocks
            if ins[start] != shapes[end]]


# # Actions


def apply_removal(arch, mask):
    """
    Keep exactly the layers whose entry in `mask` (a boolean sequence of
    length `len(arch)`) is true, in their original order.

    Block spans are re-indexed onto the kept layers; a block none of whose
    layers survive disappears. The input architecture is not modified.
    Validity of the result is judged separately by `classify_degenerate`.
    """
    keep = [bool(k) for k in getattr(mask, 'keep', mask)]
    if len(keep) != len(arch.layers):
        raise ValueError(f"removal mask has length {len(keep)}, "
                         f"architecture has {len(arch.layers)} layers")
    new_index = {}
    layers = []
    for i, (layer, k) in enumerate(zip(arch.layers, keep)):
        if k:
            new_index[i] = len(layers)
            layers.append(layer)
    blocks = []
    for start, end in arch.blocks:
        kept = [new_index[i] for i in range(start, end + 1) if i in new_index]
        if kept:
            blocks.append((kept[0], kept[-1]))
    return Architecture(
        layers=tuple(layers),
        input_shape=arch.input_shape,
        n_classes=arch.n_classes,
        blocks=tuple(blocks),
    )


def config_variables(arch):
    """
    The shrink schema: a list of `(layer_index, field_name)` pairs, one per
    configuration variable, in layer order.

    A Conv2d contributes `kernel`, `padding`, `n_out`; a Linear contributes
    `n_out`; other layers contribute nothing. The classifier's `n_out` is
    never included.
    """
    classifier = classifier_index(arch)
    variables = []
    for i, layer in enumerate(arch.layers):
        if layer.layer_type is LayerType.CONV2D:
            fields = ['kernel', 'padding', 'n_out']
        elif layer.layer_type is LayerType.LINEAR:
            fields = ['n_out']
        else:
            continue
        if i == classifier:
            fields.remove('n_out')
        variables.extend((i, field) for field in fields)
    return variables


SHRINK_FACTORS = tuple(round(0.1 * (i + 1), 1) for i in range(10))


def check_shrink_factor(factor):
    steps = factor * 10
    if abs(steps - round(steps)) > 1e-9 or not 1 <= round(steps) <= 10:
        raise ValueError(f"shrink factor {factor!r} is not one of "
                         f"{SHRINK_FACTORS}")


def apply_shrinkage(arch, factors):
    """
    Scale every configuration variable (see `config_variables`) by the
    corresponding entry of `factors`, each from {0.1, 0.2, ..., 1.0}.

    Kernel sizes and widths become `max(1, round(a * v))`; paddings become
    `round(a * p)` and may reach 0. Shape failures are left for
    `classify_degenerate` to catch.
    """
    factors = list(getattr(factors, 'factors', factors))
    variables = config_variables(arch)
    if len(factors) != len(variables):
        raise ValueError(f"got {len(factors)} shrink factors, architecture "
                         f"has {len(variables)} configuration variables")
    changes = {}
    for (i, field), a in zip(variables, factors):
        check_shrink_factor(a)
        value = getattr(arch.layers[i], field)
        if field == 'padding':
            scaled = int(round(a * value))
        else:
            scaled = max(1, int(round(a * value)))
        changes.setdefault(i, {})[field] = scaled
    layers = tuple(
        dataclasses.replace(layer, **changes.get(i, {}))
        for i, layer in enumerate(arch.layers)
    )
    return Architecture(layers, arch.input_shape, arch.n_classes, arch.blocks)


# # Degeneracy


def classify_degenerate(arch, max_flatten=DEFAULT_MAX_FLATTEN):
    """
    Decide whether `arch` can be trained and scored.

    Checks, in order:

    1. `EmptyArchitecture`: no Conv2d or Linear layer left.
    2. `ShapeFailure`: shape inference fails, or the final output is not
       `n_classes` wide.
    3. `BlockMismatch`: some residual block changes the feature-map shape.
    4. `LargeFC`: the flatten size feeding the first Linear layer exceeds
       `max_flatten`.

    Otherwise `Valid`.
    """
    if not weight_layer_indices(arch):
        return DegeneracyClass.EMPTY_ARCHITECTURE
    try:
        shapes = infer_shapes(arch)
    except ShapeError:
        return DegeneracyClass.SHAPE_FAILURE
    if shapes[-1] != (arch.n_classes, 1, 1):
        return DegeneracyClass.SHAPE_FAILURE
    if block_mismatches(arch, shapes):
        return DegeneracyClass.BLOCK_MISMATCH
    if flatten_size(arch, shapes) > max_flatten:
        return DegeneracyClass.LARGE_FC
    return DegeneracyClass.VALID


# # Policy features


NUMERIC_FIELDS = ('kernel', 'stride', 'padding', 'n_out',
                  'skip_start', 'skip_end')
FEATURE_SIZE = len(LAYER_TYPES) + len(NUMERIC_FIELDS)


def feature_scales(reference):
    """Per-field maxima over the reference (teacher) layers; 0 becomes 1."""
    scales = []
    for field in NUMERIC_FIELDS:
        largest = max((getattr(layer, field) for layer in reference.layers),
                      default=0)
        scales.append(float(largest) if largest > 0 else 1.0)
    return np.array(scales)


def encode_layer_features(arch, reference=None):
    """
    The per-layer observation `x_t` of the removal policy.

    Each row is a one-hot code over the six layer types followed by kernel,
    stride, padding, n_out, skip_start and skip_end, each divided by its
    maximum over `reference` (the teacher; defaults to `arch` itself).

    Returns a float array of shape `(len(arch), 12)`. Propagates
    `ShapeError`.
    """
    infer_shapes(arch)
    if reference is None:
        reference = arch
    scales = feature_scales(reference)
    features = np.zeros((len(arch.layers), FEATURE_SIZE))
    for i, layer in enumerate(arch.layers):
        features[i, LAYER_TYPES.index(layer.layer_type)] = 1.0
        numeric = np.array([getattr(layer, f) for f in NUMERIC_FIELDS],
                           dtype=np.float64)
        features[i, len(LAYER_TYPES):] = numeric / scales
    return features


def shrink_features(arch, reference=None):
    """
    The per-variable observation sequence of the shrink policy: for every
    configuration variable, the feature row of the layer that owns it.
    Shape `(T, 12)` with `T = len(config_variables(arch))`.
    """
    variables = config_variables(arch)
    if not variables:
        return np.zeros((0, FEATURE_SIZE))
    rows = encode_layer_features(arch, reference)
    return rows[[i for i, _ in variables]]


# # Text format


def dumps(arch):
    """
    Serialize `arch` to text: a header line, the input shape, the class
    count, one `block` line per residual block and one `layer` line per
    layer with its seven fields.
    """
    lines = [
        f"{FORMAT_HEADER} {FORMAT_VERSION}",
        "input_shape " + " ".join(str(d) for d in arch.input_shape),
        f"n_classes {arch.n_classes}",
    ]
    for start, end in arch.blocks:
        lines.append(f"block {start} {end}")
    for layer in arch.layers:
        lines.append(
            f"layer {layer.layer_type.value} {layer.kernel} {layer.stride} "
            f"{layer.padding} {layer.n_out} {layer.skip_start} "
            f"{layer.skip_end}"
        )
    return "\n".join(lines) + "\n"


def loads(text):
    """
    Parse the format written by `dumps`. Blank lines and lines starting
    with `#` are ignored. Raises `ArchitectureFormatError`.
    """
    lines = [line.strip() for line in text.splitlines()]
    lines = [line for line in lines if line and not line.startswith('#')]
    if not lines or lines[0].split() != [FORMAT_HEADER, str(FORMAT_VERSION)]:
        raise ArchitectureFormatError(
            f"expected header {FORMAT_HEADER!r} version {FORMAT_VERSION}"
        )
    input_shape = None
    n_classes = None
    blocks = []
    layers = []
    for number, line in enumerate(lines[1:], start=2):
        key, *values = line.split()
        try:
            if key == 'input_shape' and len(values) == 3:
                input_shape = tuple(int(v) for v in values)
            elif key == 'n_classes' and len(values) == 1:
                n_classes = int(values[0])
            elif key == 'block' and len(values) == 2:
                blocks.append((int(values[0]), int(values[1])))
            elif key == 'layer' and len(values) == 7:
                kind = LayerType(values[0])
                fields = [int(v) for v in values[1:]]
                layers.append(LayerSpec(kind, *fields))
            else:
                raise ArchitectureFormatError(
                    f"line {number}: cannot parse {line!r}"
                )
        except ValueError as error:
            if isinstance(error, ArchitectureFormatError):
                raise
            raise ArchitectureFormatError(
                f"line {number}: {error}"
            ) from error
    if input_shape is None or n_classes is None:
        raise ArchitectureFormatError("missing input_shape or n_classes")
    try:
        arch = Architecture(tuple(layers), input_shape, n_classes,
                            tuple(blocks))
    except ValueError as error:
        raise ArchitectureFormatError(str(error)) from error
    if arch.layers != tuple(layers):
        raise ArchitectureFormatError(
            "layer skip annotations disagree with the block lines"
        )
    return arch


def save(arch, path):
    with open(path, 'w') as fp:
        fp.write(dumps(arch))


def load(path):
    with open(path) as fp:
        return loads(fp.read())


def architecture_fingerprint(arch):
    """A stable hex digest of the serialized architecture."""
    return hashlib.sha256(dumps(arch).encode('utf-8')).hexdigest()
