"""
Shipped Teacher Architectures
=============================

Ready-made teacher specifications. Every one of them classifies as `Valid`
(see `architectures.classify_degenerate`).

* `mnist_conv`: the desk-scale MNIST teacher, two conv/batchnorm/pool
  stages and a two-layer classifier head (about 106k parameters).

* `surrogate8`: a small eight-layer convolutional teacher on 12x12 inputs.
  Small enough that all 2^8 removal masks can be scored exhaustively with
  the surrogate evaluator. The stem conv is narrow (4 channels), so under
  the default surrogate the best removal keeps it rather than feeding the
  pooled image straight to the classifier.

* `surrogate8_wide`: the same layer pattern as `surrogate8` with doubled
  widths, used as the target when transferring a policy pretrained on
  `surrogate8`.

* `resnet_mini`: a conv net with one residual block, for exercising the
  skip-connection handling.
"""

from distilrl.architectures import (
    Architecture,
    conv,
    linear,
    maxpool,
    relu,
    batchnorm,
    flatten,
)


def mnist_conv(n_classes=10):
    return Architecture(
        layers=(
            conv(16), batchnorm(), relu(), maxpool(),
            conv(32), batchnorm(), relu(), maxpool(),
            flatten(), linear(64), relu(), linear(n_classes),
        ),
        input_shape=(1, 28, 28),
        n_classes=n_classes,
    )


def surrogate8(n_classes=10, width=8):
    return Architecture(
        layers=(
            conv(width // 2), relu(),
            conv(2 * width), relu(), maxpool(),
            conv(2 * width), relu(),
            linear(n_classes),
        ),
        input_shape=(1, 12, 12),
        n_classes=n_classes,
    )


def surrogate8_wide(n_classes=10):
    return surrogate8(n_classes=n_classes, width=16)


def resnet_mini(n_classes=10):
    return Architecture(
        layers=(
            conv(16), relu(),
            conv(16), batchnorm(), relu(), conv(16),
            relu(), maxpool(), maxpool(),
            flatten(), linear(n_classes),
        ),
        input_shape=(1, 28, 28),
        n_classes=n_classes,
        blocks=((2, 5),),
    )


TEACHERS = {
    'mnist_conv': mnist_conv,
    'surrogate8': surrogate8,
    'surrogate8_wide': surrogate8_wide,
    'resnet_mini': resnet_mini,
}


def get_teacher(name, n_classes=10):
    """
    Look up a shipped teacher by `name` (str, a key of `TEACHERS`).
    """
    try:
        return TEACHERS[name](n_classes=n_classes)
    except KeyError:
        raise ValueError(
            f"unknown teacher {name!r}, expected one of {sorted(TEACHERS)}"
        ) from None
