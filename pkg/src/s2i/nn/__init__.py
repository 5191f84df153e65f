from .checkpoint import SchemaMismatchError, read_tensors, schema_hash, write_tensors
from .gradcheck import GradcheckReport, gradcheck
from .init import xavier_bound, xavier_init
from .layers import (
    EVAL,
    Activation,
    BatchNorm,
    ConcatSkip,
    Context,
    Conv2d,
    DenseBlock,
    Dropout,
    Flatten,
    LayerSpec,
    Linear,
    Module,
    Sequential,
    ShapeError,
    StaleCacheError,
    Tile,
    Upsample,
    UpsampleConv2d,
    build_layer,
    build_sequential,
)
from .optim import NonFiniteGradientError, OptimizerState, sgd_step
from .rng import RngState
