import dataclasses
import enum
import functools
import logging
import typing

import numpy as np
from scipy import special

from .np_utils import SeedLike, make_rng

_logger = logging.getLogger(__package__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
LAYER_NORM_EPSILON = 1e-5

# little-endian 64-bit integers/floats, as documented for checkpoint files
_INT_DTYPE = np.dtype("<i8")
_FLOAT_DTYPE = np.dtype("<f8")


class DimensionMismatchError(ValueError):
    """Custom exception raised when an input does not match the dimension a network expects"""


class LayoutMismatchError(ValueError):
    """Custom exception raised when parameter vectors (or gradients) do not share one layout"""


class DivergenceError(ArithmeticError):
    """Custom exception raised when a loss evaluates to a non-finite value"""


class Activation(enum.Enum):
    MISH = "mish"
    TANH = "tanh"
    IDENTITY = "identity"

    def apply(self, values: np.ndarray) -> np.ndarray:
        if self is Activation.MISH:
            return values * np.tanh(np.logaddexp(0.0, values))
        if self is Activation.TANH:
            return np.tanh(values)
        return values

    def derivative(self, values: np.ndarray) -> np.ndarray:
        if self is Activation.MISH:
            tanh_softplus = np.tanh(np.logaddexp(0.0, values))
            return tanh_softplus + values * (1.0 - tanh_softplus**2) * special.expit(values)
        if self is Activation.TANH:
            return 1.0 - np.tanh(values) ** 2
        return np.ones_like(values)


@dataclasses.dataclass(frozen=True)
class TensorLayout:
    name: str = dataclasses.field(compare=False)
    offset: int
    shape: typing.Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclasses.dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: typing.Tuple[int, ...]
    output_dim: int
    activation: Activation = Activation.MISH
    layer_norm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        # lists are accepted for convenience, but specs must stay hashable
        object.__setattr__(self, "hidden_dims", tuple(int(dim) for dim in self.hidden_dims))

        if min(self.dims) <= 0:
            raise ValueError(f"network dimensions must be strictly positive : {self.dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1) : {self.dropout_rate}")

    @property
    def dims(self) -> typing.Tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def layout(self) -> typing.Tuple[TensorLayout, ...]:
        return _build_layout(self)

    def num_params(self) -> int:
        return sum(record.size for record in self.layout())

    def as_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation.value,
            "layer_norm": self.layer_norm,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpSpec":
        return cls(**{**data, "activation": Activation(data["activation"])})


@functools.lru_cache(maxsize=None)
def _build_layout(spec: MlpSpec) -> typing.Tuple[TensorLayout, ...]:
    """
    Per-tensor `(offset, shape)` records, layer after layer : weight, bias and (for hidden layers
    with layer normalization) gain and shift.
    """
    records = []
    offset = 0
    for index, (fan_in, fan_out) in enumerate(zip(spec.dims[:-1], spec.dims[1:])):
        shapes: typing.List[typing.Tuple[str, typing.Tuple[int, ...]]] = [
            ("weight", (fan_in, fan_out)),
            ("bias", (fan_out,)),
        ]
        if spec.layer_norm and index < len(spec.hidden_dims):
            shapes += [("ln_gain", (fan_out,)), ("ln_shift", (fan_out,))]

        for kind, shape in shapes:
            record = TensorLayout(f"{kind}{index}", offset, shape)
            records.append(record)
            offset += record.size

    return tuple(records)


@dataclasses.dataclass
class ParamSet:
    values: np.ndarray
    layout: typing.Tuple[TensorLayout, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = sum(record.size for record in self.layout)
        if self.values.shape != (expected,):
            raise LayoutMismatchError(
                f"expected {expected} parameter values, got shape {self.values.shape}"
            )

    def __len__(self) -> int:
        return self.values.shape[0]

    def tensor(self, name: str) -> np.ndarray:
        """Writable view over the tensor called `name`"""
        for record in self.layout:
            if record.name == name:
                return self.values[record.offset : record.offset + record.size].reshape(
                    record.shape
                )

        raise KeyError(name)

    def tensors(self) -> typing.Dict[str, np.ndarray]:
        return {record.name: self.tensor(record.name) for record in self.layout}

    def copy(self) -> "ParamSet":
        return ParamSet(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamSet":
        return ParamSet(values, self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def check_same_layout(self, other: "ParamSet") -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError("parameter sets do not share the same layout")

    def to_bytes(self) -> bytes:
        """
        Serialize as a layout header followed by values.
        Header is made of 64-bit little-endian integers : tensor count, then for each tensor its
        rank followed by its dimensions. Values are 64-bit little-endian floats.
        """
        header: typing.List[int] = [len(self.layout)]
        for record in self.layout:
            header += [len(record.shape), *record.shape]

        return (
            np.asarray(header, dtype=_INT_DTYPE).tobytes()
            + self.values.astype(_FLOAT_DTYPE).tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> typing.Tuple["ParamSet", int]:
        """
        Mirror method of `to_bytes` (see above).

        :returns tuple: deserialized `ParamSet`, and offset right after its last byte
        :raises LayoutMismatchError: when `data` is truncated or its header holds negative sizes
        """

        def _read_int() -> int:
            nonlocal offset
            if offset + _INT_DTYPE.itemsize > len(data):
                raise LayoutMismatchError("truncated parameter set header")
            value = int(np.frombuffer(data, dtype=_INT_DTYPE, count=1, offset=offset)[0])
            offset += _INT_DTYPE.itemsize
            if value < 0:
                raise LayoutMismatchError(f"negative size in parameter set header : {value}")
            return value

        layout = []
        position = 0
        for index in range(_read_int()):
            shape = tuple(_read_int() for _ in range(_read_int()))
            record = TensorLayout(f"tensor{index}", position, shape)
            layout.append(record)
            position += record.size

        if offset + position * _FLOAT_DTYPE.itemsize > len(data):
            raise LayoutMismatchError("truncated parameter set values")
        values = np.frombuffer(data, dtype=_FLOAT_DTYPE, count=position, offset=offset)
        offset += position * _FLOAT_DTYPE.itemsize

        return cls(values.astype(np.float64), tuple(layout)), offset


@dataclasses.dataclass
class _LayerCache:
    inputs: np.ndarray
    normalized: typing.Optional[np.ndarray] = None
    inv_std: typing.Optional[np.ndarray] = None
    pre_activation: typing.Optional[np.ndarray] = None
    dropout_mask: typing.Optional[np.ndarray] = None


@dataclasses.dataclass
class ForwardCache:
    layers: typing.List[_LayerCache]
    squeeze: bool


def init_params(spec: MlpSpec, seed: SeedLike = 0) -> ParamSet:
    """
    Draw weights with fan-in variance scaling (std = 1/sqrt(fan_in)), biases and layer norm
    shifts at zero, layer norm gains at one.
    """
    rng = make_rng(seed)
    params = ParamSet(np.zeros(spec.num_params()), spec.layout())
    for name, tensor in params.tensors().items():
        if name.startswith("weight"):
            tensor[...] = rng.standard_normal(tensor.shape) / np.sqrt(tensor.shape[0])
        elif name.startswith("ln_gain"):
            tensor[...] = 1.0

    return params


def zero_output_layer(spec: MlpSpec, params: ParamSet) -> ParamSet:
    last = spec.num_layers - 1
    params = params.copy()
    params.tensor(f"weight{last}")[...] = 0.0
    params.tensor(f"bias{last}")[...] = 0.0
    return params


def _check_params(spec: MlpSpec, params: ParamSet) -> None:
    if params.layout != spec.layout():
        raise LayoutMismatchError(f"parameter layout does not match network spec {spec}")


def forward_with_cache(
    spec: MlpSpec,
    params: ParamSet,
    inputs: np.ndarray,
    deterministic: bool = True,
    rng: typing.Optional[np.random.Generator] = None,
) -> typing.Tuple[np.ndarray, ForwardCache]:
    """
    Evaluate network on `inputs` (a single vector or a batch of row vectors), keeping every
    intermediate value needed by `backward`.
    Dropout is inverted (kept units are scaled by 1/(1-p) at train time), so deterministic
    evaluation needs no rescaling. A generator is required when dropout is active.

    :raises DimensionMismatchError: when `inputs` last dimension isn't `spec.input_dim`
    """
    _check_params(spec, params)

    values = np.asarray(inputs, dtype=np.float64)
    squeeze = values.ndim == 1
    values = np.atleast_2d(values)
    if values.ndim != 2 or values.shape[1] != spec.input_dim:
        raise DimensionMismatchError(
            f"expected inputs of dimension {spec.input_dim}, got shape {np.shape(inputs)}"
        )

    use_dropout = not deterministic and spec.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("a random generator is required to apply dropout")

    tensors = params.tensors()
    caches = []
    for index in range(spec.num_layers):
        cache = _LayerCache(inputs=values)
        values = values @ tensors[f"weight{index}"] + tensors[f"bias{index}"]

        if index < spec.num_layers - 1:
            if spec.layer_norm:
                centered = values - values.mean(axis=1, keepdims=True)
                cache.inv_std = 1.0 / np.sqrt(
                    np.mean(centered**2, axis=1, keepdims=True) + LAYER_NORM_EPSILON
                )
                cache.normalized = centered * cache.inv_std
                values = cache.normalized * tensors[f"ln_gain{index}"] + tensors[f"ln_shift{index}"]

            cache.pre_activation = values
            values = spec.activation.apply(values)

            if use_dropout:
                assert rng is not None
                keep = rng.random(values.shape) >= spec.dropout_rate
                cache.dropout_mask = keep / (1.0 - spec.dropout_rate)
                values = values * cache.dropout_mask

        caches.append(cache)

    return (values[0] if squeeze else values), ForwardCache(caches, squeeze)


def forward(
    spec: MlpSpec,
    params: ParamSet,
    inputs: np.ndarray,
    deterministic: bool = True,
    rng: typing.Optional[np.random.Generator] = None,
) -> np.ndarray:
    outputs, _ = forward_with_cache(spec, params, inputs, deterministic, rng)
    return outputs


def backward(
    spec: MlpSpec,
    params: ParamSet,
    cache: ForwardCache,
    grad_outputs: np.ndarray,
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Reverse accumulation through every layer recorded in `cache`.

    :returns tuple: gradient with respect to the flat parameter vector, and gradient with
                    respect to the inputs (same shape as the inputs given to forward pass)
    """
    tensors = params.tensors()
    grads = ParamSet(np.zeros(len(params)), params.layout)
    grad_tensors = grads.tensors()

    upstream = np.atleast_2d(np.asarray(grad_outputs, dtype=np.float64))
    for index in reversed(range(spec.num_layers)):
        layer = cache.layers[index]

        if index < spec.num_layers - 1:
            if layer.dropout_mask is not None:
                upstream = upstream * layer.dropout_mask
            assert layer.pre_activation is not None
            upstream = upstream * spec.activation.derivative(layer.pre_activation)

            if spec.layer_norm:
                assert layer.normalized is not None and layer.inv_std is not None
                grad_tensors[f"ln_gain{index}"][...] = np.sum(upstream * layer.normalized, axis=0)
                grad_tensors[f"ln_shift{index}"][...] = np.sum(upstream, axis=0)
                grad_normalized = upstream * tensors[f"ln_gain{index}"]
                upstream = layer.inv_std * (
                    grad_normalized
                    - grad_normalized.mean(axis=1, keepdims=True)
                    - layer.normalized
                    * np.mean(grad_normalized * layer.normalized, axis=1, keepdims=True)
                )

        grad_tensors[f"weight{index}"][...] = layer.inputs.T @ upstream
        grad_tensors[f"bias{index}"][...] = np.sum(upstream, axis=0)
        upstream = upstream @ tensors[f"weight{index}"].T

    return grads.values, (upstream[0] if cache.squeeze else upstream)


def loss_and_grad(
    spec: MlpSpec,
    params: ParamSet,
    batch_inputs: np.ndarray,
    loss_fn: typing.Callable[[np.ndarray], typing.Tuple[float, np.ndarray]],
    deterministic: bool = True,
    rng: typing.Optional[np.random.Generator] = None,
) -> typing.Tuple[float, np.ndarray]:
    """
    `loss_fn` maps network outputs to `(loss, d loss / d outputs)`.

    :raises DivergenceError: when loss isn't finite
    """
    outputs, cache = forward_with_cache(spec, params, batch_inputs, deterministic, rng)
    loss, grad_outputs = loss_fn(outputs)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss : {loss}")

    grad, _ = backward(spec, params, cache, grad_outputs)
    return float(loss), grad


def global_norm(grad: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(grad))))


def clip_global_norm(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    if clip_norm <= 0.0:
        raise ValueError(f"clipping norm must be positive : {clip_norm}")

    norm = global_norm(grad)
    if norm <= clip_norm:
        return grad

    return grad * (clip_norm / norm)


@dataclasses.dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    learning_rate: float
    clip_norm: float


def init_optimizer(params: ParamSet, learning_rate: float, clip_norm: float) -> OptimizerState:
    return OptimizerState(
        first_moment=np.zeros(len(params)),
        second_moment=np.zeros(len(params)),
        step_count=0,
        learning_rate=learning_rate,
        clip_norm=clip_norm,
    )


def adam_step(
    state: OptimizerState, params: ParamSet, grad: np.ndarray
) -> typing.Tuple[ParamSet, OptimizerState]:
    """
    One bias-corrected Adam update, after clipping `grad` to `state.clip_norm` global norm.
    Neither `state` nor `params` are modified in place.
    """
    if not len(params) == len(grad) == len(state.first_moment):
        raise LayoutMismatchError(
            f"optimizer ({len(state.first_moment)}), parameters ({len(params)}) and gradient "
            f"({len(grad)}) lengths differ"
        )

    grad = clip_global_norm(grad, state.clip_norm)
    step_count = state.step_count + 1
    first_moment = ADAM_BETA1 * state.first_moment + (1.0 - ADAM_BETA1) * grad
    second_moment = ADAM_BETA2 * state.second_moment + (1.0 - ADAM_BETA2) * grad**2

    corrected_first = first_moment / (1.0 - ADAM_BETA1**step_count)
    corrected_second = second_moment / (1.0 - ADAM_BETA2**step_count)
    values = params.values - state.learning_rate * corrected_first / (
        np.sqrt(corrected_second) + ADAM_EPSILON
    )

    return params.with_values(values), dataclasses.replace(
        state,
        first_moment=first_moment,
        second_moment=second_moment,
        step_count=step_count,
    )


def ema_update(target: ParamSet, online: ParamSet, rate: float) -> ParamSet:
    """
    `target <- (1 - rate) * target + rate * online` : `rate` is the weight of the online network.
    """
    target.check_same_layout(online)
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"target update rate must lie in (0, 1] : {rate}")

    return target.with_values((1.0 - rate) * target.values + rate * online.values)
