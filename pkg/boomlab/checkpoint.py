import json
import logging
import os
import tempfile
import typing
from pathlib import Path

import numpy as np

from .approximator import LayoutMismatchError, MlpSpec, ParamSet
from .policy import PolicyNetwork
from .world_model import WorldModel, WorldModelParams, WorldModelSpec

_logger = logging.getLogger(__package__)

MAGIC = b"BOOMLAB\x00"
FORMAT_VERSION = 1

_INT_DTYPE = np.dtype("<i8")


class CheckpointError(ValueError):
    """Custom exception raised when a checkpoint file is corrupted or incompatible"""


def _network_names(num_q: int) -> typing.List[str]:
    return (
        ["encoder", "dynamics", "reward_head"]
        + [f"q{index}" for index in range(num_q)]
        + [f"q_target{index}" for index in range(num_q)]
        + ["policy"]
    )


def _serialize(model: WorldModel, policy: PolicyNetwork, config: typing.Mapping[str, str]) -> bytes:
    networks = {
        **model.params.online(),
        **{
            f"q_target{index}": params
            for index, params in enumerate(model.params.q_target_ensemble)
        },
        "policy": policy.params,
    }
    names = _network_names(model.spec.num_q)
    header = json.dumps(
        {
            "world_model": model.spec.as_dict(),
            "policy": policy.as_dict(),
            "networks": names,
            "config": dict(config),
        },
        sort_keys=True,
    ).encode("utf-8")

    return b"".join(
        [
            MAGIC,
            np.asarray([FORMAT_VERSION, len(header)], dtype=_INT_DTYPE).tobytes(),
            header,
            *(networks[name].to_bytes() for name in names),
        ]
    )


def save_checkpoint(
    path: typing.Union[str, Path],
    model: WorldModel,
    policy: PolicyNetwork,
    config: typing.Mapping[str, str],
) -> Path:
    """
    Write world model, policy and configuration echo to `path`, atomically : data goes to a
    temporary file of the same directory first, which then replaces `path`.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    data = _serialize(model, policy, config)
    with tempfile.NamedTemporaryFile(
        "wb", dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False
    ) as stream:
        stream.write(data)
        stream.flush()
        os.fsync(stream.fileno())
    os.replace(stream.name, path)

    _logger.info("checkpoint written to %s (%d bytes)", path, len(data))
    return path


def _read_param_set(data: bytes, offset: int, spec: MlpSpec) -> typing.Tuple[ParamSet, int]:
    # serialized layouts only carry shapes, tensor names come back from the network spec
    params, offset = ParamSet.from_bytes(data, offset)
    if params.layout != spec.layout():
        raise CheckpointError(f"stored parameter layout does not match network spec {spec}")

    return ParamSet(params.values, spec.layout()), offset


def load_checkpoint(
    path: typing.Union[str, Path],
) -> typing.Tuple[WorldModel, PolicyNetwork, typing.Dict[str, str]]:
    """
    Mirror function of `save_checkpoint` (see above).

    :returns tuple: world model, policy and configuration echo
    :raises CheckpointError: when file is truncated, corrupted or of another format version
    """
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} isn't a checkpoint file")

    offset = len(MAGIC)
    if len(data) < offset + 2 * _INT_DTYPE.itemsize:
        raise CheckpointError(f"{path} is truncated")
    version, header_size = (
        int(value) for value in np.frombuffer(data, dtype=_INT_DTYPE, count=2, offset=offset)
    )
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (in {path})")
    if header_size < 0:
        raise CheckpointError(f"negative header size {header_size} in {path}")
    offset += 2 * _INT_DTYPE.itemsize

    try:
        header = json.loads(data[offset : offset + header_size].decode("utf-8"))
        model_spec = WorldModelSpec.from_dict(header["world_model"])
        policy_header = header["policy"]
        policy_spec = MlpSpec.from_dict(policy_header["spec"])
    except (ValueError, KeyError, TypeError) as exception:
        raise CheckpointError(f"corrupted checkpoint header in {path} : {exception}") from None
    offset += header_size

    names = _network_names(model_spec.num_q)
    if header.get("networks") != names:
        raise CheckpointError(f"unexpected networks list in {path} : {header.get('networks')}")

    network_specs = {
        "encoder": model_spec.encoder_spec(),
        "dynamics": model_spec.dynamics_spec(),
        "reward_head": model_spec.reward_spec(),
        "policy": policy_spec,
    }
    networks = {}
    try:
        for name in names:
            spec = network_specs.get(name, model_spec.q_spec())
            networks[name], offset = _read_param_set(data, offset, spec)
    except LayoutMismatchError as exception:
        raise CheckpointError(f"corrupted checkpoint body in {path} : {exception}") from None

    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes in {path}")

    model_params = WorldModelParams(
        encoder=networks["encoder"],
        dynamics=networks["dynamics"],
        reward_head=networks["reward_head"],
        q_ensemble=[networks[f"q{index}"] for index in range(model_spec.num_q)],
        q_target_ensemble=[networks[f"q_target{index}"] for index in range(model_spec.num_q)],
    )
    policy = PolicyNetwork(
        spec=policy_spec,
        params=networks["policy"],
        action_dim=policy_header["action_dim"],
        log_std_min=policy_header["log_std_min"],
        log_std_max=policy_header["log_std_max"],
        squashed=policy_header["squashed"],
    )
    return WorldModel(model_spec, model_params), policy, header["config"]
