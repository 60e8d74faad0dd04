"""Simulation configuration: the JSON document structured into `SimConfig`."""
from __future__ import annotations

import json
import pathlib
import re
from typing import Any, Dict, Optional, Union

import attrs
import cattrs
from cattrs.v import format_exception

import coco_acquisition as acquisition
import coco_environments as environments
import coco_kernel_basis as kernel_basis
import coco_logdensity as logdensity
import coco_smc
import coco_utils as utils

POLICIES = ("npm_ts", "gids", "ind_ts", "oracle_ts")
PARTICLE_POLICIES = ("npm_ts", "gids")
KL_METHODS = ("kronecker", "dense")

_PATH_RE = re.compile(r" @ (?P<path>\$\S*)$")


def _positive(prefix: str):
    def _check(_instance, attribute, value):
        if value < 1:
            raise utils.ConfigurationError(
                f"{attribute.name} must be a positive integer, got {value}",
                field=f"{prefix}{attribute.name}",
            )

    return _check


def _one_of(choices, field: str):
    def _check(_instance, _attribute, value):
        if value not in choices:
            raise utils.ConfigurationError(
                f"{value!r} is not one of {', '.join(choices)}", field=field
            )

    return _check


@attrs.frozen
class EnvironmentConfig:
    name: str = attrs.field(
        default="mog", validator=_one_of(environments.ENVIRONMENTS, "environment.name")
    )
    # LMM only: aligned draws theta around +1, misaligned from the two-mode mixture.
    aligned: bool = True


@attrs.frozen
class EvaluationConfig:
    """Fixed evaluation batch; `every` is in rounds, 0 disables evaluation."""

    batch_size: int = attrs.field(default=20, validator=_positive("evaluation."))
    rounds: int = attrs.field(default=10, validator=_positive("evaluation."))
    every: int = 1


@attrs.frozen
class SimConfig:
    environment: EnvironmentConfig = attrs.field(factory=EnvironmentConfig)
    policy: str = attrs.field(default="npm_ts", validator=_one_of(POLICIES, "policy"))
    user_horizon: int = attrs.field(default=5, validator=_positive(""))
    batch_size: int = attrs.field(default=5, validator=_positive(""))
    recruitment_rounds: int = attrs.field(default=30, validator=_positive(""))
    grid: kernel_basis.GridSpec = attrs.field(factory=kernel_basis.GridSpec)
    kernel: kernel_basis.KernelParams = attrs.field(factory=kernel_basis.KernelParams)
    truncation: int = attrs.field(default=80, validator=_positive(""))
    kl_method: str = attrs.field(default="kronecker", validator=_one_of(KL_METHODS, "kl_method"))
    smc: coco_smc.SMCConfig = attrs.field(factory=coco_smc.SMCConfig)
    gids: acquisition.GIDSConfig = attrs.field(factory=acquisition.GIDSConfig)
    noise_sigma: float = 0.1
    seed: int = 0
    evaluation: EvaluationConfig = attrs.field(factory=EvaluationConfig)
    update_every: int = attrs.field(default=1, validator=_positive(""))

    def __attrs_post_init__(self):
        if self.truncation > self.grid.n_points:
            raise utils.ConfigurationError(
                f"truncation {self.truncation} exceeds the {self.grid.n_points} grid points",
                field="truncation",
            )
        expected = environments.CONTEXT_DIMS[self.environment.name]
        if len(self.grid.context_ranges) != expected:
            raise utils.ConfigurationError(
                f"grid has {len(self.grid.context_ranges)} context dimensions but environment "
                f"{self.environment.name!r} observes {expected}",
                field="grid.context_ranges",
            )
        # Validates sigma.
        logdensity.NoiseModel(self.noise_sigma)

    @property
    def noise(self) -> logdensity.NoiseModel:
        return logdensity.NoiseModel(self.noise_sigma)

    @property
    def n_users(self) -> int:
        return self.batch_size * self.recruitment_rounds


CONVERTER = cattrs.Converter(forbid_extra_keys=True)


def _format_exception(exc: BaseException, type_: Any) -> str:
    if isinstance(exc, utils.ConfigurationError):
        return str(exc)
    return format_exception(exc, type_)


def _nested_configuration_error(exc: BaseException) -> Optional[utils.ConfigurationError]:
    if isinstance(exc, utils.ConfigurationError):
        return exc
    for inner in getattr(exc, "exceptions", ()):
        found = _nested_configuration_error(inner)
        if found is not None:
            return found
    return None


def _field_from_messages(messages) -> Optional[str]:
    for message in messages:
        match = _PATH_RE.search(message)
        if match:
            return match.group("path")
    return None


def _apply_recruitment_preset(document: Dict[str, Any]) -> Dict[str, Any]:
    if "recruitment" not in document:
        return document
    document = dict(document)
    name = document.pop("recruitment")
    if name == "auto":
        env = document.get("environment") or {}
        if not isinstance(env, dict) or env.get("name", "mog") not in environments.ENVIRONMENTS:
            return document
        preset = environments.recruitment_preset(
            env.get("name", "mog"), bool(env.get("aligned", True))
        )
    elif isinstance(name, str):
        preset = environments.recruitment_preset(name)
    else:
        raise utils.ConfigurationError(
            f"recruitment must be a preset name, got {name!r}", field="recruitment"
        )
    for key, value in attrs.asdict(preset).items():
        document.setdefault(key, value)
    return document


def structure_config(document: Dict[str, Any]) -> SimConfig:
    """Validates a decoded JSON document; unknown keys are rejected at every level.

    `recruitment` names a preset (or `auto` for the environment's own) that fills
    `recruitment_rounds`, `batch_size` and `user_horizon` unless they are given.
    """
    if not isinstance(document, dict):
        raise utils.ConfigurationError("config document must be a JSON object", field="$")
    document = _apply_recruitment_preset(document)
    try:
        return CONVERTER.structure(document, SimConfig)
    except utils.ConfigurationError:
        raise
    except cattrs.BaseValidationError as exc:
        messages = cattrs.transform_error(exc, path="$", format_exception=_format_exception)
        nested = _nested_configuration_error(exc)
        field = nested.field if nested is not None and nested.field else None
        raise utils.ConfigurationError(
            "; ".join(messages), field=field or _field_from_messages(messages)
        ) from exc


def load_config(path: Union[str, pathlib.Path]) -> SimConfig:
    path = pathlib.Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise utils.ConfigurationError(f"cannot read config {path}: {exc}", field="--config") from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise utils.ConfigurationError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
            field="--config",
        ) from exc
    return structure_config(document)


def config_to_dict(config: SimConfig) -> Dict[str, Any]:
    return CONVERTER.unstructure(config)


def apply_overrides(
    config: SimConfig,
    policy: Optional[str] = None,
    update_every: Optional[int] = None,
    seed: Optional[int] = None,
) -> SimConfig:
    changes: Dict[str, Any] = {}
    if policy is not None:
        changes["policy"] = policy
    if update_every is not None:
        changes["update_every"] = update_every
    if seed is not None:
        changes["seed"] = seed
    return attrs.evolve(config, **changes) if changes else config
