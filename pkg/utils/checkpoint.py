"""Model state and its checkpoint files."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from utils.blob_store import read_blob_file, write_blob_file
from utils.config import RunConfig
from utils.encoders import COMPONENTS, ComponentPromptSet, FrozenEncoders, init_frozen_encoders, init_prompt_set
from utils.errors import CheckpointError, DimensionError
from utils.numerics import Tensor, parameter
from utils.prompt_pool import FusionProjector, PromptPool

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
STAGES = ("init", "stage1", "stage2")


@dataclass
class ModelState:
    """Everything a trained model needs besides its data.

    ``stage`` records the last completed stage; a model with a pool and
    projector is scored through the fused feature.
    """

    config: RunConfig
    encoders: FrozenEncoders
    prompt_sets: Dict[str, ComponentPromptSet]
    label_names: Dict[str, List[str]]
    pool: Optional[PromptPool] = None
    projector: Optional[FusionProjector] = None
    stage: str = "init"
    variant: str = "two-stage"
    extra: Dict = field(default_factory=dict)

    @property
    def has_pool(self) -> bool:
        return self.pool is not None and self.projector is not None

    def prompt_parameters(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {}
        for c in COMPONENTS:
            named.update(self.prompt_sets[c].parameters())
        return named

    def pool_parameters(self) -> Dict[str, Tensor]:
        return dict(self.pool.parameters()) if self.pool is not None else {}

    def projector_parameters(self) -> Dict[str, Tensor]:
        return dict(self.projector.parameters()) if self.projector is not None else {}

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        return {
            "prompts": self.prompt_parameters(),
            "pool": self.pool_parameters(),
            "projector": self.projector_parameters(),
        }


def save_checkpoint(state: ModelState, path: Union[str, Path]) -> int:
    """Write ``state`` atomically; returns the CRC32 of the written file.

    Frozen encoder weights are not stored: they are regenerated from the
    configured backbone seed and verified against the recorded checksum.
    """
    arrays: Dict[str, np.ndarray] = {}
    for group in state.parameter_groups().values():
        for name, tensor in group.items():
            arrays[name] = tensor.values
    meta = {
        "config": state.config.to_dict(),
        "stage": state.stage,
        "variant": state.variant,
        "label_names": state.label_names,
        "frozen_checksum": state.encoders.checksum(),
        "extra": state.extra,
    }
    return write_blob_file(path, CHECKPOINT_KIND, meta, arrays)


def _restore(target: Tensor, arrays: Dict[str, np.ndarray], name: str) -> None:
    if name not in arrays:
        raise CheckpointError(f"checkpoint is missing array {name!r}")
    if arrays[name].shape != target.shape:
        raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} vs model {target.shape}")
    target.values = arrays[name].astype(np.float32)


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    manifest, arrays = read_blob_file(path, expected_kind=CHECKPOINT_KIND)
    meta = manifest["meta"]
    config = RunConfig.from_dict(meta["config"])
    encoders = init_frozen_encoders(config.train.backbone_seed, config.encoder)
    encoders.verify_checksum(meta["frozen_checksum"])

    prompt_sets = {}
    for c in COMPONENTS:
        prompt_sets[c] = init_prompt_set(c, config.encoder, config.train.seed, config.train.template(c))
        for name, tensor in prompt_sets[c].parameters().items():
            _restore(tensor, arrays, name)

    pool = projector = None
    if "pool.queries" in arrays:
        pool = PromptPool(parameter(arrays["pool.queries"], name="pool.queries"),
                          parameter(arrays["pool.values"], name="pool.values"))
    if "projector.weight" in arrays:
        gate = arrays.get("projector.gate")
        projector = FusionProjector(parameter(arrays["projector.weight"], name="projector.weight"),
                                    parameter(arrays["projector.bias"], name="projector.bias"),
                                    parameter(gate, name="projector.gate") if gate is not None else None)
    if meta["stage"] not in STAGES:
        raise CheckpointError(f"unknown stage {meta['stage']!r}")
    logger.debug("loaded %s checkpoint %s (%d arrays)", meta["stage"], path, len(arrays))
    return ModelState(
        config=config,
        encoders=encoders,
        prompt_sets=prompt_sets,
        label_names={c: list(v) for c, v in meta["label_names"].items()},
        pool=pool,
        projector=projector,
        stage=meta["stage"],
        variant=meta["variant"],
        extra=dict(meta.get("extra", {})),
    )
