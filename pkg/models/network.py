"""
The place-recognition network: point-cloud and image branches, pooling, fusion.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from config import NetworkConfig, PoolingConfig, RunConfig
from errors import ShapeMismatchError
from models.branches import Fusion, ImageBranch, PointCloudFPN
from models.layers import Module
from models.pooling import GlobalPool
from models.sparse import SparseVoxelTensor
from models.tensor import DenseTensor, Parameter, l2_normalize

logger = logging.getLogger(__name__)

IMAGE_PREFIX = 'image.'


@dataclass
class ModelInput:
    """One collated batch: voxelized clouds and/or normalized images [B, 3, H, W]."""
    size: int
    clouds: Optional[SparseVoxelTensor] = None
    images: Optional[DenseTensor] = None


@dataclass
class Descriptors:
    """Per-head descriptors [B, width]; a head is None when its branch is absent."""
    fused: DenseTensor
    pc: Optional[DenseTensor] = None
    rgb: Optional[DenseTensor] = None

    def head(self, name: str) -> Optional[DenseTensor]:
        return {'fused': self.fused, 'pc': self.pc, 'rgb': self.rgb}[name]


class PlaceRecognitionNet(Module):
    """Multimodal (or unimodal, per network.modality) descriptor extractor."""

    def __init__(self, network: NetworkConfig, pooling: PoolingConfig, seed: int = 0):
        super().__init__()
        self.network_cfg, self.pooling_cfg = network, pooling
        rng = np.random.default_rng(seed)
        modality = network.modality
        if modality in ('fused', 'pc'):
            self.pc = PointCloudFPN(network, rng)
            self.pc_pool = GlobalPool(pooling.method_for('pc'), pooling)
        if modality in ('fused', 'rgb'):
            self.image = ImageBranch(network, rng)
            self.image_pool = GlobalPool(pooling.method_for('image'), pooling)
        if modality == 'fused':
            self.fusion = Fusion(network, rng)
        logger.debug("built %s model with %d parameter tensors", modality, len(self.parameters()))

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> 'PlaceRecognitionNet':
        return cls(cfg.network, cfg.pooling, cfg.seed)

    @property
    def modality(self) -> str:
        return self.network_cfg.modality

    @property
    def descriptor_width(self) -> int:
        return self.network_cfg.fused_width

    @property
    def uses_clouds(self) -> bool:
        return self.modality in ('fused', 'pc')

    @property
    def uses_images(self) -> bool:
        return self.modality in ('fused', 'rgb')

    def _finish(self, descriptor: DenseTensor) -> DenseTensor:
        return l2_normalize(descriptor, axis=-1) if self.network_cfg.normalize_descriptors else descriptor

    def forward(self, batch: ModelInput) -> Descriptors:
        d_pc = d_rgb = None
        if self.uses_clouds:
            if batch.clouds is None:
                raise ShapeMismatchError("model needs point clouds but the batch has none")
            d_pc = self._finish(self.pc_pool(self.pc(batch.clouds, batch.size), batch.size))
        if self.uses_images:
            if batch.images is None:
                raise ShapeMismatchError("model needs images but the batch has none")
            d_rgb = self._finish(self.image_pool(self.image(batch.images)))
        if self.modality == 'fused':
            return Descriptors(fused=self.fusion(d_pc, d_rgb), pc=d_pc, rgb=d_rgb)
        return Descriptors(fused=d_pc if self.modality == 'pc' else d_rgb, pc=d_pc, rgb=d_rgb)

    def parameter_groups(self) -> Dict[str, List[Parameter]]:
        """Image-branch parameters step with their own learning rate."""
        groups: Dict[str, List[Parameter]] = {'main': [], 'image': []}
        for name, param in self.named_parameters():
            groups['image' if name.startswith(IMAGE_PREFIX) else 'main'].append(param)
        return groups
