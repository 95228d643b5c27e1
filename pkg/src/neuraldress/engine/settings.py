from __future__ import annotations
import hashlib
import json
from typing import List, Literal, Optional
from pydantic import BaseModel, Field, model_validator

# Mipmap regularization weight per texture level.
MIPMAP_ALPHAS = (0.0, 0.0, 0.0, 1.0, 2.0, 4.0, 8.0)  # 8p ... 512p


class BodyConfig(BaseModel):
    vertex_budget: int = 400
    spine_joints: int = 1
    n_shape: int = 4
    depth_ratio: float = 0.7
    blend_width: float = 0.04


class TextureConfig(BaseModel):
    channels: int = 16
    top_resolution: int = 64
    min_resolution: int = 8
    init_std: float = 0.01

    @model_validator(mode="after")
    def _validate(self):
        errs: list[str] = []
        for name in ("top_resolution", "min_resolution"):
            r = getattr(self, name)
            if r < 1 or r & (r - 1):
                errs.append(f"{name} must be a power of two, got {r}")
        if self.min_resolution > self.top_resolution:
            errs.append("min_resolution exceeds top_resolution")
        if self.channels < 1:
            errs.append("channels must be positive")
        if errs:
            raise ValueError("; ".join(errs))
        return self


class RendererConfig(BaseModel):
    texture_channels: int = 16
    base_width: int = 32
    depth: int = 3
    max_width: int = 256
    trunk_channels: int = 16


class VideoLossWeights(BaseModel):
    vgg: float = Field(1.0, ge=0)
    vggface: float = Field(0.2, ge=0)
    segm: float = Field(100.0, ge=0)
    adv: float = Field(10.0, ge=0)
    advface: float = Field(50.0, ge=0)
    advhands: float = Field(50.0, ge=0)
    mipmap: float = Field(1.0, ge=0)
    fm: float = Field(10.0, ge=0)


class VideoPhaseConfig(BaseModel):
    weights: VideoLossWeights = Field(default_factory=VideoLossWeights)
    lr_texture: float = 5e-2
    lr_renderer: float = 1e-3
    lr_discriminator: float = 2e-4
    beta1: float = 0.5


def _phase2() -> VideoPhaseConfig:
    return VideoPhaseConfig(lr_texture=1e-3)


class VideoFitConfig(BaseModel):
    phase1: VideoPhaseConfig = Field(default_factory=VideoPhaseConfig)
    phase2: VideoPhaseConfig = Field(default_factory=_phase2)
    steps: int = 2000
    batch_size: int = 4
    image_size: int = 128
    face_crop_size: int = 32
    hand_crop_size: int = 16
    discriminator_width: int = 32
    extractor: str = "random"


class GanLossWeights(BaseModel):
    adv_unary: float = Field(1.0, ge=0)
    adv_binary: float = Field(1.0, ge=0)
    adv_face: float = Field(1.0, ge=0)
    r1: float = Field(10.0, ge=0)
    path: float = Field(2.0, ge=0)
    augreg: float = Field(1.0, ge=0)
    wreg: float = Field(10.0, ge=0)


class GanLearningRates(BaseModel):
    generator: float = 1e-3
    renderer: float = 1e-4
    predictor: float = 1e-3
    d_unary: float = 2e-3
    d_binary: float = 2e-3
    d_face: float = 2e-3


class AugmentationConfig(BaseModel):
    max_rotation_deg: float = 30.0
    max_translation: float = 0.1


class AblationToggles(BaseModel):
    use_augmentations: bool = True
    use_mesh_mask: bool = True
    use_spectral: bool = True
    use_latent_predictor: bool = True
    use_face_discriminator: bool = True
    use_binary_discriminator: bool = True


ABLATIONS: dict[str, dict[str, bool]] = {
    "full": {},
    "no-augmentations": {"use_augmentations": False},
    "no-meshmask": {"use_mesh_mask": False},
    "no-speccoords": {"use_spectral": False},
    "no-latent-predictor": {"use_latent_predictor": False},
    "no-face-discr": {"use_face_discriminator": False},
    "no-bin-discr": {"use_binary_discriminator": False},
}


class GanConfig(BaseModel):
    latent_dim: int = 512
    mapping_layers: int = 8
    n_features: int = 32
    max_features: int = 256
    texture_channels: int = 16
    texture_resolution: int = 64
    spectral_levels: Optional[List[int]] = None  # None -> top/4, top/2, top
    spectral_channels: int = 16
    equalized_lr: bool = True
    style_mixing_prob: float = 0.0
    image_size: int = 128
    face_crop_size: int = 32
    discriminator_features: int = 32
    discriminator_max_features: int = 256
    predictor_width: int = 32
    criterion: Literal["nonsaturating", "lsgan"] = "nonsaturating"
    weights: GanLossWeights = Field(default_factory=GanLossWeights)
    lr: GanLearningRates = Field(default_factory=GanLearningRates)
    augment: AugmentationConfig = Field(default_factory=AugmentationConfig)
    ablation: AblationToggles = Field(default_factory=AblationToggles)
    batch_size: int = 4
    steps: int = 300
    r1_every: int = 4
    path_every: int = 4
    path_beta: float = 0.99
    checkpoint_every: int = 0
    truncation_samples: int = 10000
    phase: Literal["base", "upscaled"] = "base"

    def levels(self) -> list[int]:
        out, r = [], 4
        while r <= self.texture_resolution:
            out.append(r)
            r *= 2
        return out

    def resolved_spectral_levels(self) -> list[int]:
        if not self.ablation.use_spectral:
            return []
        if self.spectral_levels is not None:
            return sorted(set(self.spectral_levels))
        top = self.texture_resolution
        return sorted({r for r in (top // 4, top // 2, top) if r >= 4})

    @model_validator(mode="after")
    def _validate(self):
        r = self.texture_resolution
        if r < 4 or r & (r - 1):
            raise ValueError(f"texture_resolution must be a power of two >= 4, got {r}")
        if self.phase != "base":
            raise ValueError("only the base phase is trainable; 'upscaled' is reserved")
        return self


class EncoderConfig(BaseModel):
    kind: Literal["a", "g"] = "a"
    image_size: int = 128
    base_width: int = 32
    max_width: int = 256
    style_width: int = 128
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    a_pose_deg: float = 45.0
    a_pose_jitter_deg: float = 5.0
    azimuth_range_deg: float = 10.0
    shape_std: float = 0.5
    extractor: str = "random"
    validation_size: int = 8


FitVariable = Literal["latents", "generator", "noise", "texture"]


class StageLossWeights(BaseModel):
    lpips: float = Field(1.0, ge=0)
    mse: float = Field(0.5, ge=0)
    encoder_deviation: float = Field(0.0, ge=0)
    generator_deviation: float = Field(0.0, ge=0)
    texture_deviation: float = Field(0.0, ge=0)
    face_lpips: float = Field(0.0, ge=0)
    face_fm: float = Field(0.0, ge=0)


class FitStage(BaseModel):
    name: str
    variables: List[FitVariable]
    iterations: int = Field(ge=0)
    lr: float = Field(gt=0)
    weights: StageLossWeights = Field(default_factory=StageLossWeights)

    @model_validator(mode="after")
    def _validate(self):
        if not self.variables:
            raise ValueError(f"stage '{self.name}' declares no variables")
        if "texture" in self.variables and len(self.variables) > 1:
            raise ValueError(f"stage '{self.name}': 'texture' cannot be combined with other variables")
        return self


def _default_stages() -> list[FitStage]:
    return [
        FitStage(name="latents", variables=["latents"], iterations=100, lr=0.01,
                 weights=StageLossWeights(encoder_deviation=0.1, face_lpips=0.5)),
        FitStage(name="generator", variables=["generator"], iterations=70, lr=0.01,
                 weights=StageLossWeights(generator_deviation=1.0, face_lpips=1.0, face_fm=2.0)),
        FitStage(name="noise", variables=["noise"], iterations=50, lr=0.1,
                 weights=StageLossWeights(face_lpips=0.1)),
        FitStage(name="texture", variables=["texture"], iterations=100, lr=0.15,
                 weights=StageLossWeights(texture_deviation=0.1, face_lpips=2.0, face_fm=3.0)),
    ]


class FitSchedule(BaseModel):
    stages: List[FitStage] = Field(default_factory=_default_stages)
    image_size: int = 128
    face_crop_size: int = 32
    extractor: str = "random"

    def schedule_hash(self) -> str:
        return config_hash(self)


class PoseSamplerConfig(BaseModel):
    max_joint_deg: float = 20.0
    a_pose_fraction: float = 0.5
    a_pose_deg: float = 45.0


class CameraOrbitConfig(BaseModel):
    azimuth_range_deg: float = 180.0
    elevation_range_deg: float = 10.0
    distance: float = 3.0
    focal_ratio: float = 1.6  # focal length in units of image side
    target_height: float = 0.9


class SyntheticWorld(BaseModel):
    seed: int = 0
    image_size: int = 128
    texture_resolution: int = 128
    n_people: int = 4
    frames_per_person: int = 8
    poses: PoseSamplerConfig = Field(default_factory=PoseSamplerConfig)
    cameras: CameraOrbitConfig = Field(default_factory=CameraOrbitConfig)
    stripe_probability: float = 0.6
    patch_count: int = 3


class MetricsConfig(BaseModel):
    extractor: str = "random"
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    consistency_avatars: int = 32
    consistency_delta_deg: float = 180.0


class ProjectConfig(BaseModel):
    seed: int = 0
    device: str = "cpu"
    body: BodyConfig = Field(default_factory=BodyConfig)
    texture: TextureConfig = Field(default_factory=TextureConfig)
    renderer: RendererConfig = Field(default_factory=RendererConfig)
    gan: GanConfig = Field(default_factory=GanConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    video: VideoFitConfig = Field(default_factory=VideoFitConfig)
    fewshot: FitSchedule = Field(default_factory=FitSchedule)
    world: SyntheticWorld = Field(default_factory=SyntheticWorld)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @model_validator(mode="after")
    def _validate(self):
        errs: list[str] = []
        if self.renderer.texture_channels != self.texture.channels:
            errs.append("renderer.texture_channels must equal texture.channels")
        if self.gan.texture_channels != self.texture.channels:
            errs.append("gan.texture_channels must equal texture.channels")
        if errs:
            raise ValueError("; ".join(errs))
        return self


def config_hash(model: BaseModel) -> str:
    payload = json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
