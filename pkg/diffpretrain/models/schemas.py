from typing import Optional, List, Dict, Literal
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

AttnKind = Literal["linear", "quadratic", "none"]
SizeGroup = Literal["Small", "Medium", "Big"]
TimestepMode = Literal["concat", "ensemble"]

SIZE_GROUPS = ("Small", "Medium", "Big")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_shape3(value: List[int], name: str) -> List[int]:
    if len(value) != 3 or any(v <= 0 for v in value):
        raise ValueError(f"{name} must be three positive integers, got {value}")
    return list(value)


class DenoiserConfig(StrictModel):
    in_channels: Optional[int] = None
    base_width: int = 16
    levels: int = 3
    channel_mult: Optional[List[int]] = None
    attn_kinds: Optional[List[AttnKind]] = None
    time_embed_dim: int = 64
    attn_heads: int = 4
    zero_init_output: bool = True

    @model_validator(mode="after")
    def _fill_and_check(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.in_channels is not None and self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 (image) or 2 (image + coordinate map)")
        if self.channel_mult is None:
            self.channel_mult = [2 ** level for level in range(self.levels)]
        if self.attn_kinds is None:
            self.attn_kinds = ["linear"] * (self.levels - 1) + ["quadratic"]
        if len(self.channel_mult) != self.levels or len(self.attn_kinds) != self.levels:
            raise ValueError("channel_mult and attn_kinds need one entry per level")
        if any(kind != "none" for kind in self.attn_kinds):
            if self.attn_kinds[-1] != "quadratic":
                raise ValueError("the deepest level must use quadratic attention when attention is enabled")
            if any(kind == "quadratic" for kind in self.attn_kinds[:-1]):
                raise ValueError("levels above the deepest use linear attention (or none)")
        for level, channels in enumerate(self.level_channels):
            if self.attn_kinds[level] != "none" and channels % self.attn_heads:
                raise ValueError(f"level {level} width {channels} is not divisible by attn_heads={self.attn_heads}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        return self

    @property
    def level_channels(self) -> List[int]:
        return [self.base_width * mult for mult in self.channel_mult]

    @property
    def conditioned(self) -> bool:
        return self.in_channels == 2

    @classmethod
    def desk(cls, conditioned: bool = False) -> "DenoiserConfig":
        return cls(in_channels=2 if conditioned else 1, base_width=16, levels=3)

    @classmethod
    def full(cls, conditioned: bool = False) -> "DenoiserConfig":
        return cls(in_channels=2 if conditioned else 1, base_width=32, levels=4, time_embed_dim=128)


class ScheduleConfig(StrictModel):
    T: int = 100
    beta_min: float = 1e-3
    beta_max: float = 0.2

    @classmethod
    def scaled(cls, T: int) -> "ScheduleConfig":
        from diffpretrain.diffusion.schedule import scaled_beta_range

        beta_min, beta_max = scaled_beta_range(T)
        return cls(T=T, beta_min=beta_min, beta_max=beta_max)


class PretrainConfig(StrictModel):
    patch_shape: List[int] = Field(default_factory=lambda: [16, 32, 32])
    epochs: int = 10
    max_steps: Optional[int] = None
    learning_rate: float = 1e-4
    batch_size: int = 1
    adam_betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    conditioning: bool = False
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50
    progress: bool = True
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)

    @field_validator("patch_shape")
    @classmethod
    def _patch(cls, value):
        return _check_shape3(value, "patch_shape")

    @model_validator(mode="after")
    def _check(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        wanted = 2 if self.conditioning else 1
        if self.denoiser.in_channels is None:
            self.denoiser = self.denoiser.model_copy(update={"in_channels": wanted})
        elif self.denoiser.in_channels != wanted:
            raise ValueError(
                f"denoiser.in_channels={self.denoiser.in_channels} contradicts conditioning={self.conditioning}"
            )
        factor = 2 ** (self.denoiser.levels - 1)
        if any(size % factor for size in self.patch_shape):
            raise ValueError(f"patch_shape {self.patch_shape} must be divisible by {factor}")
        return self

    def total_steps(self, n_volumes: int) -> int:
        # one epoch = one random patch per training volume
        per_epoch = -(-n_volumes // self.batch_size)
        steps = self.epochs * per_epoch
        if self.max_steps is not None:
            steps = self.max_steps
        return steps

    @classmethod
    def full(cls, conditioning: bool = False) -> "PretrainConfig":
        return cls(
            patch_shape=[32, 128, 128],
            epochs=3000,
            learning_rate=1e-4,
            batch_size=1,
            conditioning=conditioning,
            denoiser=DenoiserConfig.full(conditioning),
            schedule=ScheduleConfig(T=1000, beta_min=1e-4, beta_max=0.02),
        )


class BprConfig(StrictModel):
    slices_per_sample: int = 8
    gap_range: List[int] = Field(default_factory=lambda: [2, 4])
    steps: int = 1500
    learning_rate: float = 1e-3
    widths: List[int] = Field(default_factory=lambda: [8, 16, 32, 32])
    percentiles: List[float] = Field(default_factory=lambda: [1.0, 99.0])
    seed: int = 0
    log_every: int = 100
    progress: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.slices_per_sample < 3:
            raise ValueError("slices_per_sample must be >= 3")
        if len(self.gap_range) != 2 or not 1 <= self.gap_range[0] <= self.gap_range[1]:
            raise ValueError("gap_range must be [lo, hi] with 1 <= lo <= hi")
        if len(self.widths) != 4:
            raise ValueError("widths lists the four strided conv layers")
        return self

    @property
    def min_slices(self) -> int:
        return (self.slices_per_sample - 1) * self.gap_range[1] + 1


class ExtractConfig(StrictModel):
    timesteps: List[int] = Field(default_factory=lambda: [1, 3, 6])
    levels: Optional[List[int]] = None
    overlap: float = 0.5
    seed: int = 0
    noise_samples: int = 1
    cache: bool = False

    @model_validator(mode="after")
    def _check(self):
        if not self.timesteps:
            raise ValueError("timesteps must not be empty")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")
        if self.noise_samples < 1:
            raise ValueError("noise_samples must be >= 1")
        return self


class ProbeConfig(StrictModel):
    hidden: int = 64
    steps: int = 600
    learning_rate: float = 1e-3
    crop_shape: List[int] = Field(default_factory=lambda: [16, 32, 32])
    ce_weight: float = 0.5
    dice_weight: float = 0.5
    train_volumes: int = 10
    timestep_mode: TimestepMode = "concat"
    seed: int = 0
    log_every: int = 100
    progress: bool = True

    @field_validator("crop_shape")
    @classmethod
    def _crop(cls, value):
        return _check_shape3(value, "crop_shape")

    @model_validator(mode="after")
    def _check(self):
        if self.train_volumes < 1:
            raise ValueError("train_volumes must be >= 1")
        if self.ce_weight < 0 or self.dice_weight < 0 or self.ce_weight + self.dice_weight == 0:
            raise ValueError("ce_weight and dice_weight must be >= 0 and not both zero")
        return self


class AblateConfig(StrictModel):
    t_fractions: List[float] = Field(default_factory=lambda: [0.01, 0.1, 0.3, 0.6])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])

    @field_validator("t_fractions")
    @classmethod
    def _fractions(cls, value):
        if not value or any(not 0.0 < f <= 1.0 for f in value):
            raise ValueError("t_fractions must be non-empty fractions in (0, 1]")
        return value


class OrganSpec(StrictModel):
    name: str
    label: int
    size_group: SizeGroup
    report_name: str
    radii: List[float]
    body_position: float
    position_jitter: float = 0.03
    center_yx: List[float]
    intensity: float

    @model_validator(mode="after")
    def _check(self):
        if self.label < 1:
            raise ValueError("organ labels start at 1 (0 is background)")
        if len(self.radii) != 3 or any(r <= 0 for r in self.radii):
            raise ValueError(f"{self.name}: radii must be three positive values (z, y, x)")
        if len(self.center_yx) != 2:
            raise ValueError(f"{self.name}: center_yx holds (y, x) fractions of the body half-axes")
        if not -1.0 <= self.body_position <= 1.0:
            raise ValueError(f"{self.name}: body_position must lie in [-1, 1]")
        return self


def default_organs() -> List[OrganSpec]:
    # the two Small "nodule" organs share size and intensity; only their body position differs
    return [
        OrganSpec(name="liver", label=1, size_group="Big", report_name="Li",
                  radii=[6.0, 10.0, 11.0], body_position=0.35, center_yx=[0.0, -0.4], intensity=60.0),
        OrganSpec(name="stomach", label=2, size_group="Big", report_name="St",
                  radii=[5.0, 8.0, 8.0], body_position=0.3, center_yx=[0.05, 0.5], intensity=15.0),
        OrganSpec(name="kidney_l", label=3, size_group="Medium", report_name="Kid",
                  radii=[4.0, 5.0, 4.0], body_position=-0.3, center_yx=[0.45, 0.45], intensity=150.0),
        OrganSpec(name="kidney_r", label=4, size_group="Medium", report_name="Kid",
                  radii=[4.0, 5.0, 4.0], body_position=-0.3, center_yx=[0.45, -0.45], intensity=150.0),
        OrganSpec(name="aorta", label=5, size_group="Medium", report_name="Aor",
                  radii=[9.0, 3.0, 3.0], body_position=0.0, center_yx=[0.35, 0.0], intensity=210.0),
        OrganSpec(name="nodule_upper", label=6, size_group="Small", report_name="NoU",
                  radii=[2.0, 3.0, 3.0], body_position=0.6, center_yx=[-0.6, 0.25], intensity=100.0),
        OrganSpec(name="nodule_lower", label=7, size_group="Small", report_name="NoL",
                  radii=[2.0, 3.0, 3.0], body_position=-0.6, center_yx=[-0.6, 0.25], intensity=100.0),
    ]


class PhantomConfig(StrictModel):
    shape: List[int] = Field(default_factory=lambda: [32, 48, 48])
    spacing: List[float] = Field(default_factory=lambda: [2.0, 1.0, 1.0])
    organs: List[OrganSpec] = Field(default_factory=default_organs)
    body_half_axes: List[float] = Field(default_factory=lambda: [0.42, 0.46])
    body_taper: float = 0.15
    body_offset_jitter: float = 0.12
    body_scale_range: List[float] = Field(default_factory=lambda: [0.85, 1.0])
    radius_jitter: float = 0.1
    texture_noise_std: float = 12.0
    background_noise_std: float = 15.0
    intensity_shift: float = 0.0
    body_intensity: float = 40.0
    air_intensity: float = -1000.0
    window: List[float] = Field(default_factory=lambda: [-160.0, 240.0])
    distribution: Literal["A", "B"] = "A"

    @field_validator("shape")
    @classmethod
    def _shape(cls, value):
        return _check_shape3(value, "shape")

    @model_validator(mode="after")
    def _check(self):
        labels = [organ.label for organ in self.organs]
        if len(set(labels)) != len(labels):
            raise ValueError("organ labels must be unique")
        if len(self.window) != 2 or self.window[0] >= self.window[1]:
            raise ValueError("window must be [lo, hi] with lo < hi")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing components must be > 0")
        return self

    @property
    def num_classes(self) -> int:
        return max(organ.label for organ in self.organs) + 1

    @classmethod
    def for_distribution(cls, distribution: str = "A", **overrides) -> "PhantomConfig":
        if distribution == "B":
            shifted = dict(radius_jitter=0.2, texture_noise_std=18.0, background_noise_std=25.0,
                           intensity_shift=12.0, distribution="B")
            shifted.update(overrides)
            return cls(**shifted)
        return cls(distribution="A", **overrides)


class CorpusItem(StrictModel):
    index: int
    seed: int
    image: Optional[str] = None
    labels: Optional[str] = None
    coord: Optional[str] = None


class CorpusManifest(StrictModel):
    seed: int
    config: PhantomConfig
    items: List[CorpusItem] = Field(default_factory=list)


class SynthConfig(StrictModel):
    n_train: int = 200
    n_test: int = 50
    n_shift: int = 50
    seed: int = 0
    shape: List[int] = Field(default_factory=lambda: [32, 48, 48])


class GlobalConfig(StrictModel):
    seed: int = 0
    output_dir: str = "runs/desk"


class ExperimentConfig(StrictModel):
    global_: GlobalConfig = Field(default_factory=GlobalConfig, alias="global")
    synth: SynthConfig = Field(default_factory=SynthConfig)
    bpr: BprConfig = Field(default_factory=BprConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    extract: ExtractConfig = Field(default_factory=ExtractConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    ablate: AblateConfig = Field(default_factory=AblateConfig)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ExtractionPlan(StrictModel):
    levels: List[int]
    level_channels: List[int]
    timesteps: List[int]
    noise_samples: int = 1
    overlap: float = 0.5
    seed: int = 0

    @property
    def channels_per_timestep(self) -> int:
        return sum(self.level_channels[level] for level in self.levels)

    @property
    def channels(self) -> int:
        return self.channels_per_timestep * len(self.timesteps)


class BprEvaluation(StrictModel):
    spearman: float
    monotone_fraction: float
    per_volume_spearman: List[float]


class DiceReport(StrictModel):
    per_class: Dict[str, float]
    grouping: Dict[str, SizeGroup]
    groups: Dict[str, float]
    average: float


class TrainingSummary(StrictModel):
    kind: str
    steps: int
    first_loss: Optional[float] = None
    final_loss: Optional[float] = None
    checkpoint: Optional[str] = None
