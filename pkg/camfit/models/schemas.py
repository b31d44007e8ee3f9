"""
Pydantic schemas for camfit configuration, manifests and reports
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Section(BaseModel):
    """Config section: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ScheduleConfig(_Section):
    """Focal candidate schedule"""

    m: int = Field(32, ge=2, description="Number of focal candidates")
    f_min_ratio: float = Field(0.1, gt=0, description="f_min as a multiple of image height")
    f_max_ratio: float = Field(3.5, gt=0, description="f_max as a multiple of image height")
    f_min: Optional[float] = Field(None, gt=0, description="Absolute f_min in pixels (overrides ratio)")
    f_max: Optional[float] = Field(None, gt=0, description="Absolute f_max in pixels (overrides ratio)")
    temperature: float = Field(100.0, gt=0, description="Softmax temperature for loss-derived likelihoods")

    @model_validator(mode="after")
    def _check_range(self):
        if self.f_min is None and self.f_max is None and self.f_min_ratio >= self.f_max_ratio:
            raise ValueError("f_min_ratio must be smaller than f_max_ratio")
        if self.f_min is not None and self.f_max is not None and self.f_min >= self.f_max:
            raise ValueError("f_min must be smaller than f_max")
        return self

    def focal_range(self, height: int):
        """(f_min, f_max) in pixels for an image of the given height"""
        f_min = self.f_min if self.f_min is not None else self.f_min_ratio * height
        f_max = self.f_max if self.f_max is not None else self.f_max_ratio * height
        return f_min, f_max


class FitConfig(_Section):
    """Direct per-sequence optimization"""

    step_size: float = Field(1e-3, gt=0, description="Adam step size for poses")
    sigma_step_size: float = Field(1e-2, gt=0, description="Adam step size for the uncertainty grid")
    lr_decay_final: float = Field(0.05, gt=0, le=1, description="Final step size as a fraction of the initial one")
    max_iterations: int = Field(1500, ge=1, description="Maximum optimizer iterations")
    min_iterations: int = Field(200, ge=1, description="Iterations before early stopping may trigger")
    sigma_resolution: int = Field(8, ge=1, description="Uncertainty grid stride in pixels")
    convergence_tol: float = Field(1e-9, gt=0, description="Relative change of the smoothed loss that stops the fit")
    seed: int = Field(0, ge=0, description="Random seed")
    lambda_flow: float = Field(1.0, ge=0, description="Weight of the uncertainty flow loss")
    lambda_consistency: float = Field(1.0, ge=0, description="Weight of the forward/backward consistency loss")


class RefineConfig(_Section):
    """Sliding-window bundle adjustment"""

    grid: int = Field(16, ge=1, description="Track anchors per image axis")
    track_length: int = Field(8, ge=2, description="Points per track")
    stride: int = Field(3, ge=1, description="Frame stride between refined keyframes")
    window: int = Field(8, ge=2, description="Window width in keyframes")
    overlap: int = Field(6, ge=0, description="Window overlap in keyframes")
    steps_per_window: int = Field(400, ge=0, description="Adam steps per window")
    global_steps: int = Field(5000, ge=0, description="Adam steps of the final global pass")
    step_size: float = Field(1e-4, gt=0, description="Adam step size")
    sigma_max: float = Field(0.05, gt=0, description="Uncertainty gate; points at or above it are ignored")
    lambda_smooth: float = Field(0.1, ge=0, description="Weight of the smoothness term")
    weighting: Literal["uncertainty", "uniform"] = Field(
        "uncertainty", description="Track weighting: accumulated uncertainty or sigma forced to zero"
    )
    divergence_factor: float = Field(10.0, gt=1, description="Loss growth that aborts a window")
    optimize_focal: bool = Field(True, description="Refine the focal length together with the poses")
    seed: int = Field(0, ge=0, description="Random seed")

    @model_validator(mode="after")
    def _check_window(self):
        if self.overlap >= self.window:
            raise ValueError("overlap must be smaller than window")
        return self


class ModelConfig(_Section):
    """Toy sequence model"""

    feature_dim: int = Field(64, ge=1, description="Token width")
    hidden_dim: int = Field(64, ge=1, description="Hidden width of the heads")
    attention_layers: int = Field(2, ge=1, description="Self-attention blocks")
    attention_heads: int = Field(4, ge=1, description="Heads per attention block")
    patch_stride: int = Field(4, ge=1, description="Pooling stride of the encoder in pixels")
    m: int = Field(32, ge=2, description="Number of focal candidates / frame heads")
    p_drop: float = Field(0.1, ge=0, lt=1, description="Pose-token dropout probability")
    weight_decay_pose_tokens: float = Field(0.01, ge=0, description="L2 decay on pose tokens")
    pose_scale: float = Field(0.1, gt=0, description="Scale applied to raw pose head outputs")

    @model_validator(mode="after")
    def _check_heads(self):
        if self.feature_dim % self.attention_heads != 0:
            raise ValueError("feature_dim must be divisible by attention_heads")
        return self


class TrainStage(_Section):
    """One training stage"""

    sequence_length: int = Field(..., ge=2, description="Frames per training sequence")
    steps: int = Field(..., ge=1, description="Optimizer steps in this stage")


class TrainConfig(_Section):
    """Toy predictor training"""

    stages: List[TrainStage] = Field(
        default_factory=lambda: [TrainStage(sequence_length=2, steps=5000), TrainStage(sequence_length=8, steps=5000)],
        min_length=1,
        description="Training stages, run in order",
    )
    learning_rate: float = Field(1e-4, gt=0, description="Initial Adam step size")
    decayed_learning_rate: float = Field(1e-5, gt=0, description="Step size after the decay boundary")
    decay_boundary: int = Field(8000, ge=0, description="Global step at which the step size drops")
    batch_size: int = Field(4, ge=1, description="Sequences per step")
    corpus_size: int = Field(200, ge=1, description="Synthetic sequences in the training corpus")
    corpus_frames: int = Field(8, ge=2, description="Frames per corpus sequence")
    image_size: int = Field(32, ge=8, description="Square image size of corpus sequences")
    temperature: float = Field(100.0, gt=0, description="Softmax temperature of the intrinsics target")
    lambda_flow: float = Field(1.0, ge=0)
    lambda_consistency: float = Field(1.0, ge=0)
    lambda_intr: float = Field(1.0, ge=0)
    log_every: int = Field(100, ge=1, description="Steps between log lines")
    seed: int = Field(0, ge=0, description="Random seed")


class EvalConfig(_Section):
    """Trajectory evaluation"""

    alignment: Literal["none", "rigid", "similarity"] = Field("similarity", description="Alignment before ATE")
    rpe_delta: int = Field(1, ge=1, description="Frame gap of the relative pose error")


class SceneSpec(_Section):
    """Synthetic dynamic scene"""

    frames: int = Field(8, ge=1, description="Number of frames")
    width: int = Field(64, ge=4, description="Image width in pixels")
    height: int = Field(64, ge=4, description="Image height in pixels")
    focal: float = Field(60.0, gt=0, description="Ground-truth focal length in pixels")
    camera_path: Literal["arc", "straight", "rotation", "handheld"] = Field("arc", description="Camera path family")
    translation_per_frame: float = Field(0.08, ge=0, description="Camera translation per frame (scene units)")
    rotation_per_frame_deg: float = Field(1.0, ge=0, description="Camera rotation per frame (degrees)")
    jitter: float = Field(0.2, ge=0, description="Handheld jitter amplitude relative to the per-frame motion")
    background_depth: float = Field(5.0, gt=0, description="Depth of the background plane")
    static_boxes: int = Field(4, ge=0, description="Number of static boxes")
    movers: int = Field(0, ge=0, le=4, description="Number of moving boxes")
    mover_coverage: float = Field(0.0, ge=0, le=0.6, description="Image fraction covered by movers at frame 0")
    mover_speed: float = Field(0.08, ge=0, description="Mover speed in scene units per frame")
    seed: int = Field(0, ge=0, description="Random seed")


class InputConfig(_Section):
    """Input raster handling"""

    crop_square: bool = Field(False, description="Center-crop rasters to a square before processing")


class RunConfig(_Section):
    """Every module's configuration for one run"""

    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    refine: RefineConfig = Field(default_factory=RefineConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    synth: SceneSpec = Field(default_factory=SceneSpec)
    input: InputConfig = Field(default_factory=InputConfig)


class CandidateSummary(BaseModel):
    """Result entry for one focal candidate"""

    index: int = Field(..., description="Position in the schedule")
    focal: float = Field(..., description="Candidate focal length in pixels")
    flow_loss: float = Field(..., description="Sequence flow loss of the candidate")
    flow_loss_bwd: Optional[float] = Field(None, description="Flow loss on the reversed sequence")
    consistency_loss: Optional[float] = Field(None, description="Forward/backward consistency loss")
    likelihood: float = Field(..., description="Likelihood assigned to the candidate")


class WindowReport(BaseModel):
    """Outcome of one refinement window"""

    keyframes: List[int] = Field(..., description="Keyframe indices covered by the window")
    free: List[int] = Field(..., description="Keyframes optimized in this window")
    initial_loss: float
    final_loss: float
    aborted: bool = Field(False, description="Window diverged and was reverted")


class RefinementReport(BaseModel):
    """Summary of a refinement run"""

    keyframes: List[int] = Field(..., description="Frame index of every keyframe")
    tracks: int = Field(..., description="Tracks used by the optimization")
    windows: List[WindowReport] = Field(default_factory=list)
    global_initial_loss: Optional[float] = None
    global_final_loss: Optional[float] = None
    initial_focal: float
    refined_focal: float


class MetricsReport(BaseModel):
    """Trajectory and focal metrics"""

    ate: float = Field(..., ge=0, description="RMSE of aligned positions")
    rpe_trans: float = Field(..., ge=0, description="RMSE of relative translation error")
    rpe_rot: float = Field(..., ge=0, description="RMSE of relative rotation error in degrees")
    afe: Optional[float] = Field(None, ge=0, description="Absolute focal error in pixels")
    rfe: Optional[float] = Field(None, ge=0, description="Relative focal error")
    alignment: str = Field("similarity", description="Alignment mode used for ATE")
    scale: float = Field(1.0, description="Scale factor of the alignment")

    def to_text(self) -> str:
        """Plain key=value report"""
        lines = []
        for key, value in self.model_dump().items():
            if value is None:
                continue
            lines.append(f"{key}={value:.9g}" if isinstance(value, float) else f"{key}={value}")
        return "\n".join(lines) + "\n"


class ResultManifest(BaseModel):
    """Everything a subcommand produced"""

    command: str = Field(..., description="Subcommand that wrote the manifest")
    version: str = Field(..., description="camfit version")
    seed: int = Field(..., description="Seed of the run")
    frames: Optional[int] = None
    width: Optional[int] = None
    height: Optional[int] = None
    schedule: List[float] = Field(default_factory=list, description="Focal candidates")
    selection: Optional[Literal["min_loss", "likelihood"]] = None
    selected_index: Optional[int] = None
    selected_focal: Optional[float] = None
    candidates: List[CandidateSummary] = Field(default_factory=list)
    loss_report: Optional[dict] = None
    refinement: Optional[RefinementReport] = None
    metrics: Optional[MetricsReport] = None
    artifacts: List[str] = Field(default_factory=list, description="Files written, relative to the output directory")


class TensorEntry(BaseModel):
    """Directory entry of one parameter tensor inside a checkpoint"""

    name: str
    shape: List[int]
    dtype: str
    offset: int = Field(..., ge=0)
    nbytes: int = Field(..., ge=0)


class CheckpointManifest(BaseModel):
    """Manifest stored next to the parameter payload of a checkpoint"""

    format: Literal["camfit-checkpoint"] = "camfit-checkpoint"
    version: int = Field(1, description="Container version")
    model: ModelConfig
    schedule: List[float]
    image_size: int
    tensors: List[TensorEntry]
