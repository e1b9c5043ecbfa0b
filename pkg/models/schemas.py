from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


class ObjectiveConfig(BaseModel):
    """Interpolation scales of the sequence objective.

    ``gamma3`` weighs the KL term of the Bayesian bound and defaults to
    ``gamma1 + gamma2``.
    """

    gamma1: float = Field(1.0, ge=0.0)
    gamma2: float = Field(0.1, ge=0.0)
    gamma3: Optional[float] = Field(None, ge=0.0)

    @model_validator(mode="after")
    def _check_scales(self):
        if self.gamma1 == 0.0 and self.gamma2 == 0.0:
            raise ValueError("gamma1 and gamma2 cannot both be zero")
        if self.gamma3 is None:
            self.gamma3 = self.gamma1 + self.gamma2
        return self

    @classmethod
    def for_criterion(cls, criterion: str) -> "ObjectiveConfig":
        if criterion == "ce":
            return cls(gamma1=0.0, gamma2=0.1)
        if criterion == "mmi+ce":
            return cls(gamma1=1.0, gamma2=0.1)
        raise ValueError(f"Unknown criterion: {criterion}")


class PriorSpec(BaseModel):
    mu0: float = 0.0
    sigma0: float = Field(1.0, gt=0.0)


class AdaptConfig(BaseModel):
    epochs: int = Field(7, ge=0)
    learning_rate: float = Field(0.1, gt=0.0)
    mc_samples: int = Field(1, ge=1)
    method: Literal["lhuc", "blhuc", "map", "kl"] = "lhuc"
    objective: ObjectiveConfig = Field(default_factory=lambda: ObjectiveConfig(gamma1=0.0, gamma2=0.1))
    hooked_layers: Optional[List[int]] = None
    prior: PriorSpec = Field(default_factory=PriorSpec)
    map_weight: float = Field(1.0, ge=0.0)
    kl_weight: float = Field(1.0, ge=0.0)

    # Bayesian posterior initialisation; -inf with freeze_sigma degenerates to LHUC
    init_log_sigma: float = 0.0
    freeze_sigma: bool = False

    use_confidence: bool = False
    selection_rate: float = Field(0.8, gt=0.0, le=1.0)
    supervision: Literal["lattice-free", "alignment"] = "lattice-free"
    oracle: bool = False
    max_utterances: Optional[int] = Field(None, ge=1)
    bucket_lengths: bool = True
    bucket_count: int = Field(40, ge=1)
    beam: float = Field(8.0, gt=0.0)
    acoustic_scale: float = Field(1.0, gt=0.0)
    seed: int = 0

    @property
    def regularizer(self) -> Literal["none", "map", "kl_output"]:
        return {"map": "map", "kl": "kl_output"}.get(self.method, "none")

    @property
    def bayesian(self) -> bool:
        return self.method == "blhuc"


class TrainConfig(BaseModel):
    epochs: int = Field(8, ge=0)
    learning_rate: float = Field(0.05, gt=0.0)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    sat_layers: List[int] = Field(default_factory=lambda: [0])
    seed: int = 0


class CorpusSpec(BaseModel):
    n_speakers: int = Field(4, ge=1)
    utts_per_speaker: int = Field(10, ge=1)
    min_tokens: int = Field(2, ge=1)
    max_tokens: int = Field(5, ge=1)
    min_duration: int = Field(2, ge=1)
    max_duration: int = Field(5, ge=1)
    feature_dim: int = Field(12, ge=1)
    class_separation: float = Field(2.0, gt=0.0)
    noise_level: float = Field(1.0, gt=0.0)
    speaker_scale: float = Field(1.5, ge=1.0)
    scaled_fraction: float = Field(0.5, ge=0.0, le=1.0)
    speaker_offset: float = Field(0.5, ge=0.0)
    identity_speakers: bool = False
    silence_frames: Tuple[int, int] = (2, 4)
    seed: int = 42
    split: str = "train"

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.max_tokens < self.min_tokens:
            raise ValueError("max_tokens must be >= min_tokens")
        if self.max_duration < self.min_duration:
            raise ValueError("max_duration must be >= min_duration")
        if self.silence_frames[1] < self.silence_frames[0] or self.silence_frames[0] < 0:
            raise ValueError("silence_frames must be a non-negative (low, high) range")
        return self


class ErrorCounts(BaseModel):
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_tokens: int = 0
    ter: float = 0.0

    @classmethod
    def from_counts(cls, substitutions: int, insertions: int, deletions: int,
                    reference_tokens: int) -> "ErrorCounts":
        errors = substitutions + insertions + deletions
        ter = errors / reference_tokens if reference_tokens else float(errors > 0)
        return cls(substitutions=substitutions, insertions=insertions, deletions=deletions,
                   reference_tokens=reference_tokens, ter=ter)

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts.from_counts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.reference_tokens + other.reference_tokens,
        )


class ConditionResult(BaseModel):
    condition: str
    test_set: str = "test"
    counts: ErrorCounts
    per_speaker: Dict[str, ErrorCounts] = Field(default_factory=dict)
    baseline: Optional[str] = None
    relative_reduction: Optional[float] = None


class SweepPoint(BaseModel):
    condition: str
    utterances_per_speaker: int
    ter: float


class MetricsReport(BaseModel):
    schema_version: int = 1
    seed: int
    baseline: Optional[str] = None
    conditions: List[ConditionResult] = Field(default_factory=list)
    sweep: List[SweepPoint] = Field(default_factory=list)
    wall_clock_seconds: Dict[str, float] = Field(default_factory=dict)
