import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from dotenv import load_dotenv
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.errors import ConfigError
from models.schemas import AdaptConfig, CorpusSpec, ObjectiveConfig, PriorSpec, TrainConfig

load_dotenv()


class Settings(BaseSettings):
    APP_TITLE: str = "lfmmi-adapt"
    APP_DESCRIPTION: str = "Flat-start LF-MMI training and LHUC-family speaker adaptation"
    APP_VERSION: str = "1.0.0"

    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE: str = os.getenv("LOG_FILE", "lfmmi.log")
    PROGRESS: bool = True

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


settings = Settings()


class ExperimentConfig(BaseSettings):
    """Flat experiment configuration.

    Keys are documented in README.md. Values come from defaults, ``LFMMI_*``
    environment variables, the key=value config file and CLI flags, in
    increasing order of priority.
    """

    # paths
    work_dir: str = "work"

    # token inventory and graphs
    tokens: str = "sil,a,b,c,d,e"
    silence_token: str = "sil"
    context_mode: Literal["mono", "left-bicontext"] = "mono"
    states_per_unit: int = Field(2, ge=1)
    lm_order: int = Field(3, ge=1)
    lm_weight: float = Field(1.0, gt=0.0)
    n_buckets: int = Field(40, ge=1)

    # network
    hidden_layers: int = Field(3, ge=1)
    hidden_width: int = Field(64, ge=1)

    # SI / SAT training
    train_epochs: int = Field(8, ge=0)
    train_learning_rate: float = Field(0.05, gt=0.0)
    train_gamma1: float = Field(1.0, ge=0.0)
    train_gamma2: float = Field(0.1, ge=0.0)
    sat_layers: str = "0"

    # adaptation
    method: Literal["lhuc", "blhuc", "map", "kl"] = "lhuc"
    criterion: Literal["ce", "mmi+ce"] = "ce"
    gamma3: Optional[float] = Field(None, ge=0.0)
    adapt_epochs: int = Field(7, ge=0)
    adapt_learning_rate: float = Field(0.1, gt=0.0)
    mc_samples: int = Field(1, ge=1)
    use_confidence: bool = False
    selection_rate: float = Field(0.8, gt=0.0, le=1.0)
    supervision: Literal["lattice-free", "alignment"] = "lattice-free"
    oracle: bool = False
    hooked_layers: str = "all"
    map_weight: float = Field(1.0, ge=0.0)
    kl_weight: float = Field(1.0, ge=0.0)
    prior_mu0: float = 0.0
    prior_sigma0: float = Field(1.0, gt=0.0)
    max_utterances: Optional[int] = Field(None, ge=1)
    beam: float = Field(8.0, gt=0.0)
    acoustic_scale: float = Field(1.0, gt=0.0)

    # synthetic corpus
    train_speakers: int = Field(20, ge=1)
    test_speakers: int = Field(8, ge=1)
    utts_per_speaker: int = Field(50, ge=1)
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

    # experiment grid
    sweep_utterances: str = "1,2,5,10,20"
    seed: int = 42

    model_config = SettingsConfigDict(env_prefix="LFMMI_", extra="forbid")

    @property
    def token_list(self) -> List[str]:
        return [tok.strip() for tok in self.tokens.split(",") if tok.strip()]

    @property
    def hooked_layer_list(self) -> Optional[List[int]]:
        if self.hooked_layers.strip().lower() == "all":
            return None
        return _int_list(self.hooked_layers)

    @property
    def sweep_list(self) -> List[int]:
        return _int_list(self.sweep_utterances)

    @property
    def paths(self) -> Dict[str, Path]:
        root = Path(self.work_dir)
        return {
            "corpus_train": root / "corpus" / "train",
            "corpus_test": root / "corpus" / "test",
            "model": root / "model",
            "adapters": root / "adapters",
            "decode": root / "decode",
            "reports": root / "reports",
        }

    def objective(self) -> ObjectiveConfig:
        base = ObjectiveConfig.for_criterion(self.criterion)
        return ObjectiveConfig(gamma1=base.gamma1, gamma2=base.gamma2, gamma3=self.gamma3)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.train_epochs,
            learning_rate=self.train_learning_rate,
            objective=ObjectiveConfig(gamma1=self.train_gamma1, gamma2=self.train_gamma2),
            sat_layers=_int_list(self.sat_layers),
            seed=self.seed,
        )

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(
            epochs=self.adapt_epochs,
            learning_rate=self.adapt_learning_rate,
            mc_samples=self.mc_samples,
            method=self.method,
            objective=self.objective(),
            hooked_layers=self.hooked_layer_list,
            prior=PriorSpec(mu0=self.prior_mu0, sigma0=self.prior_sigma0),
            map_weight=self.map_weight,
            kl_weight=self.kl_weight,
            use_confidence=self.use_confidence,
            selection_rate=self.selection_rate,
            supervision=self.supervision,
            oracle=self.oracle,
            max_utterances=self.max_utterances,
            bucket_count=self.n_buckets,
            beam=self.beam,
            acoustic_scale=self.acoustic_scale,
            seed=self.seed,
        )

    def corpus_spec(self, split: str) -> CorpusSpec:
        n_speakers = self.train_speakers if split == "train" else self.test_speakers
        return CorpusSpec(
            n_speakers=n_speakers,
            utts_per_speaker=self.utts_per_speaker,
            min_tokens=self.min_tokens,
            max_tokens=self.max_tokens,
            min_duration=max(self.min_duration, self.states_per_unit),
            max_duration=max(self.max_duration, self.states_per_unit),
            feature_dim=self.feature_dim,
            class_separation=self.class_separation,
            noise_level=self.noise_level,
            speaker_scale=self.speaker_scale,
            scaled_fraction=self.scaled_fraction,
            speaker_offset=self.speaker_offset,
            identity_speakers=self.identity_speakers,
            silence_frames=(self.states_per_unit, self.states_per_unit + 2),
            seed=self.seed,
            split=split,
        )


def _int_list(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def parse_config_file(path: Path) -> Dict[str, str]:
    """
    Parse a flat ``key = value`` file.

    Args:
        path (Path): Config file; ``#`` starts a comment, blank lines are skipped

    Returns:
        Dict[str, str]: Raw values keyed by config key
    """
    values: Dict[str, str] = {}
    problems: List[str] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            problems.append(f"line {lineno}: expected key=value")
            continue
        values[key.strip()] = value.strip()
    if problems:
        raise ConfigError(f"Malformed config file {path}", problems)
    return values


def load_experiment_config(path: Optional[Path] = None,
                           overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Build the experiment config from an optional file and flag overrides.

    Every violated field is reported at once.

    Raises:
        ConfigError: file missing, unknown keys or invalid values
    """
    values: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"Config file not found: {path}", ["config"])
        values.update(parse_config_file(Path(path)))
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})

    unknown = sorted(set(values) - set(ExperimentConfig.model_fields))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}", unknown)

    try:
        config = ExperimentConfig(**values)
        # derived views carry their own constraints
        config.adapt_config()
        config.train_config()
    except ValidationError as e:
        fields = [".".join(str(part) for part in err["loc"]) or err["msg"] for err in e.errors()]
        raise ConfigError(f"Invalid configuration: {e.error_count()} violation(s)", fields) from e
    except ValueError as e:
        raise ConfigError(f"Invalid configuration: {e}", [str(e)]) from e
    return config


def require_paths(*paths: Path) -> None:
    """Fail before any compute when declared inputs are missing."""
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError(f"Missing input paths: {', '.join(missing)}", missing)
