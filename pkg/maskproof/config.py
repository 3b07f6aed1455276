import hashlib
import os
import logging
from pathlib import Path
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .fixed_point import BN254_SCALAR_FIELD, FixedConfig

logger = logging.getLogger(__name__)

load_dotenv()

ENV_PREFIX = "MASKPROOF_"


def _env(name: str, default):
    """Read MASKPROOF_<name>, falling back to the default"""
    return os.getenv(f"{ENV_PREFIX}{name}", default)


class Settings(BaseModel):
    """Resolved run configuration; embedded in every transcript header."""

    model_config = ConfigDict(frozen=True)

    # field / fixed point
    modulus: int = BN254_SCALAR_FIELD
    scale_bits: int = 16
    range_bits: int = 64

    # model shape
    model: Literal["lr", "nn"] = "lr"
    features: int = Field(4, ge=1)
    hidden: int = Field(4, ge=1)
    classes: int = Field(4, ge=1)
    granularity: Literal["feature", "sample"] = "feature"

    # optimizer
    optimizer: Literal["bgd", "sgd", "msgd"] = "msgd"
    epochs: int = Field(1, ge=1)
    learning_rate: float = 0.1
    batch_size: int = Field(10, ge=1)
    xi: float = Field(0.0, ge=0.0)
    fad_slots: int = Field(4, ge=1)

    # reproducibility and paths
    seed: int = 0
    workdir: Path = Path("maskproof-work")
    transcript_dir: Optional[Path] = None
    database_url: Optional[str] = None
    vault_secret: Optional[str] = None
    n_jobs: int = 1
    attack_budget: int = Field(100_000, ge=1)

    @field_validator("modulus")
    @classmethod
    def _modulus_size(cls, value: int) -> int:
        if value.bit_length() < 250:
            raise ValueError("modulus must have at least 250 bits")
        return value

    @property
    def fixed(self) -> FixedConfig:
        return FixedConfig(scale_bits=self.scale_bits, range_bits=self.range_bits, modulus=self.modulus)

    @property
    def resolved_transcript_dir(self) -> Path:
        return self.transcript_dir or self.workdir / "transcript"

    @property
    def secret(self) -> bytes:
        """Trainer master secret; falls back to the seed for reproducible local runs"""
        source = self.vault_secret if self.vault_secret is not None else f"seed:{self.seed}"
        return hashlib.sha256(b"maskproof.secret|" + source.encode()).digest()

    def public_dict(self) -> dict:
        """Settings without local paths or secrets, as embedded in transcripts"""
        return self.model_dump(mode="json", exclude={"workdir", "transcript_dir", "database_url", "vault_secret"})

    @property
    def resolved_database_url(self) -> str:
        return self.database_url or f"sqlite:///{self.workdir / 'vault.db'}"

    @classmethod
    def from_env(cls, **overrides) -> "Settings":
        """Build settings from MASKPROOF_* environment variables plus explicit overrides"""
        values = {
            "scale_bits": int(_env("SCALE_BITS", 16)),
            "range_bits": int(_env("RANGE_BITS", 64)),
            "model": _env("MODEL", "lr"),
            "features": int(_env("FEATURES", 4)),
            "hidden": int(_env("HIDDEN", 4)),
            "classes": int(_env("CLASSES", 4)),
            "granularity": _env("GRANULARITY", "feature"),
            "optimizer": _env("OPTIMIZER", "msgd"),
            "epochs": int(_env("EPOCHS", 1)),
            "learning_rate": float(_env("LEARNING_RATE", 0.1)),
            "batch_size": int(_env("BATCH_SIZE", 10)),
            "xi": float(_env("XI", 0.0)),
            "fad_slots": int(_env("FAD_SLOTS", 4)),
            "seed": int(_env("SEED", 0)),
            "workdir": Path(_env("WORKDIR", "maskproof-work")),
            "database_url": _env("DATABASE_URL", None),
            "vault_secret": _env("VAULT_SECRET", None),
            "n_jobs": int(_env("N_JOBS", 1)),
            "attack_budget": int(_env("ATTACK_BUDGET", 100_000)),
        }
        modulus = _env("MODULUS", None)
        if modulus:
            values["modulus"] = int(modulus, 0)
        transcript_dir = _env("TRANSCRIPT_DIR", None)
        if transcript_dir:
            values["transcript_dir"] = Path(transcript_dir)
        values.update({k: v for k, v in overrides.items() if v is not None})
        settings = cls(**values)
        logger.debug(f"Resolved settings: {settings.model_dump(mode='json')}")
        return settings
