from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, field_validator

class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = "INFO"
    # Traza JSON de eventos de simulación (una línea por evento)
    TRACE: bool = False

    # Resultados
    OUT_DIR: str = "results"
    # Réplicas en paralelo (procesos)
    JOBS: int = Field(1, ge=1)

    # Entorno
    ENV: str = "development"

    @field_validator("ENV")
    def validate_env(cls, v):
        allowed = {"development", "production", "test"}
        if v not in allowed:
            raise ValueError(f"ENV debe ser uno de: {allowed}")
        return v

    @field_validator("LOG_LEVEL")
    def validate_log_level(cls, v):
        v = v.upper()
        allowed = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        if v not in allowed:
            raise ValueError(f"LOG_LEVEL debe ser uno de: {allowed}")
        return v

    model_config = SettingsConfigDict(
        env_prefix="SD6LO_",
        env_file=".env",
        extra="ignore"
    )

settings = Settings()
