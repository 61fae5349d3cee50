# scripts/obsctrl/config.py
"""
Configuración de proceso: variables de entorno (.env) y logging.

Variables reconocidas:
- OBSCTRL_OUTPUT_DIR  raíz de salida cuando el escenario no fija outputs.directory
- OBSCTRL_LOG_LEVEL   nivel de logging (INFO por defecto)
- OBSCTRL_DT          paso del integrador cuando el escenario no lo fija
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from obsctrl.errors import ValidationError

REPO_ROOT = Path(__file__).resolve().parents[2]
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
LOG_LEVELS = ("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG")


@dataclass(frozen=True)
class EnvSettings:
    output_dir: Path
    log_level: str
    dt: Optional[float]


def load_env():
    """Cargar variables de entorno (y .env del repo si existe)"""
    load_dotenv(REPO_ROOT / ".env")

    output_dir = os.environ.get("OBSCTRL_OUTPUT_DIR", "").strip()
    log_level = os.environ.get("OBSCTRL_LOG_LEVEL", "INFO").strip().upper() or "INFO"
    raw_dt = os.environ.get("OBSCTRL_DT", "").strip()

    dt = None
    if raw_dt:
        try:
            dt = float(raw_dt)
        except ValueError:
            raise ValidationError(f"OBSCTRL_DT must be a number, got {raw_dt!r}", field="OBSCTRL_DT")
        if not dt > 0:
            raise ValidationError(f"OBSCTRL_DT must be > 0, got {dt}", field="OBSCTRL_DT")

    if log_level not in LOG_LEVELS:
        raise ValidationError(f"unknown OBSCTRL_LOG_LEVEL {log_level!r}", field="OBSCTRL_LOG_LEVEL")

    return EnvSettings(
        output_dir=Path(output_dir) if output_dir else REPO_ROOT / "outputs",
        log_level=log_level,
        dt=dt,
    )


def setup_logging(level="INFO"):
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)
