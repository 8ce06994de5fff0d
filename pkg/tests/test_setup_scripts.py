import os
from pathlib import Path

ACCEPTANCE_SCRIPT = Path(__file__).resolve().parents[1] / "scripts" / "run-desk-acceptance.sh"


def test_acceptance_script_is_executable() -> None:
    assert os.access(ACCEPTANCE_SCRIPT, os.X_OK)
    assert ACCEPTANCE_SCRIPT.read_text().startswith("#!/bin/bash")


def test_acceptance_script_logs_steps() -> None:
    content = ACCEPTANCE_SCRIPT.read_text()
    assert "log_step()" in content and "log_error()" in content
    assert "set -euo pipefail" in content


def test_acceptance_script_uses_shipped_configs() -> None:
    content = ACCEPTANCE_SCRIPT.read_text()
    for name in ("desk.json", "eval-desk.json"):
        assert name in content
        assert (ACCEPTANCE_SCRIPT.parents[1] / "configs" / name).exists()


def test_acceptance_script_checks_reproducibility() -> None:
    content = ACCEPTANCE_SCRIPT.read_text()
    assert "content_checksum" in content
    assert "--from-scratch" in content
