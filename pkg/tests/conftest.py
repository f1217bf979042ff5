from __future__ import annotations

import numpy as np
import pytest
import torch

from hvlm.synthcohort import CohortConfig, generate_cohort
from hvlm.voltok import PatchSpec, TokenizerHParams, collect_patches, train_tokenizer

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(CohortConfig(n_studies=60), seed=3)


@pytest.fixture(scope="session")
def toy_patches():
    """Foreground patches from the n=200 toy cohort."""
    studies = generate_cohort(CohortConfig(n_studies=200), seed=0)
    return collect_patches(studies, PatchSpec(), threshold=0.02, max_per_sequence=24,
                           rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def toy_tokenizer(toy_patches):
    return train_tokenizer(toy_patches, PatchSpec(), TokenizerHParams(steps=400, seed=0))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def log(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
