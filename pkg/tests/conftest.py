import pytest
import torch

from longissl.cohort import split_pools
from longissl.synth import PhantomSpec, generate_cohort

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """30 patients at 16^3, three or four visits each, no converters."""
    spec = PhantomSpec(num_patients=30, resolution=(16, 16, 16), scans_per_patient=(3, 4), conversion_probability=0.0, seed=1)
    cohort = generate_cohort(spec, tmp_path_factory.mktemp("small_cohort"))
    return cohort, split_pools(cohort.manifest)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
