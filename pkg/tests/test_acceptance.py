"""Reference-scale acceptance run: one test and one summary line per criterion."""
import pytest

from dden.suite import NAMES, SuiteConfig, run_acceptance

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def results():
    return run_acceptance(SuiteConfig(), log=print)


@pytest.mark.parametrize("number", sorted(NAMES))
def test_criterion(results, number, acceptance_log):
    r = results[number]
    line = r.line()
    acceptance_log.append(line)
    print(line)
    assert r.passed, line
