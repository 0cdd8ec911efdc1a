import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spdesurf.model import ParamVector, param_names

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# well-conditioned reference values: tau_d > tau_o and tau_d*eta_d > tau_o*eta_o
SAFE_NATURAL = {
    "tau_d": 1.0,
    "tau_o": 0.4,
    "eta_d": 0.5,
    "eta_o": 0.8,
    "h1": 1.3,
    "h2": 0.7,
    "eta_noise": 0.9,
    "theta_osc": 0.3,
}


def safe_params(spec, rng=None, gamma_scale=0.05):
    values = {}
    for name in param_names(spec):
        key = name[2:] if name.startswith("c_") else name
        if name.startswith("gamma_"):
            values[name] = 0.0 if rng is None else gamma_scale * rng.uniform(-1, 1)
        else:
            values[name] = SAFE_NATURAL[key]
    return ParamVector.from_natural(spec, values)


def random_params(spec, rng, gamma_scale=0.1):
    values = {}
    for name in param_names(spec):
        if name.startswith("gamma_"):
            values[name] = gamma_scale * rng.uniform(-1, 1)
        elif name == "theta_osc":
            values[name] = rng.uniform(0.0, 0.95)
        else:
            values[name] = float(np.exp(rng.uniform(np.log(0.3), np.log(3.0))))
    return ParamVector.from_natural(spec, values)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    def report(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
