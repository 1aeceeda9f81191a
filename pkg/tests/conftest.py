import numpy as np
import pytest

from mjpmix.model import EmbeddedChain, IntensityMatrix, MixtureModel, StateSpace, from_embedded

THREE = StateSpace(3, 0)

P1 = np.array([[0, 0.6, 0.4], [0.5, 0, 0.5], [0.4, 0.6, 0]])
P2 = np.array([[0, 0.8, 0.2], [0.5, 0, 0.5], [0.2, 0.8, 0]])
EXIT1 = np.array([1 / 3, 2 / 5, 1 / 2])
EXIT2 = np.array([1 / 2, 2 / 5, 1 / 3])
PHI = np.array([[0.5, 0.5], [0.25, 0.75], [0.75, 0.25]])

# Reference simulation rates, regime-major, in the layout (q12, q13, q21, q23, q31, q32)
REF_Q = {
    1: [0.2, 0.13333, 0.2, 0.2, 0.2, 0.3],
    2: [0.4, 0.1, 0.2, 0.2, 0.0667, 0.2667],
}
# Reference study, K = 2000, values x 1e-2: (bias, rmse)
REF_K2000 = {
    "phi[1,1]": (-0.1656, 3.9595), "phi[2,1]": (-0.0389, 3.7659), "phi[3,1]": (-0.2127, 3.6592),
    "q[1,2,1]": (-0.0432, 0.6330), "q[1,3,1]": (0.00003, 0.4388), "q[2,1,1]": (0.0005, 0.5373),
    "q[2,3,1]": (-0.0508, 0.5546), "q[3,1,1]": (0.0237, 0.8727), "q[3,2,1]": (-0.0225, 0.6792),
    "q[1,2,2]": (-0.0200, 1.3450), "q[1,3,2]": (0.0060, 0.5309), "q[2,1,2]": (0.0097, 0.4349),
    "q[2,3,2]": (-0.0058, 0.4763), "q[3,1,2]": (0.0189, 0.4026), "q[3,2,2]": (0.0580, 0.6445),
}

VENT = StateSpace(2, 2)
QHAT1 = np.array([[-0.16112, 0.01657, 0.14455, 0.0], [0.12071, -0.13832, 0.01405, 0.00356],
                  [0, 0, 0, 0], [0, 0, 0, 0]])
QHAT2 = np.array([[-0.11594, 0.01441, 0.09102, 0.01051], [0.02309, -0.04550, 0.01094, 0.01147],
                  [0, 0, 0, 0], [0, 0, 0, 0]])
PHAT1 = np.array([[0, 0.10283, 0.89717, 0.00000], [0.87269, 0, 0.10155, 0.02576]])
PHAT2 = np.array([[0, 0.12431, 0.78503, 0.09066], [0.50746, 0, 0.24046, 0.25208]])
FHAT1 = np.array([[0.9971, 0.0029], [0.9717, 0.0283]])
FHAT2 = np.array([[0.8698, 0.1302], [0.6818, 0.3182]])


def reference_truth() -> MixtureModel:
    q1 = from_embedded(EmbeddedChain(THREE, EXIT1, P1))
    q2 = from_embedded(EmbeddedChain(THREE, EXIT2, P2))
    return MixtureModel(THREE, np.full(3, 1 / 3), PHI, (q1, q2))


@pytest.fixture
def truth():
    return reference_truth()


def random_model(rng, M=2, w=3, d=1, rate_scale=1.0, phi_floor=0.1) -> MixtureModel:
    """Random well-conditioned mixture with every off-diagonal rate positive."""
    space = StateSpace(w, d)
    n = w + d
    rates = rng.uniform(0.2, 1.0, size=(M, w, n)) * rate_scale
    rates[:, np.arange(w), np.arange(w)] = 0.0
    phi = rng.dirichlet(np.full(M, 3.0), size=w)
    phi = (phi + phi_floor) / (1 + M * phi_floor)
    pi = rng.dirichlet(np.full(w, 5.0))
    return MixtureModel.from_arrays(space, pi, phi, rates)


def vent_model(phi=(0.4, 0.5)) -> MixtureModel:
    q = (IntensityMatrix(VENT, QHAT1), IntensityMatrix(VENT, QHAT2))
    ph = np.array([[phi[0], 1 - phi[0]], [phi[1], 1 - phi[1]]])
    return MixtureModel(VENT, np.array([367, 380]) / 747, ph, q)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
