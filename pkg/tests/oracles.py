"""Independent brute-force oracles used by the test suite.

These deliberately avoid the library's fast paths: circuits are evaluated
through dense 2^n x 2^n matrices built by Kronecker products, and AUC is
computed as the pairwise ranking statistic. Qubit 0 is the most significant
bit of the amplitude index, matching the simulator's convention.
"""

from functools import reduce

import numpy as np

_I2 = np.eye(2, dtype=np.complex128)
_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.complex128)


def dense_rx(angle: float) -> np.ndarray:
    c, s = np.cos(angle / 2.0), np.sin(angle / 2.0)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)


def op_on_wire(n: int, qubit: int, m2: np.ndarray) -> np.ndarray:
    mats = [_I2] * n
    mats[qubit] = m2
    return reduce(np.kron, mats)


def cnot_dense(n: int, control: int, target: int) -> np.ndarray:
    dim = 1 << n
    u = np.zeros((dim, dim), dtype=np.complex128)
    for col in range(dim):
        if (col >> (n - 1 - control)) & 1:
            row = col ^ (1 << (n - 1 - target))
        else:
            row = col
        u[row, col] = 1.0
    return u


def circuit_unitary(spec, x, theta) -> np.ndarray:
    n = spec.n_qubits
    u = np.eye(1 << n, dtype=np.complex128)
    for q in range(n):
        u = op_on_wire(n, q, dense_rx(x[q])) @ u
    for q in range(n):
        u = op_on_wire(n, q, dense_rx(theta[q])) @ u
    for control, target in spec.ring:
        u = cnot_dense(n, control, target) @ u
    return u


def z_signs(n: int) -> np.ndarray:
    idx = np.arange(1 << n)
    bits = (idx[None, :] >> (n - 1 - np.arange(n))[:, None]) & 1
    return 1.0 - 2.0 * bits


def circuit_state(spec, x, theta) -> np.ndarray:
    e0 = np.zeros(1 << spec.n_qubits, dtype=np.complex128)
    e0[0] = 1.0
    return circuit_unitary(spec, x, theta) @ e0


def circuit_outputs(spec, x, theta) -> np.ndarray:
    psi = circuit_state(spec, x, theta)
    return z_signs(spec.n_qubits) @ (np.abs(psi) ** 2)


def circuit_jacobian_dense(spec, x, theta, wrt: str) -> np.ndarray:
    """Analytic Jacobian via derivative-gate insertion on the dense unitary.

    d RX(a)/da = (-i/2) X RX(a), so replacing one rotation's matrix with
    that product and contracting with the plain state gives the exact
    derivative of each expectation value.
    """
    n = spec.n_qubits
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    psi = circuit_state(spec, x, theta)
    signs = z_signs(n)
    jac = np.zeros((n, n))
    for j in range(n):
        u = np.eye(1 << n, dtype=np.complex128)
        for q in range(n):
            gate = dense_rx(x[q])
            if wrt == "input" and q == j:
                gate = (-0.5j) * (_X @ gate)
            u = op_on_wire(n, q, gate) @ u
        for q in range(n):
            gate = dense_rx(theta[q])
            if wrt == "theta" and q == j:
                gate = (-0.5j) * (_X @ gate)
            u = op_on_wire(n, q, gate) @ u
        for control, target in spec.ring:
            u = cnot_dense(n, control, target) @ u
        e0 = np.zeros(1 << n, dtype=np.complex128)
        e0[0] = 1.0
        dpsi = u @ e0
        # d<Z_i> = 2 Re(conj(psi) Z_i dpsi)
        jac[:, j] = 2.0 * (signs @ np.real(np.conj(psi) * dpsi))
    return jac


def vqc_jacobian_fd(f, point: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a vector-valued function of a vector."""
    point = np.asarray(point, dtype=np.float64)
    cols = []
    for j in range(point.size):
        up, down = point.copy(), point.copy()
        up[j] += h
        down[j] -= h
        cols.append((f(up) - f(down)) / (2.0 * h))
    return np.stack(cols, axis=1)


def wilcoxon_auc(scores, labels) -> float:
    """Pairwise ranking AUC: correctly ordered (pos, neg) pairs plus half
    credit for ties, over all pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need both classes")
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0)
    ties = np.count_nonzero(diff == 0)
    return (wins + 0.5 * ties) / (pos.size * neg.size)
