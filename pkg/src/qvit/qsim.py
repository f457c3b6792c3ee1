"""Exact statevector simulation of the rotation-embed / CNOT-ring circuit
family, with analytically exact gradients.

Circuit layout, identical for every layer in the model: each input feature
is embedded as an X-rotation angle on its own wire, a layer of trainable
X-rotations follows, then a ring of CNOTs entangles neighbouring wires, and
finally every wire is read out as a deterministic Pauli-Z expectation value.

Conventions:
  - qubit 0 is the most significant bit of the amplitude index;
  - input angles are used raw, so the read-out is 2*pi periodic per angle;
  - read-out is the exact expectation value, never a sampled shot.

Two gradient paths are provided. The parameter-shift rule is the reference:
X-rotations are generated by X/2, so shifting an angle by +-pi/2 gives the
exact derivative. An adjoint-style sweep through the amplitudes computes the
same values in one backward pass and is what quantum_linear records on the
tape by default. The two must agree to float precision; tests enforce 1e-10.

Gate application is O(2^n) per gate. Dense 2^n x 2^n circuit matrices are
confined to the test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, record


@dataclass(frozen=True)
class VqcSpec:
    """Circuit shape: wire count plus the CNOT ring in application order."""

    n_qubits: int
    ring: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError(f"need at least one qubit, got {self.n_qubits}")
        expected = {1: 0, 2: 2}.get(self.n_qubits, self.n_qubits)
        if len(self.ring) != expected:
            raise ValueError(
                f"ring for {self.n_qubits} qubits must have {expected} entries, "
                f"got {len(self.ring)}"
            )
        for control, target in self.ring:
            if control == target:
                raise ValueError(f"CNOT control and target coincide on wire {control}")
            if not (0 <= control < self.n_qubits and 0 <= target < self.n_qubits):
                raise IndexError(f"CNOT ({control}->{target}) outside {self.n_qubits} wires")

    @classmethod
    def ring_circuit(cls, n_qubits: int) -> "VqcSpec":
        """The standard nearest-neighbour ring: 0->1, 1->2, ..., closing
        back to wire 0. Degenerates to two CNOTs for n=2 and none for n=1."""
        if n_qubits == 1:
            ring = ()
        elif n_qubits == 2:
            ring = ((0, 1), (1, 0))
        else:
            ring = tuple((i, (i + 1) % n_qubits) for i in range(n_qubits))
        return cls(n_qubits=n_qubits, ring=ring)


class StateVector:
    """2^n complex amplitudes of an n-qubit register, unit norm."""

    __slots__ = ("amplitudes",)

    def __init__(self, amplitudes):
        amps = np.asarray(amplitudes, dtype=np.complex128)
        n = int(amps.size).bit_length() - 1
        if amps.ndim != 1 or amps.size != (1 << n) or amps.size < 2:
            raise ValueError(f"amplitude count {amps.size} is not a power of two >= 2")
        self.amplitudes = amps

    @classmethod
    def zero(cls, n_qubits: int) -> "StateVector":
        """|0...0> on n_qubits wires."""
        if n_qubits < 1:
            raise ValueError("need at least one qubit")
        amps = np.zeros(1 << n_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(amps)

    @property
    def n_qubits(self) -> int:
        return int(self.amplitudes.size).bit_length() - 1

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2)))

    def copy(self) -> "StateVector":
        return StateVector(self.amplitudes.copy())


# ---------------------------------------------------------------------------
# batched kernels: states has shape (batch, 2^n)


def _rx_batch(states: np.ndarray, n: int, qubit: int, angle) -> np.ndarray:
    ang = np.asarray(angle, dtype=np.float64)
    c = np.cos(0.5 * ang)
    s = np.sin(0.5 * ang)
    if ang.ndim == 1:
        c = c[:, None, None]
        s = s[:, None, None]
    shaped = states.reshape(states.shape[0], 1 << qubit, 2, -1)
    a0 = shaped[:, :, 0, :]
    a1 = shaped[:, :, 1, :]
    out = np.empty_like(shaped)
    out[:, :, 0, :] = c * a0 - 1j * s * a1
    out[:, :, 1, :] = -1j * s * a0 + c * a1
    return out.reshape(states.shape)


def _cnot_batch(states: np.ndarray, n: int, control: int, target: int) -> np.ndarray:
    shaped = states.reshape((states.shape[0],) + (2,) * n)
    out = shaped.copy()
    i10 = [slice(None)] * (n + 1)
    i11 = [slice(None)] * (n + 1)
    i10[control + 1], i10[target + 1] = 1, 0
    i11[control + 1], i11[target + 1] = 1, 1
    out[tuple(i10)] = shaped[tuple(i11)]
    out[tuple(i11)] = shaped[tuple(i10)]
    return out.reshape(states.shape)


def _flip_batch(states: np.ndarray, n: int, qubit: int) -> np.ndarray:
    """Pauli-X on one wire: swap the qubit's index pairs."""
    shaped = states.reshape(states.shape[0], 1 << qubit, 2, -1)
    return shaped[:, :, ::-1, :].reshape(states.shape)


@lru_cache(maxsize=None)
def _z_signs(n: int) -> np.ndarray:
    """(n, 2^n) table of +-1: sign of basis state b under Z on each wire."""
    idx = np.arange(1 << n)
    bits = (idx[None, :] >> (n - 1 - np.arange(n))[:, None]) & 1
    return (1.0 - 2.0 * bits).astype(np.float64)


def _expect_z_batch(states: np.ndarray, n: int) -> np.ndarray:
    probs = np.abs(states) ** 2
    return probs @ _z_signs(n).T


def _run_batch(spec: VqcSpec, xs: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Final statevectors for a batch of input rows sharing one theta."""
    n = spec.n_qubits
    states = np.zeros((xs.shape[0], 1 << n), dtype=np.complex128)
    states[:, 0] = 1.0
    for q in range(n):
        states = _rx_batch(states, n, q, xs[:, q])
    for q in range(n):
        states = _rx_batch(states, n, q, float(theta[q]))
    for control, target in spec.ring:
        states = _cnot_batch(states, n, control, target)
    return states


def _vjp_adjoint(
    spec: VqcSpec, xs: np.ndarray, theta: np.ndarray, cotangent: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum_i cotangent[.,i] * <Z_i> w.r.t. inputs and theta.

    One backward sweep through the amplitudes: un-apply each gate on both
    the state and the observable-weighted state, and read off each rotation
    derivative as Im(<b|X_q|psi>). Exact, no truncation.
    """
    n = spec.n_qubits
    psi = _run_batch(spec, xs, theta)
    # effective observable is diagonal: per-basis weighted sum of Z signs
    diag = cotangent @ _z_signs(n)
    b = diag * psi
    for control, target in reversed(spec.ring):
        psi = _cnot_batch(psi, n, control, target)
        b = _cnot_batch(b, n, control, target)
    grad_theta = np.zeros(n, dtype=np.float64)
    for q in reversed(range(n)):
        contrib = np.imag(np.sum(np.conj(b) * _flip_batch(psi, n, q), axis=1))
        grad_theta[q] = contrib.sum()
        psi = _rx_batch(psi, n, q, -float(theta[q]))
        b = _rx_batch(b, n, q, -float(theta[q]))
    grad_x = np.zeros_like(xs)
    for q in reversed(range(n)):
        grad_x[:, q] = np.imag(np.sum(np.conj(b) * _flip_batch(psi, n, q), axis=1))
        psi = _rx_batch(psi, n, q, -xs[:, q])
        b = _rx_batch(b, n, q, -xs[:, q])
    return grad_x, grad_theta


def _jacobian_shift(
    spec: VqcSpec, xs: np.ndarray, theta: np.ndarray, wrt: str
) -> np.ndarray:
    """Parameter-shift Jacobian, shape (batch, n_outputs, n_params).

    J[b, i, j] = (f_i(arg_j + pi/2) - f_i(arg_j - pi/2)) / 2 evaluated at
    each batch row, exact for X-rotation generators.
    """
    n = spec.n_qubits
    jac = np.empty((xs.shape[0], n, n), dtype=np.float64)
    for j in range(n):
        if wrt == "theta":
            plus, minus = theta.copy(), theta.copy()
            plus[j] += 0.5 * np.pi
            minus[j] -= 0.5 * np.pi
            f_plus = _expect_z_batch(_run_batch(spec, xs, plus), n)
            f_minus = _expect_z_batch(_run_batch(spec, xs, minus), n)
        elif wrt == "input":
            plus, minus = xs.copy(), xs.copy()
            plus[:, j] += 0.5 * np.pi
            minus[:, j] -= 0.5 * np.pi
            f_plus = _expect_z_batch(_run_batch(spec, plus, theta), n)
            f_minus = _expect_z_batch(_run_batch(spec, minus, theta), n)
        else:
            raise ValueError(f"unknown wrt {wrt!r}")
        jac[:, :, j] = 0.5 * (f_plus - f_minus)
    return jac


# ---------------------------------------------------------------------------
# public single-state operations


def apply_rx(state: StateVector, qubit: int, angle: float) -> StateVector:
    """Rotate one wire about the X axis; returns a new state."""
    n = state.n_qubits
    if not 0 <= qubit < n:
        raise IndexError(f"qubit {qubit} out of range for {n}-qubit state")
    out = _rx_batch(state.amplitudes[None, :], n, qubit, float(angle))
    return StateVector(out[0])


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    """Flip the target wire where the control wire is set; returns a new state."""
    n = state.n_qubits
    if not (0 <= control < n and 0 <= target < n):
        raise IndexError(f"cnot ({control}->{target}) out of range for {n} qubits")
    if control == target:
        raise ValueError("cnot control and target must differ")
    out = _cnot_batch(state.amplitudes[None, :], n, control, target)
    return StateVector(out[0])


def expect_z_all(state: StateVector) -> np.ndarray:
    """Per-wire Pauli-Z expectation values, each in [-1, 1]."""
    return _expect_z_batch(state.amplitudes[None, :], state.n_qubits)[0]


def vqc_forward(spec: VqcSpec, x, theta) -> np.ndarray:
    """Run the circuit on one feature vector and read out all wires."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if x.size != spec.n_qubits or theta.size != spec.n_qubits:
        raise ShapeError(
            f"expected {spec.n_qubits} features and angles, got {x.size} / {theta.size}"
        )
    states = _run_batch(spec, x[None, :], theta)
    return _expect_z_batch(states, spec.n_qubits)[0]


def vqc_grad_theta(spec: VqcSpec, x, theta) -> np.ndarray:
    """Jacobian d<Z_i>/d theta_j via the parameter-shift rule (exact)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    return _jacobian_shift(spec, x, theta, "theta")[0]


def vqc_grad_input(spec: VqcSpec, x, theta) -> np.ndarray:
    """Jacobian d<Z_i>/d x_j via the same shift rule applied to the inputs."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    return _jacobian_shift(spec, x, theta, "input")[0]


def quantum_linear(
    spec: VqcSpec, theta: Tensor, x: Tensor, grad_method: str = "adjoint"
) -> Tensor:
    """Differentiable layer: the circuit applied independently to every
    trailing-axis slice of x.

    Gradients for theta are summed over slices in fixed slice order.
    grad_method selects the backward path: "adjoint" (default) or "shift";
    both are exact and agree to float precision.
    """
    n = spec.n_qubits
    if x.shape[-1] != n:
        raise ShapeError(f"trailing dim {x.shape[-1]} != circuit width {n}")
    if theta.shape != (n,):
        raise ShapeError(f"theta shape {theta.shape} != ({n},)")
    if grad_method not in ("adjoint", "shift"):
        raise ValueError(f"unknown grad_method {grad_method!r}")
    xs = x.data.reshape(-1, n)
    states = _run_batch(spec, xs, theta.data)
    out = Tensor(_expect_z_batch(states, n).reshape(x.shape))

    def rule():
        g = out.grad
        if g is None:
            return
        cotangent = g.reshape(-1, n)
        if grad_method == "adjoint":
            grad_x, grad_theta = _vjp_adjoint(spec, xs, theta.data, cotangent)
        else:
            jac_t = _jacobian_shift(spec, xs, theta.data, "theta")
            jac_x = _jacobian_shift(spec, xs, theta.data, "input")
            grad_theta = np.einsum("bi,bij->j", cotangent, jac_t)
            grad_x = np.einsum("bi,bij->bj", cotangent, jac_x)
        if x.requires_grad:
            x.accumulate_grad(grad_x.reshape(x.shape))
        if theta.requires_grad:
            theta.accumulate_grad(grad_theta)

    return record(out, (theta, x), rule)
